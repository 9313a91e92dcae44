"""
Artifacts
Versioned fit files and the CSV/JSON writers shared by the commands
"""

import json
import logging
import pickle
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import InputError

logger = logging.getLogger(__name__)

FORMAT = "saecount-fit"
VERSION = 1
PROTOCOL = 4


def save_fit(
    fit: Any,
    path: Union[str, Path],
    method: str,
    covariates: Sequence[str] = (),
    seed: int = 0,
    settings: Any = None,
) -> Path:
    """Write a fit inside the versioned envelope

    `settings` are the FitSettings the fit was trained with; bootstrap refits
    reuse them.
    """
    envelope = {
        "format": FORMAT,
        "version": VERSION,
        "method": method,
        "covariates": list(covariates),
        "seed": int(seed),
        "settings": settings,
        "fit": fit,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pickle.dumps(envelope, protocol=PROTOCOL))
    logger.debug("fit saved", extra={"event": "save_fit", "path": str(path), "method": method})
    return path


def load_envelope(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"fit artifact not found: {path}")
    try:
        envelope = pickle.loads(path.read_bytes())
    except (pickle.UnpicklingError, EOFError, AttributeError, ImportError) as e:
        raise InputError(f"unreadable fit artifact {path}: {e}") from e
    if not isinstance(envelope, dict) or envelope.get("format") != FORMAT:
        raise InputError(f"{path} is not a saecount fit artifact")
    if envelope.get("version") != VERSION:
        raise InputError(f"{path}: unsupported artifact version {envelope.get('version')}")
    return envelope


def load_fit(path: Union[str, Path]) -> Tuple[str, Any]:
    """(method, fit) from an artifact file"""
    envelope = load_envelope(path)
    return envelope["method"], envelope["fit"]


def write_table(frame: pd.DataFrame, path: Union[str, Path], header: str = "") -> Path:
    """CSV with an optional leading `# header` comment line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        if header:
            handle.write(f"# {header}\n")
        frame.to_csv(handle, index=False)
    return path


def _plain(value):
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
