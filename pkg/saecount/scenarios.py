"""
Scenario Loader
Discovers simulation scenario files and loads them on demand
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .errors import ConfigError, InputError
from .simlab import Scenario

logger = logging.getLogger(__name__)

DEFAULT_DIRECTORY = Path(__file__).resolve().parent.parent / "scenarios"


class ScenarioLoader:
    """Loads scenario YAML files from a directory"""

    def __init__(self, scenarios_directory: Union[str, Path] = DEFAULT_DIRECTORY):
        """Initialize scenario loader

        Args:
            scenarios_directory: Directory holding one `<name>.yaml` per scenario
        """
        self.scenarios_directory = Path(scenarios_directory)

        # name -> {name, description, path}; filled by discover_scenarios
        self.scenario_metadata: Dict[str, Dict[str, str]] = {}

        # name -> Scenario; filled on first load
        self.scenarios: Dict[str, Scenario] = {}

        if not self.scenarios_directory.exists():
            raise InputError(f"scenarios directory not found: {scenarios_directory}")

    def discover_scenarios(self) -> Dict[str, Dict[str, str]]:
        """Read name and description of every scenario file

        Returns:
            Dictionary of scenario name -> {name, description, path}
        """
        for scenario_file in sorted(self.scenarios_directory.glob("*.yaml")):
            try:
                metadata = self._load_metadata(scenario_file)
            except (OSError, yaml.YAMLError, ConfigError) as e:
                logger.warning(
                    "scenario file skipped",
                    extra={"event": "scenario_skipped", "path": str(scenario_file), "error": str(e)},
                )
                continue
            self.scenario_metadata[metadata["name"]] = metadata
        logger.debug("scenarios discovered", extra={"event": "scenarios", "count": len(self.scenario_metadata)})
        return self.scenario_metadata

    def _load_metadata(self, scenario_file: Path) -> Dict[str, str]:
        document = self._read(scenario_file)
        return {
            "name": str(document.get("name", scenario_file.stem)).lower(),
            "description": document.get("description", ""),
            "path": str(scenario_file),
        }

    @staticmethod
    def _read(scenario_file: Path) -> Dict[str, Any]:
        document = yaml.safe_load(scenario_file.read_text(encoding="utf-8")) or {}
        if not isinstance(document, dict):
            raise ConfigError(f"{scenario_file.name}: scenario file must hold a mapping")
        return document

    def load_scenario(self, name: str, **overrides) -> Scenario:
        """Build the full Scenario for a discovered name

        Args:
            name: Scenario name (case-insensitive)
            overrides: Field overrides applied after the file (e.g. M, B)

        Returns:
            Scenario
        """
        if not self.scenario_metadata:
            self.discover_scenarios()
        key = name.strip().lower()
        if key not in self.scenario_metadata:
            raise ConfigError(f"unknown scenario {name!r}; choose from {self.list_scenarios()}")

        if key not in self.scenarios:
            document = self._read(Path(self.scenario_metadata[key]["path"]))
            document["name"] = key
            unknown = set(document) - set(Scenario.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"scenario {key}: unknown key(s) {sorted(unknown)}")
            self.scenarios[key] = Scenario(**document)

        overrides = {k: v for k, v in overrides.items() if v is not None}
        return self.scenarios[key].with_overrides(**overrides) if overrides else self.scenarios[key]

    def list_scenarios(self) -> List[str]:
        return sorted(self.scenario_metadata)

    def get_scenario_description(self, name: str) -> Optional[str]:
        metadata = self.scenario_metadata.get(name.strip().lower())
        return metadata["description"] if metadata else None


def get_scenario(name: str, directory: Union[str, Path, None] = None, **overrides) -> Scenario:
    """Scenario from its YAML file, falling back to the built-in definitions"""
    directory = Path(directory) if directory else DEFAULT_DIRECTORY
    if directory.exists():
        loader = ScenarioLoader(directory)
        loader.discover_scenarios()
        if name.strip().lower() in loader.scenario_metadata:
            return loader.load_scenario(name, **overrides)
    scenario = Scenario.builtin(name)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return scenario.with_overrides(**overrides) if overrides else scenario
