"""
Seeded random streams, distribution samplers and the stratified sampling design
"""

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from .data import Population, Sample
from .errors import ValidationError

# Area sample sizes of the model-based study: 50 areas, min 8, max 29,
# median 18, total 921.
PUBLISHED_SAMPLE_SIZES: Tuple[int, ...] = (
    8, 29, 9, 26, 10, 26, 11, 25, 12, 25,
    12, 24, 13, 24, 13, 23, 14, 23, 14, 22,
    15, 22, 15, 22, 16, 22, 16, 21, 16, 21,
    17, 21, 17, 21, 17, 21, 17, 20, 17, 20,
    18, 20, 18, 19, 18, 19, 18, 18, 18, 18,
)


@dataclass(frozen=True)
class RngHandle:
    """Reconstructible random stream identified by (seed, stream path)

    Child streams are derived with `child(k, ...)`; the same (seed, path)
    always reproduces the same draws regardless of which process builds it.
    A handle names a stream and holds no state: every `generator` access, and
    every sampler call given the handle itself, starts the stream over. Take
    one `generator` for a sequence of draws, or a distinct child per draw.
    """

    seed: int
    stream: Tuple[int, ...] = ()

    def child(self, *keys: int) -> "RngHandle":
        return RngHandle(self.seed, self.stream + tuple(int(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream"""
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(sequence))


def make_rng(seed: int, stream: int = 0) -> RngHandle:
    return RngHandle(int(seed), (int(stream),))


def as_generator(rng) -> np.random.Generator:
    """Generators pass through; a handle yields a fresh generator at its stream start"""
    if isinstance(rng, RngHandle):
        return rng.generator
    return rng


def sample_normal(rng, mean: float, sd: float, size=None):
    """Draw from N(mean, sd^2)

    Args:
        rng: RngHandle or numpy Generator
        mean: Location
        sd: Standard deviation (>= 0)
        size: Optional output shape

    Returns:
        Scalar or array of draws
    """
    if not sd >= 0:
        raise ValidationError(f"standard deviation must be >= 0, got {sd}")
    draws = as_generator(rng).normal(mean, sd, size=size)
    return float(draws) if size is None else draws


def sample_uniform(rng, lo: float, hi: float, size=None):
    """Draw from U[lo, hi)"""
    if lo > hi:
        raise ValidationError(f"lower bound {lo} exceeds upper bound {hi}")
    if lo == hi:
        return float(lo) if size is None else np.full(size, float(lo))
    draws = as_generator(rng).uniform(lo, hi, size=size)
    return float(draws) if size is None else draws


def _check_mean(mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(~np.isfinite(mu)) or np.any(mu < 0):
        raise ValidationError("mean must be finite and >= 0")
    return mu


def sample_poisson(rng, mu, size=None):
    """Draw Poisson counts with mean mu"""
    mu = _check_mean(mu)
    draws = as_generator(rng).poisson(mu, size=size)
    return int(draws) if np.ndim(draws) == 0 else draws.astype(np.int64)


def sample_negbinom(rng, mu, scale: float, size=None):
    """Draw negative binomial counts as a gamma-Poisson mixture

    Mean mu and variance mu + mu^2 / scale; smaller scale means stronger
    overdispersion.
    """
    mu = _check_mean(mu)
    if not (scale > 0 and math.isfinite(scale)):
        raise ValidationError(f"scale must be positive and finite, got {scale}")
    gen = as_generator(rng)
    rate = gen.gamma(shape=scale, scale=mu / scale, size=size)
    draws = gen.poisson(rate)
    return int(draws) if np.ndim(draws) == 0 else draws.astype(np.int64)


def stratified_srswor(rng, population: Population, n_i: Mapping[int, int]) -> Sample:
    """Simple random sampling without replacement inside each domain

    Args:
        rng: RngHandle or numpy Generator
        population: Census with outcome present
        n_i: Sample size per domain; missing or zero means out-of-sample

    Returns:
        Sample whose rows are ordered by domain, then census position
    """
    if not population.has_outcome:
        raise ValidationError("cannot sample a population without outcomes")
    gen = as_generator(rng)
    sizes = population.domain_sizes()
    unknown = [d for d, k in n_i.items() if k and int(d) not in sizes]
    if unknown:
        raise ValidationError(f"sampling plan names domains absent from the census: {unknown}")

    chosen = []
    for domain in sorted(sizes):
        k = int(n_i.get(domain, 0))
        if k < 0 or k > sizes[domain]:
            raise ValidationError(
                f"domain {domain}: sample size {k} outside [0, {sizes[domain]}]"
            )
        if k == 0:
            continue
        positions = np.flatnonzero(population.domains == domain)
        picked = gen.choice(positions, size=k, replace=False)
        chosen.append(np.sort(picked))

    index = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    return Sample(
        domains=population.domains[index],
        X=population.X[index],
        y=population.y[index],
        covariates=population.covariates,
        population_index=index,
    )


def srswr(rng, pool: Sequence[float], m: int) -> np.ndarray:
    """Draw m values uniformly with replacement from pool"""
    pool = np.asarray(pool, dtype=np.float64)
    if m < 0:
        raise ValidationError("draw count must be >= 0")
    if m == 0:
        return np.zeros(0)
    if pool.size == 0:
        raise ValidationError("cannot draw from an empty pool")
    return pool[as_generator(rng).integers(0, pool.size, size=m)]


def published_plan(domain_ids: Sequence[int], domain_sizes: Mapping[int, int] = None) -> Dict[int, int]:
    """Assign the published area sample sizes to domains in order

    The vector is recycled when there are more than 50 domains and each size is
    capped at the domain's census size.
    """
    plan = {}
    for k, domain in enumerate(domain_ids):
        size = PUBLISHED_SAMPLE_SIZES[k % len(PUBLISHED_SAMPLE_SIZES)]
        if domain_sizes is not None:
            size = min(size, int(domain_sizes[domain]))
        plan[int(domain)] = size
    return plan
