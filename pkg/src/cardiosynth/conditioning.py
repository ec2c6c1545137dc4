"""Age/sex condition encoding for the generative model.

Ages are discretised into bins (default: seven five-year bins spanning 44-83
years).  A condition is the concatenation of a noisy one-hot age vector and a
one-hot sex vector, in the fixed order (female, male).

All sampling goes through an explicit ``numpy.random.Generator`` so callers
control determinism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_AGE_EDGES = (44.0, 50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 83.0)
DEFAULT_SIGMA = 0.02

FEMALE = "F"
MALE = "M"
_SEX_INDEX = {FEMALE: 0, MALE: 1}


@dataclass(frozen=True)
class AgeBins:
    """Strictly increasing bin edges; bin i covers [edges[i], edges[i+1])."""

    edges: tuple[float, ...] = DEFAULT_AGE_EDGES

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 3:
            raise ValueError("need at least 2 bins (3 edges)")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"bin edges must be strictly increasing, got {edges}")
        object.__setattr__(self, "edges", edges)

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def centre(self, i: int) -> float:
        return 0.5 * (self.edges[i] + self.edges[i + 1])


@dataclass(frozen=True)
class ConditionCode:
    """Noisy one-hot age vector concatenated with a one-hot sex vector."""

    age_vec: np.ndarray
    sex_vec: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.age_vec, self.sex_vec])

    def __len__(self) -> int:
        return len(self.age_vec) + len(self.sex_vec)


def bin_age(age: float, bins: AgeBins) -> int:
    """Index i with edges[i] <= age < edges[i+1]; the top edge maps to the last bin."""
    edges = bins.edges
    if age < edges[0] or age > edges[-1]:
        raise ValueError(
            f"age {age} outside binning range [{edges[0]}, {edges[-1]}]"
        )
    if age == edges[-1]:
        return bins.n_bins - 1
    return int(np.searchsorted(edges, age, side="right")) - 1


def age_vector(
    i: int, n_bins: int, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """One-hot vector for bin i plus i.i.d. Gaussian noise of std ``sigma``."""
    if not 0 <= i < n_bins:
        raise ValueError(f"bin index {i} out of range for {n_bins} bins")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    vec = np.zeros(n_bins, dtype=np.float64)
    vec[i] = 1.0
    if sigma > 0:
        vec += rng.normal(0.0, sigma, size=n_bins)
    return vec


def sex_vector(sex: str) -> np.ndarray:
    """One-hot sex vector in (female, male) order."""
    if sex not in _SEX_INDEX:
        raise ValueError(f"sex must be 'F' or 'M', got {sex!r}")
    vec = np.zeros(2, dtype=np.float64)
    vec[_SEX_INDEX[sex]] = 1.0
    return vec


def encode_condition(
    age: float,
    sex: str,
    bins: AgeBins,
    sigma: float = DEFAULT_SIGMA,
    rng: np.random.Generator | None = None,
) -> ConditionCode:
    """Full clinical condition for (age, sex): noisy age one-hot plus sex one-hot."""
    if sigma > 0 and rng is None:
        raise ValueError("rng required when sigma > 0")
    i = bin_age(age, bins)
    return ConditionCode(
        age_vec=age_vector(i, bins.n_bins, sigma, rng),
        sex_vec=sex_vector(sex),
    )


def sample_target_bin(
    source_bin: int, n_bins: int, rng: np.random.Generator
) -> int:
    """Uniform draw over the bins other than ``source_bin``."""
    if not 0 <= source_bin < n_bins:
        raise ValueError(f"source bin {source_bin} out of range")
    j = int(rng.integers(0, n_bins - 1))
    return j if j < source_bin else j + 1
