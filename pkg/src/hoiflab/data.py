"""Observation containers with named splits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class SplitData:
    """One split of the sample: treatment A, outcome Y, covariates X (n x d).

    Simulated datasets may carry the generating conditional means p(X), b(X)
    so oracle-nuisance paths avoid re-evaluating long truth series.
    """

    A: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    p_values: np.ndarray = None
    b_values: np.ndarray = None

    @property
    def n(self) -> int:
        return len(self.A)


@dataclass(frozen=True)
class Dataset:
    """Full sample plus a mapping of split names to index arrays."""

    A: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    splits: dict = field(default_factory=dict)
    p_values: np.ndarray = None
    b_values: np.ndarray = None

    @property
    def n(self) -> int:
        return len(self.A)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def split(self, name: str) -> SplitData:
        if name not in self.splits:
            raise ConfigError(f"unknown split {name!r}; have {sorted(self.splits)}")
        idx = self.splits[name]
        return SplitData(
            A=self.A[idx],
            Y=self.Y[idx],
            X=self.X[idx],
            p_values=None if self.p_values is None else self.p_values[idx],
            b_values=None if self.b_values is None else self.b_values[idx],
        )


def assign_splits(n: int, fractions: dict, rng: np.random.Generator) -> dict:
    """Shuffle record order, then cut contiguous blocks by the given fractions."""
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {total}, not 1")
    if any(f <= 0 for f in fractions.values()):
        raise ConfigError("split fractions must be positive")
    order = rng.permutation(n)
    splits = {}
    start = 0
    names = list(fractions)
    for pos, name in enumerate(names):
        stop = n if pos == len(names) - 1 else start + int(round(fractions[name] * n))
        if stop <= start:
            raise ConfigError(f"split {name!r} is empty at n={n}")
        splits[name] = np.sort(order[start:stop])
        start = stop
    return splits
