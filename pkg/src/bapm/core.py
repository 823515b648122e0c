"""Shared domain types, random-stream derivation and assignment checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RngStream:
    """Address of a reproducible random stream.

    A stream is identified by the master seed plus a path of integer labels;
    numpy's ``SeedSequence`` turns the path into a spawn key, so streams with
    different paths are statistically independent and the same address always
    replays the same draws.
    """

    master_seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))
        if any(p < 0 for p in self.path):
            raise ValueError("stream labels must be non-negative")

    def child(self, label: int) -> RngStream:
        return derive_substream(self, label)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.master_seed), spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))


def derive_substream(parent: RngStream, label: int) -> RngStream:
    return RngStream(parent.master_seed, parent.path + (int(label),))


@dataclass(frozen=True)
class Sample:
    """Covariates of the experimental units, with optional batch labels (1 or 2)."""

    covariates: np.ndarray
    batch: np.ndarray | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValueError("covariates must be an n x k matrix with k >= 1")
        n = x.shape[0]
        if n < 2 or n % 2:
            raise ValueError(f"sample size must be even and at least 2, got {n}")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates contain non-finite entries")
        object.__setattr__(self, "covariates", _frozen(x))
        if self.batch is not None:
            b = np.asarray(self.batch, dtype=np.int64)
            if b.shape != (n,) or not np.all(np.isin(b, (1, 2))):
                raise ValueError("batch labels must be a length-n vector over {1, 2}")
            for label in (1, 2):
                size = int(np.sum(b == label))
                if size == 0 or size % 2:
                    raise ValueError(f"batch {label} must be nonempty with even size, got {size}")
            object.__setattr__(self, "batch", _frozen(b))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def k(self) -> int:
        return self.covariates.shape[1]

    def with_batch(self, batch: np.ndarray) -> Sample:
        return Sample(self.covariates, batch)


@dataclass(frozen=True)
class Pairing:
    """Unordered pairs of unit indices; each pair stored as (smaller, larger)."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        canon = []
        for a, b in self.pairs:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"pair ({a}, {b}) repeats a unit")
            canon.append((min(a, b), max(a, b)))
        canon.sort()
        flat = [u for p in canon for u in p]
        if len(set(flat)) != len(flat):
            raise ValueError("a unit appears in more than one pair")
        object.__setattr__(self, "pairs", tuple(canon))

    @classmethod
    def from_mates(cls, mate: Sequence[int], units: Sequence[int] | None = None) -> Pairing:
        """Build from a mate vector over local indices, optionally relabelled by ``units``."""
        units = np.arange(len(mate)) if units is None else np.asarray(units)
        pairs = [(int(units[i]), int(units[j])) for i, j in enumerate(mate) if i < j]
        return cls(tuple(pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def units(self) -> np.ndarray:
        return np.array(sorted(u for p in self.pairs for u in p), dtype=np.int64)

    def covers(self, n: int) -> bool:
        u = self.units()
        return len(u) == n and bool(np.all(u == np.arange(n)))

    def mate_of(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for a, b in self.pairs:
            out[a] = b
            out[b] = a
        return out

    def union(self, other: Pairing) -> Pairing:
        return Pairing(self.pairs + other.pairs)


@dataclass(frozen=True)
class PairedOrder:
    """Pairs in inference order.  Each pair is listed treated unit first."""

    ordered_pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.ordered_pairs)

    def __iter__(self):
        return iter(self.ordered_pairs)

    def flat(self) -> np.ndarray:
        """Units as the permutation pi(1), ..., pi(2N)."""
        return np.array([u for p in self.ordered_pairs for u in p], dtype=np.int64)

    def as_pairing(self) -> Pairing:
        return Pairing(self.ordered_pairs)


def validate_paired_assignment(pairing: Pairing | Iterable[tuple[int, int]], z: np.ndarray) -> bool:
    """True iff every pair holds exactly one treated unit."""
    z = np.asarray(z)
    pairs = pairing.pairs if isinstance(pairing, Pairing) else tuple(pairing)
    units = [u for p in pairs for u in p]
    if units and (max(units) >= len(z) or min(units) < 0):
        raise ValueError(
            f"pairing refers to unit {max(units)} but the assignment has length {len(z)}"
        )
    return all(int(z[a]) + int(z[b]) == 1 and z[a] in (0, 1) and z[b] in (0, 1) for a, b in pairs)
