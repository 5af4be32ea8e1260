"""Flat parameter vectors, the shared/non-shared partition and seeded randomness.

Every model in the package stores its parameters in one contiguous float64
vector. A :class:`ParamPartition` maps index ranges of that vector to the
shared trunk and to the per-task non-shared blocks.

Randomness comes from :func:`make_rng`, which always builds a numpy
``Generator`` on the PCG64 bit generator. PCG64 streams are stable across
platforms and numpy releases for a given seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericalError, PartitionError

RNG_ALGORITHM = "numpy.PCG64"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_param_vector(values, *, name: str = "vector") -> np.ndarray:
    """Copy ``values`` into a 1-D float64 array, rejecting empty or non-finite input."""
    v = np.array(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"{name} contains non-finite entries")
    return v


@dataclass(frozen=True)
class ParamPartition:
    """Index map splitting a flat vector into one shared block and m non-shared blocks.

    Ranges are half-open ``(start, stop)`` pairs. Construction checks that the
    ranges are non-empty, pairwise disjoint and cover ``[0, size)`` exactly.
    """

    shared: tuple[int, int]
    nonshared: tuple[tuple[int, int], ...]

    def __post_init__(self):
        shared = (int(self.shared[0]), int(self.shared[1]))
        nonshared = tuple((int(a), int(b)) for a, b in self.nonshared)
        object.__setattr__(self, "shared", shared)
        object.__setattr__(self, "nonshared", nonshared)
        if not nonshared:
            raise PartitionError("partition needs at least one non-shared block")
        ranges = sorted([shared, *nonshared])
        for a, b in ranges:
            if a < 0 or b <= a:
                raise PartitionError(f"empty or negative range [{a}, {b})")
        if ranges[0][0] != 0:
            raise PartitionError("ranges must start at index 0")
        for (_, b0), (a1, _) in zip(ranges, ranges[1:]):
            if a1 != b0:
                kind = "overlap" if a1 < b0 else "gap"
                raise PartitionError(f"ranges have a {kind} at index {min(a1, b0)}")

    @classmethod
    def from_sizes(cls, shared_size: int, nonshared_sizes: Sequence[int]) -> "ParamPartition":
        """Shared block first, then the non-shared blocks in task order."""
        ranges = []
        pos = shared_size
        for n in nonshared_sizes:
            ranges.append((pos, pos + n))
            pos += n
        return cls((0, shared_size), tuple(ranges))

    @property
    def task_count(self) -> int:
        return len(self.nonshared)

    @property
    def size(self) -> int:
        return max(b for _, b in (self.shared, *self.nonshared))

    @property
    def shared_size(self) -> int:
        return self.shared[1] - self.shared[0]

    def nonshared_size(self, i: int) -> int:
        a, b = self.nonshared[i]
        return b - a

    def check(self, v: np.ndarray) -> None:
        if v.ndim != 1 or v.shape[0] != self.size:
            raise PartitionError(
                f"vector length {v.shape[0] if v.ndim == 1 else v.shape} "
                f"does not match partition size {self.size}"
            )

    def shared_slice(self) -> slice:
        return slice(*self.shared)

    def nonshared_slice(self, i: int) -> slice:
        if not 0 <= i < self.task_count:
            raise IndexError(f"task index {i} out of range for {self.task_count} tasks")
        return slice(*self.nonshared[i])

    def task_mask(self, i: int) -> np.ndarray:
        """Boolean mask of the entries task ``i`` depends on (shared + its own block)."""
        mask = np.zeros(self.size, dtype=bool)
        mask[self.shared_slice()] = True
        mask[self.nonshared_slice(i)] = True
        return mask

    def to_dict(self) -> dict:
        return {"shared": list(self.shared), "nonshared": [list(r) for r in self.nonshared]}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamPartition":
        return cls(tuple(d["shared"]), tuple(tuple(r) for r in d["nonshared"]))


def slice_shared(v: np.ndarray, p: ParamPartition) -> np.ndarray:
    """View of the shared block of ``v``."""
    p.check(v)
    return v[p.shared_slice()]


def slice_nonshared(v: np.ndarray, p: ParamPartition, i: int) -> np.ndarray:
    p.check(v)
    return v[p.nonshared_slice(i)]


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``y + alpha * x`` as a new array."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = y + alpha * x
    if not np.all(np.isfinite(out)):
        raise NumericalError("axpy produced non-finite entries")
    return out


def l2_norm(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError("l2_norm of non-finite vector")
    return float(np.linalg.norm(x))


def gaussian_direction(rng: np.random.Generator, dim: int) -> np.ndarray:
    """I.i.d. standard normal vector of length ``dim``."""
    if dim <= 0:
        raise ValueError("dim must be positive")
    return rng.standard_normal(dim)
