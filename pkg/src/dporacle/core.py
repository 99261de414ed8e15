"""Vectors, ball constraints, orthonormal bases, projections and seeded RNG streams.

Throughout the package a "radius" ``B`` always means the radius of the
constraint ball, never its diameter.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class DimensionError(ValueError):
    """Raised when vector/basis dimensions do not line up."""


def as_vector(x, d: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a finite 1-d float64 array, optionally of length ``d``."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise DimensionError(f"expected length {d}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def _key(label: int | str) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode())
    if label < 0:
        raise ValueError("stream labels must be non-negative")
    return int(label) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class SplittableRng:
    """A (seed, stream path) pair that names an independent Philox stream.

    ``generator()`` always returns a fresh generator positioned at the start
    of the stream, so the same pair reproduces the same draws.  ``child``
    derives a sub-stream; labels may be integers or strings.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def stream(self) -> int:
        return self.path[-1] if self.path else 0

    def child(self, *labels: int | str) -> "SplittableRng":
        return SplittableRng(self.seed, self.path + tuple(_key(l) for l in labels))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


RngLike = Union[np.random.Generator, SplittableRng, int, None]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, SplittableRng):
        return rng.generator()
    return SplittableRng(0 if rng is None else int(rng)).generator()


# ---------------------------------------------------------------------------
# constraint sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BallConstraint:
    """Euclidean ball ``{w : ||w - center|| <= radius}``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_vector(self.center))
        if not self.radius >= 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")

    @classmethod
    def centered(cls, d: int, radius: float) -> "BallConstraint":
        return cls(np.zeros(d), float(radius))

    @property
    def d(self) -> int:
        return self.center.shape[0]

    def contains(self, w, tol: float = 1e-12) -> bool:
        return float(np.linalg.norm(np.asarray(w) - self.center)) <= self.radius + tol

    def project(self, w) -> np.ndarray:
        return project_ball(w, self)


@dataclass(frozen=True)
class BallIntersection:
    """Intersection of several balls; projection by Dykstra's algorithm."""

    balls: tuple[BallConstraint, ...]
    tol: float = 1e-13
    max_iter: int = 10_000

    @property
    def d(self) -> int:
        return self.balls[0].d

    def contains(self, w, tol: float = 1e-10) -> bool:
        return all(b.contains(w, tol) for b in self.balls)

    def project(self, w) -> np.ndarray:
        x = as_vector(w, self.d).copy()
        if self.contains(x, 0.0):
            return x
        incr = [np.zeros_like(x) for _ in self.balls]
        for _ in range(self.max_iter):
            prev = x
            for j, ball in enumerate(self.balls):
                y = project_ball(x + incr[j], ball)
                incr[j] = x + incr[j] - y
                x = y
            if np.linalg.norm(x - prev) <= self.tol:
                break
        return x


# ---------------------------------------------------------------------------
# orthonormal bases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OrthonormalBasis:
    """Rows of ``vectors`` form an orthonormal set in R^d (Gram within 1e-10 of I)."""

    vectors: np.ndarray
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError("basis must be a 2-d array of row vectors")
        object.__setattr__(self, "vectors", v)
        if self.check and v.shape[0]:
            gram = v @ v.T
            if np.max(np.abs(gram - np.eye(v.shape[0]))) > 1e-10:
                raise ValueError("vectors are not orthonormal")

    @classmethod
    def empty(cls, d: int) -> "OrthonormalBasis":
        return cls(np.zeros((0, d)))

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i) -> np.ndarray:
        return self.vectors[i]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def project_ball(w, c: BallConstraint) -> np.ndarray:
    """Euclidean projection onto a ball; interior points are returned unchanged."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != c.center.shape:
        raise DimensionError(f"point has shape {w.shape}, ball lives in R^{c.d}")
    diff = w - c.center
    nrm = float(np.sqrt(diff @ diff))
    if nrm <= c.radius:
        return w.copy()
    return c.center + diff * (c.radius / nrm)


def project_span(w, basis: OrthonormalBasis) -> np.ndarray:
    """Orthogonal projection onto the span of an orthonormal basis."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (basis.d,):
        raise DimensionError(f"point has shape {w.shape}, basis lives in R^{basis.d}")
    if basis.count == 0:
        return np.zeros_like(w)
    return basis.vectors.T @ (basis.vectors @ w)


def sample_subspace(d: int, k: int, orthogonal_to: OrthonormalBasis | None = None,
                    rng: RngLike = None) -> OrthonormalBasis:
    """Draw ``k`` Haar-distributed orthonormal vectors, optionally orthogonal to a basis.

    Gaussian directions are projected off ``orthogonal_to`` (twice, for
    round-off), then QR-orthonormalized with the sign convention that makes
    the result uniformly distributed.
    """
    if d < 1 or k < 1:
        raise ValueError("d and k must be positive")
    used = 0 if orthogonal_to is None else orthogonal_to.count
    if orthogonal_to is not None and orthogonal_to.d != d:
        raise DimensionError("constraint basis has the wrong dimension")
    if k + used > d:
        raise ValueError(f"cannot fit {k} vectors orthogonal to {used} in R^{d}")
    gen = as_generator(rng)
    g = gen.standard_normal((d, k))
    if used:
        B = orthogonal_to.vectors
        for _ in range(2):
            g -= B.T @ (B @ g)
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if used:
        q -= B.T @ (B @ q)
    return OrthonormalBasis(np.ascontiguousarray(q.T), check=False)


def gaussian_vector(d: int, std: float, rng: RngLike = None) -> np.ndarray:
    """Isotropic centered Gaussian vector with per-coordinate standard deviation ``std``."""
    if std < 0:
        raise ValueError("std must be non-negative")
    gen = as_generator(rng)
    if std == 0:
        return np.zeros(d)
    return std * gen.standard_normal(d)



# Formula-derived counts are real numbers that should land on integers
# (e.g. 1/0.1**2); a relative band keeps round-off from adding a step.
_ROUND_BAND = 1e-9


def iceil(x: float) -> int:
    """Ceiling that ignores relative round-off below 1e-9."""
    if x == float("inf"):
        raise OverflowError("cannot ceil infinity")
    return int(math.ceil(x - _ROUND_BAND * abs(x)))


def ifloor(x: float) -> int:
    """Floor that ignores relative round-off below 1e-9."""
    return int(math.floor(x + _ROUND_BAND * abs(x)))
