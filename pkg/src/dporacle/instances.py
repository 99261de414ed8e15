"""Hard problem instances and smoke-test losses.

Three families share one evaluation interface (``oracle_batch``, ``loss``,
``minimizer``, ``suboptimality``):

* ``NonsmoothInstance`` -- max of ``K`` absolute-deviation pieces along
  orthonormal "problem vectors" and a norm penalty on a random half-dimensional
  subspace orthogonal to them.  2-Lipschitz on the unit ball, minimum 0.
* ``SmoothInstance`` -- linear losses with a ridge term, data drawn from a
  scaled Rademacher product distribution; minimizer in closed form.
* ``QuadraticTestLoss`` -- per-datum squared distance to a target, used to
  validate the optimizers.

Piece tags returned by ``oracle_batch`` are ``1..K`` for problem-vector
pieces, ``K + 1`` for the subspace penalty and ``0`` for losses without
pieces.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .core import (BallConstraint, DimensionError, OrthonormalBasis, RngLike,
                   as_generator, as_vector, ifloor, project_ball, sample_subspace)

OFFSET_CONSTANT = 480.0
TIE_TOL = 1e-12


class InfeasibleInstanceError(ValueError):
    pass


class _Problem:
    """Shared evaluation helpers; subclasses provide ``oracle_batch`` and ``loss``."""

    d: int
    n: int
    identical_losses = False

    @property
    def constraint(self) -> BallConstraint:
        return BallConstraint.centered(self.d, self.radius)

    def oracle_batch(self, points, indices):  # pragma: no cover - abstract
        raise NotImplementedError

    def loss(self, w) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def minimizer(self) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def suboptimality(self, w) -> float:
        return self.loss(w) - self.loss(self.minimizer())

    def affine_terms(self):
        """``(a, b)`` with per-datum gradient ``a * w + b[i]``, or None."""
        return None

    def _points(self, points, indices):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != self.d:
            raise DimensionError(f"points must have {self.d} columns")
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.shape[0] != pts.shape[0]:
            raise ValueError("one loss index per query point is required")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise IndexError(f"loss index outside [0, {self.n})")
        return pts, idx


# ---------------------------------------------------------------------------
# non-smooth hard instance
# ---------------------------------------------------------------------------


def problem_vector_count(alpha: float, c: float = OFFSET_CONSTANT) -> int:
    """``K = floor(1 / (c alpha)^2)``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return ifloor(1.0 / (c * alpha) ** 2)


@dataclass(frozen=True, eq=False)
class NonsmoothInstance(_Problem):
    d: int
    alpha: float
    c: float
    X: OrthonormalBasis
    V: OrthonormalBasis
    n: int = 1
    seed: int | None = None

    identical_losses = True
    radius = 1.0
    lipschitz = 2.0
    smoothness = math.inf

    @property
    def K(self) -> int:
        return self.X.count

    @property
    def offset(self) -> float:
        return self.c * self.alpha

    def oracle_batch(self, points, indices=None):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if indices is not None:
            pts, _ = self._points(pts, indices)
        elif pts.shape[1] != self.d:
            raise DimensionError(f"points must have {self.d} columns")
        return _kernels.nonsmooth_eval(pts, self.X.vectors, self.V.vectors,
                                       self.offset, TIE_TOL)

    def losses(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        f = np.abs(pts @ self.X.vectors.T - self.offset).max(axis=1)
        h = 2.0 * np.linalg.norm(pts @ self.V.vectors.T, axis=1)
        return np.maximum(f, h)

    def loss(self, w) -> float:
        return float(self.losses(as_vector(w, self.d)[None, :])[0])

    def minimizer(self) -> np.ndarray:
        return nonsmooth_minimizer(self)

    def suboptimality(self, w) -> float:
        return self.loss(w)


def sample_nonsmooth_instance(d: int, alpha: float, n: int = 1, rng: RngLike = None,
                              c: float = OFFSET_CONSTANT, seed: int | None = None
                              ) -> NonsmoothInstance:
    K = problem_vector_count(alpha, c)
    if K < 1:
        raise InfeasibleInstanceError(
            f"alpha={alpha} with c={c} gives K=0 problem vectors; need c*alpha <= 1")
    if d < 2 * (K + 1):
        raise InfeasibleInstanceError(
            f"d={d} too small for K={K} problem vectors; minimum feasible d is {2 * (K + 1)}")
    gen = as_generator(rng)
    V = sample_subspace(d, d // 2, rng=gen)
    X = sample_subspace(d, K, orthogonal_to=V, rng=gen)
    return NonsmoothInstance(d=d, alpha=float(alpha), c=float(c), X=X, V=V, n=int(n), seed=seed)


def nonsmooth_loss(inst: NonsmoothInstance, w) -> float:
    return inst.loss(w)


def nonsmooth_minimizer(inst: NonsmoothInstance) -> np.ndarray:
    """``c * alpha * sum_k X_k``: zero loss, norm ``c * alpha * sqrt(K)``."""
    return inst.offset * inst.X.vectors.sum(axis=0)


# ---------------------------------------------------------------------------
# smooth hard instance
# ---------------------------------------------------------------------------


def rademacher_product_sample(theta, rng: RngLike = None, size: int | None = None) -> np.ndarray:
    """Coordinates are +1 with probability (1 + theta_j)/2, else -1."""
    theta = as_vector(theta)
    if np.any(np.abs(theta) > 1):
        raise ValueError("theta must lie in [-1, 1]^d")
    gen = as_generator(rng)
    shape = theta.shape if size is None else (size, theta.shape[0])
    u = gen.random(shape)
    return np.where(u < (1.0 + theta) / 2.0, 1.0, -1.0)


@dataclass(frozen=True, eq=False)
class SmoothInstance(_Problem):
    """Losses ``<w, x_i> + lam ||w||^2`` on the ball of radius ``72 B``."""

    d: int
    n: int
    B: float
    L: float
    alpha: float
    data: np.ndarray
    theta: np.ndarray
    lam: float
    seed: int | None = None

    @property
    def N(self) -> int:
        return int(np.count_nonzero(np.any(self.data != 0, axis=1)))

    @property
    def radius(self) -> float:
        return 72.0 * self.B

    @property
    def lipschitz(self) -> float:
        return self.L + 2.0 * self.lam * self.radius

    @property
    def smoothness(self) -> float:
        return 2.0 * self.lam

    @property
    def data_mean(self) -> np.ndarray:
        return self.data.mean(axis=0)

    def oracle_batch(self, points, indices):
        pts, idx = self._points(points, indices)
        x = self.data[idx]
        values = np.einsum("ij,ij->i", pts, x) + self.lam * np.einsum("ij,ij->i", pts, pts)
        grads = x + 2.0 * self.lam * pts
        return values, grads, np.zeros(len(idx), dtype=np.int64)

    def affine_terms(self):
        return 2.0 * self.lam, self.data

    def loss(self, w) -> float:
        w = as_vector(w, self.d)
        return float(self.data_mean @ w + self.lam * (w @ w))

    def minimizer(self) -> np.ndarray:
        # stationarity of <w, mean> + lam ||w||^2 puts the minimizer at -mean / (2 lam)
        return -self.data_mean / (2.0 * self.lam)

    def suboptimality(self, w) -> float:
        return smooth_suboptimality(self, w)[1]


def sample_smooth_instance(d: int, n: int, alpha: float, B: float = 1.0, L: float = 1.0,
                           rng: RngLike = None, theta=None, seed: int | None = None
                           ) -> SmoothInstance:
    N = ifloor(n * alpha / (B * L))
    if N < 1:
        raise InfeasibleInstanceError(f"n*alpha/(B*L) = {n * alpha / (B * L):g} < 1")
    N = min(N, n)
    gen = as_generator(rng)
    if theta is None:
        theta = gen.uniform(-1.0, 1.0, size=d)
    theta = as_vector(theta, d)
    xs = (L / math.sqrt(d)) * rademacher_product_sample(theta, gen, size=N)
    data = np.zeros((n, d))
    data[gen.permutation(n)[:N]] = xs
    lam = alpha / (144.0 * B * B)
    return SmoothInstance(d=d, n=n, B=float(B), L=float(L), alpha=float(alpha),
                          data=data, theta=theta, lam=lam, seed=seed)


def smooth_suboptimality(inst: SmoothInstance, w) -> tuple[float, float]:
    """Return (direct loss difference, ``lam * ||w - w*||^2``)."""
    w = as_vector(w, inst.d)
    ws = inst.minimizer()
    direct = inst.loss(w) - inst.loss(ws)
    diff = w - ws
    return direct, float(inst.lam * (diff @ diff))


# ---------------------------------------------------------------------------
# quadratic smoke-test losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadraticTestLoss(_Problem):
    """Losses ``(curvature / 2) ||w - y_i||^2`` on the centered ball of radius ``B``."""

    targets: np.ndarray
    curvature: float
    B: float = 1.0
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def d(self) -> int:
        return self.targets.shape[1]

    @property
    def radius(self) -> float:
        return self.B

    @property
    def lipschitz(self) -> float:
        return self.curvature * (self.B + float(np.linalg.norm(self.targets, axis=1).max()))

    @property
    def smoothness(self) -> float:
        return self.curvature

    @property
    def target_mean(self) -> np.ndarray:
        return self.targets.mean(axis=0)

    def oracle_batch(self, points, indices):
        pts, idx = self._points(points, indices)
        diff = pts - self.targets[idx]
        values = 0.5 * self.curvature * np.einsum("ij,ij->i", diff, diff)
        return values, self.curvature * diff, np.zeros(len(idx), dtype=np.int64)

    def affine_terms(self):
        return self.curvature, -self.curvature * self.targets

    def loss(self, w) -> float:
        w = as_vector(w, self.d)
        diff = self.targets - w
        return float(0.5 * self.curvature * np.mean(np.einsum("ij,ij->i", diff, diff)))

    def minimizer(self) -> np.ndarray:
        return project_ball(self.target_mean, self.constraint)

    def suboptimality(self, w) -> float:
        # exact for the mean objective: (c/2)(||w - ybar||^2 - ||w* - ybar||^2)
        w = as_vector(w, self.d)
        ybar = self.target_mean
        a = w - ybar
        b = self.minimizer() - ybar
        return float(0.5 * self.curvature * (a @ a - b @ b))


def sample_quadratic_instance(d: int, n: int, B: float = 1.0, curvature: float = 1.0,
                              center_norm: float = 0.5, spread: float = 0.25,
                              rng: RngLike = None, seed: int | None = None
                              ) -> QuadraticTestLoss:
    """Targets scattered around a random point of norm ``center_norm``, clipped to the ball."""
    gen = as_generator(rng)
    mu = gen.standard_normal(d)
    mu *= center_norm * B / np.linalg.norm(mu)
    y = mu + spread * B * gen.standard_normal((n, d)) / math.sqrt(d)
    norms = np.linalg.norm(y, axis=1)
    over = norms > B
    y[over] *= (B / norms[over])[:, None]
    return QuadraticTestLoss(targets=y, curvature=float(curvature), B=float(B), seed=seed)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"DPORINS1"


def _layout(inst):
    if isinstance(inst, NonsmoothInstance):
        header = {"type": "nonsmooth", "d": inst.d, "n": inst.n, "alpha": inst.alpha,
                  "c": inst.c}
        arrays = {"X": inst.X.vectors, "V": inst.V.vectors}
    elif isinstance(inst, SmoothInstance):
        header = {"type": "smooth", "d": inst.d, "n": inst.n, "alpha": inst.alpha,
                  "B": inst.B, "L": inst.L, "lambda": inst.lam}
        arrays = {"data": inst.data, "theta": inst.theta}
    elif isinstance(inst, QuadraticTestLoss):
        header = {"type": "quadratic", "d": inst.d, "n": inst.n, "B": inst.B,
                  "curvature": inst.curvature}
        arrays = {"targets": inst.targets}
    else:
        raise TypeError(f"cannot serialize {type(inst).__name__}")
    header["seed"] = inst.seed
    return header, arrays


def save_instance(inst, path) -> Path:
    """Write ``magic | u64 header length | JSON header | float64 LE arrays, row-major``.

    Floats in the header are stored via ``float.hex`` so the round trip is
    bit-exact.
    """
    header, arrays = _layout(inst)
    header = {k: (v.hex() if isinstance(v, float) else v) for k, v in header.items()}
    header["arrays"] = [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))
    return path


def load_instance(path):
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not an instance file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    pos = 16 + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(entry["shape"])
        arrays[entry["name"]] = a.astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after arrays")

    def f(key):
        return float.fromhex(header[key])

    kind = header["type"]
    if kind == "nonsmooth":
        return NonsmoothInstance(d=header["d"], alpha=f("alpha"), c=f("c"),
                                 X=OrthonormalBasis(arrays["X"], check=False),
                                 V=OrthonormalBasis(arrays["V"], check=False),
                                 n=header["n"], seed=header["seed"])
    if kind == "smooth":
        return SmoothInstance(d=header["d"], n=header["n"], B=f("B"), L=f("L"),
                              alpha=f("alpha"), data=arrays["data"], theta=arrays["theta"],
                              lam=f("lambda"), seed=header["seed"])
    if kind == "quadratic":
        return QuadraticTestLoss(targets=arrays["targets"], curvature=f("curvature"),
                                 B=f("B"), seed=header["seed"])
    raise ValueError(f"unknown instance type {kind!r}")
