"""Wrappers between private ERM and private population-risk solvers.

A *solver* here is any callable ``solver(problem, constraint, rng) -> point``.

* ``exponential_select`` -- private argmin over noisy scores
* ``boost_erm``          -- repeat a solver and privately pick the best run
* ``localized_erm``      -- boosted runs on shrinking balls around a center
* ``sco_to_erm``         -- run a population solver on a bootstrap resample
* ``rescale_problem``    -- map a (B, L) problem to the unit problem and back
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (BallConstraint, BallIntersection, SplittableRng, RngLike, as_generator,
                   iceil)
from .oracles import OracleHandle
from .privacy import ApproxDP, PrivacyError, amplify_with_replacement, compose

log = logging.getLogger(__name__)


def _gen(rng: RngLike, *labels) -> np.random.Generator:
    if isinstance(rng, SplittableRng):
        return rng.child(*labels).generator()
    return as_generator(rng)


def _sub(rng: RngLike, *labels):
    return rng.child(*labels) if isinstance(rng, SplittableRng) else as_generator(rng)


def exponential_select(candidates, scores, eps: float, sensitivity: float,
                       rng: RngLike = None) -> int:
    """Pick index ``j`` with probability proportional to ``exp(-eps score_j / (2 sensitivity))``.

    ``eps = inf`` returns the (first) argmin deterministically.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(candidates) == 0 or scores.size == 0:
        raise ValueError("no candidates to select from")
    if len(candidates) != scores.size:
        raise ValueError("one score per candidate is required")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not sensitivity > 0 or eps < 0:
        raise ValueError("need sensitivity > 0 and eps >= 0")
    if math.isinf(eps):
        return int(np.argmin(scores))
    logits = -eps * scores / (2.0 * sensitivity)
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return int(as_generator(rng).choice(scores.size, p=p))


@dataclass
class CandidateSet:
    points: list
    scores: np.ndarray
    batch: int


@dataclass
class SelectionResult:
    point: np.ndarray
    index: int
    candidates: CandidateSet
    privacy: ApproxDP
    sensitivity: float
    calls: int = 0
    info: dict = field(default_factory=dict)


def score_batch_size(n: int, alpha: float) -> int:
    """``ceil(1/alpha^2)`` losses, clamped to ``n`` with a warning."""
    want = iceil(1.0 / alpha ** 2)
    if want > n:
        log.warning("score minibatch 1/alpha^2 = %d exceeds n = %d; clamping to n", want, n)
        return n
    return want


def _score(problem, points, batch: int, handle: OracleHandle, gen) -> np.ndarray:
    out = np.empty(len(points))
    for j, w in enumerate(points):
        idx = gen.choice(problem.n, size=batch, replace=False)
        reply = handle.round_identity(np.broadcast_to(w, (batch, w.shape[0])), idx)
        out[j] = float(reply.values.mean())
    return out


def _select(problem, points, eps, delta_each, alpha, loss_range, rng, runs, handle):
    batch = score_batch_size(problem.n, alpha)
    sens = loss_range / batch
    scores = _score(problem, points, batch, handle, _gen(rng, "score"))
    j = exponential_select(points, scores, eps, sens, _gen(rng, "select"))
    privacy = ApproxDP((runs + 1) * eps, min(1.0, runs * delta_each))
    return SelectionResult(np.asarray(points[j]), j, CandidateSet(list(points), scores, batch),
                           privacy, sens, handle.stats.calls_total)


def _default_range(problem) -> float:
    return problem.radius * problem.lipschitz


def boost_erm(solver, problem, eps: float, delta: float, alpha: float, rng: RngLike = None,
              K: int | None = None, constraint=None, loss_range: float | None = None
              ) -> SelectionResult:
    """Run ``solver`` ``K = ceil(log n)`` times and privately select one output.

    Each candidate is scored by its mean loss on ``min(n, ceil(1/alpha^2))``
    losses drawn without replacement; score sensitivity is
    ``loss_range / batch`` with ``loss_range = B L`` by default.  The ledger
    reports ``((K+1) eps, K delta)``.
    """
    if K is None:
        K = max(1, iceil(math.log(problem.n)))
    if K < 1:
        raise ValueError("K must be >= 1")
    constraint = constraint or problem.constraint
    points = [np.asarray(solver(problem, constraint, _sub(rng, "run", k)), dtype=np.float64)
              for k in range(K)]
    handle = OracleHandle(problem)
    rng_sel = rng.child("select-phase") if isinstance(rng, SplittableRng) else rng
    res = _select(problem, points, eps, delta, alpha,
                  _default_range(problem) if loss_range is None else loss_range,
                  rng_sel, K, handle)
    res.info["K"] = K
    return res


def localized_radii(n: int, B: float) -> list[float]:
    """``2^-r B`` for ``r = 0..R`` with ``R = ceil(log2(n)/2)``."""
    R = max(1, iceil(0.5 * math.log2(n)))
    return [B / 2 ** r for r in range(R + 1)]


def localized_erm(solver, problem, center, eps: float, delta: float, alpha: float,
                  rng: RngLike = None, B: float | None = None, K: int | None = None,
                  loss_range: float | None = None) -> SelectionResult:
    """Boosted runs on ``W cap B(center, 2^-r B)`` for each radius, then private selection."""
    center = np.asarray(center, dtype=np.float64)
    base = problem.constraint
    if not base.contains(center):
        raise ValueError("center must lie inside the constraint set")
    B = base.radius if B is None else B
    lr = _default_range(problem) if loss_range is None else loss_range
    radii = localized_radii(problem.n, B)
    boosted = []
    for r, rad in enumerate(radii):
        region = BallIntersection((base, BallConstraint(center, rad)))
        boosted.append(boost_erm(solver, problem, eps, delta, alpha, _sub(rng, "radius", r),
                                 K=K, constraint=region, loss_range=lr))
    handle = OracleHandle(problem)
    res = _select(problem, [b.point for b in boosted], eps, 0.0, alpha, lr,
                  rng.child("final") if isinstance(rng, SplittableRng) else rng, 0, handle)
    res.privacy = compose([b.privacy for b in boosted] + [res.privacy])
    res.calls += sum(b.calls for b in boosted)
    res.info.update(radii=radii, boosted=boosted)
    return res


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


class ResampledProblem:
    """View of ``base`` whose ``i``-th loss is ``base``'s loss ``indices[i]``."""

    def __init__(self, base, indices):
        self.base = base
        self.indices = np.asarray(indices, dtype=np.int64)
        self.n = self.indices.shape[0]
        self.d = base.d
        self.identical_losses = base.identical_losses

    def __getattr__(self, name):
        # radius, lipschitz, smoothness, constraint, minimizer of the population
        return getattr(self.base, name)

    def oracle_batch(self, points, indices):
        return self.base.oracle_batch(points, self.indices[np.asarray(indices, dtype=np.int64)])

    def affine_terms(self):
        t = self.base.affine_terms()
        return None if t is None else (t[0], t[1][self.indices])

    def loss(self, w) -> float:
        w = np.asarray(w, dtype=np.float64)
        v, _, _ = self.oracle_batch(np.broadcast_to(w, (self.n, self.d)), np.arange(self.n))
        return float(v.mean())

    def suboptimality(self, w) -> float:
        return self.base.suboptimality(w)


@dataclass
class ResampleResult:
    point: np.ndarray
    indices: np.ndarray
    privacy: ApproxDP


def sco_to_erm(solver, problem, eps: float, delta: float, rng: RngLike = None
               ) -> ResampleResult:
    """Run an ``(eps, delta)`` population solver on ``n`` losses drawn with replacement."""
    if eps > 1.0 / 6.0:
        raise PrivacyError(f"solver eps must be <= 1/6, got {eps}")
    idx = _gen(rng, "resample").integers(0, problem.n, size=problem.n)
    view = ResampledProblem(problem, idx)
    point = np.asarray(solver(view, problem.constraint, _sub(rng, "solve")), dtype=np.float64)
    return ResampleResult(point, idx, amplify_with_replacement(eps, delta, problem.n, problem.n))


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------


class RescaledProblem:
    """Unit-radius, unit-Lipschitz version of ``base``.

    ``l^_i(u) = l_i(c + B u) / (B L)`` on the unit ball, so gradients scale by
    ``1/L`` and suboptimality by ``1/(B L)``.
    """

    def __init__(self, base, B: float, L: float, center):
        if B <= 0 or L <= 0:
            raise ValueError("B and L must be positive")
        self.base = base
        self.B = float(B)
        self.L = float(L)
        self.center = np.asarray(center, dtype=np.float64)
        self.d = base.d
        self.n = base.n
        self.identical_losses = base.identical_losses
        self.radius = 1.0
        self.lipschitz = 1.0

    @property
    def constraint(self) -> BallConstraint:
        return BallConstraint.centered(self.d, 1.0)

    @property
    def smoothness(self) -> float:
        return self.base.smoothness * self.B / self.L

    def to_original(self, u) -> np.ndarray:
        return self.center + self.B * np.asarray(u, dtype=np.float64)

    def to_unit(self, w) -> np.ndarray:
        return (np.asarray(w, dtype=np.float64) - self.center) / self.B

    def oracle_batch(self, points, indices):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        v, g, p = self.base.oracle_batch(self.center + self.B * pts, indices)
        return v / (self.B * self.L), g / self.L, p

    def affine_terms(self):
        t = self.base.affine_terms()
        if t is None:
            return None
        a, b = t
        return a * self.B / self.L, (a * self.center + b) / self.L

    def loss(self, u) -> float:
        return self.base.loss(self.to_original(u)) / (self.B * self.L)

    def minimizer(self) -> np.ndarray:
        return self.to_unit(self.base.minimizer())

    def suboptimality(self, u) -> float:
        return self.base.suboptimality(self.to_original(u)) / (self.B * self.L)


def rescale_problem(problem, B: float | None = None, L: float | None = None, center=None
                    ) -> RescaledProblem:
    """Normalize to the unit problem; ``to_original`` maps solutions back."""
    B = problem.radius if B is None else B
    L = problem.lipschitz if L is None else L
    center = problem.constraint.center if center is None else center
    return RescaledProblem(problem, B, L, center)
