"""Optimizers that talk to losses only through an ``OracleHandle``.

* ``sgd_run``        -- projected SGD, one query per step, averaged iterate
* ``dpsgd_run``      -- minibatch SGD with a private (or other) proxy oracle
* ``phased_sgd_run`` -- rounds of SGD with geometrically shrinking steps and
  output perturbation between rounds
* ``phased_erm_run`` -- rounds of regularized ERM solved to a certified gap,
  each perturbed with Gaussian noise

Integer schedule quantities derived from real formulas are rounded up.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import (BallConstraint, SplittableRng, RngLike, as_generator, iceil,
                   project_ball)
from .oracles import OracleHandle, OracleStats
from .privacy import (ApproxDP, PrivacyBudget, PrivacyError, ZCDP, amplify_with_replacement,
                      compose, gaussian_zcdp, tcdp_to_approx, zcdp_to_approx)


class SmoothnessError(ValueError):
    pass


class SubsolverError(RuntimeError):
    def __init__(self, msg: str, round_index: int | None = None):
        super().__init__(msg if round_index is None else f"round {round_index}: {msg}")
        self.round_index = round_index


@dataclass
class RunResult:
    point: np.ndarray
    subopt: float
    stats: OracleStats
    privacy: PrivacyBudget | None = None
    wall_ms: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def eps(self) -> float:
        return self.privacy.eps if isinstance(self.privacy, ApproxDP) else math.nan

    @property
    def delta(self) -> float:
        return self.privacy.delta if isinstance(self.privacy, ApproxDP) else math.nan


def _streams(rng: RngLike, *names: str) -> list[np.random.Generator]:
    """One generator per name; independent when ``rng`` is splittable."""
    if isinstance(rng, SplittableRng):
        return [rng.child(nm).generator() for nm in names]
    gen = as_generator(rng)
    return [gen] * len(names)


def _subopt(inst, w) -> float:
    try:
        return float(inst.suboptimality(w))
    except NotImplementedError:
        return math.nan


def _mean_gradient(reply) -> np.ndarray:
    est = reply.estimate
    return est.mean(axis=0) if est.ndim == 2 else est


# ---------------------------------------------------------------------------
# plain projected SGD
# ---------------------------------------------------------------------------


def sgd_iterates(inst, steps: int, eta: float, start=None, rng: RngLike = None,
                 handle: OracleHandle | None = None, proxy: str = "identity",
                 constraint: BallConstraint | None = None, bits_per_coord: int = 2,
                 keep_iterates: bool = False):
    """Projected SGD with one uniformly sampled loss per step.

    Returns ``(average, last, iterates)``; the average is over the ``steps``
    points at which gradients were requested, starting with ``start``.
    Losses with affine per-datum gradients and the identity proxy go through
    the compiled kernel; everything else goes query by query through the
    handle's proxy.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ball = constraint or inst.constraint
    if start is None:
        start = ball.center if isinstance(ball, BallConstraint) else np.zeros(inst.d)
    w0 = np.asarray(start, dtype=np.float64).copy()
    gen_idx, gen_proxy = _streams(rng, "sgd-index", "sgd-proxy")
    idx = gen_idx.integers(0, inst.n, size=steps)
    affine = inst.affine_terms()
    if affine is not None and proxy == "identity" and isinstance(ball, BallConstraint):
        a, b = affine
        avg, last, its = _kernels.sgd_affine(w0, a, b, idx, eta, ball.center, ball.radius,
                                             keep_iterates=keep_iterates or handle is not None)
        if handle is not None:
            handle.record_bulk(its)
        return avg, last, (its if keep_iterates else None)
    w = w0
    acc = np.zeros_like(w)
    its = np.empty((steps, w.shape[0])) if keep_iterates else None
    h = handle if handle is not None else OracleHandle(inst)
    for t in range(steps):
        acc += w
        if its is not None:
            its[t] = w
        reply = h.round(proxy, w[None, :], idx[t:t + 1], gen_proxy,
                        bits_per_coord=bits_per_coord)
        w = ball.project(w - eta * _mean_gradient(reply))
    return acc / steps, w, its


def sgd_run(inst, steps: int, eta: float, start=None, rng: RngLike = None,
            handle: OracleHandle | None = None, proxy: str = "identity",
            constraint: BallConstraint | None = None) -> np.ndarray:
    """Average iterate of projected SGD; see ``sgd_iterates``."""
    return sgd_iterates(inst, steps, eta, start, rng, handle, proxy, constraint)[0]


# ---------------------------------------------------------------------------
# DP-SGD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DpsgdConfig:
    alpha: float
    rho: float
    mbar: float
    d: int
    B: float
    L: float
    m: int
    sigma: float
    T: int
    eta: float
    trivial: bool = False
    delta: float = 1e-6

    @property
    def calls(self) -> int:
        return 0 if self.trivial else self.T * self.m

    def bound(self) -> float:
        """``B^2/(eta T) + eta L^2 + eta sigma^2 d``."""
        if self.trivial:
            return self.B * self.L
        return (self.B ** 2 / (self.eta * self.T) + self.eta * self.L ** 2
                + self.eta * self.sigma ** 2 * self.d)


def dpsgd_parameters(alpha: float, rho: float, mbar: float, d: int, B: float = 1.0,
                     L: float = 1.0, exact_zcdp: bool = False, delta: float = 1e-6
                     ) -> DpsgdConfig:
    """Batch size, noise, rounds and step size for DP-SGD.

    ``m = min(sqrt(d/rho), mbar)``, ``sigma = L max(1/sqrt(d), 1/(mbar sqrt(rho)))``,
    ``T = (BL/alpha)^2 max(1, d/(mbar^2 rho))``,
    ``eta = B/(L sqrt(T)) min(1, mbar sqrt(rho)/sqrt(d))``.  ``mbar`` may be
    ``inf``.  With ``exact_zcdp`` the noise is instead set so each round is
    exactly ``rho``-zCDP for sensitivity ``2L/m``.
    """
    if alpha <= 0 or rho <= 0:
        raise ValueError("alpha and rho must be positive")
    if not mbar >= 1:
        raise ValueError("mbar must be >= 1 or inf")
    if alpha >= B * L / 3.0:
        return DpsgdConfig(alpha, rho, mbar, d, B, L, m=0, sigma=0.0, T=0, eta=0.0,
                           trivial=True, delta=delta)
    sd, sr = math.sqrt(d), math.sqrt(rho)
    m = iceil(min(sd / sr, mbar))
    sigma = L * max(1.0 / sd, 1.0 / (mbar * sr))
    T = iceil((B * L / alpha) ** 2 * max(1.0, d / (mbar * mbar * rho)))
    eta = B / (L * math.sqrt(T)) * min(1.0, mbar * sr / sd)
    if exact_zcdp:
        sigma = L * math.sqrt(2.0 / rho) / m
    return DpsgdConfig(alpha, rho, mbar, d, B, L, m, sigma, T, eta, delta=delta)


def dpsgd_run(inst, proxy: str, config: DpsgdConfig, rng: RngLike = None, start=None,
              bits_per_coord: int = 2, gamma: int | None = None,
              trace: bool = False) -> RunResult:
    """Minibatch SGD through a proxy oracle; returns the average query point.

    Each round samples ``m`` indices uniformly with replacement and sends the
    current point with those indices.  With the Gaussian proxy, the handle
    accrues the achieved zCDP ``2L^2/(m^2 sigma^2)`` per round.
    """
    t0 = time.perf_counter()
    ball = inst.constraint
    w = ball.center.copy() if start is None else np.asarray(start, dtype=np.float64).copy()
    handle = OracleHandle(inst, rho=config.rho, trace=trace)
    if config.trivial:
        return RunResult(w, _subopt(inst, w), handle.stats, ZCDP(0.0),
                         1e3 * (time.perf_counter() - t0), {"trivial": True})
    gen_idx, gen_proxy = _streams(rng, "dpsgd-index", "dpsgd-proxy")
    acc = np.zeros_like(w)
    m = config.m
    for _ in range(config.T):
        acc += w
        idx = gen_idx.integers(0, inst.n, size=m)
        pts = np.broadcast_to(w, (m, w.shape[0]))
        reply = handle.round(proxy, pts, idx, gen_proxy, sigma=config.sigma,
                             bits_per_coord=bits_per_coord, gamma=gamma)
        w = project_ball(w - config.eta * _mean_gradient(reply), ball)
    avg = acc / config.T
    rho_total = handle.stats.zcdp_total
    privacy = zcdp_to_approx(rho_total, config.delta) if proxy == "gaussian" else None
    return RunResult(avg, _subopt(inst, avg), handle.stats, privacy,
                     1e3 * (time.perf_counter() - t0),
                     {"zcdp": rho_total, "handle": handle if trace else None})


# ---------------------------------------------------------------------------
# Phased SGD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhasedSgdConfig:
    alpha: float
    delta: float
    B: float
    L: float
    d: int
    n: int
    R: int
    T: float
    eta: float
    T_r: tuple[int, ...]
    eta_r: tuple[float, ...]
    sigma_r: tuple[float, ...]

    @property
    def call_budget(self) -> float:
        return self.T


def phased_sgd_parameters(alpha: float, delta: float, d: int, n: int, B: float = 1.0,
                          L: float = 1.0) -> PhasedSgdConfig:
    """``R = ceil(log2(1/alpha)/2)``, ``T = max(BL sqrt(d log(n/delta))/alpha, (BL/alpha)^2)``,
    ``eta = (B/L) min(1/sqrt(d log(n/delta)), alpha/(BL))`` and per round
    ``T_r = ceil(T/2^r)``, ``eta_r = eta/4^r``, ``sigma_r = 4B/(4^r sqrt(d))``.
    """
    if alpha <= 0 or not 0 < delta < 1:
        raise ValueError("alpha must be positive and delta in (0, 1)")
    R = max(1, iceil(0.5 * math.log2(1.0 / alpha)))
    dl = d * math.log(n / delta)
    T = max(B * L * math.sqrt(dl) / alpha, (B * L / alpha) ** 2)
    eta = (B / L) * min(1.0 / math.sqrt(dl), alpha / (B * L))
    rs = range(1, R + 1)
    return PhasedSgdConfig(alpha, delta, B, L, d, n, R, T, eta,
                           tuple(max(1, iceil(T / 2 ** r)) for r in rs),
                           tuple(eta / 4 ** r for r in rs),
                           tuple(4.0 * B / (4 ** r * math.sqrt(d)) for r in rs))


def phased_sgd_privacy(config: PhasedSgdConfig) -> ApproxDP:
    """Per round: Gaussian output perturbation of sensitivity ``2 L eta_r``,
    converted at ``delta/n``, amplified for ``T_r`` with-replacement draws
    from ``n``; rounds composed."""
    parts = []
    for T_r, eta_r, sigma_r in zip(config.T_r, config.eta_r, config.sigma_r):
        rho_r = gaussian_zcdp(2.0 * config.L * eta_r, sigma_r).rho
        eps_r = tcdp_to_approx(rho_r, math.inf, config.delta / config.n)
        parts.append(amplify_with_replacement(eps_r.eps, eps_r.delta, T_r, config.n))
    return compose(parts)


def phased_sgd_run(inst, config: PhasedSgdConfig, rng: RngLike = None,
                   start=None) -> RunResult:
    """Rounds of SGD; each round's average is perturbed and projected onto the constraint."""
    t0 = time.perf_counter()
    beta = inst.smoothness
    if beta > 1.0 / (2.0 * config.eta):
        raise SmoothnessError(f"losses are {beta:g}-smooth; need <= 1/(2 eta) = "
                              f"{1.0 / (2.0 * config.eta):g}")
    root = rng if isinstance(rng, SplittableRng) else None
    gen = None if root else as_generator(rng)
    ball = inst.constraint
    w = ball.center.copy() if start is None else project_ball(start, ball)
    handle = OracleHandle(inst)
    for r, (T_r, eta_r, sigma_r) in enumerate(zip(config.T_r, config.eta_r,
                                                   config.sigma_r), 1):
        sub = root.child("round", r) if root else gen
        noise_gen = root.child("noise", r).generator() if root else gen
        avg = sgd_run(inst, T_r, eta_r, start=w, rng=sub, handle=handle)
        w = project_ball(avg + sigma_r * noise_gen.standard_normal(inst.d), ball)
    try:
        privacy = phased_sgd_privacy(config)
    except PrivacyError:
        privacy = ApproxDP(math.inf, 1.0)
    return RunResult(w, _subopt(inst, w), handle.stats, privacy,
                     1e3 * (time.perf_counter() - t0), {"R": config.R})


# ---------------------------------------------------------------------------
# Phased ERM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhasedErmConfig:
    alpha: float
    delta: float
    B: float
    L: float
    d: int
    n: int
    R: int
    lam_r: tuple[float, ...]
    sigma_r: tuple[float, ...]
    target_r: tuple[float, ...]


def phased_erm_parameters(alpha: float, delta: float, d: int, n: int, B: float = 1.0,
                          L: float = 1.0) -> PhasedErmConfig:
    """``R = ceil(log2(LB/alpha))``, ``lam_r = 2^r alpha/B^2``, ``sigma_r = 4B/(2^r sqrt(d))``,
    subsolver targets ``min(L^2/(lam_r n^2), alpha/2^r)``."""
    if alpha <= 0 or not 0 < delta < 1:
        raise ValueError("alpha must be positive and delta in (0, 1)")
    R = max(1, iceil(math.log2(L * B / alpha)))
    rs = range(1, R + 1)
    lam = tuple(2 ** r * alpha / B ** 2 for r in rs)
    return PhasedErmConfig(alpha, delta, B, L, d, n, R, lam,
                           tuple(4.0 * B / (2 ** r * math.sqrt(d)) for r in rs),
                           tuple(min(L * L / (lr * n * n), alpha / 2 ** r)
                                 for r, lr in zip(rs, lam)))


def phased_erm_privacy(config: PhasedErmConfig) -> ApproxDP:
    """Gaussian mechanism on ``2L/(lam_r n)``-stable round outputs, composed in zCDP;
    subsolver failures add ``R delta``."""
    rho = compose([gaussian_zcdp(2.0 * config.L / (lr * config.n), s)
                   for lr, s in zip(config.lam_r, config.sigma_r)]).rho
    conv = zcdp_to_approx(rho, config.delta)
    return ApproxDP(conv.eps, min(1.0, conv.delta + config.R * config.delta))


class RegularizedObjective:
    """``(1/n) sum_i l_i(w) + lam ||w - center||^2`` over a ball; each gradient costs n calls."""

    def __init__(self, inst, lam: float, center, handle: OracleHandle,
                 constraint: BallConstraint | None = None):
        self.inst = inst
        self.lam = float(lam)
        self.center = np.asarray(center, dtype=np.float64)
        self.handle = handle
        self.constraint = constraint or inst.constraint
        self._all = np.arange(inst.n)

    @property
    def strong_convexity(self) -> float:
        return 2.0 * self.lam

    @property
    def smoothness(self) -> float:
        return self.inst.smoothness + 2.0 * self.lam

    def gradient(self, w) -> np.ndarray:
        pts = np.broadcast_to(w, (self.inst.n, w.shape[0]))
        reply = self.handle.round_identity(pts, self._all)
        return reply.estimate.mean(axis=0) + 2.0 * self.lam * (w - self.center)

    def value(self, w) -> float:
        diff = w - self.center
        return self.inst.loss(w) + self.lam * float(diff @ diff)


def strongly_convex_subsolver(objective: RegularizedObjective, lam: float, target: float,
                              failure_prob: float = 0.0, rng: RngLike = None, start=None,
                              safety: float = 2.0, cap_factor: float = 10.0) -> np.ndarray:
    """Projected gradient descent with step ``1/beta`` run to a certified gap.

    The planned iteration count is ``safety * (beta/mu) * log(2 beta D^2 / target)``
    (linear rate, ``D`` the constraint radius).  The gap of ``w+ = P(w - g/beta)``
    is certified by ``||beta (w - w+)||^2 / (2 mu)``; if that certificate is not
    met within ``cap_factor`` times the plan, ``SubsolverError`` is raised.
    The method is deterministic, so ``failure_prob`` and ``rng`` are unused.
    """
    ball = objective.constraint
    w = ball.center.copy() if start is None else project_ball(start, ball)
    if math.isinf(target):
        return w
    if target <= 0:
        raise ValueError("target must be positive")
    beta = objective.smoothness
    mu = 2.0 * lam
    if not math.isfinite(beta):
        raise SubsolverError("objective is not smooth")
    D = 2.0 * ball.radius
    planned = max(1, iceil(safety * (beta / mu) * math.log(max(2.0, 2.0 * beta * D * D / target))))
    for k in range(int(cap_factor * planned)):
        g = objective.gradient(w)
        nxt = project_ball(w - g / beta, ball)
        gm = beta * (w - nxt)
        w = nxt
        if k + 1 >= planned and float(gm @ gm) / (2.0 * mu) <= target:
            return w
    raise SubsolverError(f"no certified gap <= {target:g} after {int(cap_factor * planned)} "
                         f"iterations")


def phased_erm_run(inst, config: PhasedErmConfig, subsolver=strongly_convex_subsolver,
                   rng: RngLike = None, start=None) -> RunResult:
    t0 = time.perf_counter()
    root = rng if isinstance(rng, SplittableRng) else None
    gen = None if root else as_generator(rng)
    ball = inst.constraint
    w = ball.center.copy() if start is None else project_ball(start, ball)
    handle = OracleHandle(inst)
    for r, (lam, sigma, target) in enumerate(zip(config.lam_r, config.sigma_r,
                                                  config.target_r), 1):
        obj = RegularizedObjective(inst, lam, w, handle, ball)
        try:
            wbar = subsolver(obj, lam, target, config.delta,
                             root.child("solve", r) if root else gen, start=w)
        except SubsolverError as exc:
            raise SubsolverError(str(exc), r) from exc
        noise_gen = root.child("noise", r).generator() if root else gen
        w = project_ball(wbar + sigma * noise_gen.standard_normal(inst.d), ball)
    return RunResult(w, _subopt(inst, w), handle.stats, phased_erm_privacy(config),
                     1e3 * (time.perf_counter() - t0), {"R": config.R})
