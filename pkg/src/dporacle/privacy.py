"""Closed-form privacy accounting for zCDP, truncated CDP and approximate DP.

Budgets are immutable values.  ``compose`` only combines budgets of one
kind; convert first with ``to_tcdp`` or ``tcdp_to_approx``.

A small line-oriented chain language (``evaluate_chain``) drives the CLI
``account`` subcommand::

    gaussian 0.2 1.0        # zCDP of a Gaussian mechanism (sensitivity, sigma)
    subsample 10 1000       # tCDP amplification by subsampling m of n
    repeat 500              # compose 500 copies
    to_approx 1e-6          # convert to (eps, delta)
"""
from __future__ import annotations

import math
import shlex
from dataclasses import dataclass
from typing import Sequence, Union


class PrivacyError(ValueError):
    """A precondition of an accounting rule does not hold."""


@dataclass(frozen=True)
class ZCDP:
    rho: float

    def __post_init__(self):
        if not self.rho >= 0:
            raise PrivacyError(f"rho must be >= 0, got {self.rho}")


@dataclass(frozen=True)
class TCDP:
    rho: float
    omega: float = math.inf

    def __post_init__(self):
        if not self.rho >= 0:
            raise PrivacyError(f"rho must be >= 0, got {self.rho}")
        if not self.omega > 1:
            raise PrivacyError(f"omega must be > 1, got {self.omega}")


@dataclass(frozen=True)
class ApproxDP:
    eps: float
    delta: float

    def __post_init__(self):
        if not self.eps >= 0:
            raise PrivacyError(f"eps must be >= 0, got {self.eps}")
        if not 0 <= self.delta <= 1:
            raise PrivacyError(f"delta must lie in [0, 1], got {self.delta}")


PrivacyBudget = Union[ZCDP, TCDP, ApproxDP]


def to_tcdp(b: ZCDP | TCDP) -> TCDP:
    if isinstance(b, TCDP):
        return b
    if isinstance(b, ZCDP):
        return TCDP(b.rho, math.inf)
    raise PrivacyError("approximate DP cannot be converted to tCDP")


def gaussian_zcdp(sensitivity: float, sigma: float) -> ZCDP:
    """``rho = sensitivity^2 / (2 sigma^2)``."""
    if sensitivity < 0 or sigma < 0:
        raise PrivacyError("sensitivity and sigma must be non-negative")
    if sensitivity == 0:
        return ZCDP(0.0)
    if sigma == 0:
        raise PrivacyError("sigma = 0 with positive sensitivity has unbounded privacy loss")
    return ZCDP(sensitivity * sensitivity / (2.0 * sigma * sigma))


def group_zcdp(rho: float, s: int) -> ZCDP:
    if int(s) != s or s < 1:
        raise PrivacyError("group size must be a positive integer")
    return ZCDP(s * s * rho)


def compose(budgets: Sequence[PrivacyBudget]) -> PrivacyBudget:
    budgets = list(budgets)
    if not budgets:
        return ZCDP(0.0)
    kind = type(budgets[0])
    if any(type(b) is not kind for b in budgets):
        raise PrivacyError("cannot compose budgets of different kinds; convert first")
    if kind is ZCDP:
        return ZCDP(math.fsum(b.rho for b in budgets))
    if kind is TCDP:
        return TCDP(math.fsum(b.rho for b in budgets), min(b.omega for b in budgets))
    return ApproxDP(math.fsum(b.eps for b in budgets),
                    min(1.0, math.fsum(b.delta for b in budgets)))


def repeat(b: PrivacyBudget, k: int) -> PrivacyBudget:
    """``k``-fold composition of one budget."""
    if int(k) != k or k < 0:
        raise PrivacyError("repeat count must be a non-negative integer")
    if k == 0:
        return ZCDP(0.0)
    if isinstance(b, ZCDP):
        return ZCDP(k * b.rho)
    if isinstance(b, TCDP):
        return TCDP(k * b.rho, b.omega)
    return ApproxDP(k * b.eps, min(1.0, k * b.delta))


def tcdp_to_approx(rho: float, omega: float, delta: float) -> ApproxDP:
    """Convert ``(rho, omega)``-tCDP to ``(eps, delta)``-DP.

    Uses ``rho + 2 sqrt(rho log(1/delta))`` when ``log(1/delta) <= (omega-1)^2 rho``,
    otherwise ``rho omega + log(1/delta)/(omega - 1)``.
    """
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must lie in (0, 1), got {delta}")
    if not omega > 1:
        raise PrivacyError(f"omega must be > 1, got {omega}")
    if rho < 0:
        raise PrivacyError("rho must be >= 0")
    log_d = math.log(1.0 / delta)
    if rho == 0:
        return ApproxDP(0.0, delta)
    if log_d <= (omega - 1.0) ** 2 * rho:
        return ApproxDP(rho + 2.0 * math.sqrt(rho * log_d), delta)
    return ApproxDP(rho * omega + log_d / (omega - 1.0), delta)


def zcdp_to_approx(rho: float, delta: float) -> ApproxDP:
    return tcdp_to_approx(rho, math.inf, delta)


def tcdp_subsample(rho: float, omega: float, m: int, n: int) -> TCDP:
    """Amplification by subsampling: ``(13 (m/n)^2 rho, 1/(4 rho))``.

    Requires ``log(n/m) >= 3 rho (2 + log2(1/rho))`` and ``m <= n``.  The
    incoming ``omega`` must be at least the outgoing one.
    """
    if not 0 < m <= n:
        raise PrivacyError(f"need 0 < m <= n, got m={m}, n={n}")
    if rho <= 0:
        raise PrivacyError("subsampling amplification needs rho > 0")
    lhs = math.log(n / m)
    rhs = 3.0 * rho * (2.0 + math.log2(1.0 / rho))
    if lhs < rhs:
        raise PrivacyError(
            f"subsampling precondition log(n/m) >= 3 rho (2 + log2(1/rho)) fails: "
            f"{lhs:.6g} < {rhs:.6g}")
    omega_out = 1.0 / (4.0 * rho)
    if omega < omega_out:
        raise PrivacyError(f"input omega {omega} below required {omega_out}")
    return TCDP(13.0 * (m / n) ** 2 * rho, omega_out)


def amplify_with_replacement(eps: float, delta: float, m: int, n: int) -> ApproxDP:
    """Run on ``m`` points drawn with replacement from ``n``: ``(6 eps m/n, 4 e^{6 eps m/n} (m/n) delta)``."""
    if m < 1 or n < 1:
        raise PrivacyError("m and n must be positive")
    if eps > min(1.0, n / (2.0 * m)):
        raise PrivacyError(f"need eps <= min(1, n/(2m)) = {min(1.0, n / (2.0 * m)):.6g}, "
                           f"got {eps}")
    e = 6.0 * eps * m / n
    return ApproxDP(e, min(1.0, 4.0 * math.exp(e) * (m / n) * delta))


# ---------------------------------------------------------------------------
# DP-SGD
# ---------------------------------------------------------------------------


def alpha_star(B: float, L: float, d: int, n: int, delta: float, eps: float = 1.0) -> float:
    """``B L sqrt(d log(1/delta)) / (n eps)``."""
    return B * L * math.sqrt(d * math.log(1.0 / delta)) / (n * eps)


def dpsgd_privacy(alpha: float, delta: float, B: float, L: float, d: int, n: int) -> ApproxDP:
    """Closed-form guarantee ``eps = 3 alpha*/alpha`` for DP-SGD at ``rho = 1/log(1/delta)``."""
    a_star = alpha_star(B, L, d, n, delta)
    if alpha < 26.0 * a_star:
        raise PrivacyError(f"alpha={alpha:.6g} below 26 alpha* = {26 * a_star:.6g}; "
                           f"increase alpha or n")
    return ApproxDP(3.0 * a_star / alpha, delta)


@dataclass(frozen=True)
class DpsgdChain:
    per_round: ZCDP
    subsampled: TCDP
    composed: TCDP
    approx: ApproxDP
    rounds: int
    batch: int


def dpsgd_privacy_chain(alpha: float, delta: float, B: float, L: float, d: int, n: int,
                        rho: float | None = None) -> DpsgdChain:
    """Account DP-SGD step by step: per-round zCDP, subsampling, composition, conversion.

    Uses the uncapped batch ``m = sqrt(d/rho)`` and ``T = (BL/alpha)^2`` rounds
    (ceilinged), with per-round ``rho`` defaulting to ``1/log(1/delta)``.
    """
    from .core import iceil

    if rho is None:
        rho = 1.0 / math.log(1.0 / delta)
    m = iceil(math.sqrt(d / rho))
    T = iceil((B * L / alpha) ** 2)
    step = ZCDP(rho)
    sub = tcdp_subsample(rho, math.inf, m, n)
    total = repeat(sub, T)
    return DpsgdChain(step, sub, total, tcdp_to_approx(total.rho, total.omega, delta), T, m)


# ---------------------------------------------------------------------------
# chain language
# ---------------------------------------------------------------------------


def _num(tok: str) -> float:
    t = tok.lower()
    if t in ("inf", "infinity", "+inf"):
        return math.inf
    return float(tok)


def _int(tok: str) -> int:
    v = float(tok)
    if v != int(v):
        raise PrivacyError(f"expected an integer, got {tok}")
    return int(v)


def evaluate_chain(text: str) -> PrivacyBudget:
    """Evaluate a chain description; each line transforms the current budget.

    Steps: ``gaussian S SIGMA``, ``zcdp RHO``, ``tcdp RHO OMEGA``,
    ``approx EPS DELTA`` (set), ``group S``, ``subsample M N``,
    ``amplify M N``, ``repeat K``, ``add <budget step>`` (compose with a
    new budget), ``to_approx DELTA``, ``dpsgd ALPHA DELTA B L D N``.
    """
    cur: PrivacyBudget = ZCDP(0.0)
    for lineno, raw in enumerate(text.splitlines(), 1):
        toks = shlex.split(raw, comments=True)
        if not toks:
            continue
        try:
            cur = _step(cur, toks[0].lower(), toks[1:])
        except (IndexError, ValueError) as exc:
            raise PrivacyError(f"line {lineno}: {raw.strip()!r}: {exc}") from exc
    return cur


_ARITY = {"gaussian": 2, "zcdp": 1, "tcdp": 2, "approx": 2, "group": 1, "subsample": 2,
          "amplify": 2, "repeat": 1, "to_approx": 1, "dpsgd": 6}


def _make(op: str, args: list[str]) -> PrivacyBudget:
    if op == "gaussian":
        return gaussian_zcdp(_num(args[0]), _num(args[1]))
    if op == "zcdp":
        return ZCDP(_num(args[0]))
    if op == "tcdp":
        return TCDP(_num(args[0]), _num(args[1]))
    if op == "approx":
        return ApproxDP(_num(args[0]), _num(args[1]))
    if op == "dpsgd":
        a, dl, B, L = (_num(x) for x in args[:4])
        return dpsgd_privacy(a, dl, B, L, _int(args[4]), _int(args[5]))
    raise PrivacyError(f"{op!r} does not construct a budget")


def _step(cur: PrivacyBudget, op: str, args: list[str]) -> PrivacyBudget:
    if op == "add":
        new = _make(args[0].lower(), args[1:])
        if isinstance(cur, TCDP) and isinstance(new, ZCDP):
            new = to_tcdp(new)
        if isinstance(cur, ZCDP) and isinstance(new, TCDP):
            cur = to_tcdp(cur)
        return compose([cur, new])
    if op not in _ARITY:
        raise PrivacyError(f"unknown step {op!r}")
    if len(args) != _ARITY[op]:
        raise PrivacyError(f"{op} takes {_ARITY[op]} arguments, got {len(args)}")
    if op in ("gaussian", "zcdp", "tcdp", "approx", "dpsgd"):
        return _make(op, args)
    if op == "group":
        if not isinstance(cur, ZCDP):
            raise PrivacyError("group applies to zCDP budgets")
        return group_zcdp(cur.rho, _int(args[0]))
    if op == "subsample":
        t = to_tcdp(cur)
        return tcdp_subsample(t.rho, t.omega, _int(args[0]), _int(args[1]))
    if op == "amplify":
        if not isinstance(cur, ApproxDP):
            raise PrivacyError("amplify applies to (eps, delta) budgets; use to_approx first")
        return amplify_with_replacement(cur.eps, cur.delta, _int(args[0]), _int(args[1]))
    if op == "repeat":
        return repeat(cur, _int(args[0]))
    # to_approx
    delta = _num(args[0])
    if isinstance(cur, ApproxDP):
        raise PrivacyError("budget is already (eps, delta)")
    t = to_tcdp(cur)
    return tcdp_to_approx(t.rho, t.omega, delta)


def format_budget(b: PrivacyBudget) -> str:
    if isinstance(b, ZCDP):
        return f"zCDP rho={b.rho!r}"
    if isinstance(b, TCDP):
        return f"tCDP rho={b.rho!r} omega={b.omega!r}"
    return f"approxDP eps={b.eps!r} delta={b.delta!r}"
