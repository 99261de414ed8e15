"""First-order oracle, proxy oracles and the call-count ledger.

An optimizer never touches losses directly.  Each round it hands an
``OracleHandle`` a batch of non-adaptive queries (points and loss indices);
the handle evaluates the true oracle on every query, records the round in
its ``OracleStats`` and passes the replies to a proxy, whose message is all
the optimizer sees.

Proxies:

* ``proxy_identity``  -- raw replies (non-private baseline)
* ``proxy_gaussian``  -- batch-mean gradient plus isotropic Gaussian noise
* ``proxy_quantized`` -- batch-mean gradient, stochastically rounded to
  ``b`` bits per coordinate plus a sign bit and a 32-bit scale header
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import RngLike, as_generator, as_vector

GENERIC = 0
HEADER_BITS = 32


@dataclass(frozen=True)
class Query:
    point: np.ndarray
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "point", as_vector(self.point))
        if self.index < 0:
            raise IndexError("loss index must be non-negative")


@dataclass(frozen=True)
class FirstOrderReply:
    value: float
    gradient: np.ndarray
    piece: int = GENERIC


@dataclass(frozen=True)
class ReplyBatch:
    """True-oracle replies for one round, stored row-wise."""

    values: np.ndarray
    grads: np.ndarray
    pieces: np.ndarray

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i) -> FirstOrderReply:
        return FirstOrderReply(float(self.values[i]), self.grads[i], int(self.pieces[i]))

    @classmethod
    def from_replies(cls, replies: Sequence[FirstOrderReply]) -> "ReplyBatch":
        if not replies:
            raise ValueError("empty batch")
        return cls(np.array([r.value for r in replies], dtype=np.float64),
                   np.vstack([np.asarray(r.gradient, dtype=np.float64) for r in replies]),
                   np.array([r.piece for r in replies], dtype=np.int64))


def _as_batch(batch) -> ReplyBatch:
    if isinstance(batch, ReplyBatch):
        if len(batch) == 0:
            raise ValueError("empty batch")
        return batch
    if isinstance(batch, FirstOrderReply):
        batch = [batch]
    return ReplyBatch.from_replies(list(batch))


@dataclass(frozen=True)
class ProxyReply:
    """What the optimizer receives.

    ``estimate`` is the decoded gradient estimate (for the identity proxy the
    ``m x d`` matrix of raw gradients).  ``payload`` holds the encoded bytes
    for message-based proxies.  ``bits`` is the message length; for vector
    replies it is the float64 size.
    """

    estimate: np.ndarray
    bits: int
    kind: str
    payload: bytes | None = None
    values: np.ndarray | None = None


# ---------------------------------------------------------------------------
# true oracle
# ---------------------------------------------------------------------------


def true_oracle(inst, query: Query) -> FirstOrderReply:
    values, grads, pieces = inst.oracle_batch(query.point[None, :], [query.index])
    return FirstOrderReply(float(values[0]), grads[0], int(pieces[0]))


# ---------------------------------------------------------------------------
# proxies
# ---------------------------------------------------------------------------


def gaussian_sigma_for_rho(lipschitz: float, m: int, rho: float) -> float:
    """Noise level giving exactly ``rho``-zCDP for a mean of ``m`` ``L``-bounded gradients."""
    return lipschitz * math.sqrt(2.0 / rho) / m


def proxy_identity(batch) -> ProxyReply:
    b = _as_batch(batch)
    return ProxyReply(estimate=b.grads, bits=64 * b.grads.size, kind="identity",
                      values=b.values)


def proxy_gaussian(batch, sigma: float, rng: RngLike = None) -> ProxyReply:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    b = _as_batch(batch)
    mean = b.grads.mean(axis=0)
    if sigma > 0:
        mean = mean + sigma * as_generator(rng).standard_normal(mean.shape[0])
    return ProxyReply(estimate=mean, bits=64 * mean.shape[0], kind="gaussian")


def quantized_bits(d: int, b: int) -> int:
    return HEADER_BITS + d * (b + 1)


def _scale_header(g: np.ndarray) -> np.float32:
    # float32 scale rounded up so every |g_j| <= scale and rounding stays unbiased
    top = float(np.max(np.abs(g))) if g.size else 0.0
    s = np.float32(top)
    if float(s) < top:
        s = np.nextafter(s, np.float32(np.inf))
    return s


def quantize(g, b: int, rng: RngLike = None) -> tuple[bytes, int]:
    """Encode ``g`` as ``(payload, bit_length)``; decoding is unbiased for ``g``."""
    if b < 1:
        raise ValueError("need at least one bit per coordinate")
    g = as_vector(g)
    d = g.shape[0]
    top = (1 << b) - 1
    scale = _scale_header(g)
    if scale > 0:
        q = np.abs(g) / float(scale) * top
        lo = np.floor(q)
        up = as_generator(rng).random(d) < (q - lo)
        levels = np.minimum(lo + up, top).astype(np.int64)
    else:
        levels = np.zeros(d, dtype=np.int64)
    sign = (g < 0).astype(np.uint8)
    shifts = np.arange(b - 1, -1, -1)
    level_bits = ((levels[:, None] >> shifts) & 1).astype(np.uint8)
    body = np.concatenate([sign[:, None], level_bits], axis=1).reshape(-1)
    payload = scale.astype("<f4").tobytes() + np.packbits(body).tobytes()
    return payload, quantized_bits(d, b)


def dequantize(payload: bytes, d: int, b: int) -> np.ndarray:
    scale = float(np.frombuffer(payload[:4], dtype="<f4")[0])
    bits = np.unpackbits(np.frombuffer(payload[4:], dtype=np.uint8))[: d * (b + 1)]
    bits = bits.reshape(d, b + 1).astype(np.int64)
    weights = 1 << np.arange(b - 1, -1, -1)
    levels = bits[:, 1:] @ weights
    mag = levels * (scale / ((1 << b) - 1))
    return np.where(bits[:, 0] == 1, -mag, mag)


def proxy_quantized(batch, bits_per_coord: int, rng: RngLike = None,
                    gamma: int | None = None) -> ProxyReply:
    """Quantize the batch-mean gradient; ``gamma`` is the declared capacity in bits."""
    b = _as_batch(batch)
    d = b.grads.shape[1]
    need = quantized_bits(d, bits_per_coord)
    if gamma is not None and gamma < need:
        raise ValueError(f"declared capacity {gamma} bits < message length {need} bits")
    payload, nbits = quantize(b.grads.mean(axis=0), bits_per_coord, rng)
    return ProxyReply(estimate=dequantize(payload, d, bits_per_coord), bits=nbits,
                      kind="quantized", payload=payload)


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------


def capped_count_cap(c: float, d: int, rho: float) -> float:
    """``sqrt(3 c d / rho)``; infinite when no privacy level is given."""
    if rho is None or rho <= 0 or math.isinf(c):
        return math.inf
    return math.sqrt(3.0 * c * d / rho)


@dataclass
class OracleStats:
    calls_total: int = 0
    batch_sizes: list = field(default_factory=list)
    unique_points: int = 0
    cnt: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    regularizer_hits: int = 0
    generic_hits: int = 0
    cap: float = math.inf
    capped_cnt: np.ndarray = field(default_factory=lambda: np.zeros(0))
    capped_sq_sum: float = 0.0
    zcdp_total: float = 0.0

    @property
    def rounds(self) -> int:
        return len(self.batch_sizes)

    @property
    def capped_sum(self) -> float:
        return float(self.capped_cnt.sum())

    def copy(self) -> "OracleStats":
        return OracleStats(self.calls_total, list(self.batch_sizes), self.unique_points,
                           self.cnt.copy(), self.regularizer_hits, self.generic_hits,
                           self.cap, self.capped_cnt.copy(), self.capped_sq_sum,
                           self.zcdp_total)


class OracleHandle:
    """Owns one instance's oracle for a single run and keeps its ledger.

    ``rho`` only sets the capped-count cap; achieved privacy of Gaussian
    rounds is accumulated separately in ``stats.zcdp_total``.
    """

    def __init__(self, inst, rho: float | None = None, trace: bool = False):
        self.inst = inst
        self.K = int(getattr(inst, "K", 0))
        self._seen: set[bytes] = set()
        self._stats = OracleStats(
            cnt=np.zeros(self.K, dtype=np.int64),
            capped_cnt=np.zeros(self.K),
            cap=capped_count_cap(getattr(inst, "c", math.inf), inst.d, rho))
        self.trace: list[tuple] | None = [] if trace else None

    # evaluation --------------------------------------------------------

    def evaluate(self, points, indices) -> ReplyBatch:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if self.inst.identical_losses and points.shape[0] > 1:
            # identical losses: evaluate each distinct point once, still bill m calls
            uniq, inv = np.unique(points, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            v, g, p = self.inst.oracle_batch(uniq, np.zeros(len(uniq), dtype=np.int64))
            return ReplyBatch(v[inv], g[inv], p[inv])
        v, g, p = self.inst.oracle_batch(points, indices)
        return ReplyBatch(v, g, p)

    def _record(self, points, pieces, bits=None):
        s = self._stats
        m = len(pieces)
        s.calls_total += m
        s.batch_sizes.append(m)
        for row in np.atleast_2d(points):
            self._seen.add(hashlib.blake2b(row.tobytes(), digest_size=16).digest())
        s.unique_points = len(self._seen)
        if self.K:
            per = np.bincount(pieces, minlength=self.K + 2)
            round_cnt = per[1:self.K + 1]
            s.cnt += round_cnt
            s.regularizer_hits += int(per[self.K + 1])
            s.generic_hits += int(per[0])
            capped = np.minimum(round_cnt, s.cap)
            s.capped_cnt += capped
            s.capped_sq_sum += float(capped @ capped)
        else:
            s.generic_hits += m
        if self.trace is not None:
            self.trace.append((s.rounds - 1, m, ";".join(map(str, pieces.tolist())),
                               -1 if bits is None else bits))

    def record_bulk(self, points, pieces=None, bits=None):
        """Record one single-query round per row (used by compiled SGD loops)."""
        points = np.atleast_2d(points)
        if pieces is None:
            pieces = np.zeros(points.shape[0], dtype=np.int64)
        for row, piece in zip(points, pieces):
            self._record(row[None, :], np.array([piece]), bits)

    # rounds ------------------------------------------------------------

    def round_identity(self, points, indices) -> ProxyReply:
        batch = self.evaluate(points, indices)
        reply = proxy_identity(batch)
        self._record(points, batch.pieces, reply.bits)
        return reply

    def round_gaussian(self, points, indices, sigma: float, rng: RngLike = None) -> ProxyReply:
        batch = self.evaluate(points, indices)
        reply = proxy_gaussian(batch, sigma, rng)
        m = len(batch)
        if sigma > 0:
            self._stats.zcdp_total += 2.0 * self.inst.lipschitz ** 2 / (m * m * sigma * sigma)
        else:
            self._stats.zcdp_total = math.inf
        self._record(points, batch.pieces, reply.bits)
        return reply

    def round_quantized(self, points, indices, bits_per_coord: int, rng: RngLike = None,
                        gamma: int | None = None) -> ProxyReply:
        batch = self.evaluate(points, indices)
        reply = proxy_quantized(batch, bits_per_coord, rng, gamma)
        self._record(points, batch.pieces, reply.bits)
        return reply

    def round(self, kind: str, points, indices, rng: RngLike = None, *, sigma: float = 0.0,
              bits_per_coord: int = 2, gamma: int | None = None) -> ProxyReply:
        if kind == "identity":
            return self.round_identity(points, indices)
        if kind == "gaussian":
            return self.round_gaussian(points, indices, sigma, rng)
        if kind == "quantized":
            return self.round_quantized(points, indices, bits_per_coord, rng, gamma)
        raise ValueError(f"unknown proxy kind {kind!r}")

    # reporting ---------------------------------------------------------

    @property
    def stats(self) -> OracleStats:
        return self._stats

    def write_trace(self, path) -> Path:
        if self.trace is None:
            raise RuntimeError("handle was created without trace=True")
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "batch_size", "pieces", "bits"])
            w.writerows(self.trace)
        return path


def stats_snapshot(handle: OracleHandle) -> OracleStats:
    return handle.stats.copy()
