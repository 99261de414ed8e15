import math

import numpy as np
import pytest

from dporacle.core import SplittableRng
from dporacle.instances import (nonsmooth_minimizer, sample_nonsmooth_instance,
                                sample_quadratic_instance, sample_smooth_instance)
from dporacle.oracles import (FirstOrderReply, OracleHandle, Query, capped_count_cap,
                              dequantize, gaussian_sigma_for_rho, proxy_gaussian,
                              proxy_identity, proxy_quantized, quantize, quantized_bits,
                              stats_snapshot, true_oracle)
from dporacle.privacy import gaussian_zcdp


@pytest.fixture(scope="module")
def hard():
    return sample_nonsmooth_instance(64, 0.2, rng=SplittableRng(2), c=2.0)


# true oracle ---------------------------------------------------------------------


def test_zero_point_uses_first_vector(hard):
    r = true_oracle(hard, Query(np.zeros(64)))
    assert r.piece == 1
    assert np.allclose(r.gradient, -hard.X[0])
    assert r.value == pytest.approx(0.4)


def test_perturbed_minimizer_selects_second_vector(hard):
    w = nonsmooth_minimizer(hard) + 1e-3 * hard.X[1]
    r = true_oracle(hard, Query(w))
    assert r.piece == 2
    assert np.allclose(r.gradient, hard.X[1])


def test_kink_sign_is_plus(hard):
    r = true_oracle(hard, Query(nonsmooth_minimizer(hard)))
    # all pieces tie at 0; smallest k wins and sign(0) = +1
    assert r.piece == 1
    assert np.allclose(r.gradient, hard.X[0])


def test_regularizer_piece():
    inst = sample_nonsmooth_instance(32, 1 / 480, rng=3)
    w = inst.V[0]
    r = true_oracle(inst, Query(w))
    assert r.piece == inst.K + 1
    assert np.allclose(r.gradient, 2 * w)
    assert r.value == pytest.approx(2.0)


def test_subgradient_inequality_and_norms(hard):
    rng = np.random.default_rng(4)
    for _ in range(1000):
        w, v = rng.standard_normal((2, 64)) / 6
        r = true_oracle(hard, Query(w))
        assert hard.loss(v) >= r.value + r.gradient @ (v - w) - 1e-9
        assert np.linalg.norm(r.gradient) <= 2 + 1e-12


def test_smooth_gradient_norm_bound():
    inst = sample_smooth_instance(16, 200, 0.1, rng=1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = rng.standard_normal(16)
        w *= rng.random() * 72 / np.linalg.norm(w)
        r = true_oracle(inst, Query(w, int(rng.integers(200))))
        assert np.linalg.norm(r.gradient) <= inst.L + 2 * inst.lam * 72 + 1e-12


def test_query_validation(hard):
    with pytest.raises(ValueError):
        Query(np.array([np.nan, 0.0]))
    with pytest.raises(IndexError):
        true_oracle(sample_quadratic_instance(2, 3, rng=0), Query(np.zeros(2), 5))


# proxies ------------------------------------------------------------------------------


def reply(g):
    return FirstOrderReply(0.0, np.asarray(g, dtype=float))


def test_gaussian_noiseless():
    g = np.array([1.0, -2.0])
    assert np.array_equal(proxy_gaussian([reply(g)], 0.0).estimate, g)
    assert np.array_equal(proxy_gaussian([reply(g), reply(-g)], 0.0).estimate, [0.0, 0.0])


def test_gaussian_empty_batch():
    with pytest.raises(ValueError):
        proxy_gaussian([], 1.0)


def test_gaussian_variance():
    batch = [reply(np.zeros(4))] * 100
    gen = np.random.default_rng(1)
    est = np.array([proxy_gaussian(batch, 1.0, gen).estimate for _ in range(10_000)])
    assert abs(est.var() - 1.0) <= 0.05


def test_sigma_for_rho_inverts_gaussian_mechanism():
    for m, rho in [(1, 0.5), (16, 1.0), (100, 0.01)]:
        sigma = gaussian_sigma_for_rho(1.0, m, rho)
        assert gaussian_zcdp(2.0 / m, sigma).rho == pytest.approx(rho, rel=1e-14)


def test_identity_proxy():
    g = np.array([0.5, 0.25])
    assert np.array_equal(proxy_identity([reply(g)]).estimate[0], g)


def test_quantized_zero_and_on_grid():
    payload, bits = quantize(np.zeros(5), 3, rng=0)
    assert bits == 32 + 5 * 4
    assert np.array_equal(dequantize(payload, 5, 3), np.zeros(5))
    g = np.array([0.75, -0.75, 0.75])
    assert np.array_equal(proxy_quantized([reply(g)], 2, rng=0).estimate, g)


@pytest.mark.parametrize("d,b", [(1, 1), (7, 2), (33, 3), (64, 8)])
def test_quantized_bit_length(d, b):
    gen = np.random.default_rng(d * b)
    for _ in range(20):
        g = gen.standard_normal(d) * 10 ** gen.uniform(-5, 5)
        r = proxy_quantized([reply(g)], b, gen, gamma=quantized_bits(d, b))
        assert r.bits == 32 + d * (b + 1)
        assert len(r.payload) == 4 + math.ceil(d * (b + 1) / 8)
        assert np.all(np.abs(r.estimate) <= np.max(np.abs(g)) * (1 + 1e-6))


def test_quantized_capacity_check():
    with pytest.raises(ValueError, match="capacity"):
        proxy_quantized([reply(np.ones(4))], 2, gamma=32 + 4 * 3 - 1)


def test_quantized_unbiased():
    g = np.array([0.3, -0.71, 0.05, 1.0, -0.2])
    gen = np.random.default_rng(7)
    reps = 20_000
    est = np.array([proxy_quantized([reply(g)], 1, gen).estimate for _ in range(reps)])
    se = est.std(axis=0) / np.sqrt(reps)
    assert np.all(np.abs(est.mean(axis=0) - g) <= 3 * se + 1e-12)


# ledger --------------------------------------------------------------------------


def test_fresh_stats_zero(hard):
    s = stats_snapshot(OracleHandle(hard))
    assert s.calls_total == 0 and s.unique_points == 0 and s.rounds == 0
    assert s.cnt.sum() == 0 and s.regularizer_hits == 0


def test_repeated_point_counts(hard):
    h = OracleHandle(hard)
    w = np.full(64, 0.01)
    h.round_identity(np.tile(w, (3, 1)), np.zeros(3, int))
    h.round_identity(np.tile(w, (5, 1)), np.zeros(5, int))
    s = stats_snapshot(h)
    assert s.calls_total == 8 and s.unique_points == 1 and s.batch_sizes == [3, 5]


def test_counters_additive_across_proxies(hard):
    h = OracleHandle(hard, rho=1.0)
    gen = np.random.default_rng(0)
    h.round_identity(np.zeros((2, 64)), [0, 0])
    h.round_gaussian(np.zeros((3, 64)), [0, 0, 0], 0.1, gen)
    h.round_quantized(np.ones((4, 64)) * 0.01, [0] * 4, 2, gen)
    s = h.stats
    assert s.calls_total == 9
    assert s.cnt.sum() + s.regularizer_hits == 9
    assert s.zcdp_total == pytest.approx(2 * 4 / (9 * 0.01))


def test_capped_counts(hard):
    h = OracleHandle(hard, rho=100.0)
    cap = math.sqrt(3 * 2.0 * 64 / 100.0)
    assert h.stats.cap == cap == capped_count_cap(2.0, 64, 100.0)
    h.round_identity(np.zeros((10, 64)), [0] * 10)
    s = h.stats
    assert s.cnt[0] == 10
    assert s.capped_cnt[0] == min(10, cap)
    assert s.capped_sq_sum == pytest.approx(min(10, cap) ** 2)


def test_trace_csv(hard, tmp_path):
    h = OracleHandle(hard, trace=True)
    h.round_identity(np.zeros((2, 64)), [0, 0])
    h.round_quantized(np.zeros((1, 64)), [0], 2)
    text = h.write_trace(tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "round,batch_size,pieces,bits"
    assert text[1].startswith("0,2,1;1,")
    assert text[2] == f"1,1,1,{32 + 64 * 3}"


def test_dedupe_matches_direct_evaluation(hard):
    h = OracleHandle(hard)
    gen = np.random.default_rng(5)
    pts = gen.standard_normal((6, 64)) / 8
    pts = np.vstack([pts, pts[:3]])
    batch = h.evaluate(pts, np.zeros(9, int))
    v, g, p = hard.oracle_batch(pts)
    assert np.array_equal(batch.values, v) and np.array_equal(batch.grads, g)
    assert np.array_equal(batch.pieces, p)
