import numpy as np
import pytest

from dporacle.core import SplittableRng
from dporacle.instances import (InfeasibleInstanceError, QuadraticTestLoss, load_instance,
                                nonsmooth_loss, nonsmooth_minimizer, problem_vector_count,
                                rademacher_product_sample, sample_nonsmooth_instance,
                                sample_quadratic_instance, sample_smooth_instance,
                                save_instance, smooth_suboptimality)


@pytest.fixture(scope="module")
def hard():
    return sample_nonsmooth_instance(64, 0.2, rng=SplittableRng(1), c=2.0)


# non-smooth instance ------------------------------------------------------------


def test_problem_vector_counts():
    assert problem_vector_count(1 / 480) == 1
    assert problem_vector_count(1 / 960) == 4
    assert problem_vector_count(0.5) == 0


def test_zero_vectors_rejected():
    with pytest.raises(InfeasibleInstanceError):
        sample_nonsmooth_instance(64, 0.5)


def test_small_dimension_names_minimum():
    with pytest.raises(InfeasibleInstanceError, match="minimum feasible d is 10"):
        sample_nonsmooth_instance(8, 1 / 960)


def test_structure(hard):
    assert hard.K == 6
    assert hard.V.count == 32
    assert np.max(np.abs(hard.X.vectors @ hard.V.vectors.T)) <= 1e-10
    for b in (hard.X, hard.V):
        assert np.max(np.abs(b.vectors @ b.vectors.T - np.eye(b.count))) <= 1e-10


def test_loss_at_zero(hard):
    assert nonsmooth_loss(hard, np.zeros(64)) == pytest.approx(2.0 * 0.2, abs=1e-15)


def test_minimizer_has_zero_loss(hard):
    w = nonsmooth_minimizer(hard)
    assert abs(nonsmooth_loss(hard, w)) <= 1e-9
    assert abs(np.linalg.norm(w) - 2.0 * 0.2 * np.sqrt(6)) <= 1e-12


def test_single_vector_minimizer():
    inst = sample_nonsmooth_instance(8, 1 / 480, rng=3)
    assert inst.K == 1
    assert np.allclose(nonsmooth_minimizer(inst), inst.X[0] / 1.0 * 480 * (1 / 480))


def test_tight_minimizer_norm_is_one():
    inst = sample_nonsmooth_instance(16, 1 / 960, rng=4)
    assert inst.K == 4
    assert abs(np.linalg.norm(nonsmooth_minimizer(inst)) - 1.0) <= 1e-12


def test_unit_vector_in_v():
    inst = sample_nonsmooth_instance(32, 1 / 480, rng=5)
    assert nonsmooth_loss(inst, inst.V[3]) == pytest.approx(2.0, abs=1e-12)


def test_convexity_and_lipschitz(hard):
    rng = np.random.default_rng(9)
    for _ in range(1000):
        w, v = rng.standard_normal((2, 64)) / 8
        t = rng.random()
        lw, lv = hard.loss(w), hard.loss(v)
        assert hard.loss(t * w + (1 - t) * v) <= t * lw + (1 - t) * lv + 1e-12
        assert abs(lw - lv) <= 2 * np.linalg.norm(w - v) + 1e-12


# smooth instance -----------------------------------------------------------------


def test_smooth_parameters():
    inst = sample_smooth_instance(8, 100, 0.1, rng=1)
    assert inst.N == 10
    assert inst.lam == pytest.approx(0.1 / 144)
    nz = inst.data[np.any(inst.data != 0, axis=1)]
    assert np.all(np.abs(nz) == 1 / np.sqrt(8))


def test_smooth_too_few_points():
    with pytest.raises(InfeasibleInstanceError):
        sample_smooth_instance(8, 5, 0.1)


def test_degenerate_theta():
    inst = sample_smooth_instance(4, 100, 0.1, rng=2, theta=np.ones(4))
    nz = inst.data[np.any(inst.data != 0, axis=1)]
    assert np.all(nz == 0.5)


def test_rademacher_extremes_and_range():
    assert np.all(rademacher_product_sample(np.ones(5), 0) == 1)
    assert np.all(rademacher_product_sample(-np.ones(5), 0) == -1)
    with pytest.raises(ValueError):
        rademacher_product_sample(np.array([1.5]))


def test_rademacher_mean_zero():
    x = rademacher_product_sample(np.zeros(3), 1, size=100_000)
    assert np.all(np.abs(x.mean(axis=0)) <= 0.01)


def test_rademacher_mean_theta():
    theta = np.array([-0.6, 0.0, 0.3, 0.9])
    x = rademacher_product_sample(theta, 2, size=10_000)
    sd = np.sqrt((1 - theta ** 2) / 10_000)
    assert np.all(np.abs(x.mean(axis=0) - theta) <= 3 * sd + 1e-12)


def test_smooth_identity_and_minimizer():
    inst = sample_smooth_instance(16, 400, 0.1, rng=3)
    ws = inst.minimizer()
    assert np.allclose(ws, -inst.data_mean / (2 * inst.lam))
    assert np.linalg.norm(ws) <= 72
    assert smooth_suboptimality(inst, ws) == (0.0, 0.0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        w = ws + rng.standard_normal(16)
        direct, ident = smooth_suboptimality(inst, w)
        assert abs(direct - ident) <= 1e-9 * abs(ident)


def test_one_dimensional_closed_form():
    inst = sample_smooth_instance(1, 50, 0.2, rng=4)
    mu = inst.data_mean[0]
    direct, ident = smooth_suboptimality(inst, np.zeros(1))
    assert ident == pytest.approx(mu ** 2 / (4 * inst.lam), rel=1e-12)
    assert direct == pytest.approx(ident, rel=1e-9)


def test_smooth_gradient_finite_difference():
    inst = sample_smooth_instance(6, 60, 0.2, rng=5)
    rng = np.random.default_rng(1)
    h = 1e-5
    for i in range(inst.n):
        w = rng.standard_normal(6)
        _, g, _ = inst.oracle_batch(w[None], [i])
        fd = np.array([(inst.oracle_batch((w + h * e)[None], [i])[0][0]
                        - inst.oracle_batch((w - h * e)[None], [i])[0][0]) / (2 * h)
                       for e in np.eye(6)])
        assert np.linalg.norm(fd - g[0]) <= 1e-6 * max(1.0, np.linalg.norm(g[0]))


# quadratic -------------------------------------------------------------------------


def test_quadratic_minimizer_and_gradient():
    q = sample_quadratic_instance(5, 30, curvature=2.0, rng=1)
    ws = q.minimizer()
    assert q.suboptimality(ws) == pytest.approx(0.0, abs=1e-15)
    w = np.full(5, 0.1)
    assert q.suboptimality(w) == pytest.approx(q.loss(w) - q.loss(ws), abs=1e-12)
    a, b = q.affine_terms()
    _, g, _ = q.oracle_batch(np.tile(w, (30, 1)), np.arange(30))
    assert np.allclose(g, a * w + b)


def test_quadratic_outside_minimizer_projected():
    q = QuadraticTestLoss(targets=np.array([[3.0, 0.0], [3.0, 0.0]]), curvature=1.0)
    assert np.allclose(q.minimizer(), [1.0, 0.0])
    assert q.suboptimality(np.array([0.0, 0.0])) > 0


# serialization -----------------------------------------------------------------------


@pytest.mark.parametrize("make", [
    lambda: sample_nonsmooth_instance(32, 0.2, rng=1, c=2.0, seed=1),
    lambda: sample_smooth_instance(8, 100, 0.1, rng=2, seed=2),
    lambda: sample_quadratic_instance(4, 9, rng=3, seed=3),
])
def test_round_trip_bit_exact(tmp_path, make):
    inst = make()
    path = save_instance(inst, tmp_path / "inst.bin")
    back = load_instance(path)
    assert type(back) is type(inst)
    for name in ("d", "n", "seed"):
        assert getattr(back, name) == getattr(inst, name)
    for attr in ("X", "V", "data", "theta", "targets"):
        if hasattr(inst, attr):
            a, b = getattr(inst, attr), getattr(back, attr)
            a = getattr(a, "vectors", a)
            b = getattr(b, "vectors", b)
            assert a.tobytes() == b.tobytes()
    for attr in ("alpha", "c", "lam", "curvature", "B", "L"):
        if hasattr(inst, attr) and not callable(getattr(inst, attr)):
            assert getattr(back, attr) == getattr(inst, attr)
    assert save_instance(back, tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not an instance")
    with pytest.raises(ValueError):
        load_instance(p)
