import math

import numpy as np
import pytest

from fjsda import importance as imp
from fjsda import theory, toy
from fjsda.importance import ImportanceConfig, UModel, VModel, l_sup, l_unsup
from fjsda.nets import Optimizer

from conftest import central_difference, rel_err

LOG4 = 2 * math.log(2)


def models(K=3, seed=0):
    rng = np.random.default_rng(seed)
    U = UModel.init(K, (5,), rng=rng)
    U.log_scores = rng.normal(size=K)
    return U, VModel.init((4,), rng=rng)


def unit_models(K=2):
    U, V = models(K)
    U.C.params[:] = 0.0
    U.log_scores[:] = 0.0
    V.net.params[:] = 0.0
    return U, V


def flat_loss(U, V, fn):
    """Loss as a function of the concatenated parameter vector."""
    theta = imp._bind(U, V)

    def f(t):
        theta[:] = t
        return fn()[0]
    return theta, f


# ------------------------------------------------------------------- models


def test_u_is_positive_mixture(rng):
    U, _ = models(4)
    x = rng.uniform(-1, 1, 50)
    p = U.assignments(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(U(x), p @ np.exp(U.log_scores))
    assert np.all(U(x) > 0)


def test_k1_is_constant(rng):
    U, _ = models(1)
    x = rng.uniform(-1, 1, 20)
    np.testing.assert_allclose(U(x), math.exp(U.log_scores[0]))


def test_v_is_positive_and_shape_preserving(rng):
    _, V = models()
    y = rng.uniform(-1, 1, (6, 4))
    assert V(y).shape == (6, 4) and np.all(V(y) > 0)


def test_fold_scale():
    _, V = models()
    y = np.linspace(-1, 1, 7)
    before = V(y)
    V.fold_scale(3.0)
    np.testing.assert_allclose(V(y), 3 * before, rtol=1e-12)


# ------------------------------------------------------------- loss values


def test_unit_factors_give_2log2(rng):
    U, V = unit_models()
    loss, _ = l_sup(U, V, rng.normal(size=7), rng.normal(size=7), rng.normal(size=5), rng.normal(size=5))
    assert loss == pytest.approx(LOG4, abs=1e-12)
    assert loss == pytest.approx(1.386294, abs=1e-6)
    loss, _ = l_unsup(U, V, rng.normal(size=7), rng.normal(size=5), rng.normal(size=(7, 3)), rng.normal(size=(5, 3)))
    assert loss == pytest.approx(LOG4, abs=1e-12)


def test_unsup_with_unit_v_is_data_only(rng):
    U, V = models()
    V.net.params[:] = 0.0
    xs, xt = rng.normal(size=9), rng.normal(size=6)
    loss, _ = l_unsup(U, V, xs, xt, rng.normal(size=(9, 4)), rng.normal(size=(6, 4)))
    expected = np.mean(np.log1p(U(xs))) + np.mean(np.log1p(1 / U(xt)))
    assert loss == pytest.approx(expected, abs=1e-12)


def test_empty_batches_rejected():
    U, V = models()
    with pytest.raises(ValueError):
        l_sup(U, V, [], [], [0.1], [0.2])


def test_non_finite_ratio():
    U, V = models()
    U.log_scores[:] = np.inf
    with pytest.raises(imp.NonFiniteLoss):
        l_sup(U, V, [0.1], [0.2], [0.1], [0.2])


def test_floor_guards_reciprocal():
    U, V = unit_models()
    U.log_scores[:] = -800.0
    loss, grads = l_sup(U, V, [0.1], [0.2], [0.1], [0.2])
    assert math.isfinite(loss) and loss == pytest.approx(math.log1p(1e12))
    assert all(np.all(np.isfinite(g)) for g in grads)


# --------------------------------------------------------------- gradients


@pytest.mark.parametrize("entropy_weight", [0.0, 0.3])
def test_l_sup_gradient(entropy_weight):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10):
        U, V = models(int(rng.integers(1, 5)), int(rng.integers(1000)))
        xs, ys, xt, yt = (rng.uniform(-1, 1, n) for n in (6, 6, 4, 4))
        ws = rng.random(6)
        fn = lambda: l_sup(U, V, xs, ys, xt, yt, ws=ws, entropy_weight=entropy_weight)
        theta, f = flat_loss(U, V, fn)
        g = np.concatenate(fn()[1])
        fd = central_difference(f, theta.copy(), h=1e-6)
        worst = max(worst, rel_err(g, fd))
    assert worst <= 1e-4


def test_l_unsup_gradient():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10):
        U, V = models(int(rng.integers(1, 5)), int(rng.integers(1000)))
        xs, xt = rng.uniform(-1, 1, 5), rng.uniform(-1, 1, 4)
        ys_m, yt_m = rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (4, 3))
        fn = lambda: l_unsup(U, V, xs, xt, ys_m, yt_m)
        theta, f = flat_loss(U, V, fn)
        g = np.concatenate(fn()[1])
        fd = central_difference(f, theta.copy(), h=1e-6)
        worst = max(worst, rel_err(g, fd))
    assert worst <= 1e-4


# ------------------------------------------------------------------- gauge


@pytest.mark.parametrize("k", [0.5, 2.0, 10.0])
def test_gauge_invariance(k, rng):
    U, V = models(3)
    xs, ys, xt, yt = (rng.uniform(-1, 1, 20) for _ in range(4))
    ys_m, yt_m = rng.uniform(-1, 1, (20, 4)), rng.uniform(-1, 1, (20, 4))
    before = (l_sup(U, V, xs, ys, xt, yt)[0], l_unsup(U, V, xs, xt, ys_m, yt_m)[0],
              imp.FittedImportance(U, V).weights(xs, ys))
    U.log_scores += math.log(k)
    V.fold_scale(1 / k)
    after = (l_sup(U, V, xs, ys, xt, yt)[0], l_unsup(U, V, xs, xt, ys_m, yt_m)[0],
             imp.FittedImportance(U, V).weights(xs, ys))
    assert abs(before[0] - after[0]) <= 1e-12
    assert abs(before[1] - after[1]) <= 1e-12
    assert np.max(np.abs(before[2] - after[2])) <= 1e-12


# ---------------------------------------------------------- normalization


def test_normalize_factors(rng):
    U, V = models()
    x, y = rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200)
    imp.normalize_factors(U, V, x, y)
    assert np.mean(U(x) * V(y)) == pytest.approx(1.0, abs=1e-6)
    assert imp.normalize_factors(U, V, x, y) == pytest.approx(1.0, abs=1e-6)
    V.fold_scale(3.0)
    assert imp.normalize_factors(U, V, x, y) == pytest.approx(1 / 3, rel=1e-9)


# ------------------------------------------------------- discrete checks


def random_fjs_pair(rng, n=3):
    ps = rng.dirichlet(np.ones(n * n)).reshape(n, n)
    return ps, theory.fjs_target(ps, np.exp(rng.normal(size=n)), np.exp(rng.normal(size=n)))


def test_discrete_sup_recovers_importance():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ps, pt = random_fjs_pair(rng)
        u, v, loss = imp.fit_discrete(ps, pt, "sup")
        w = pt / ps
        assert np.max(np.abs(np.outer(u, v) - w) / w) <= 1e-3
        assert loss == pytest.approx(theory.jsd_bound(ps.ravel(), pt.ravel()), abs=1e-9)


def test_discrete_unsup_matches_marginals():
    rng = np.random.default_rng(1)
    for _ in range(50):
        ps = rng.dirichlet(np.ones(9)).reshape(3, 3)
        pt = rng.dirichlet(np.ones(9)).reshape(3, 3)
        u, v, _ = imp.fit_discrete(ps, pt, "unsup")
        np.testing.assert_allclose((ps * np.outer(u, v)).sum(axis=1), pt.sum(axis=1), atol=1e-3)


def test_discrete_gradients():
    rng = np.random.default_rng(4)
    for fn in (imp._grad_sup, imp._grad_unsup):
        ps, pt = random_fjs_pair(rng)
        theta = rng.normal(size=6)
        g = fn(theta, ps, pt, 3)[1]
        fd = central_difference(lambda t: fn(t, ps, pt, 3)[0], theta, h=1e-6)
        assert rel_err(g, fd) <= 1e-6


def test_collapse_witness():
    src, tgt = toy.quadrant_tables()
    ps, pt = src.p, tgt.p
    gt = toy.ground_truth_importance()
    true = imp.discrete_l_unsup(np.log([gt.u_rich, gt.u_poor]), np.log([gt.v_healthy, gt.v_unhealthy]), ps, pt)
    collapsed = imp.discrete_l_unsup(np.log(pt.sum(1) / ps.sum(1)), np.zeros(2), ps, pt)
    assert abs(true - collapsed) <= 1e-9


def test_discrete_lower_bound(rng):
    ps, pt = random_fjs_pair(rng)
    floor = theory.jsd_bound(ps.ravel(), pt.ravel())
    for _ in range(200):
        assert imp.discrete_l_sup(rng.normal(size=3), rng.normal(size=3), ps, pt) >= floor - 1e-12


def test_weighted_batches_recover_toy_table():
    # the four quadrant centres as weighted samples of the two tables
    src, tgt = toy.quadrant_tables()
    x = np.array([0.5, 0.5, -0.5, -0.5])
    y = np.array([0.5, -0.5, 0.5, -0.5])
    U, V = models(2, seed=1)
    theta = imp._bind(U, V)
    opt = Optimizer(theta.size, "adam", 1e-2)
    for _ in range(6000):
        _, grads = l_sup(U, V, x, y, x, y, ws=src.p.ravel(), wt=tgt.p.ravel())
        opt.step(theta, np.concatenate(grads))
    np.testing.assert_allclose(U(x) * V(y), [0.875, 0.4375, 3.5, 1.75], rtol=1e-3)


def test_true_factor_loss_is_jsd_bound():
    src, tgt = toy.quadrant_tables()
    gt = toy.ground_truth_importance()
    value = imp.discrete_l_sup(np.log([gt.u_rich, gt.u_poor]), np.log([gt.v_healthy, gt.v_unhealthy]), src.p, tgt.p)
    assert value == pytest.approx(theory.jsd_bound(src.p.ravel(), tgt.p.ravel()), abs=1e-12)
    # Monte-Carlo estimate of the same value from samples
    s = toy.sample_source(seed=0)
    t = toy.sample_target(n=20000, seed=0)
    mc = np.mean(np.log1p(gt.w(s.x, s.y))) + np.mean(np.log1p(1 / gt.w(t.x, t.y)))
    assert mc == pytest.approx(value, abs=0.01)


# ------------------------------------------------------------ conditionals


def test_binned_conditional_samples_inside_bins(rng):
    x = rng.uniform(-1, 1, 500)
    y = np.where(x >= 0, rng.uniform(x - 1, 1), rng.uniform(-1, x + 1))
    cond = imp.BinnedConditional.fit(x, y, n_bins=10, config=imp.ClassifierConfig(steps=300))
    s = cond.sample(np.array([0.9, -0.9]), 400, np.random.default_rng(0))
    assert s.shape == (2, 400) and np.all(np.abs(s) <= 1)
    # mostly within the true slice near the corners
    assert np.mean(s[0] >= -0.2) > 0.85 and np.mean(s[1] <= 0.2) > 0.85


def test_vtilde_is_deterministic(rng):
    x = rng.uniform(-1, 1, 200)
    cond = imp.BinnedConditional.fit(x, x / 2, n_bins=4, config=imp.ClassifierConfig(steps=50))
    est = imp.VTildeEstimator(cond, mc_samples=8, seed=3)
    _, V = models()
    np.testing.assert_array_equal(est(V, x[:10]), est(V, x[:10]))
    with pytest.raises(ValueError):
        imp.VTildeEstimator(cond, mc_samples=0)


def test_constant_v_gives_constant_vtilde(rng):
    x = rng.uniform(-1, 1, 100)
    cond = imp.BinnedConditional.fit(x, x, n_bins=4, config=imp.ClassifierConfig(steps=50))
    _, V = unit_models()
    np.testing.assert_allclose(imp.VTildeEstimator(cond, 5)(V, x), 1.0)


# --------------------------------------------------------------- fitting


FAST = ImportanceConfig(steps=1500)


def test_fit_supervised_no_shift():
    t1 = toy.sample_target(n=2000, seed=1)
    t2 = toy.sample_target(n=2000, seed=2)
    f = imp.fit_supervised(t1.x, t1.y, t2.x, t2.y, FAST)
    held = toy.sample_target(n=1000, seed=3)
    w = f(held.x, held.y)
    assert np.mean((w >= 0.8) & (w <= 1.25)) >= 0.95


@pytest.fixture(scope="module")
def supervised_fit():
    s = toy.sample_source(seed=0)
    t = toy.sample_target(seed=100)
    return s, t, imp.fit_supervised(s.x, s.y, t.x, t.y, ImportanceConfig(seed=0))


def test_fit_supervised_toy(supervised_fit):
    s, _, f = supervised_fit
    prod = imp.quadrant_products(f, s.x, s.y)
    assert np.all(np.abs(prod / [0.875, 0.4375, 3.5, 1.75] - 1) <= 0.15)
    assert np.mean(f(s.x, s.y)) == pytest.approx(1.0, abs=1e-6)


def test_fit_supervised_gauge_probe(supervised_fit):
    s, t, f = supervised_fit
    U, V = imp._init_models(ImportanceConfig(seed=0), None)
    U.log_scores += math.log(2)
    V.fold_scale(0.5)
    g = imp.fit_supervised(s.x, s.y, t.x, t.y, ImportanceConfig(seed=0), init=(U, V))
    a, b = imp.quadrant_products(f, s.x, s.y), imp.quadrant_products(g, s.x, s.y)
    assert np.max(np.abs(a / b - 1)) <= 0.02


def test_fit_unsupervised_k1_attributes_shift_to_v():
    s = toy.sample_source(seed=0)
    t = toy.sample_target(seed=100)
    f = imp.fit_unsupervised(s.x, s.y, t.x, ImportanceConfig(K=1, steps=300))
    x = np.linspace(-1, 1, 11)
    assert np.ptp(f.U(x)) == 0.0


def test_checkpoint_roundtrip(tmp_path, rng):
    U, V = models()
    f = imp.FittedImportance(U, V)
    f.save(tmp_path / "f.json")
    g = imp.FittedImportance.load(tmp_path / "f.json")
    x, y = rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 30)
    np.testing.assert_array_equal(f(x, y), g(x, y))
