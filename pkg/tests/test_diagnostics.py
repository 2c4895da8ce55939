import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngd import data_gen as dg
from ngd import diagnostics as dgn
from ngd import engine as en
from ngd import losses as ls
from ngd import topology as tp


def problem(kind, m, n, seed, pattern="homogeneous"):
    ds = dg.generate(kind, m * n, seed)
    return ds, ls.ShardedProblem.from_partition(ds, dg.partition(ds, m, pattern, seed))


def test_mse_examples():
    assert dgn.mse(np.array([[1.0], [3.0]]), [2.0]) == 1.0
    assert dgn.mse(np.tile(dg.LINEAR_THETA0, (5, 1)), dg.LINEAR_THETA0) == 0.0
    assert dgn.mse(np.zeros((200, 8)), dg.LINEAR_THETA0) == pytest.approx(15.25)
    assert dgn.mse(en.NgdState(np.zeros((3, 8))), dg.LINEAR_THETA0) == pytest.approx(15.25)


def test_discrepancy_examples():
    ge = np.array([1.0, -2.0])
    assert dgn.discrepancy_to_global(np.tile(ge, (4, 1)), ge) == 0.0
    assert dgn.discrepancy_to_global(np.array([[4.0, 2.0]]), ge) == pytest.approx(5.0)


def test_heterogeneity_identical_shards():
    ds = dg.gen_logistic(40, 2)
    prob = ls.ShardedProblem.from_shards("logistic", [(ds.x, ds.y)] * 3)
    het = dgn.heterogeneity(prob, ds.theta0)
    assert het.se_sxx == pytest.approx(0.0, abs=1e-12)
    assert het.se_sxy == pytest.approx(0.0, abs=1e-12)
    g = ls.local_gradient("logistic", (ds.x, ds.y), ds.theta0)
    assert het.se_grad0 == pytest.approx(np.linalg.norm(g))


def test_heterogeneity_definition_by_loop():
    _, prob = problem("poisson", 6, 15, 3, "heterogeneous")
    theta0 = dg.POISSON_THETA0
    sxx = prob.sxx.mean(axis=0)
    sxy = prob.sxy.mean(axis=0)
    want_xx = np.sqrt(np.mean([np.trace((s - sxx) @ (s - sxx)) for s in prob.sxx]))
    want_xy = np.sqrt(np.mean([np.sum((s - sxy) ** 2) for s in prob.sxy]))
    want_g = np.sqrt(np.mean([np.sum(ls.local_gradient("poisson", prob.shard(m), theta0) ** 2) for m in range(6)]))
    het = dgn.heterogeneity(prob, theta0)
    assert het.se_sxx == pytest.approx(want_xx, rel=1e-12)
    assert het.se_sxy == pytest.approx(want_xy, rel=1e-12)
    assert het.se_grad0 == pytest.approx(want_g, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(dg.MODEL_KINDS))
def test_heterogeneity_invariant_to_within_shard_order(seed, kind):
    ds, prob = problem(kind, 4, 10, seed)
    rng = np.random.default_rng(seed)
    perm = np.stack([rng.permutation(10) for _ in range(4)])
    shuffled = ls.ShardedProblem(kind, np.take_along_axis(prob.x, perm[:, :, None], 1),
                                 np.take_along_axis(prob.y, perm, 1))
    a, b = dgn.heterogeneity(prob, ds.theta0), dgn.heterogeneity(shuffled, ds.theta0)
    assert a.se_sxx == pytest.approx(b.se_sxx, rel=1e-10)
    assert a.se_sxy == pytest.approx(b.se_sxy, rel=1e-10)
    assert a.se_grad0 == pytest.approx(b.se_grad0, rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(m=st.integers(2, 8), seed=st.integers(0, 10_000))
def test_metrics_invariant_to_client_reordering(m, seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((m, 3))
    perm = rng.permutation(m)
    t0 = rng.standard_normal(3)
    assert dgn.mse(theta[perm], t0) == pytest.approx(dgn.mse(theta, t0), rel=1e-12)
    assert dgn.discrepancy_to_global(theta[perm], t0) == pytest.approx(dgn.discrepancy_to_global(theta, t0), rel=1e-12)


def test_stable_solution_discrepancy_permutation_invariant():
    _, prob = problem("linear", 6, 20, 4, "heterogeneous")
    w = tp.to_weight_matrix(tp.build_fixed_degree(6, 2, 5)).entries
    perm = np.random.default_rng(0).permutation(6)
    permuted = ls.ShardedProblem("linear", prob.x[perm], prob.y[perm])
    ge = ls.global_estimator("linear", prob).theta
    a = dgn.discrepancy_to_global(en.stable_solution_ols(prob, w, 0.05).theta_star, ge)
    b = dgn.discrepancy_to_global(en.stable_solution_ols(permuted, w[np.ix_(perm, perm)], 0.05).theta_star, ge)
    assert a == pytest.approx(b, rel=1e-9)


def test_homogeneous_heterogeneity_shrinks_like_root_n():
    ratios = {"sxx": [], "sxy": []}
    for r in range(100):
        vals = {}
        for n in (50, 200):
            _, prob = problem("linear", 20, n, r)
            vals[n] = dgn.heterogeneity(prob, dg.LINEAR_THETA0)
        ratios["sxx"].append(vals[50].se_sxx / vals[200].se_sxx)
        ratios["sxy"].append(vals[50].se_sxy / vals[200].se_sxy)
    # quadrupling n halves a 1/sqrt(n) quantity
    for key in ratios:
        assert np.median(ratios[key]) == pytest.approx(2.0, rel=0.1)


@pytest.mark.parametrize("kind", ["linear", "poisson"])
def test_heterogeneous_gradient_spread_larger(kind):
    hom, het = [], []
    for r in range(100):
        ds = dg.generate(kind, 20 * 50, r)
        for pattern, out in (("homogeneous", hom), ("heterogeneous", het)):
            prob = ls.ShardedProblem.from_partition(ds, dg.partition(ds, 20, pattern, r))
            out.append(dgn.heterogeneity(prob, ds.theta0).se_grad0)
    assert np.median(het) > np.median(hom)


def test_logistic_label_sorting_adds_no_gradient_spread():
    # Sorting by label raises E||g_m||^2 by 4(1 - 1/n) E_y ||E[(sigma - y) x | y]||^2.  For the
    # symmetric, intercept-free logistic design E[(sigma - y) x | y] is proportional to
    # E[sigma (1 - sigma) x] = 0, so both partitions share the same expected spread.
    rng = np.random.default_rng(5)
    z = rng.multivariate_normal(np.zeros(6), dg.equicorrelated_covariance(6, 0.5), size=400_000)
    s = dg.logistic_prob(z, dg.LOGISTIC_THETA0)
    term = (s * (1 - s))[:, None] * z
    assert np.linalg.norm(term.mean(axis=0)) < 4 * np.sqrt(term.var(axis=0).sum() / z.shape[0])


def test_curvature_bounds_linear():
    _, prob = problem("linear", 10, 30, 1)
    k = dgn.curvature_bounds(prob, np.zeros(8))
    assert k["kappa1"] == pytest.approx(np.linalg.eigvalsh(prob.sxx.mean(0))[0])
    assert k["kappa2"] == pytest.approx(max(np.linalg.eigvalsh(s)[-1] for s in prob.sxx))
    assert k["kappa3"] <= k["kappa1"] <= k["kappa2"] == k["kappa4"]


def test_bound_report_identical_shards_consensus():
    ds = dg.gen_linear(60, 5)
    prob = ls.ShardedProblem.from_shards("linear", [(ds.x, ds.y)] * 4)
    ge = ls.global_estimator("linear", ds).theta
    w = tp.to_weight_matrix(tp.build_circle(4, 1))
    traj = en.run(prob, w, en.RunConfig(alpha=0.05, max_iterations=10, init=np.tile(ge, (4, 1)), keep_states=True),
                  ds.theta0, ge)
    rep = dgn.bound_report(prob, w, 0.05, traj, ge, ds.theta0)
    assert rep.lhs_discrepancy == pytest.approx(0.0, abs=1e-12)
    assert rep.hetero_factor == 0.0
    assert rep.delta0_max == pytest.approx(0.0, abs=1e-14)
    assert rep.opt_error_at_t == pytest.approx(0.0, abs=1e-14)
    assert rep.global_stat_error == pytest.approx(np.linalg.norm(ge - ds.theta0))


def test_bound_report_fields_and_json():
    ds, prob = problem("logistic", 10, 50, 2, "heterogeneous")
    ge = ls.global_estimator("logistic", ds).theta
    w = tp.to_weight_matrix(tp.build_circle(10, 1))
    traj = en.run(prob, w, en.RunConfig(alpha=0.05, max_iterations=200), ds.theta0, ge)
    rep = dgn.bound_report(prob, w, 0.05, traj, ge, ds.theta0)
    d = json.loads(json.dumps(rep.to_dict()))
    for key in ("lhs_discrepancy", "bound_factor", "hetero_factor", "kappa3", "kappa4", "delta0_max",
                "opt_error_at_t", "global_stat_error", "linear_bound_condition", "general_bound_condition"):
        assert key in d
    assert d["linear_bound_condition"] is None
    assert rep.bound_factor == pytest.approx(0.05)  # circle has SE(W) = 0
    assert rep.iteration == 200
    assert rep.delta0_max == pytest.approx(np.linalg.norm(ge))
    assert all(d[k] >= 0 for k in ("lhs_discrepancy", "hetero_factor", "delta0_max", "opt_error_at_t"))


def test_opt_error_nonincreasing_in_t():
    ds, prob = problem("linear", 8, 40, 3)
    ge = ls.global_estimator("linear", ds).theta
    w = tp.to_weight_matrix(tp.build_circle(8, 2))
    vals = [dgn.bound_report(prob, w, 0.05, np.zeros((8, 8)), ge, ds.theta0, iteration=t).opt_error_at_t
            for t in range(0, 200, 20)]
    assert np.all(np.diff(vals) <= 0)


def test_degenerate_curvature_flagged():
    # n < p: local Hessians are singular, so kappa3 = 0
    ds = dg.gen_linear(4 * 5, 0, p=10)
    prob = ls.ShardedProblem.from_partition(ds, dg.partition_homogeneous(ds, 4, 0))
    w = tp.to_weight_matrix(tp.build_circle(4, 1))
    rep = dgn.bound_report(prob, w, 0.01, np.zeros((4, 10)), np.zeros(10), ds.theta0)
    assert rep.degenerate_curvature and not rep.general_bound_condition


def test_bound_factor_topology_ordering():
    m, alpha = 200, 0.01
    ds, prob = problem("linear", m, 50, 0)
    ge = ls.global_estimator("linear", ds).theta
    z = np.zeros((m, 8))
    circle = dgn.bound_report(prob, tp.to_weight_matrix(tp.build_circle(m, 1)), alpha, z, ge, ds.theta0)
    central = dgn.bound_report(prob, tp.to_weight_matrix(tp.build_central_client(m)), alpha, z, ge, ds.theta0)
    for seed in range(5):
        fixed = dgn.bound_report(prob, tp.to_weight_matrix(tp.build_fixed_degree(m, 2, seed)), alpha, z, ge,
                                 ds.theta0)
        assert circle.bound_factor < fixed.bound_factor < central.bound_factor


@pytest.mark.parametrize("pattern", dg.PATTERNS)
def test_discrepancy_shrinks_with_alpha(pattern):
    alphas = (0.05, 0.02, 0.01, 0.005)
    res = {a: [] for a in alphas}
    w = tp.to_weight_matrix(tp.build_circle(40, 1))
    for r in range(100):
        ds, prob = problem("linear", 40, 50, r, pattern)
        ge = ls.global_estimator("linear", ds).theta
        for a in alphas:
            res[a].append(dgn.discrepancy_to_global(en.stable_solution_ols(prob, w, a).theta_star, ge))
    med = [np.median(res[a]) for a in alphas]
    assert all(later <= earlier * 1.02 for earlier, later in zip(med, med[1:]))


def test_phase_helpers():
    e = np.array([100.0, 50.0, 25.0, 12.0, 5.0, 1.1, 1.0, 1.0])
    mask = dgn.initial_phase(e)
    assert mask.tolist() == [True, True, True, True, False, False, False, False]
    np.testing.assert_allclose(dgn.contraction_rates(e[:3]), [0.5, 0.5])
    assert dgn.fit_bound_constant([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], [1.0, 1.0, 2.0]) == pytest.approx(1.5)
