import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngd import data_gen as dg
from ngd import engine as en
from ngd import losses as ls
from ngd import topology as tp
from ngd.errors import Diverged, InvalidArgument, NumericalFailure, SingularOmega

SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


def linear_problem(m, n, seed, pattern="homogeneous", p=8):
    ds = dg.gen_linear(m * n, seed, p=p)
    return ds, ls.ShardedProblem.from_partition(ds, dg.partition(ds, m, pattern, seed))


def scalar_shards(a, b):
    return [ls.LocalSuffStats(np.array([[ai]]), np.array([bi])) for ai, bi in zip(a, b)]


def test_neighborhood_average_examples():
    theta = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(en.neighborhood_average(en.NgdState(theta), SWAP), theta[::-1])
    same = np.tile([[5.0, -1.0]], (4, 1))
    w = tp.to_weight_matrix(tp.build_fixed_degree(4, 2, 0))
    np.testing.assert_allclose(en.neighborhood_average(en.NgdState(same), w), same, atol=1e-15)
    r = np.array([[1.0], [2.0], [4.0]])
    avg = en.neighborhood_average(en.NgdState(r), tp.to_weight_matrix(tp.build_central_client(3)))
    np.testing.assert_allclose(avg.ravel(), [3.0, 1.0, 1.0])


def test_step_with_zero_alpha_is_averaging():
    _, prob = linear_problem(5, 20, 1)
    w = tp.to_weight_matrix(tp.build_circle(5, 2))
    theta = np.random.default_rng(0).standard_normal((5, 8))
    out = en.ngd_step(en.NgdState(theta, 3), w, prob, 0.0)
    assert out.iteration == 4
    np.testing.assert_array_equal(out.theta_all, en.neighborhood_average(en.NgdState(theta), w))


def test_first_step_from_zero():
    _, prob = linear_problem(10, 30, 2)
    w = tp.to_weight_matrix(tp.build_circle(10, 1))
    out = en.ngd_step(en.NgdState(np.zeros((10, 8))), w, prob, 0.01)
    np.testing.assert_allclose(out.theta_all, 0.01 * prob.sxy, atol=1e-15)


def test_identical_shards_reduce_to_gradient_descent():
    ds = dg.gen_linear(30, 3)
    prob = ls.ShardedProblem.from_shards("linear", [(ds.x, ds.y), (ds.x, ds.y)])
    alpha = 0.05
    theta = np.zeros(8)
    state = en.NgdState(np.zeros((2, 8)))
    for _ in range(20):
        state = en.ngd_step(state, SWAP, prob, alpha)
        theta = theta - alpha * ls.local_gradient("linear", (ds.x, ds.y), theta)
    np.testing.assert_allclose(state.theta_all, np.vstack([theta, theta]), atol=1e-12)


def test_consensus_invariance_at_shared_minimizer():
    ds = dg.gen_logistic(60, 4)
    shard = (ds.x, ds.y)
    prob = ls.ShardedProblem.from_shards("logistic", [shard] * 4)
    opt = ls.global_estimator("logistic", shard).theta
    w = tp.to_weight_matrix(tp.build_fixed_degree(4, 2, 9))
    out = en.ngd_step(en.NgdState(np.tile(opt, (4, 1))), w, prob, 0.3)
    np.testing.assert_allclose(out.theta_all, np.tile(opt, (4, 1)), atol=1e-10)


def test_step_divergence_guard():
    _, prob = linear_problem(2, 10, 0)
    with pytest.raises(Diverged) as info:
        en.ngd_step(en.NgdState(np.full((2, 8), 1e9), 6), SWAP, prob, 0.01)
    assert info.value.iteration == 7


def test_run_records_initial_and_final_snapshots():
    ds, prob = linear_problem(4, 25, 5)
    w = tp.to_weight_matrix(tp.build_circle(4, 1))
    traj = en.run(prob, w, en.RunConfig(alpha=0.01, max_iterations=23, record_every=10), ds.theta0)
    assert traj.iterations.tolist() == [0, 10, 20, 23]
    assert traj.mse[0] == pytest.approx(np.sum(ds.theta0**2))
    assert traj.final_state.iteration == 23
    assert traj.spread[0] == 0.0


def test_run_zero_alpha_limit_is_constant():
    # alpha must be positive in a RunConfig; a consensus start with tiny alpha barely moves
    _, prob = linear_problem(4, 25, 5)
    w = tp.to_weight_matrix(tp.build_circle(4, 1))
    start = np.tile(np.arange(8.0), (4, 1))
    state = en.NgdState(start)
    for _ in range(5):
        state = en.ngd_step(state, w, prob, 0.0)
    np.testing.assert_array_equal(state.theta_all, start)


def test_run_raises_on_divergence():
    _, prob = linear_problem(4, 25, 5)
    w = tp.to_weight_matrix(tp.build_circle(4, 1))
    alpha = 3 * ls.max_stable_lr(prob.suff_stats())
    with pytest.raises(Diverged):
        en.run(prob, w, en.RunConfig(alpha=alpha, max_iterations=5000))


def test_run_batch_isolates_divergent_group():
    ds, prob = linear_problem(4, 25, 5)
    w = tp.to_weight_matrix(tp.build_circle(4, 1))
    big = ls.ShardedProblem.concat([prob, ls.ShardedProblem("linear", prob.x * 30, prob.y)])
    bw = en.block_diagonal([w, w])
    bt = en.run_batch(big, bw, en.RunConfig(alpha=0.05, max_iterations=400, record_every=100), groups=2)
    assert bt.diverged_at[0] == -1 and bt.diverged_at[1] > 0
    assert np.all(np.isfinite(bt.mse[:, 0]))
    assert np.isnan(bt.mse[-1, 1])
    # the healthy group matches a solo run
    solo = en.run(prob, w, en.RunConfig(alpha=0.05, max_iterations=400, record_every=100))
    np.testing.assert_allclose(bt.mse[:, 0], solo.mse, rtol=1e-12)


def test_run_config_validation():
    for kwargs in ({"alpha": 0.0, "max_iterations": 1}, {"alpha": 0.1, "max_iterations": 0},
                   {"alpha": 0.1, "max_iterations": 1, "divergence_guard": -1},
                   {"alpha": 0.1, "max_iterations": 1, "init": "random"}):
        with pytest.raises(InvalidArgument):
            en.RunConfig(**kwargs)


def test_stable_solution_hand_formula():
    a1, a2, b1, b2, alpha = 1.3, 0.7, 0.4, -1.1, 0.2
    sol = en.stable_solution_ols(scalar_shards([a1, a2], [b1, b2]), SWAP, alpha).theta_star.ravel()
    den = 1 - (1 - alpha * a1) * (1 - alpha * a2)
    t1 = alpha * ((1 - alpha * a1) * b2 + b1) / den
    t2 = alpha * ((1 - alpha * a2) * b1 + b2) / den
    assert sol[0] == pytest.approx(t1, abs=1e-12)
    assert sol[1] == pytest.approx(t2, abs=1e-12)


def test_stable_solution_identical_shards_is_ols():
    ds = dg.gen_linear(40, 8)
    prob = ls.ShardedProblem.from_shards("linear", [(ds.x, ds.y)] * 5)
    w = tp.to_weight_matrix(tp.build_fixed_degree(5, 2, 3))
    ols = np.linalg.lstsq(ds.x, ds.y, rcond=None)[0]
    for alpha in (0.01, 0.2):
        sol = en.stable_solution_ols(prob, w, alpha)
        np.testing.assert_allclose(sol.theta_star, np.tile(ols, (5, 1)), atol=1e-9)


def test_stable_solution_is_fixed_point_of_step():
    _, prob = linear_problem(6, 20, 11, "heterogeneous")
    w = tp.to_weight_matrix(tp.build_fixed_degree(6, 2, 1))
    sol = en.stable_solution_ols(prob, w, 0.05).theta_star
    out = en.ngd_step(en.NgdState(sol), w, prob, 0.05)
    np.testing.assert_allclose(out.theta_all, sol, atol=1e-10)


def test_stable_solution_singular_omega():
    # zero curvature with a permutation W: Omega = I - W is singular
    shards = scalar_shards([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(SingularOmega):
        en.stable_solution_ols(shards, SWAP, 0.1)


@pytest.mark.parametrize("seed", range(4))
def test_stable_solution_matches_fixed_point_iteration(seed):
    rng = np.random.default_rng(seed)
    shards = []
    for _ in range(3):
        x = rng.standard_normal((6, 2))
        s = ls.suff_stats(x, rng.standard_normal(6))
        shards.append(s)
    w = tp.to_weight_matrix(tp.build_circle(3, 1)).entries
    alpha = 0.5 * ls.max_stable_lr(shards)
    b = en.contraction_operator(shards, w, alpha)
    rhs = alpha * np.concatenate([s.sigma_xy for s in shards])
    v = np.zeros(6)
    for _ in range(100_000):
        v = b @ v + rhs
    sol = en.stable_solution_ols(shards, w, alpha).theta_star.ravel()
    assert np.abs(sol - v).max() < 1e-8


@settings(max_examples=25, deadline=None)
@given(m=st.integers(2, 5), p=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_matrix_form_equivalence(m, p, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, 4, p))
    y = rng.standard_normal((m, 4))
    prob = ls.ShardedProblem("linear", x, y)
    adj = tp.build_fixed_degree(m, max(1, m // 2), seed)
    w = tp.to_weight_matrix(adj)
    alpha = 0.3 * ls.max_stable_lr(prob.suff_stats())
    b = en.contraction_operator(prob, w, alpha)
    rhs = alpha * prob.sxy.ravel()
    state = en.NgdState(rng.standard_normal((m, p)))
    v = state.theta_all.ravel().copy()
    for _ in range(15):
        state = en.ngd_step(state, w, prob, alpha)
        v = b @ v + rhs
        np.testing.assert_allclose(state.theta_all.ravel(), v, atol=1e-12, rtol=0)


def test_spectral_radius_examples():
    shards = scalar_shards([1.0, 1.0], [0.0, 0.0])
    assert en.contraction_spectral_radius(shards, SWAP, 0.5) == pytest.approx(0.5, abs=1e-14)
    np.testing.assert_allclose(en.contraction_operator(shards, SWAP, 0.5), [[0, 0.5], [0.5, 0]])
    w = tp.to_weight_matrix(tp.build_circle(6, 1))
    _, prob = linear_problem(6, 10, 0)
    assert en.contraction_spectral_radius(prob, w, 0.0) == pytest.approx(1.0, abs=1e-12)
    rep = en.overparam_check(prob, w, 0.0)
    assert not rep.converges


@settings(max_examples=20, deadline=None)
@given(m=st.integers(2, 8), p=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_power_iteration_matches_dense(m, p, seed):
    if m * p > 64:
        p = 64 // m
    rng = np.random.default_rng(seed)
    prob = ls.ShardedProblem("linear", rng.standard_normal((m, 5, p)), rng.standard_normal((m, 5)))
    w = tp.to_weight_matrix(tp.build_fixed_degree(m, max(1, (m - 1) // 2), seed))
    alpha = rng.uniform(0.1, 1.5) * ls.max_stable_lr(prob.suff_stats())
    dense = en.contraction_spectral_radius(prob, w, alpha, method="dense")
    power = en.contraction_spectral_radius(prob, w, alpha, method="power")
    assert power == pytest.approx(dense, abs=1e-6)


def test_power_iteration_reports_failure():
    rot = np.array([[0.0, -1.0], [1.0, 0.0]]) * 2.0

    def apply(v):
        return np.kron(np.eye(3), rot) @ v + 1e-3 * np.roll(v, 1, axis=0)

    with pytest.raises(NumericalFailure) as info:
        en.subspace_spectral_radius(apply, 6, block=1, max_iter=50)
    assert info.value.best_estimate is not None


def test_reference_setup_radius_below_one_at_safe_rate():
    _, prob = linear_problem(200, 50, 0, "heterogeneous")
    w = tp.to_weight_matrix(tp.build_circle(200, 1))
    alpha = 0.9 * ls.max_stable_lr(prob.suff_stats())
    radius, method = en.contraction_spectrum(prob, w, alpha)
    assert method == "dense" and radius < 1


@pytest.mark.slow
def test_reference_setup_run_reaches_stable_solution():
    ds, prob = linear_problem(200, 50, 3, "heterogeneous")
    w = tp.to_weight_matrix(tp.build_circle(200, 1))
    sol = en.stable_solution_ols(prob, w, 0.005).theta_star
    traj = en.run(prob, w, en.RunConfig(alpha=0.005, max_iterations=100_000, record_every=100_000,
                                        track_spread=False))
    assert np.abs(traj.final_state.theta_all - sol).max() < 1e-8


def test_overparam_thresholds():
    _, prob = linear_problem(30, 25, 4, p=30)
    central = tp.to_weight_matrix(tp.build_central_client(30))
    thr = en.central_client_threshold(prob)
    below = en.overparam_check(prob, central, 0.95 * thr)
    above = en.overparam_check(prob, central, 2.0 * thr)
    assert below.leading_term_case == "central_client"
    assert below.alpha_threshold == pytest.approx(thr)
    assert below.leading_term_radius < 1 <= above.leading_term_radius
    circle = tp.to_weight_matrix(tp.build_circle(30, 1))
    small = en.overparam_check(prob, circle, 0.01 * en.circle_threshold(prob))
    assert small.leading_term_case == "circle_d1"
    assert small.leading_term_radius < 1 and small.converges
