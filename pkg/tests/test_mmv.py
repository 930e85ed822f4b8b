import numpy as np
import pytest

from csinv import mmv
from csinv.errors import CsinvError
from _oracles import (
    bpdn_soft_threshold,
    project_group_l1_bisection,
    slow_projected_gradient,
)


def _random_instance(rng, m, n_groups, p, group_size=3, sparsity=0):
    d = group_size * n_groups
    phi = (rng.standard_normal((m, d)) + 1j * rng.standard_normal((m, d))) / np.sqrt(m)
    j = np.zeros((d, p), complex)
    if sparsity:
        for k in rng.choice(n_groups, sparsity, replace=False):
            for c in range(group_size):
                j[c * n_groups + k] = rng.standard_normal(p) + 1j * rng.standard_normal(p)
    return phi, j


# ---------------------------------------------------------------------------
# group norms and residuals


def test_group_norm_zero():
    assert mmv.group_norm(np.zeros((12, 3), complex)) == 0.0


def test_group_norm_single_entry():
    j = np.zeros((6, 2), complex)
    j[4, 1] = 3 + 4j
    assert mmv.group_norm(j, n_groups=2) == pytest.approx(5.0, rel=1e-15)


def test_group_norm_additive_over_groups():
    # two groups whose blocks each have norm 2 sum to 4
    j = np.zeros((6, 1), complex)
    j[0] = 2.0  # group 0 (rows 0, 2, 4 under component-major layout with N=2)
    j[3] = 2.0  # group 1
    assert mmv.group_norm(j, n_groups=2) == pytest.approx(4.0, rel=1e-15)


def test_residual_zero_iterate():
    rng = np.random.default_rng(0)
    phi, _ = _random_instance(rng, 8, 5, 2)
    f = rng.standard_normal((8, 2)) + 1j * rng.standard_normal((8, 2))
    assert mmv.residual(np.zeros((15, 2), complex), phi, f) == pytest.approx(
        np.linalg.norm(f), rel=1e-14
    )


def test_residual_exact_data():
    rng = np.random.default_rng(1)
    phi, j = _random_instance(rng, 9, 4, 2, sparsity=2)
    f = phi @ j
    assert mmv.residual(j, phi, f) <= 1e-12 * np.linalg.norm(f)


def test_residual_single_column_matches_lstsq_form():
    rng = np.random.default_rng(2)
    phi, _ = _random_instance(rng, 7, 4, 1)
    x = rng.standard_normal((12, 1)) + 1j * rng.standard_normal((12, 1))
    f = rng.standard_normal((7, 1)) + 1j * rng.standard_normal((7, 1))
    assert mmv.residual(x, phi, f) == pytest.approx(
        np.linalg.norm(f[:, 0] - phi @ x[:, 0]), rel=1e-14
    )


# ---------------------------------------------------------------------------
# projection


def test_project_inside_ball_unchanged():
    rng = np.random.default_rng(3)
    j = rng.standard_normal((9, 2)) + 1j * rng.standard_normal((9, 2))
    tau = mmv.group_norm(j, 3) * 1.01
    assert np.array_equal(mmv.project_group_l1(j, tau, 3), j)


def test_project_zero_radius():
    rng = np.random.default_rng(4)
    j = rng.standard_normal((9, 2))
    assert np.all(mmv.project_group_l1(j, 0.0, 3) == 0)


def test_project_matches_bisection_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n_groups = int(rng.integers(1, 50))
        p = int(rng.integers(1, 5))
        d = 3 * n_groups
        j = rng.standard_normal((d, p)) + 1j * rng.standard_normal((d, p))
        tau = float(rng.uniform(0.05, 1.2)) * mmv.group_norm(j, n_groups)
        ours = mmv.project_group_l1(j, tau, n_groups)
        oracle = project_group_l1_bisection(j, tau, n_groups)
        assert np.max(np.abs(ours - oracle)) <= 1e-10


def test_projection_feasible_and_optimal():
    rng = np.random.default_rng(6)
    n_groups, p = 12, 2
    d = 3 * n_groups
    j = 3 * (rng.standard_normal((d, p)) + 1j * rng.standard_normal((d, p)))
    tau = 0.4 * mmv.group_norm(j, n_groups)
    proj = mmv.project_group_l1(j, tau, n_groups)
    assert mmv.group_norm(proj, n_groups) <= tau * (1 + 1e-12)
    dist = np.linalg.norm(proj - j)
    for _ in range(100):
        k = rng.standard_normal((d, p)) + 1j * rng.standard_normal((d, p))
        norm_k = mmv.group_norm(k, n_groups)
        if norm_k > tau:
            k *= tau / norm_k * rng.uniform(0, 1)
        assert dist <= np.linalg.norm(k - j) + 1e-12


def test_project_rejects_negative_radius():
    with pytest.raises(CsinvError):
        mmv.project_group_l1(np.zeros((3, 1), complex), -1.0, 1)


# ---------------------------------------------------------------------------
# radius update


def test_pareto_root_reached_is_fixed_point():
    assert mmv.pareto_update(2.0, 0.5, 0.5, 1.3) == 2.0


def test_pareto_monotone_above_target():
    tau = 0.0
    for gamma, dual in ((10.0, 4.0), (6.0, 3.0), (2.0, 1.0)):
        tau_new = mmv.pareto_update(tau, gamma, 1.0, dual)
        assert tau_new > tau
        tau = tau_new


def test_pareto_unreachable_data():
    with pytest.raises(CsinvError):
        mmv.pareto_update(1.0, 2.0, 0.5, 0.0)
    assert mmv.pareto_update(1.0, 0.2, 0.5, 0.0) == 1.0


# ---------------------------------------------------------------------------
# projected-gradient steps


def _fresh_state(phi, f, j, n_groups):
    state = mmv.SpgState(n_groups=n_groups, phi_h=phi.conj().T.copy())
    state.resid = f - phi @ j
    state.grad = -(state.phi_h @ state.resid)
    return state


def test_spg_step_zero_radius_keeps_zero():
    rng = np.random.default_rng(7)
    phi, _ = _random_instance(rng, 6, 4, 2)
    f = rng.standard_normal((6, 2)) + 1j * rng.standard_normal((6, 2))
    j = np.zeros((12, 2), complex)
    state = _fresh_state(phi, f, j, 4)
    j_new, gamma = mmv.spg_lasso_step(j, phi, f, 0.0, state)
    assert np.all(j_new == 0)
    assert gamma == pytest.approx(np.linalg.norm(f), rel=1e-14)


def test_spg_step_fixed_point_at_minimizer():
    # at the subproblem solution a step must not move the iterate (much)
    rng = np.random.default_rng(8)
    phi, j_true = _random_instance(rng, 10, 4, 2, sparsity=2)
    f = phi @ j_true
    tau = 0.6 * mmv.group_norm(j_true, 4)
    j_star = slow_projected_gradient(phi, f, tau, 4, mmv.project_group_l1, iters=40000)
    state = _fresh_state(phi, f, j_star, 4)
    j_next, gamma = mmv.spg_lasso_step(j_star, phi, f, tau, state)
    assert np.linalg.norm(j_next - j_star) <= 1e-5 * max(np.linalg.norm(j_star), 1.0)


def test_spg_converges_to_slow_oracle():
    # tiny subproblem: the spectral method lands on the same objective as a
    # plain small-step projected-gradient run
    rng = np.random.default_rng(9)
    phi, j_true = _random_instance(rng, 6, 4, 2, sparsity=2)
    f = phi @ j_true
    tau = 0.5 * mmv.group_norm(j_true, 4)
    j_oracle = slow_projected_gradient(phi, f, tau, 4, mmv.project_group_l1, iters=60000)
    j = np.zeros_like(j_true)
    state = _fresh_state(phi, f, j, 4)
    for _ in range(300):
        j, gamma = mmv.spg_lasso_step(j, phi, f, tau, state)
    obj_ours = mmv.residual(j, phi, f)
    obj_oracle = mmv.residual(j_oracle, phi, f)
    assert abs(obj_ours - obj_oracle) <= 1e-6 * max(1.0, obj_oracle)


# ---------------------------------------------------------------------------
# the staged solver


def _split_problem(rng, phi, f, n_groups, n_cv_rows):
    m = phi.shape[0]
    rows = rng.permutation(m)
    cv, r = rows[:n_cv_rows], rows[n_cv_rows:]
    return mmv.MmvProblem(phi[r], phi[cv], f[r], f[cv], n_groups=n_groups)


def test_solver_trivial_budget_returns_zero():
    rng = np.random.default_rng(10)
    phi, j_true = _random_instance(rng, 12, 6, 2, sparsity=2)
    f = phi @ j_true
    problem = _split_problem(rng, phi, f, 6, 3)
    j, trace = mmv.solve_mmv_cv(problem, max_iter=0, patience=10**9)
    assert np.all(j == 0)
    assert trace.iterations.tolist() == [0]
    assert trace.best_index == 0


def test_solver_noise_free_recovery():
    rng = np.random.default_rng(11)
    phi, j_true = _random_instance(rng, 40, 20, 3, sparsity=3)
    f = phi @ j_true
    problem = _split_problem(rng, phi, f, 20, 8)
    j, trace = mmv.solve_mmv_cv(problem, max_iter=400, patience=60)
    floor = max(trace.gamma_r[-1], 1e-8 * trace.gamma_r[0])
    assert trace.gamma_cv[trace.best_index] <= 10 * floor
    assert np.linalg.norm(j - j_true) <= 1e-2 * np.linalg.norm(j_true)


def test_solver_trace_invariants():
    rng = np.random.default_rng(12)
    phi, j_true = _random_instance(rng, 24, 12, 2, sparsity=3)
    f = phi @ j_true + 0.02 * (
        rng.standard_normal((24, 2)) + 1j * rng.standard_normal((24, 2))
    )
    problem = _split_problem(rng, phi, f, 12, 5)
    j, trace = mmv.solve_mmv_cv(problem, max_iter=200, patience=40)
    assert trace.best_index == int(np.argmin(trace.gamma_cv))
    assert trace.gamma_r[trace.best_index] <= trace.gamma_r[0]
    assert np.array_equal(j, trace.best_j)
    # radius never shrinks in schedule mode
    assert np.all(np.diff(trace.tau) >= 0)
    # reconstruction residual at stage ends is non-increasing
    finals = trace.stage_final_gammas()
    assert np.all(np.diff(finals) <= 1e-6 * trace.gamma_r[0])


def test_solver_stair_shaped_residual():
    # the residual drops at radius updates and settles within each stage:
    # stage-start values form a decreasing staircase
    rng = np.random.default_rng(15)
    phi, j_true = _random_instance(rng, 30, 15, 2, sparsity=3)
    f = phi @ j_true
    problem = _split_problem(rng, phi, f, 15, 6)
    _, trace = mmv.solve_mmv_cv(problem, max_iter=300, patience=300)
    assert len(trace.stage_starts) >= 3
    stage_start_gammas = trace.gamma_r[np.array(trace.stage_starts)]
    drops = np.diff(stage_start_gammas)
    assert np.all(drops <= 1e-9 * trace.gamma_r[0])
    assert stage_start_gammas[-1] < 0.5 * stage_start_gammas[0]


def test_solver_smv_reduction_matches_soft_threshold_oracle():
    # single column, singleton groups: the staged solver solves the plain
    # residual-targeted problem; compare objectives with the scalar
    # soft-threshold oracle
    rng = np.random.default_rng(13)
    m, n = 10, 20
    a = rng.standard_normal((m, n)) / np.sqrt(m)
    x_true = np.zeros(n)
    x_true[rng.choice(n, 3, replace=False)] = rng.standard_normal(3)
    b = a @ x_true + 0.01 * rng.standard_normal(m)
    sigma = 0.1 * np.linalg.norm(b)
    problem = mmv.MmvProblem(
        a.astype(complex),
        np.zeros((0, n), complex),
        b.astype(complex)[:, None],
        np.zeros((0, 1), complex),
        n_groups=n,
    )
    x_ours, _ = mmv.solve_mmv_bpdn(problem, sigma, max_iter=5000, rtol=1e-7)
    x_oracle, _ = bpdn_soft_threshold(a, b, sigma)
    obj_ours = mmv.group_norm(x_ours, n)
    obj_oracle = np.linalg.norm(x_oracle, 1)
    assert abs(obj_ours - obj_oracle) <= 1e-5 * max(1.0, obj_oracle)


def test_problem_validation():
    rng = np.random.default_rng(14)
    phi = rng.standard_normal((6, 9)).astype(complex)
    f = rng.standard_normal((6, 2)).astype(complex)
    with pytest.raises(CsinvError):
        mmv.MmvProblem(phi, phi[:, :6], f, f, n_groups=3)
    with pytest.raises(CsinvError):
        mmv.MmvProblem(phi, phi, f[:5], f, n_groups=3)
    with pytest.raises(CsinvError):
        mmv.MmvProblem(phi, phi, f, f, n_groups=4)
    with pytest.raises(CsinvError):
        mmv.solve_mmv_cv(
            mmv.MmvProblem(phi, np.zeros((0, 9), complex), f, np.zeros((0, 2), complex)),
            max_iter=1,
            patience=1,
        )
