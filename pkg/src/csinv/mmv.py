"""Joint estimation of contrast sources from all illuminations at once.

The measurement model per source p is ``f_p = Phi j_p``; stacking the sources
as columns of ``J`` gives a matrix problem whose rows share a sparsity
pattern.  The three field components of one cell are tied together, so the
regularizer is a sum over cells of the Euclidean norm of each 3-row group
(all P columns included), minimized subject to a bound on the stacked
residual.  The solver follows the spectral-projected-gradient scheme for
denoising problems: a sequence of norm-ball-constrained least-squares
subproblems whose radius ``tau`` is advanced by Newton steps on the optimal
residual-vs-radius curve, with a held-out receiver block deciding when to
stop instead of a known noise level.

Array conventions
-----------------
``J`` is complex of shape (D, P) with D unknowns ordered component-major
(x block, then y, then z), so the group of cell ``k`` is rows
``{k, k+N, k+2N}``.  All group operations take ``n_groups`` and require
``D == group_size * n_groups`` with that interleaving; ``n_groups == D``
degenerates to plain (ungrouped) sparsity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CsinvError

STEP_MIN = 1e-10
STEP_MAX = 1e10
LINESEARCH_MEMORY = 3
LINESEARCH_MAX_BACKTRACKS = 10
SUFFICIENT_DECREASE = 1e-4
INNER_RTOL = 1e-4          # relative residual change that ends a tau stage
INNER_GAP_RTOL = 1e-4      # dual-gap fraction of ||f|| that ends a tau stage


def _as_matrix(j: np.ndarray) -> np.ndarray:
    j = np.asarray(j, complex)
    return j[:, None] if j.ndim == 1 else j


def group_block_norms(j: np.ndarray, n_groups: int) -> np.ndarray:
    """Euclidean norm of every group block (all components, all columns)."""
    j = _as_matrix(j)
    d, p = j.shape
    if d % n_groups:
        raise CsinvError(f"{d} rows cannot split into {n_groups} groups")
    blocks = j.reshape(d // n_groups, n_groups, p)
    return np.sqrt(np.sum(np.abs(blocks) ** 2, axis=(0, 2)))


def group_norm(j: np.ndarray, n_groups: int | None = None) -> float:
    """Sum over cells of the block norms (the solver's sparsity objective)."""
    j = _as_matrix(j)
    if n_groups is None:
        n_groups = j.shape[0] // 3
    return float(np.sum(group_block_norms(j, n_groups)))


def group_dual_norm(g: np.ndarray, n_groups: int) -> float:
    """Dual of the sum-of-block-norms: the largest block norm."""
    norms = group_block_norms(g, n_groups)
    return float(norms.max()) if norms.size else 0.0


def residual(j: np.ndarray, phi: np.ndarray, f: np.ndarray) -> float:
    """Stacked data misfit: sqrt of the summed squared per-source residuals."""
    j = _as_matrix(j)
    f = _as_matrix(f)
    return float(np.linalg.norm(f - phi @ j))


def cv_residual(j: np.ndarray, phi_cv: np.ndarray, f_cv: np.ndarray) -> float:
    """Misfit on the held-out receiver block."""
    return residual(j, phi_cv, f_cv)


def project_group_l1(j: np.ndarray, tau: float, n_groups: int | None = None) -> np.ndarray:
    """Euclidean projection onto ``{J : sum_k ||block_k|| <= tau}``.

    Every block is shrunk by the common threshold ``theta`` solving
    ``sum_k max(0, ||b_k|| - theta) = tau`` (blocks scale by
    ``max(0, 1 - theta/||b_k||)``); inputs already inside the ball pass
    through unchanged.
    """
    if tau < 0:
        raise CsinvError(f"radius must be nonnegative, got {tau}")
    j = _as_matrix(j)
    d, p = j.shape
    if n_groups is None:
        n_groups = d // 3
    if tau == 0.0:
        return np.zeros_like(j)
    b = group_block_norms(j, n_groups)
    total = b.sum()
    if total <= tau:
        return j
    theta = _simplex_threshold(b, tau)
    scale = np.maximum(0.0, 1.0 - theta / np.maximum(b, 1e-300))
    blocks = j.reshape(d // n_groups, n_groups, p) * scale[None, :, None]
    return blocks.reshape(d, p)


def _simplex_threshold(b: np.ndarray, tau: float) -> float:
    """Threshold of the nonnegative soft-shrink equation, by sort and scan."""
    s = np.sort(b)[::-1]
    css = np.cumsum(s)
    k = np.arange(1, len(s) + 1)
    candidates = (css - tau) / k
    active = np.flatnonzero(s > candidates)
    kk = active[-1] + 1
    return max(0.0, (css[kk - 1] - tau) / kk)


def pareto_update(tau: float, gamma_r: float, sigma: float, dual_norm: float) -> float:
    """Newton step on the residual-vs-radius curve toward ``gamma_r == sigma``."""
    if dual_norm <= 0.0:
        if gamma_r > sigma:
            raise CsinvError(
                "dual norm vanished while the residual target is unmet: "
                "the data cannot be reached at any radius"
            )
        return tau
    return tau + (gamma_r - sigma) * gamma_r / dual_norm


@dataclass
class SpgState:
    """Carry-over between projected-gradient iterations of one subproblem."""

    n_groups: int
    phi_h: np.ndarray = field(repr=False)              # conjugate transpose cache
    resid: np.ndarray | None = field(default=None, repr=False)
    grad: np.ndarray | None = field(default=None, repr=False)
    prev_j: np.ndarray | None = field(default=None, repr=False)
    prev_grad: np.ndarray | None = field(default=None, repr=False)
    step: float = 1.0
    f_history: list = field(default_factory=list)
    last_gamma: float | None = None

    def reset_stage(self):
        """Forget line-search memory at a radius change (new subproblem)."""
        self.f_history = []
        self.prev_j = None
        self.prev_grad = None
        self.last_gamma = None


def spg_lasso_step(
    j: np.ndarray,
    phi: np.ndarray,
    f: np.ndarray,
    tau: float,
    state: SpgState,
) -> tuple[np.ndarray, float]:
    """One spectral projected-gradient iteration of the radius-tau subproblem.

    Gradient of the smooth part, a Barzilai-Borwein step safeguarded by a
    nonmonotone backtracking search over the projected arc, then the group
    projection.  Returns the new iterate and its stacked residual norm.
    """
    j = _as_matrix(j)
    f = _as_matrix(f)
    if state.resid is None:
        state.resid = f - phi @ j
        state.grad = -(state.phi_h @ state.resid)
    g = state.grad
    fval = 0.5 * np.linalg.norm(state.resid) ** 2

    if state.prev_j is not None:
        s = j - state.prev_j
        y = g - state.prev_grad
        sts = float(np.real(np.vdot(s, s)))
        sty = float(np.real(np.vdot(s, y)))
        step = STEP_MAX if sty <= 0 else min(STEP_MAX, max(STEP_MIN, sts / sty))
    else:
        dx = project_group_l1(j - g, tau, state.n_groups) - j
        dxn = np.max(np.abs(dx)) if dx.size else 0.0
        step = STEP_MAX if dxn < 1.0 / STEP_MAX else min(STEP_MAX, max(STEP_MIN, 1.0 / dxn))

    if not state.f_history:
        state.f_history = [fval]
    f_max = max(state.f_history)

    accepted = None
    for _ in range(LINESEARCH_MAX_BACKTRACKS):
        trial = project_group_l1(j - step * g, tau, state.n_groups)
        r_trial = f - phi @ trial
        f_trial = 0.5 * np.linalg.norm(r_trial) ** 2
        gts = float(np.real(np.vdot(g, trial - j)))
        if gts >= 0.0:
            break
        if f_trial <= f_max + SUFFICIENT_DECREASE * gts:
            accepted = (trial, r_trial, f_trial)
            break
        step *= 0.5
    if accepted is None:
        # Backtracking exhausted: take the smallest safeguarded step.
        trial = project_group_l1(j - STEP_MIN * g, tau, state.n_groups)
        r_trial = f - phi @ trial
        accepted = (trial, r_trial, 0.5 * np.linalg.norm(r_trial) ** 2)

    new_j, new_r, new_f = accepted
    state.prev_j = j
    state.prev_grad = g
    state.resid = new_r
    state.grad = -(state.phi_h @ new_r)
    state.step = step
    state.f_history.append(new_f)
    if len(state.f_history) > LINESEARCH_MEMORY:
        state.f_history = state.f_history[-LINESEARCH_MEMORY:]
    gamma = float(np.sqrt(2.0 * new_f))
    state.last_gamma = gamma
    return new_j, gamma


@dataclass
class MmvProblem:
    """Split measurement model plus the group layout of the unknowns."""

    phi_r: np.ndarray = field(repr=False)
    phi_cv: np.ndarray = field(repr=False)
    f_r: np.ndarray = field(repr=False)
    f_cv: np.ndarray = field(repr=False)
    n_groups: int | None = None
    sigma: float | None = None   # residual target when the noise level is known

    def __post_init__(self):
        self.phi_r = np.asarray(self.phi_r, complex)
        self.phi_cv = np.asarray(self.phi_cv, complex)
        self.f_r = _as_matrix(self.f_r)
        self.f_cv = _as_matrix(self.f_cv)
        d = self.phi_r.shape[1]
        if self.phi_cv.size and self.phi_cv.shape[1] != d:
            raise CsinvError("reconstruction and held-out matrices disagree on unknowns")
        if self.f_r.shape[0] != self.phi_r.shape[0]:
            raise CsinvError("reconstruction data rows do not match the matrix")
        if self.f_cv.shape[0] != self.phi_cv.shape[0]:
            raise CsinvError("held-out data rows do not match the matrix")
        if self.f_r.shape[1] != self.f_cv.shape[1]:
            raise CsinvError("source counts differ between data blocks")
        if self.n_groups is None:
            self.n_groups = d // 3
        if d % self.n_groups:
            raise CsinvError(f"{d} unknowns cannot split into {self.n_groups} groups")

    @property
    def n_sources(self) -> int:
        return self.f_r.shape[1]

    @property
    def n_unknowns(self) -> int:
        return self.phi_r.shape[1]


@dataclass
class MmvTrace:
    """Per-iteration record of the staged solve and the selected snapshot."""

    iterations: np.ndarray
    tau: np.ndarray
    gamma_r: np.ndarray
    gamma_cv: np.ndarray
    group_norms: np.ndarray
    best_index: int
    best_j: np.ndarray = field(repr=False)
    stage_starts: list = field(default_factory=list)

    def stage_final_gammas(self) -> np.ndarray:
        """Reconstruction residual at the last iteration of every radius stage."""
        bounds = list(self.stage_starts) + [len(self.iterations)]
        return np.array([self.gamma_r[e - 1] for e in bounds[1:] if e - 1 >= 0])


def solve_mmv_cv(
    problem: MmvProblem,
    max_iter: int = 500,
    patience: int = 20,
) -> tuple[np.ndarray, MmvTrace]:
    """Staged solve with held-out stopping.

    The residual target driving the radius stages follows a halving schedule
    starting at half the initial misfit; it exists only to push the
    optimization through successively tighter subproblems.  Every iteration
    logs the reconstruction and held-out residuals; the returned iterate is
    the snapshot with the smallest held-out residual, and iteration stops
    once that minimum has not improved for ``patience`` iterations (or at
    ``max_iter``).
    """
    if problem.f_cv.size == 0:
        raise CsinvError("held-out block must be nonempty for cross-validated stopping")
    return _staged_solve(problem, max_iter, patience, sigma_target=None)


def solve_mmv_bpdn(
    problem: MmvProblem,
    sigma: float,
    max_iter: int = 2000,
    rtol: float = 1e-5,
) -> tuple[np.ndarray, MmvTrace]:
    """Solve to a known residual target (noise level supplied, no held-out rule)."""
    return _staged_solve(problem, max_iter, patience=max_iter + 1,
                         sigma_target=float(sigma), sigma_rtol=rtol)


def _staged_solve(problem, max_iter, patience, sigma_target, sigma_rtol=1e-5):
    phi, f = problem.phi_r, problem.f_r
    n_groups = problem.n_groups
    d, p = problem.n_unknowns, problem.n_sources
    f_norm = float(np.linalg.norm(f))

    j = np.zeros((d, p), complex)
    gamma = residual(j, phi, f)
    gamma_cv = (
        cv_residual(j, problem.phi_cv, problem.f_cv) if problem.f_cv.size else np.nan
    )
    gamma0 = gamma
    tau = 0.0
    sigma = sigma_target if sigma_target is not None else 0.5 * gamma0

    state = SpgState(n_groups=n_groups, phi_h=phi.conj().T.copy())
    state.resid = f - phi @ j
    state.grad = -(state.phi_h @ state.resid)

    iters = [0]
    taus = [tau]
    gammas = [gamma]
    gammas_cv = [gamma_cv]
    gnorms = [group_norm(j, n_groups)]
    stage_starts = [0]

    best_cv = gamma_cv if not np.isnan(gamma_cv) else np.inf
    best_j = j.copy()
    best_idx = 0

    gamma_prev = None
    it = 0
    while it < max_iter:
        # Advance the radius once the current subproblem has settled.
        if _converged_inner(state, gamma_prev, gamma, tau, f_norm, n_groups, f):
            dual = group_dual_norm(state.phi_h @ state.resid, n_groups)
            if sigma_target is None:
                # Schedule mode: keep the target below the current residual so
                # the radius keeps growing; stages produce the stair shape.
                while gamma <= sigma and sigma > 1e-14 * max(gamma0, 1e-300):
                    sigma *= 0.5
                if gamma > sigma:
                    try:
                        tau_new = pareto_update(tau, gamma, sigma, dual)
                    except CsinvError:
                        break
                    if tau_new > tau * (1 + 1e-12):
                        tau = tau_new
                        state.reset_stage()
                        stage_starts.append(len(iters))
                        gamma_prev = None
            else:
                # Root-finding mode: walk the radius to the requested target,
                # shrinking (with a reprojection) if a Newton step overshot.
                if abs(gamma - sigma) <= sigma_rtol * max(sigma, 1e-300):
                    break
                tau_new = pareto_update(tau, gamma, sigma, dual)
                if abs(tau_new - tau) <= 1e-12 * max(tau, 1.0):
                    break
                shrink = tau_new < tau
                tau = max(0.0, tau_new)
                state.reset_stage()
                stage_starts.append(len(iters))
                gamma_prev = None
                if shrink:
                    j = project_group_l1(j, tau, n_groups)
                    state.resid = f - phi @ j
                    state.grad = -(state.phi_h @ state.resid)
                    gamma = residual(j, phi, f)

        it += 1
        gamma_prev = gamma
        j, gamma = spg_lasso_step(j, phi, f, tau, state)
        gamma_cv = (
            cv_residual(j, problem.phi_cv, problem.f_cv) if problem.f_cv.size else np.nan
        )
        iters.append(it)
        taus.append(tau)
        gammas.append(gamma)
        gammas_cv.append(gamma_cv)
        gnorms.append(group_norm(j, n_groups))

        if not np.isnan(gamma_cv) and gamma_cv < best_cv:
            best_cv = gamma_cv
            best_j = j.copy()
            best_idx = it
        if sigma_target is None and it - best_idx >= patience:
            break

    if sigma_target is not None:
        best_j = j.copy()
        best_idx = it
    trace = MmvTrace(
        iterations=np.array(iters),
        tau=np.array(taus),
        gamma_r=np.array(gammas),
        gamma_cv=np.array(gammas_cv),
        group_norms=np.array(gnorms),
        best_index=best_idx,
        best_j=best_j,
        stage_starts=stage_starts,
    )
    return best_j.copy(), trace


def _converged_inner(state, gamma_prev, gamma, tau, f_norm, n_groups, f) -> bool:
    """Stage-advance test: settled residual or a small duality gap."""
    if gamma_prev is None:
        return tau == 0.0  # fresh start: the radius-zero problem is already solved
    rel_change = abs(gamma - gamma_prev) / max(gamma, 1e-300)
    if rel_change < INNER_RTOL:
        return True
    r = state.resid
    gap = abs(
        float(np.real(np.vdot(r, r - _as_matrix(f))))
        + tau * group_dual_norm(state.grad, n_groups)
    )
    return gap <= INNER_GAP_RTOL * max(f_norm, 1e-300)
