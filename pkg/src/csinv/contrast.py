"""Contrast reconstruction from estimated contrast sources and total fields.

With the contrast sources fixed, the total fields are computed once and the
complex contrast is the only remaining unknown.  It is found by conjugate
gradients on the combined misfit

    cost(chi) = |f - Psi chi|^2 / |f|^2  +  |j - D_tot chi|^2 / |D_inc chi|^2

where ``Psi`` stacks, per source, the scattering matrix applied after
multiplication by the total field, and ``D_tot``/``D_inc`` are element-wise
multiplications by the total/incident fields.  Step lengths come from a 1-D
Brent minimization of the full cost along the search direction (including
the state-term normalization's dependence on the step), while the gradient
treats that normalization as a constant evaluated at the current iterate.
Physical bounds on the contrast (relative permittivity >= 1, conductivity
>= 0) are enforced by clamping after every update.

Vectors here may live on a reduced cell set (the configured inversion
region); shapes are (D,) for the contrast and (D, P) for fields and sources
with D = 3 * active cells, component-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import io
from .errors import CsinvError
from .fdfd import StiffnessMatrix, SolveInfo, scattered_from_contrast_source

BRENT_TOL = 1e-6
GOLDEN = 1.618033988749895


@dataclass
class TotalFieldSet:
    """Incident and total fields of every source on the full grid."""

    e_inc: np.ndarray = field(repr=False)   # (3N, P)
    e_tot: np.ndarray = field(repr=False)   # (3N, P)
    solve_infos: list = field(default_factory=list)

    @property
    def n_sources(self) -> int:
        return self.e_inc.shape[1]


def compute_total_fields(
    a_bg: StiffnessMatrix,
    j_hat: np.ndarray,
    incident: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 20000,
    workers: int = 1,
) -> TotalFieldSet:
    """Forward-solve each estimated contrast source and add the incident field."""
    j_hat = np.asarray(j_hat, complex)
    incident = np.asarray(incident, complex)
    if j_hat.shape != incident.shape:
        raise CsinvError(f"source block {j_hat.shape} != incident block {incident.shape}")
    if workers > 1 and j_hat.shape[1] > 1:
        from .fdfd import solve_many

        e_sct, infos = solve_many(a_bg, j_hat, tol=tol, max_iter=max_iter, workers=workers)
        return TotalFieldSet(e_inc=incident, e_tot=incident + e_sct, solve_infos=infos)
    e_tot = incident.copy()
    infos = []
    for p in range(j_hat.shape[1]):
        e_sct, info = scattered_from_contrast_source(a_bg, j_hat[:, p], tol=tol, max_iter=max_iter)
        e_tot[:, p] += e_sct
        infos.append(info)
    return TotalFieldSet(e_inc=incident, e_tot=e_tot, solve_infos=infos)


class StackedDataOperator:
    """Per-source scattering after total-field weighting, stacked over sources.

    ``matvec`` maps a contrast vector (D,) to predicted measurements (M, P);
    ``rmatvec`` is its conjugate transpose back to contrast space.
    """

    def __init__(self, phi: np.ndarray, d_tot: np.ndarray):
        self.phi = np.asarray(phi, complex)
        self.d_tot = np.asarray(d_tot, complex)
        if self.phi.shape[1] != self.d_tot.shape[0]:
            raise CsinvError(
                f"operator columns {self.phi.shape[1]} != field rows {self.d_tot.shape[0]}"
            )
        self._phi_h = self.phi.conj().T.copy()

    @property
    def shape(self):
        m = self.phi.shape[0]
        d, p = self.d_tot.shape
        return (m * p, d)

    def matvec(self, chi: np.ndarray) -> np.ndarray:
        return self.phi @ (self.d_tot * chi[:, None])

    def rmatvec(self, r: np.ndarray) -> np.ndarray:
        return np.sum(np.conj(self.d_tot) * (self._phi_h @ r), axis=1)


def init_contrast(j_hat: np.ndarray, e_tot: np.ndarray) -> np.ndarray:
    """Least-squares start: per component, fit j = e_tot * chi over all sources.

    Components where every total field vanishes get zero (no information).
    """
    j_hat = np.asarray(j_hat, complex)
    e_tot = np.asarray(e_tot, complex)
    num = np.sum(np.conj(e_tot) * j_hat, axis=1)
    den = np.sum(np.abs(e_tot) ** 2, axis=1)
    chi = np.zeros(j_hat.shape[0], complex)
    ok = den > 0.0
    chi[ok] = num[ok] / den[ok]
    return chi


def cost(
    chi: np.ndarray,
    psi: StackedDataOperator,
    f: np.ndarray,
    j_hat: np.ndarray,
    d_inc: np.ndarray,
) -> tuple[float, float, float]:
    """Total, data and state misfit at a contrast iterate.

    The state normalization uses the incident-field weighting of the same
    iterate; a vanishing normalization reports an infinite state term.
    """
    data_num = float(np.linalg.norm(f - psi.matvec(chi)) ** 2)
    data_den = float(np.linalg.norm(f) ** 2)
    state_num = float(np.linalg.norm(j_hat - psi.d_tot * chi[:, None]) ** 2)
    state_den = float(np.linalg.norm(d_inc * chi[:, None]) ** 2)
    data_err = data_num / data_den
    state_err = state_num / state_den if state_den > 0.0 else np.inf
    return data_err + state_err, data_err, state_err


def gradient(
    chi: np.ndarray,
    psi: StackedDataOperator,
    f: np.ndarray,
    j_hat: np.ndarray,
    d_inc: np.ndarray,
) -> np.ndarray:
    """Conjugate-convention gradient with the state normalization frozen.

    The normalization ``|D_inc chi|^2`` is evaluated at the iterate but not
    differentiated through, matching the update rule this solver uses.
    """
    data_den = float(np.linalg.norm(f) ** 2)
    r_data = f - psi.matvec(chi)
    g = -2.0 * psi.rmatvec(r_data) / data_den
    state_den = float(np.linalg.norm(d_inc * chi[:, None]) ** 2)
    if state_den > 0.0:
        r_state = j_hat - psi.d_tot * chi[:, None]
        g = g - 2.0 * np.sum(np.conj(psi.d_tot) * r_state, axis=1) / state_den
    return g


def pr_direction(g: np.ndarray, g_prev: np.ndarray | None, nu_prev: np.ndarray | None) -> np.ndarray:
    """Conjugate search direction with the Polak-Ribiere weight.

    First call (no history) returns the zero direction; a vanishing previous
    gradient restarts with the plain gradient.
    """
    if g_prev is None or nu_prev is None:
        return np.zeros_like(g)
    denom = float(np.real(np.vdot(g_prev, g_prev)))
    if denom == 0.0:
        return g.copy()
    beta = float(np.real(np.vdot(g, g - g_prev))) / denom
    return g + beta * nu_prev


def brent_step(chi: np.ndarray, nu: np.ndarray, cost1d, tol: float = BRENT_TOL,
               max_expand: int = 40) -> float:
    """Step length minimizing a 1-D cost along the search direction.

    Brackets a minimum by geometric expansion away from zero (both signs
    probed), then refines with Brent's parabolic/golden-section scheme.  If
    no bracket is found the best sampled step with a cost decrease is
    returned, falling back to zero.
    """
    f0 = float(cost1d(0.0))
    nn = float(np.linalg.norm(nu))
    if nn == 0.0 or not np.isfinite(f0):
        return 0.0
    h = 0.01 * float(np.linalg.norm(chi)) / nn
    if h == 0.0 or not np.isfinite(h):
        h = 1.0 / nn
    samples = [(0.0, f0)]

    def ev(a):
        v = float(cost1d(a))
        samples.append((a, v))
        return v

    direction = 0.0
    for _ in range(12):
        fp, fm = ev(h), ev(-h)
        if fp < f0 or fm < f0:
            direction = 1.0 if fp <= fm else -1.0
            break
        h *= 0.25
    if direction == 0.0:
        return 0.0

    a, fa = 0.0, f0
    b = direction * h
    fb = fp if direction > 0 else fm
    c = b * (1.0 + GOLDEN)
    fc = ev(c)
    expansions = 0
    while fc < fb and expansions < max_expand:
        a, fa = b, fb
        b, fb = c, fc
        c = b + GOLDEN * (b - a)
        fc = ev(c)
        expansions += 1
    if fc < fb:
        # Never turned upward: settle for the lowest sample seen.
        best = min(samples, key=lambda s: s[1])
        return best[0] if best[1] < f0 else 0.0
    bracket = (a, b, c) if a < c else (c, b, a)
    alpha = float(optimize.brent(lambda t: float(cost1d(t)), brack=bracket, tol=tol))
    f_alpha = float(cost1d(alpha))
    best = min(samples, key=lambda s: s[1])
    if f_alpha > best[1]:
        alpha, f_alpha = best
    return alpha if f_alpha <= f0 else 0.0


def project_range(chi: np.ndarray, eps_b: np.ndarray) -> np.ndarray:
    """Clamp the contrast so the implied medium stays physical.

    Component-wise, the real part may not drop below ``1 - Re(eps_b)`` and
    the imaginary part may not exceed ``-Im(eps_b)`` (background in relative
    units).
    """
    eps_b = np.asarray(eps_b, complex)
    lo_re = 1.0 - eps_b.real
    hi_im = -eps_b.imag
    return np.maximum(chi.real, lo_re) + 1j * np.minimum(chi.imag, hi_im)


@dataclass
class IterationRecord:
    iteration: int
    alpha: float
    data_error: float
    state_error: float
    cost_at_zero: float          # full cost at the iterate before the step
    cost_at_alpha: float         # full cost right after the Brent step
    cost_after_projection: float
    clamped: bool
    chi: np.ndarray = field(default=None, repr=False)


@dataclass
class InversionState:
    """Evolving contrast iterate with its gradient/direction history."""

    chi: np.ndarray
    grad: np.ndarray | None = None
    direction: np.ndarray | None = None
    iteration: int = 0
    records: list = field(default_factory=list)

    def error_curves(self):
        data = np.array([r.data_error for r in self.records])
        state = np.array([r.state_error for r in self.records])
        return data, state

    def write_csv(self, path):
        data, state = self.error_curves()
        return io.write_csv(
            path,
            {
                "iter": np.arange(1, len(self.records) + 1),
                "data_error": data,
                "state_error": state,
            },
        )


def isotropic_contrast(chi: np.ndarray) -> np.ndarray:
    """Per-cell contrast as the mean of the three components."""
    chi = np.asarray(chi)
    if chi.shape[0] % 3:
        raise CsinvError(f"length {chi.shape[0]} is not 3 * cells")
    n = chi.shape[0] // 3
    return (chi[:n] + chi[n : 2 * n] + chi[2 * n :]) / 3.0


def invert_contrast(
    j_hat: np.ndarray,
    e_tot: np.ndarray,
    e_inc: np.ndarray,
    phi: np.ndarray,
    f: np.ndarray,
    eps_b: np.ndarray,
    iters: int = 20,
    cost_rtol: float = 1e-6,
) -> tuple[np.ndarray, InversionState]:
    """Conjugate-gradient minimization of the combined data+state misfit.

    Starts from the least-squares contrast, iterates gradient / conjugate
    direction / Brent step / range clamp, and stops at the iteration budget
    or when the cost settles.  All arrays may be restricted to the active
    cell set; ``phi`` columns must match that restriction.
    """
    j_hat = np.asarray(j_hat, complex)
    f = np.atleast_2d(np.asarray(f, complex))
    psi = StackedDataOperator(phi, e_tot)
    chi = init_contrast(j_hat, e_tot)
    state = InversionState(chi=chi)
    if iters == 0:
        return chi, state

    last_cost = None
    for n in range(1, iters + 1):
        g = gradient(chi, psi, f, j_hat, e_inc)
        nu = pr_direction(g, state.grad, state.direction) if n > 1 else g.copy()

        # 1-D cost along the direction from cached products (exact rational
        # function of the step, including the moving state normalization).
        r_d = f - psi.matvec(chi)
        s_d = psi.matvec(nu)
        r_j = j_hat - psi.d_tot * chi[:, None]
        s_j = psi.d_tot * nu[:, None]
        a_i = e_inc * chi[:, None]
        b_i = e_inc * nu[:, None]
        fsq = float(np.linalg.norm(f) ** 2)
        c_dd = (
            float(np.linalg.norm(r_d) ** 2),
            -2.0 * float(np.real(np.vdot(r_d, s_d))),
            float(np.linalg.norm(s_d) ** 2),
        )
        c_jj = (
            float(np.linalg.norm(r_j) ** 2),
            -2.0 * float(np.real(np.vdot(r_j, s_j))),
            float(np.linalg.norm(s_j) ** 2),
        )
        c_ii = (
            float(np.linalg.norm(a_i) ** 2),
            2.0 * float(np.real(np.vdot(a_i, b_i))),
            float(np.linalg.norm(b_i) ** 2),
        )

        def cost1d(alpha):
            data = (c_dd[0] + alpha * (c_dd[1] + alpha * c_dd[2])) / fsq
            den = c_ii[0] + alpha * (c_ii[1] + alpha * c_ii[2])
            num = c_jj[0] + alpha * (c_jj[1] + alpha * c_jj[2])
            if den <= 0.0:
                return np.inf
            return data + num / den

        alpha = brent_step(chi, nu, cost1d)
        cost0 = float(cost1d(0.0))
        cost_alpha = float(cost1d(alpha))
        chi_new = chi + alpha * nu
        chi_proj = project_range(chi_new, eps_b)
        clamped = bool(np.any(chi_proj != chi_new))
        total, data_err, state_err = cost(chi_proj, psi, f, j_hat, e_inc)
        state.records.append(
            IterationRecord(
                iteration=n,
                alpha=alpha,
                data_error=data_err,
                state_error=state_err,
                cost_at_zero=cost0,
                cost_at_alpha=cost_alpha,
                cost_after_projection=total,
                clamped=clamped,
                chi=chi_proj.copy(),
            )
        )
        chi = chi_proj
        state.chi = chi
        state.grad = g
        state.direction = nu
        state.iteration = n
        if last_cost is not None and abs(total - last_cost) <= cost_rtol * max(total, 1e-300):
            break
        last_cost = total
    return chi, state
