"""Frequency-domain curl-curl operator assembly and iterative field solves.

The discrete system is kept in normalized form: the physical equation

    curl(mu0^-1 curl e) - omega^2*eps0*eps_r e = rhs

is divided through by ``omega^2*eps0``, so the assembled operator is

    A = curl_h curl_e / k0^2 - diag(eps_r),      k0 = omega/c0.

This keeps matrix entries O(1)-O(100), which matters for the exactness of
transpose-pairing checks, and it makes the contrast-source convention
natural: a contrast source ``j = chi_rel * e_tot`` (relative contrast times
total field) drives the scattered field directly via ``A e_sct = j``.

Unknown ordering is component-major: ``u = [ex(all cells); ey; ez]`` with the
cell index ``i + Nx*j + Nx*Ny*k`` inside each block.  Forward differences of
the electric-field curl output at dual (half-integer) points of the
differentiation axis, backward differences at primal points; the absorbing
layers enter as diagonal 1/s factors at those output points.  The outer grid
boundary is a perfect electric conductor (truncated stencils).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import GridError, SolveFailure
from .grid import C0, EPS0, PmlStretch, YeeGrid

DEFAULT_TOL_DATA = 1e-8      # data generation / operator construction
DEFAULT_TOL_INVERSION = 1e-6  # solves inside inversion loops


def _diff1d(n: int, h: float, kind: str, periodic: bool = False) -> sp.csr_matrix:
    """One-dimensional first difference on n points (truncated or periodic)."""
    if kind == "f":
        d = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], format="lil")
        if periodic:
            d[n - 1, 0] = 1.0
    elif kind == "b":
        d = sp.diags([np.ones(n), -np.ones(n - 1)], [0, -1], format="lil")
        if periodic:
            d[0, n - 1] = -1.0
    else:
        raise ValueError(kind)
    return (d.tocsr() / h).tocsr()


def _axis_operator(op: sp.spmatrix, dims, axis: int) -> sp.csr_matrix:
    """Lift a 1-D operator to the 3-D grid (x-fastest linear ordering)."""
    nx, ny, nz = dims
    eyes = [sp.identity(n, format="csr") for n in dims]
    if axis == 0:
        return sp.kron(sp.identity(ny * nz, format="csr"), op, format="csr")
    if axis == 1:
        return sp.kron(eyes[2], sp.kron(op, eyes[0], format="csr"), format="csr")
    return sp.kron(op, sp.identity(nx * ny, format="csr"), format="csr")


def _stretch_diag(values: np.ndarray, dims, axis: int) -> sp.dia_matrix:
    """Diagonal of 1/s replicated over the grid, varying along one axis."""
    nx, ny, nz = dims
    if axis == 0:
        rep = np.tile(values, ny * nz)
    elif axis == 1:
        rep = np.tile(np.repeat(values, nx), nz)
    else:
        rep = np.repeat(values, nx * ny)
    return sp.diags(1.0 / rep)


@dataclass
class StiffnessMatrix:
    """Sparse normalized curl-curl operator bound to the grid it came from."""

    matrix: sp.csr_matrix
    grid: YeeGrid

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def transpose_matrix(self) -> sp.csr_matrix:
        if not hasattr(self, "_mat_t"):
            self._mat_t = self.matrix.T.tocsr()
        return self._mat_t

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x


@dataclass
class SourceSet:
    """Electric dipole pairs: one x- and one y-oriented dipole per source.

    ``amp_x``/``amp_y`` are complex amplitudes (A*m); a quarter-period phase
    shift between them (``amp_y = 1j*amp_x``) radiates a circularly polarized
    wave.
    """

    positions: np.ndarray        # (P, 3) scene coordinates
    amp_x: np.ndarray            # (P,) complex
    amp_y: np.ndarray            # (P,) complex
    omega: float

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, float))
        self.amp_x = np.asarray(self.amp_x, complex).ravel()
        self.amp_y = np.asarray(self.amp_y, complex).ravel()
        p = self.positions.shape[0]
        if self.positions.shape != (p, 3) or len(self.amp_x) != p or len(self.amp_y) != p:
            raise ValueError("inconsistent source-set arrays")
        if p < 1:
            raise ValueError("need at least one source")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def circular(cls, positions, omega: float, amplitude: complex = 1.0) -> "SourceSet":
        positions = np.atleast_2d(np.asarray(positions, float))
        p = positions.shape[0]
        ax = np.full(p, amplitude, complex)
        return cls(positions, ax, 1j * ax, omega)


def curl_operators(grid: YeeGrid, pml: PmlStretch, periodic: bool = False):
    """Edge->face and face->edge curl matrices with coordinate stretching."""
    dims = grid.dims
    df, db = [], []
    for ax in range(3):
        n, h = dims[ax], grid.spacing[ax]
        fwd = _axis_operator(_diff1d(n, h, "f", periodic), dims, ax)
        bwd = _axis_operator(_diff1d(n, h, "b", periodic), dims, ax)
        df.append(_stretch_diag(pml.dual[ax], dims, ax) @ fwd)
        db.append(_stretch_diag(pml.primal[ax], dims, ax) @ bwd)
    n_c = grid.n_cells
    z = sp.csr_matrix((n_c, n_c))
    ce = sp.bmat([[z, -df[2], df[1]], [df[2], z, -df[0]], [-df[1], df[0], z]], format="csr")
    ch = sp.bmat([[z, -db[2], db[1]], [db[2], z, -db[0]], [-db[1], db[0], z]], format="csr")
    return ce, ch


def assemble(grid: YeeGrid, pml: PmlStretch, periodic: bool = False) -> StiffnessMatrix:
    """Build the normalized curl-curl operator A = Ch Ce / k0^2 - diag(eps_r).

    With identity stretch the curl pair satisfies ``Ch == Ce^T`` and A is
    complex-symmetric; the product is symmetrized exactly in that case so the
    property holds bitwise.  With absorbing layers active A is genuinely
    nonsymmetric and is left as assembled.
    """
    for ax in range(3):
        if len(pml.primal[ax]) != grid.dims[ax] or len(pml.dual[ax]) != grid.dims[ax]:
            raise GridError("stretch profile length does not match grid dims")
    ce, ch = curl_operators(grid, pml, periodic)
    k0sq = (grid.omega / C0) ** 2
    curlcurl = (ch @ ce) / k0sq
    no_stretch = all(
        np.all(pml.primal[ax] == 1.0) and np.all(pml.dual[ax] == 1.0) for ax in range(3)
    )
    if no_stretch:
        curlcurl = (curlcurl + curlcurl.T) * 0.5
    a = curlcurl - sp.diags(np.tile(grid.eps_flat(), 3))
    return StiffnessMatrix(a.tocsr(), grid)


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    converged: bool


def _bicgstab(mat: sp.csr_matrix, rhs: np.ndarray, tol: float, max_iter: int):
    """Stabilized bi-conjugate gradients with zero initial guess.

    Tracks the best iterate by recursive residual and confirms convergence
    against the true residual before accepting, so the reported residual is
    trustworthy.  Deterministic: no randomness, fixed initial shadow vector.
    """
    n = mat.shape[0]
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(n, complex), SolveInfo(0, 0.0, True)
    x = np.zeros(n, complex)
    r = rhs.astype(complex).copy()
    r0 = r.copy()
    rho = 1.0 + 0j
    alpha = 1.0 + 0j
    w = 1.0 + 0j
    v = np.zeros(n, complex)
    p = np.zeros(n, complex)
    best_res = np.inf
    best_x = x.copy()

    def true_residual(xc):
        return np.linalg.norm(rhs - mat @ xc) / bnorm

    fresh_start = True
    it = 0
    while it < max_iter:
        it += 1
        rho_new = np.vdot(r0, r)
        if rho_new == 0.0:
            break
        if fresh_start:
            p = r.copy()
            fresh_start = False
        else:
            beta = (rho_new / rho) * (alpha / w)
            p = r + beta * (p - w * v)
        rho = rho_new
        v = mat @ p
        den = np.vdot(r0, v)
        if den == 0.0:
            break
        alpha = rho / den
        s = r - alpha * v
        if np.linalg.norm(s) / bnorm <= tol:
            x = x + alpha * p
        else:
            t = mat @ s
            tt = np.vdot(t, t)
            if tt == 0.0:
                break
            w = np.vdot(t, s) / tt
            x = x + alpha * p + w * s
            r = s - w * t
            res_rec = np.linalg.norm(r) / bnorm
            if res_rec > tol:
                if res_rec < best_res:
                    best_res, best_x = res_rec, x.copy()
                if w == 0.0:
                    break
                continue
        # Recursive residual crossed the threshold: confirm against the true
        # residual; restart the recursion from x if it disagrees.
        res = true_residual(x)
        if res < best_res:
            best_res, best_x = res, x.copy()
        if res <= tol:
            return x, SolveInfo(it, res, True)
        r = rhs - mat @ x
        r0 = r.copy()
        rho = alpha = w = 1.0 + 0j
        v = np.zeros(n, complex)
        fresh_start = True
    final = true_residual(best_x)
    return best_x, SolveInfo(it, final, final <= tol)


def solve(
    a: StiffnessMatrix,
    rhs: np.ndarray,
    tol: float = DEFAULT_TOL_INVERSION,
    max_iter: int = 20000,
) -> tuple[np.ndarray, SolveInfo]:
    """Solve ``A e = rhs`` to a relative residual tolerance.

    Raises :class:`SolveFailure` (carrying the best iterate and its residual)
    if the tolerance is not reached within ``max_iter`` iterations.
    """
    if not 0.0 < tol < 1.0:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    rhs = np.asarray(rhs).ravel()
    if rhs.shape[0] != a.shape[0]:
        raise ValueError(f"rhs length {rhs.shape[0]} != system size {a.shape[0]}")
    x, info = _bicgstab(a.matrix, rhs, tol, max_iter)
    if not info.converged:
        raise SolveFailure(
            f"no convergence to {tol:.1e} within {max_iter} iterations "
            f"(best residual {info.residual:.3e})",
            iterate=x,
            residual=info.residual,
            iterations=info.iterations,
        )
    return x, info


def solve_adjoint(
    a: StiffnessMatrix,
    rhs: np.ndarray,
    tol: float = DEFAULT_TOL_INVERSION,
    max_iter: int = 20000,
) -> tuple[np.ndarray, SolveInfo]:
    """Solve the transposed system ``A^T e = rhs`` (plain transpose, no conjugation)."""
    if not 0.0 < tol < 1.0:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    rhs = np.asarray(rhs).ravel()
    if rhs.shape[0] != a.shape[0]:
        raise ValueError(f"rhs length {rhs.shape[0]} != system size {a.shape[0]}")
    x, info = _bicgstab(a.transpose_matrix, rhs, tol, max_iter)
    if not info.converged:
        raise SolveFailure(
            f"adjoint solve: no convergence to {tol:.1e} within {max_iter} iterations "
            f"(best residual {info.residual:.3e})",
            iterate=x,
            residual=info.residual,
            iterations=info.iterations,
        )
    return x, info


# State shared with forked solve workers (set right before the pool spawns).
_SOLVE_CTX: dict = {}


def _solve_column(idx: int):
    x, info = _bicgstab(
        _SOLVE_CTX["mat"], _SOLVE_CTX["rhs"][:, idx], _SOLVE_CTX["tol"], _SOLVE_CTX["max_iter"]
    )
    return x, info


def solve_many(
    a: StiffnessMatrix,
    rhs: np.ndarray,
    tol: float = DEFAULT_TOL_INVERSION,
    max_iter: int = 20000,
    workers: int = 1,
) -> tuple[np.ndarray, list[SolveInfo]]:
    """Independent solves for every column of ``rhs``; optional process pool.

    Results are collected in column order, so the outcome is identical for
    any worker count.  Non-convergence of any column raises, like
    :func:`solve`.
    """
    rhs = np.asarray(rhs, complex)
    if rhs.ndim == 1:
        rhs = rhs[:, None]
    if rhs.shape[0] != a.shape[0]:
        raise ValueError(f"rhs rows {rhs.shape[0]} != system size {a.shape[0]}")
    cols = rhs.shape[1]
    out = np.zeros_like(rhs)
    infos: list[SolveInfo] = []
    if workers > 1 and cols > 1:
        from concurrent.futures import ProcessPoolExecutor

        _SOLVE_CTX.update(mat=a.matrix, rhs=rhs, tol=tol, max_iter=max_iter)
        try:
            with ProcessPoolExecutor(max_workers=min(workers, cols)) as pool:
                for p, (x, info) in enumerate(pool.map(_solve_column, range(cols))):
                    out[:, p] = x
                    infos.append(info)
        finally:
            _SOLVE_CTX.clear()
        for p, info in enumerate(infos):
            if not info.converged:
                raise SolveFailure(
                    f"column {p}: no convergence to {tol:.1e} "
                    f"(best residual {info.residual:.3e})",
                    iterate=out[:, p],
                    residual=info.residual,
                    iterations=info.iterations,
                )
    else:
        for p in range(cols):
            out[:, p], info = solve(a, rhs[:, p], tol=tol, max_iter=max_iter)
            infos.append(info)
    return out, infos


def source_rhs(grid: YeeGrid, sources: SourceSet) -> np.ndarray:
    """Right-hand sides for dipole excitations, one column per source.

    A dipole of moment ``amp`` (A*m) becomes a single-edge current density
    ``amp/cell_volume``; the normalized equation picks up the factor
    ``-1j*omega*J / (omega^2*eps0) = -1j*J/(omega*eps0)``.
    """
    vol = float(np.prod(grid.spacing))
    rhs = np.zeros((grid.n_unknowns, sources.count), complex)
    scale = -1j / (grid.omega * EPS0 * vol)
    for p in range(sources.count):
        pos = sources.positions[p]
        for comp, amp in ((0, sources.amp_x[p]), (1, sources.amp_y[p])):
            if amp == 0:
                continue
            cell, flat = grid.component_sample(pos, comp)
            if not grid.in_interior(cell):
                raise GridError(f"source {p} at {pos} falls into the absorbing layers")
            rhs[flat, p] += scale * amp
    return rhs


def incident_fields(
    a_bg: StiffnessMatrix,
    sources: SourceSet,
    tol: float = DEFAULT_TOL_DATA,
    max_iter: int = 20000,
    workers: int = 1,
) -> tuple[np.ndarray, list[SolveInfo]]:
    """Background fields of all sources; (3N, P) complex plus per-solve info."""
    rhs = source_rhs(a_bg.grid, sources)
    return solve_many(a_bg, rhs, tol=tol, max_iter=max_iter, workers=workers)


def scattered_from_contrast_source(
    a_bg: StiffnessMatrix,
    j: np.ndarray,
    tol: float = DEFAULT_TOL_DATA,
    max_iter: int = 20000,
) -> tuple[np.ndarray, SolveInfo]:
    """Scattered field of a contrast source: solve ``A e_sct = j``.

    ``j`` is in relative-contrast units (chi_rel * e_tot); the omega^2 of the
    physical equation is absorbed by the operator normalization.
    """
    j = np.asarray(j, complex).ravel()
    if np.all(j == 0):
        return np.zeros_like(j), SolveInfo(0, 0.0, True)
    return solve(a_bg, j, tol=tol, max_iter=max_iter)
