"""Receiver sampling and the dense contrast-source-to-measurement map.

The measurement operator selects individual staggered field samples (one
nonzero per row, nearest-sample convention, no interpolation).  The dense
scattering matrix maps a contrast source vector to all receiver samples and
is built row by row from transposed-system solves, which is affordable
because the number of measurements is tiny compared to the grid.  Receivers
are fixed across sources, so one matrix serves every illumination.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import io
from .errors import CsinvError, GridError, SolveFailure
from .fdfd import StiffnessMatrix, _bicgstab
from .grid import YeeGrid

_COMP_INDEX = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Receiver:
    position: tuple
    components: tuple = ("x", "y")


@dataclass
class MeasurementOperator:
    """Sparse selection of receiver samples from a 3N field vector."""

    grid: YeeGrid
    receivers: list
    selection: sp.csr_matrix = field(repr=False)
    row_receiver: np.ndarray = field(repr=False)   # receiver index per row
    row_component: np.ndarray = field(repr=False)  # 0/1/2 per row
    row_sample: np.ndarray = field(repr=False)     # flat field index per row

    @property
    def n_rows(self) -> int:
        return self.selection.shape[0]

    def apply(self, fields: np.ndarray) -> np.ndarray:
        """Sample one field vector (3N,) or a stack (3N, P)."""
        return self.selection @ fields

    def rows_of_receivers(self, receiver_indices) -> np.ndarray:
        mask = np.isin(self.row_receiver, np.asarray(list(receiver_indices), int))
        return np.flatnonzero(mask)


def build_measurement(grid: YeeGrid, receivers) -> MeasurementOperator:
    """Map receivers to their nearest staggered samples.

    Each receiver contributes one row per requested component; a receiver
    whose sample cell falls inside the absorbing layers is rejected.
    """
    rows, cols, rec_idx, comp_idx = [], [], [], []
    recs = list(receivers)
    for q, rec in enumerate(recs):
        for comp_name in rec.components:
            comp = _COMP_INDEX[comp_name]
            cell, flat = grid.component_sample(rec.position, comp)
            if not grid.in_interior(cell):
                raise GridError(
                    f"receiver {q} at {rec.position} samples inside the absorbing layers"
                )
            rows.append(len(rows))
            cols.append(flat)
            rec_idx.append(q)
            comp_idx.append(comp)
    m = len(rows)
    selection = sp.csr_matrix(
        (np.ones(m), (np.arange(m), np.array(cols, int) if m else np.array([], int))),
        shape=(m, grid.n_unknowns),
    )
    return MeasurementOperator(
        grid=grid,
        receivers=recs,
        selection=selection,
        row_receiver=np.array(rec_idx, int),
        row_component=np.array(comp_idx, int),
        row_sample=np.array(cols, int),
    )


@dataclass
class ScatteringMatrix:
    """Dense map from contrast sources to receiver samples, with provenance."""

    values: np.ndarray = field(repr=False)  # (M, 3N) complex
    row_receiver: np.ndarray = field(repr=False)
    row_component: np.ndarray = field(repr=False)
    omega: float = 0.0
    grid_hash: str = ""
    tol: float = 0.0

    @property
    def shape(self):
        return self.values.shape

    def save(self, path):
        return io.save_complex_matrix(
            path,
            self.values,
            kind="scattering",
            omega=self.omega,
            grid_hash=self.grid_hash,
            tol=self.tol,
            row_receiver=[int(r) for r in self.row_receiver],
            row_component=[int(c) for c in self.row_component],
        )

    @classmethod
    def load(cls, path) -> "ScatteringMatrix":
        values, header = io.load_complex_matrix(path)
        if header.get("kind") != "scattering":
            raise CsinvError(f"{path} holds {header.get('kind')!r}, not a scattering matrix")
        return cls(
            values=values,
            row_receiver=np.array(header["row_receiver"], int),
            row_component=np.array(header["row_component"], int),
            omega=header["omega"],
            grid_hash=header["grid_hash"],
            tol=header["tol"],
        )


# State shared with forked row workers (set just before the pool is spawned).
_ROW_CTX: dict = {}


def _solve_row(sample_index: int) -> np.ndarray:
    mat_t = _ROW_CTX["mat_t"]
    rhs = np.zeros(mat_t.shape[0], complex)
    rhs[sample_index] = 1.0
    x, info = _bicgstab(mat_t, rhs, _ROW_CTX["tol"], _ROW_CTX["max_iter"])
    if not info.converged:
        raise SolveFailure(
            f"row solve for sample {sample_index} stalled at residual {info.residual:.3e}",
            iterate=x,
            residual=info.residual,
            iterations=info.iterations,
        )
    return x


def build_scattering_matrix(
    a: StiffnessMatrix,
    measurement: MeasurementOperator,
    tol: float = 1e-8,
    max_iter: int = 20000,
    workers: int = 1,
) -> ScatteringMatrix:
    """Assemble the dense matrix by one transposed solve per measurement row.

    Row m solves ``A^T phi = selection_row_m^T``; by construction applying the
    finished matrix to a contrast source equals sampling the solved scattered
    field.  Rows are independent; ``workers > 1`` distributes them over
    processes (results are ordered, so the outcome does not depend on worker
    scheduling).
    """
    m = measurement.n_rows
    n = a.shape[0]
    values = np.zeros((m, n), complex)
    if m > 0:
        _ROW_CTX.update(mat_t=a.transpose_matrix, tol=tol, max_iter=max_iter)
        samples = [int(s) for s in measurement.row_sample]
        try:
            if workers > 1 and m > 1:
                with ProcessPoolExecutor(max_workers=min(workers, m)) as pool:
                    for row, phi in enumerate(pool.map(_solve_row, samples)):
                        values[row] = phi
            else:
                for row, sample in enumerate(samples):
                    try:
                        values[row] = _solve_row(sample)
                    except SolveFailure as exc:
                        raise SolveFailure(
                            f"scattering-matrix row {row}: {exc}",
                            iterate=exc.iterate,
                            residual=exc.residual,
                            iterations=exc.iterations,
                        ) from exc
        finally:
            _ROW_CTX.clear()
    return ScatteringMatrix(
        values=values,
        row_receiver=measurement.row_receiver.copy(),
        row_component=measurement.row_component.copy(),
        omega=a.grid.omega,
        grid_hash=a.grid.content_hash(),
        tol=tol,
    )


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


@dataclass
class CvSplit:
    """Row partition of matrix and data into reconstruction and held-out blocks."""

    phi_r: np.ndarray
    phi_cv: np.ndarray
    f_r: np.ndarray
    f_cv: np.ndarray
    rows_r: np.ndarray
    rows_cv: np.ndarray


def split_cv(phi: ScatteringMatrix, data: np.ndarray, cv_receivers) -> CvSplit:
    """Split rows by receiver membership in the held-out set.

    ``data`` holds one measurement column per source, rows aligned with the
    matrix.  Both partitions must be nonempty.
    """
    data = np.atleast_2d(np.asarray(data, complex))
    if data.shape[0] != phi.shape[0]:
        raise CsinvError(f"data rows {data.shape[0]} != matrix rows {phi.shape[0]}")
    cv_set = set(int(q) for q in cv_receivers)
    all_receivers = set(int(q) for q in phi.row_receiver)
    if not cv_set.issubset(all_receivers):
        raise CsinvError(f"held-out receivers {sorted(cv_set - all_receivers)} not present")
    mask_cv = np.isin(phi.row_receiver, sorted(cv_set))
    rows_cv = np.flatnonzero(mask_cv)
    rows_r = np.flatnonzero(~mask_cv)
    if len(rows_cv) == 0 or len(rows_r) == 0:
        raise CsinvError("both reconstruction and held-out partitions must be nonempty")
    return CvSplit(
        phi_r=phi.values[rows_r],
        phi_cv=phi.values[rows_cv],
        f_r=data[rows_r],
        f_cv=data[rows_cv],
        rows_r=rows_r,
        rows_cv=rows_cv,
    )
