"""File formats: binary complex-matrix container, CSV tables, legacy VTK volumes.

Binary matrix container (little-endian):

    bytes 0..7    magic ``b"CSMAT001"``
    bytes 8..11   uint32 length of the JSON header that follows
    ...           UTF-8 JSON: rows, cols, kind, plus producer metadata
                  (omega, grid_hash, tol, ...)
    ...           rows*cols complex values, row-major, interleaved
                  re/im float64 pairs

CSV files are plain comma-separated text with a single header line; floats
are written with '%.17g' so identical runs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ArtifactError

MAGIC = b"CSMAT001"

FLOAT_FMT = "%.17g"


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return FLOAT_FMT % float(x)


def save_complex_matrix(path, values: np.ndarray, kind: str, **meta) -> Path:
    path = Path(path)
    values = np.atleast_2d(np.asarray(values, complex))
    header = {"rows": int(values.shape[0]), "cols": int(values.shape[1]), "kind": kind}
    header.update(meta)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    interleaved = np.empty(values.shape + (2,), dtype="<f8")
    interleaved[..., 0] = values.real
    interleaved[..., 1] = values.imag
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        fh.write(np.ascontiguousarray(interleaved).tobytes())
    return path


def load_complex_matrix(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ArtifactError(f"{path}: not a complex-matrix container")
        (hlen,) = np.frombuffer(fh.read(4), "<u4")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        rows, cols = header["rows"], header["cols"]
        data = np.frombuffer(fh.read(), "<f8")
    if data.size != rows * cols * 2:
        raise ArtifactError(f"{path}: truncated payload")
    data = data.reshape(rows, cols, 2)
    return data[..., 0] + 1j * data[..., 1], header


def write_csv(path, columns: dict) -> Path:
    """Write named columns of equal length; floats formatted reproducibly."""
    path = Path(path)
    names = list(columns)
    arrays = [np.asarray(columns[n]).ravel() for n in names]
    n = len(arrays[0]) if arrays else 0
    lines = [",".join(names)]
    for i in range(n):
        lines.append(",".join(_fmt(a[i]) for a in arrays))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_field_csv(path, field: np.ndarray, grid) -> Path:
    """Export a 3N field vector as (index, component, re, im) rows."""
    n = grid.n_cells
    field = np.asarray(field).ravel()
    comp = np.repeat(np.array(["x", "y", "z"]), n)
    idx = np.tile(np.arange(n), 3)
    path = Path(path)
    lines = ["index,component,re,im"]
    for i in range(3 * n):
        lines.append(
            f"{idx[i]},{comp[i]},{FLOAT_FMT % field[i].real},{FLOAT_FMT % field[i].imag}"
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def write_vtk_scalars(path, grid, fields: dict, title="csinv volume") -> Path:
    """Legacy-VTK structured points with one scalar array per entry.

    Values are per-cell; points are placed at cell centers.
    """
    path = Path(path)
    nx, ny, nz = grid.dims
    dx, dy, dz = grid.spacing
    ox = grid.origin[0] + 0.5 * dx
    oy = grid.origin[1] + 0.5 * dy
    oz = grid.origin[2] + 0.5 * dz
    out = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx} {ny} {nz}",
        f"ORIGIN {_fmt(ox)} {_fmt(oy)} {_fmt(oz)}",
        f"SPACING {_fmt(dx)} {_fmt(dy)} {_fmt(dz)}",
        f"POINT_DATA {nx * ny * nz}",
    ]
    for name, values in fields.items():
        values = np.asarray(values, float).ravel()
        if values.size != nx * ny * nz:
            raise ValueError(f"field {name}: {values.size} values for {nx*ny*nz} cells")
        out.append(f"SCALARS {name} double 1")
        out.append("LOOKUP_TABLE default")
        # linear index is x-fastest, which is VTK's expected order
        out.extend(_fmt(v) for v in values)
    path.write_text("\n".join(out) + "\n")
    return path


def write_field_vtk(path, field: np.ndarray, grid, name: str = "E_magnitude") -> Path:
    """Per-cell field magnitude |E| as a legacy-VTK volume."""
    field = np.asarray(field).ravel()
    n = grid.n_cells
    if field.size != 3 * n:
        raise ValueError(f"field length {field.size} != 3 * cells ({3 * n})")
    mag = np.sqrt(
        np.abs(field[:n]) ** 2 + np.abs(field[n : 2 * n]) ** 2 + np.abs(field[2 * n :]) ** 2
    )
    return write_vtk_scalars(path, grid, {name: mag}, title="field magnitude")


def write_slice_csv(path, grid, volume: np.ndarray, axis: int, coordinate: float) -> Path:
    """Cross section of a per-cell volume through a plane normal to an axis."""
    vol = np.asarray(volume).reshape(grid.dims, order="F")
    t = (coordinate - grid.origin[axis]) / grid.spacing[axis] - 0.5
    idx = int(np.clip(np.round(t), 0, grid.dims[axis] - 1))
    sl = [slice(None)] * 3
    sl[axis] = idx
    plane = vol[tuple(sl)]
    axes = [a for a in range(3) if a != axis]
    names = "xyz"
    lines = [f"{names[axes[0]]},{names[axes[1]]},re,im"]
    for b in range(plane.shape[1]):
        for a in range(plane.shape[0]):
            ca = grid.origin[axes[0]] + (a + 0.5) * grid.spacing[axes[0]]
            cb = grid.origin[axes[1]] + (b + 0.5) * grid.spacing[axes[1]]
            v = complex(plane[a, b])
            lines.append(
                f"{FLOAT_FMT % ca},{FLOAT_FMT % cb},{FLOAT_FMT % v.real},{FLOAT_FMT % v.imag}"
            )
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
