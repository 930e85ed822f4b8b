"""Staggered 3-D grid, absorbing-layer profiles and background permittivity maps.

Conventions used throughout the package:

* Cells are indexed ``(i, j, k)`` with the linear index ``i + Nx*j + Nx*Ny*k``
  (x fastest).  ``dims`` counts *all* cells including the absorbing layers.
* The complex relative permittivity of a lossy medium is
  ``eps_r - 1j*sigma/(omega*eps0)`` for the ``exp(+1j*omega*t)`` time factor,
  so physical media have real part >= 1 and imaginary part <= 0.
* Electric-field samples live on cell edges: the x component of cell
  ``(i, j, k)`` sits at ``origin + ((i+0.5)*dx, j*dy, k*dz)`` and likewise for
  y and z.  Permittivity is taken piecewise constant per cell (staircase
  approximation, no interface averaging).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import GridError

C0 = 299792458.0
EPS0 = 8.8541878128e-12
MU0 = 4e-7 * np.pi

MESH_POINTS_PER_WAVELENGTH = 15


def complex_permittivity(eps_r: float, sigma: float, omega: float) -> complex:
    """Relative complex permittivity of a medium with conductivity sigma (S/m)."""
    return eps_r - 1j * sigma / (omega * EPS0)


def max_spacing(omega: float, eps_r_max: float) -> float:
    """Largest admissible cell size for accurate frequency-domain modeling.

    The mesh must resolve the shortest wavelength in the scene with at least
    15 samples: ``delta <= lambda0 / (15*sqrt(max eps_r))``.
    """
    lam0 = 2 * np.pi * C0 / omega
    return lam0 / (MESH_POINTS_PER_WAVELENGTH * np.sqrt(eps_r_max))


@dataclass(frozen=True)
class Shape:
    """Axis-aligned box or sphere, in scene coordinates (meters)."""

    kind: str                    # "box" | "sphere"
    center: tuple
    size: tuple = ()             # box edge lengths
    radius: float = 0.0          # sphere radius

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Boolean mask for points (n, 3) lying inside the shape."""
        c = np.asarray(self.center, float)
        if self.kind == "sphere":
            return np.sum((pts - c) ** 2, axis=1) <= self.radius ** 2
        half = 0.5 * np.asarray(self.size, float)
        return np.all(np.abs(pts - c) <= half, axis=1)

    def is_degenerate(self) -> bool:
        if self.kind == "sphere":
            return self.radius <= 0.0
        return any(s <= 0.0 for s in self.size)

    def bounds(self):
        c = np.asarray(self.center, float)
        if self.kind == "sphere":
            r = self.radius
            return c - r, c + r
        half = 0.5 * np.asarray(self.size, float)
        return c - half, c + half


@dataclass(frozen=True)
class Region:
    """A shape painted with a complex relative permittivity."""

    shape: Shape
    eps: complex


@dataclass
class YeeGrid:
    """Uniform staggered grid with absorbing layers and a background medium."""

    dims: tuple                  # (Nx, Ny, Nz) total cells, absorbing layers included
    spacing: tuple               # (dx, dy, dz) in meters
    pml_cells: int
    omega: float
    origin: tuple                # scene coordinates of the grid corner (cell (0,0,0))
    eps_background: np.ndarray = field(repr=False)  # complex (Nx, Ny, Nz), relative
    mu: float = MU0

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 1 + 2 * self.pml_cells:
            raise GridError(
                f"dims {self.dims} too small for {self.pml_cells} absorbing layers per face"
            )
        if min(self.spacing) <= 0:
            raise GridError(f"spacings must be positive, got {self.spacing}")
        eps = np.asarray(self.eps_background)
        if eps.shape != self.dims:
            raise GridError(f"eps_background shape {eps.shape} != dims {self.dims}")
        if np.any(eps.real < 1.0 - 1e-12) or np.any(eps.imag > 1e-12):
            raise GridError("background permittivity must have Re >= 1 and Im <= 0")

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def n_unknowns(self) -> int:
        """Three field components per cell."""
        return 3 * self.n_cells

    @property
    def wavelength(self) -> float:
        return 2 * np.pi * C0 / self.omega

    def cell_centers(self) -> np.ndarray:
        """(N, 3) coordinates of cell centers, linear-index order."""
        nx, ny, nz = self.dims
        dx, dy, dz = self.spacing
        i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        pts = np.stack(
            [
                self.origin[0] + (i.ravel(order="F") + 0.5) * dx,
                self.origin[1] + (j.ravel(order="F") + 0.5) * dy,
                self.origin[2] + (k.ravel(order="F") + 0.5) * dz,
            ],
            axis=1,
        )
        return pts

    def component_sample(self, position, component: int):
        """Nearest staggered sample of a field component to a scene position.

        Returns ``(cell_ijk, flat_index)`` where ``flat_index`` indexes the
        3N-vector in component-major order.  The component's own axis is
        sampled at half-integer coordinates, the other two at integers.
        """
        nx, ny, nz = self.dims
        pos = np.asarray(position, float)
        idx = []
        for ax, n in enumerate((nx, ny, nz)):
            t = (pos[ax] - self.origin[ax]) / self.spacing[ax]
            if ax == component:
                t -= 0.5
            idx.append(int(np.clip(np.round(t), 0, n - 1)))
        i, j, k = idx
        flat = component * self.n_cells + (i + nx * j + nx * ny * k)
        return (i, j, k), flat

    def in_interior(self, cell_ijk) -> bool:
        """True if the cell lies strictly outside the absorbing layers."""
        p = self.pml_cells
        return all(p <= c < n - p for c, n in zip(cell_ijk, self.dims))

    def interior_slices(self):
        p = self.pml_cells
        return tuple(slice(p, n - p) for n in self.dims)

    def eps_flat(self) -> np.ndarray:
        """Per-cell background permittivity in linear-index order."""
        return self.eps_background.ravel(order="F")

    def content_hash(self) -> str:
        """Hash over everything that determines the discrete operator."""
        h = hashlib.sha256()
        h.update(np.asarray(self.dims, np.int64).tobytes())
        h.update(np.asarray(self.spacing, np.float64).tobytes())
        h.update(np.asarray([self.pml_cells], np.int64).tobytes())
        h.update(np.asarray([self.omega, self.mu], np.float64).tobytes())
        h.update(np.asarray(self.origin, np.float64).tobytes())
        h.update(np.ascontiguousarray(self.eps_background).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class PmlStretch:
    """Per-axis complex coordinate-stretch factors at staggered sample points.

    ``primal[a][i]`` applies at integer coordinates ``i*h`` of axis ``a``
    (backward-difference outputs), ``dual[a][i]`` at ``(i+0.5)*h``
    (forward-difference outputs).  Factors are exactly 1 outside the layers.
    """

    primal: tuple                # three complex arrays
    dual: tuple
    order: int
    target_reflection: float


def build_pml(grid: YeeGrid, order: int = 3, target_reflection: float = 1e-4) -> PmlStretch:
    """Polynomial-graded complex stretch profiles on all six faces.

    The imaginary part grows as ``(depth/L)**order`` toward the boundary,
    scaled so a normal-incidence plane wave makes a round trip with amplitude
    ``target_reflection``.  ``pml_cells == 0`` yields identity stretch.
    """
    if order < 1:
        raise GridError(f"grading order must be >= 1, got {order}")
    if not 0.0 < target_reflection < 1.0:
        raise GridError(f"target reflection must lie in (0, 1), got {target_reflection}")
    npml = grid.pml_cells
    k0 = grid.omega / C0
    primal, dual = [], []
    for ax in range(3):
        n = grid.dims[ax]
        h = grid.spacing[ax]
        xs_p = np.arange(n) * h
        xs_d = (np.arange(n) + 0.5) * h
        if npml == 0:
            primal.append(np.ones(n, complex))
            dual.append(np.ones(n, complex))
            continue
        depth = npml * h
        a_max = (order + 1) * abs(np.log(target_reflection)) / (2 * k0 * depth)
        lo = npml * h
        hi = (n - npml) * h

        def profile(x):
            d = np.where(x < lo, lo - x, np.where(x > hi, x - hi, 0.0))
            return 1.0 - 1j * a_max * (d / depth) ** order

        primal.append(profile(xs_p))
        dual.append(profile(xs_d))
    return PmlStretch(tuple(primal), tuple(dual), order, target_reflection)


def build_grid(
    domain_extent,
    eps_map,
    omega: float,
    pml_cells: int,
    origin=None,
    spacing: float | None = None,
) -> YeeGrid:
    """Discretize a rectangular scene into a YeeGrid.

    Parameters
    ----------
    domain_extent : 3-tuple of floats
        Physical edge lengths of the scene (meters), absorbing layers excluded.
    eps_map : list of Region
        Ordered background regions; later entries override earlier ones.
        Cells not covered by any region default to vacuum.
    omega : float
        Angular frequency (rad/s).
    pml_cells : int
        Absorbing layers added on every face, outside the physical extent.
    origin : 3-tuple, optional
        Scene coordinates of the physical domain corner.  Defaults to
        ``-extent/2`` (scene centered at the coordinate origin).
    spacing : float, optional
        Requested uniform cell size.  Defaults to the largest admissible
        value for the map's maximum permittivity.

    The spacing must satisfy ``spacing <= lambda0/(15*sqrt(max eps_r))``;
    a coarser request is rejected along with the minimal admissible cell
    count per axis.
    """
    extent = np.asarray(domain_extent, float)
    if extent.shape != (3,) or np.any(extent <= 0):
        raise GridError(f"domain extent must be three positive lengths, got {domain_extent}")
    eps_r_max = 1.0
    for region in eps_map:
        if region.eps.real < 1.0 or region.eps.imag > 0.0:
            raise GridError(f"region permittivity {region.eps} is unphysical (Re>=1, Im<=0)")
        eps_r_max = max(eps_r_max, region.eps.real)
    delta_max = max_spacing(omega, eps_r_max)
    if spacing is None:
        spacing = delta_max
    if spacing > delta_max * (1 + 1e-12):
        min_cells = [int(np.ceil(e / delta_max)) for e in extent]
        raise GridError(
            f"spacing {spacing:.4g} m violates the mesh criterion (max {delta_max:.4g} m); "
            f"minimal admissible cell counts for this extent: {min_cells}"
        )
    interior = [max(1, int(np.ceil(e / spacing))) for e in extent]
    dims = tuple(n + 2 * pml_cells for n in interior)
    if origin is None:
        origin = tuple(-0.5 * extent)
    lo = np.asarray(origin, float)
    hi = lo + extent
    for region in eps_map:
        rlo, rhi = region.shape.bounds()
        if np.any(rlo < lo - 1e-9) or np.any(rhi > hi + 1e-9):
            raise GridError(f"region {region.shape} extends outside the domain {lo}..{hi}")
    grid_origin = tuple(lo - pml_cells * spacing)
    eps = np.ones(dims, complex)
    grid = YeeGrid(
        dims=dims,
        spacing=(spacing,) * 3,
        pml_cells=pml_cells,
        omega=omega,
        origin=grid_origin,
        eps_background=eps,
    )
    # Absorbing-layer cells continue the background: paint regions on the full
    # grid but clamp sphere/box membership to actual cell centers, then extend
    # the outermost interior values into the layers (so a half space keeps its
    # medium through the side walls).
    for region in eps_map:
        grid = rasterize_shape(grid, region.shape, region.eps)
    _extend_into_pml(grid)
    return grid


def _extend_into_pml(grid: YeeGrid) -> None:
    """Replicate the outermost interior cells outward through the layers."""
    p = grid.pml_cells
    if p == 0:
        return
    eps = grid.eps_background
    nx, ny, nz = grid.dims
    eps[:p, :, :] = eps[p : p + 1, :, :]
    eps[nx - p :, :, :] = eps[nx - p - 1 : nx - p, :, :]
    eps[:, :p, :] = eps[:, p : p + 1, :]
    eps[:, ny - p :, :] = eps[:, ny - p - 1 : ny - p, :]
    eps[:, :, :p] = eps[:, :, p : p + 1]
    eps[:, :, nz - p :] = eps[:, :, nz - p - 1 : nz - p]


def rasterize_shape(grid: YeeGrid, shape: Shape, eps: complex, warn=None) -> YeeGrid:
    """Set cells whose centers fall inside the shape to a new permittivity.

    Degenerate shapes (zero radius or side) are a no-op; if ``warn`` is a
    list, a message is appended so callers can surface the flag.
    """
    if eps.real < 1.0 or eps.imag > 0.0:
        raise GridError(f"permittivity {eps} is unphysical (need Re>=1, Im<=0)")
    if shape.is_degenerate():
        if warn is not None:
            warn.append(f"degenerate {shape.kind} skipped")
        return grid
    mask = shape.contains(grid.cell_centers())
    eps_new = grid.eps_background.copy()
    flat = eps_new.ravel(order="F")
    flat[mask] = eps
    eps_new = flat.reshape(grid.dims, order="F")
    return YeeGrid(
        dims=grid.dims,
        spacing=grid.spacing,
        pml_cells=grid.pml_cells,
        omega=grid.omega,
        origin=grid.origin,
        eps_background=eps_new,
        mu=grid.mu,
    )
