"""Scenario files: a small TOML schema describing reproducible experiments.

Schema (keys in brackets are TOML tables; lengths in meters, angles in rad):

    name = "gpr_cube"            # identifier used for report directories
    scale = "desk"               # "desk" scenes run in tests; "server" are
                                 # full-size templates, not exercised by CI

    [domain]
    extent = [1.2, 1.2, 1.2]     # physical box edge lengths
    origin = [-0.6, -0.6, -0.6]  # optional, default centers the box
    frequency = 2.0e8            # Hz
    pml_cells = 5                # absorbing layers per face
    spacing = 0.06               # optional; default = mesh-criterion bound

    [truth]                      # data-generation grid (finer, no inverse crime)
    refine = 1.5                 # spacing divisor relative to inversion grid
    solver_tol = 1e-8

    [inversion]
    region = { center = [x,y,z], size = [sx,sy,sz] }  # optional active box
    solver_tol = 1e-6
    contrast_iters = 20
    mmv_max_iter = 300
    mmv_patience = 20

    [[background]]               # ordered; later entries override earlier
    type = "box"                 # or "sphere"
    center = [0.0, 0.0, -0.3]
    size = [1.2, 1.2, 0.6]       # boxes; spheres use radius = ...
    eps_r = 3.0
    sigma = 0.001                # S/m

    [[target]]                   # scatterers, present only in the truth grid
    type = "sphere"
    center = [0.2, -0.2, -0.3]
    radius = 0.12
    eps_r = 2.0
    sigma = 0.05

    [sources]
    plane = "z"                  # plane normal axis
    coordinate = 0.45            # position along the normal
    nx = 2                       # grid of source positions in the plane
    ny = 2
    span = [[-0.3, 0.3], [-0.3, 0.3]]
    polarization = "circular"    # "circular" | "x" | "y"
    amplitude = 1.0

    [[receivers]]                # one or more receiver planes
    plane = "z"
    coordinate = 0.45
    nx = 4
    ny = 4
    span = [[-0.45, 0.45], [-0.45, 0.45]]
    components = ["x", "y"]

    [cv]
    receivers = [1, 6, 11]       # held-out receiver indices (global order);
                                 # default: a spatially spread 15% subset

    [noise]
    zeta = 0.05
    seed = 7
    mode = "per-element"         # or "per-vector"

    [mismatch]                   # optional background-error study defaults
    eps_factor = 1.25
    wall_thickness = 0.25        # optional new z-size of background region 0
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError
from .grid import Region, Shape, complex_permittivity
from .scattering import Receiver


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"missing '{key}' in [{where}]")
    return table[key]


def _parse_region(entry: dict, omega: float, where: str) -> Region:
    kind = _require(entry, "type", where)
    center = tuple(_require(entry, "center", where))
    if kind == "box":
        shape = Shape("box", center, size=tuple(_require(entry, "size", where)))
    elif kind == "sphere":
        shape = Shape("sphere", center, radius=float(_require(entry, "radius", where)))
    else:
        raise ConfigError(f"unknown region type {kind!r} in [{where}]")
    eps = complex_permittivity(
        float(_require(entry, "eps_r", where)), float(entry.get("sigma", 0.0)), omega
    )
    return Region(shape, eps)


def _plane_positions(table: dict, where: str) -> np.ndarray:
    axis = {"x": 0, "y": 1, "z": 2}.get(_require(table, "plane", where))
    if axis is None:
        raise ConfigError(f"[{where}] plane must be x, y or z")
    coord = float(_require(table, "coordinate", where))
    nx, ny = int(_require(table, "nx", where)), int(_require(table, "ny", where))
    span = _require(table, "span", where)
    u = np.linspace(span[0][0], span[0][1], nx) if nx > 1 else np.array([np.mean(span[0])])
    v = np.linspace(span[1][0], span[1][1], ny) if ny > 1 else np.array([np.mean(span[1])])
    other = [a for a in range(3) if a != axis]
    pts = np.zeros((nx * ny, 3))
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts[:, other[0]] = uu.ravel()
    pts[:, other[1]] = vv.ravel()
    pts[:, axis] = coord
    return pts


@dataclass
class NoiseSpec:
    zeta: float = 0.05
    seed: int = 0
    mode: str = "per-element"


@dataclass
class MismatchSpec:
    eps_factor: float = 1.0
    wall_thickness: float | None = None


@dataclass
class Scenario:
    """Everything needed to reproduce one experiment."""

    name: str
    scale: str
    extent: tuple
    origin: tuple
    omega: float
    pml_cells: int
    spacing: float | None
    background: list
    targets: list
    source_positions: np.ndarray = field(repr=False)
    polarization: str = "circular"
    amplitude: complex = 1.0
    receivers: list = field(default_factory=list)
    cv_receivers: list = field(default_factory=list)
    truth_refine: float = 1.5
    truth_tol: float = 1e-8
    inversion_tol: float = 1e-6
    inversion_region: Shape | None = None
    contrast_iters: int = 20
    mmv_max_iter: int = 300
    mmv_patience: int = 20
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    mismatch: MismatchSpec = field(default_factory=MismatchSpec)
    source_path: Path | None = None

    def validate(self):
        if self.truth_refine < 1.5:
            raise ConfigError(
                f"truth grid must be at least 1.5x finer than the inversion grid "
                f"(got {self.truth_refine}); identical grids invert their own crime"
            )
        if len(self.receivers) == 0:
            raise ConfigError("at least one receiver is required")
        if self.source_positions.shape[0] < 1:
            raise ConfigError("at least one source is required")
        cv = set(self.cv_receivers)
        if not cv:
            raise ConfigError("the held-out receiver set must be nonempty")
        if not cv.issubset(range(len(self.receivers))):
            raise ConfigError(f"held-out indices {sorted(cv)} outside receiver list")
        if len(cv) >= len(self.receivers):
            raise ConfigError("held-out set must leave reconstruction receivers")
        if self.noise.mode not in ("per-element", "per-vector"):
            raise ConfigError(f"unknown noise mode {self.noise.mode!r}")
        return self

    def with_mismatch(self, eps_factor=None, wall_thickness=None) -> "Scenario":
        """Scenario variant with a deliberately wrong background model."""
        spec = MismatchSpec(
            eps_factor=self.mismatch.eps_factor if eps_factor is None else eps_factor,
            wall_thickness=(
                self.mismatch.wall_thickness if wall_thickness is None else wall_thickness
            ),
        )
        return replace(self, mismatch=spec)


def default_cv_subset(n_receivers: int, fraction: float = 0.15) -> list:
    """Deterministic spatially spread held-out subset (every k-th receiver)."""
    count = max(1, min(n_receivers - 1, round(fraction * n_receivers)))
    step = n_receivers / count
    picks = sorted({int(np.floor((i + 0.5) * step)) for i in range(count)})
    return [min(p, n_receivers - 1) for p in picks]


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(raw, source_path=path)


def scenario_from_dict(raw: dict, source_path=None) -> Scenario:
    dom = _require(raw, "domain", "domain")
    freq = float(_require(dom, "frequency", "domain"))
    omega = 2 * np.pi * freq
    extent = tuple(float(v) for v in _require(dom, "extent", "domain"))
    origin = tuple(
        float(v) for v in dom.get("origin", tuple(-0.5 * e for e in extent))
    )

    background = [
        _parse_region(r, omega, "background") for r in raw.get("background", [])
    ]
    targets = [_parse_region(r, omega, "target") for r in raw.get("target", [])]

    src = _require(raw, "sources", "sources")
    positions = _plane_positions(src, "sources")

    rec_tables = raw.get("receivers")
    if rec_tables is None:
        raise ConfigError("missing [receivers]")
    if isinstance(rec_tables, dict):
        rec_tables = [rec_tables]
    receivers = []
    for t in rec_tables:
        comps = tuple(t.get("components", ["x", "y"]))
        for pos in _plane_positions(t, "receivers"):
            receivers.append(Receiver(tuple(pos), comps))

    cv_table = raw.get("cv", {})
    cv = list(cv_table.get("receivers", default_cv_subset(len(receivers))))

    truth = raw.get("truth", {})
    inv = raw.get("inversion", {})
    region = None
    if "region" in inv:
        r = inv["region"]
        region = Shape("box", tuple(r["center"]), size=tuple(r["size"]))

    noise_t = raw.get("noise", {})
    noise = NoiseSpec(
        zeta=float(noise_t.get("zeta", 0.05)),
        seed=int(noise_t.get("seed", 0)),
        mode=noise_t.get("mode", "per-element"),
    )
    mm = raw.get("mismatch", {})
    mismatch = MismatchSpec(
        eps_factor=float(mm.get("eps_factor", 1.0)),
        wall_thickness=(
            float(mm["wall_thickness"]) if "wall_thickness" in mm else None
        ),
    )

    scenario = Scenario(
        name=raw.get("name", source_path.stem if source_path else "scenario"),
        scale=raw.get("scale", "desk"),
        extent=extent,
        origin=origin,
        omega=omega,
        pml_cells=int(dom.get("pml_cells", 6)),
        spacing=float(dom["spacing"]) if "spacing" in dom else None,
        background=background,
        targets=targets,
        source_positions=positions,
        polarization=src.get("polarization", "circular"),
        amplitude=complex(src.get("amplitude", 1.0)),
        receivers=receivers,
        cv_receivers=cv,
        truth_refine=float(truth.get("refine", 1.5)),
        truth_tol=float(truth.get("solver_tol", 1e-8)),
        inversion_tol=float(inv.get("solver_tol", 1e-6)),
        inversion_region=region,
        contrast_iters=int(inv.get("contrast_iters", 20)),
        mmv_max_iter=int(inv.get("mmv_max_iter", 300)),
        mmv_patience=int(inv.get("mmv_patience", 20)),
        noise=noise,
        mismatch=mismatch,
        source_path=source_path,
    )
    return scenario.validate()
