"""End-to-end scenario runs: synthetic data, noise, inversion, diagnostics.

A scenario is executed in stages: forward-simulate measurements on a finer
truth grid, perturb them with seeded noise, build the scattering matrix on
the (coarser) inversion grid, estimate the contrast sources jointly with
held-out stopping, compute total fields once, reconstruct the contrast, and
reduce everything to per-cell indicator volumes and localization metrics.
The truth and inversion grids always differ in resolution so the inversion
never sees data produced by its own discretization.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import contrast as contrast_mod
from . import fdfd, io, mmv
from . import scattering as scattering_mod
from .config import MismatchSpec, Scenario
from .errors import ConfigError, CsinvError
from .grid import EPS0, Region, Shape, YeeGrid, build_grid, build_pml, rasterize_shape

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# grids


def apply_mismatch(background: list, mismatch: MismatchSpec) -> list:
    """Background regions as(sumed) by an imperfect model of the scene."""
    out = []
    for idx, region in enumerate(background):
        eps = region.eps * mismatch.eps_factor
        if eps.real < 1.0:
            eps = 1.0 + 1j * min(eps.imag, 0.0)
        shape = region.shape
        if mismatch.wall_thickness is not None and idx == 0 and shape.kind == "box":
            size = list(shape.size)
            size[2] = mismatch.wall_thickness
            shape = Shape("box", shape.center, size=tuple(size))
        out.append(Region(shape, eps))
    return out


def inversion_grid(scenario: Scenario, mismatched: bool = False) -> YeeGrid:
    background = (
        apply_mismatch(scenario.background, scenario.mismatch)
        if mismatched
        else scenario.background
    )
    return build_grid(
        scenario.extent,
        background,
        scenario.omega,
        scenario.pml_cells,
        origin=scenario.origin,
        spacing=scenario.spacing,
    )


def truth_grids(scenario: Scenario) -> tuple[YeeGrid, YeeGrid]:
    """(background-only, with-targets) grids at the refined truth spacing.

    The absorbing layers keep their physical thickness: the layer count
    scales with the refinement so data quality does not depend on it.
    """
    base = inversion_grid(scenario)
    spacing = base.spacing[0] / scenario.truth_refine
    pml_cells = int(np.ceil(scenario.pml_cells * scenario.truth_refine))
    bg = build_grid(
        scenario.extent,
        scenario.background,
        scenario.omega,
        pml_cells,
        origin=scenario.origin,
        spacing=spacing,
    )
    full = bg
    for region in scenario.targets:
        full = rasterize_shape(full, region.shape, region.eps)
    return bg, full


def source_set(scenario: Scenario) -> fdfd.SourceSet:
    amp = scenario.amplitude
    p = scenario.source_positions.shape[0]
    if scenario.polarization == "circular":
        ax = np.full(p, amp, complex)
        ay = 1j * ax
    elif scenario.polarization == "x":
        ax = np.full(p, amp, complex)
        ay = np.zeros(p, complex)
    elif scenario.polarization == "y":
        ax = np.zeros(p, complex)
        ay = np.full(p, amp, complex)
    else:
        raise ConfigError(f"unknown polarization {scenario.polarization!r}")
    return fdfd.SourceSet(scenario.source_positions, ax, ay, scenario.omega)


def active_cells(grid: YeeGrid, region: Shape | None) -> np.ndarray:
    """Cells eligible to carry unknowns: non-absorbing, inside the region."""
    nx, ny, nz = grid.dims
    p = grid.pml_cells
    interior = np.zeros(grid.dims, bool)
    interior[p : nx - p, p : ny - p, p : nz - p] = True
    mask = interior.ravel(order="F")
    if region is not None:
        mask &= region.contains(grid.cell_centers())
    if not mask.any():
        raise ConfigError("inversion region contains no grid cells")
    return mask


def component_rows(cell_mask: np.ndarray) -> np.ndarray:
    """Row indices of all three components of the selected cells."""
    n = cell_mask.size
    cells = np.flatnonzero(cell_mask)
    return np.concatenate([cells, cells + n, cells + 2 * n])


# ---------------------------------------------------------------------------
# data synthesis


def synthesize_data(scenario: Scenario, workers: int = 1):
    """Forward-model the scattered-field measurements on the truth grids.

    Totals are solved on the grid containing the targets, incident fields on
    the background-only grid; receivers sample their difference.
    """
    bg, full = truth_grids(scenario)
    pml = build_pml(bg)
    a_bg = fdfd.assemble(bg, pml)
    a_full = fdfd.assemble(full, pml)
    sources = source_set(scenario)
    tol = scenario.truth_tol
    e_inc, _ = fdfd.incident_fields(a_bg, sources, tol=tol, workers=workers)
    e_tot, _ = fdfd.incident_fields(a_full, sources, tol=tol, workers=workers)
    meas = scattering_mod.build_measurement(bg, scenario.receivers)
    f = meas.apply(e_tot - e_inc)
    return f, {"dims": "x".join(str(d) for d in full.dims), "spacing": full.spacing[0]}


def add_noise(f: np.ndarray, zeta: float, seed: int, mode: str = "per-element") -> np.ndarray:
    """Uniform complex noise scaled by each source's peak measurement.

    Per source p the perturbation is ``zeta * max_m |f_pm| * (n1 + 1j*n2)``
    with n1, n2 uniform on [-1, 1]; ``mode`` chooses whether the pair is
    drawn per element or once per source vector.  Deterministic under seed.
    """
    if zeta < 0:
        raise CsinvError(f"noise fraction must be nonnegative, got {zeta}")
    f = np.atleast_2d(np.asarray(f, complex))
    if zeta == 0.0:
        return f.copy()
    rng = np.random.default_rng(seed)
    out = f.copy()
    m, p = f.shape
    for col in range(p):
        scale = zeta * np.max(np.abs(f[:, col])) if m else 0.0
        if mode == "per-element":
            n1 = rng.uniform(-1.0, 1.0, m)
            n2 = rng.uniform(-1.0, 1.0, m)
        elif mode == "per-vector":
            n1 = rng.uniform(-1.0, 1.0)
            n2 = rng.uniform(-1.0, 1.0)
        else:
            raise CsinvError(f"unknown noise mode {mode!r}")
        out[:, col] += scale * (n1 + 1j * n2)
    return out


# ---------------------------------------------------------------------------
# indicators and metrics


def shape_indicator_contrast(chi: np.ndarray) -> np.ndarray:
    """Per-cell magnitude of the component-averaged contrast."""
    return np.abs(contrast_mod.isotropic_contrast(chi))


def shape_indicator_sources(j: np.ndarray) -> np.ndarray:
    """Per-cell contrast-source strength summed over sources."""
    j = np.asarray(j, complex)
    j = j[:, None] if j.ndim == 1 else j
    n = j.shape[0] // 3
    blocks = j.reshape(3, n, j.shape[1])
    return np.sum(np.sqrt(np.sum(np.abs(blocks) ** 2, axis=0)), axis=1)


def indicator_support(indicator: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    peak = float(indicator.max()) if indicator.size else 0.0
    if peak <= 0.0:
        return np.zeros(indicator.shape, bool)
    return indicator >= threshold * peak


def weighted_centroid(indicator: np.ndarray, grid: YeeGrid, threshold: float = 0.5):
    """Intensity-weighted centroid over the thresholded support, or None."""
    support = indicator_support(indicator, threshold)
    if not support.any():
        return None
    pts = grid.cell_centers()[support]
    w = indicator[support]
    return tuple(np.average(pts, axis=0, weights=w))


def support_overlap(indicator: np.ndarray, truth_mask: np.ndarray, threshold: float = 0.5) -> float:
    """Dice coefficient between the indicator support and the truth support."""
    a = indicator_support(indicator, threshold)
    b = np.asarray(truth_mask, bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / total


def truth_on_grid(scenario: Scenario, grid: YeeGrid):
    """Rasterized true contrast (3N) and support mask (N) on a grid."""
    painted = grid
    for region in scenario.targets:
        painted = rasterize_shape(painted, region.shape, region.eps)
    chi_cells = painted.eps_flat() - grid.eps_flat()
    mask = np.abs(chi_cells) > 0
    return np.tile(chi_cells, 3), mask


# ---------------------------------------------------------------------------
# the full pipeline


@dataclass
class RunOptions:
    out_dir: Path | None = None
    phi_cache: Path | None = None
    workers: int = 1
    mismatched_background: bool = False
    seed: int | None = None
    zeta: float | None = None
    mmv_max_iter: int | None = None
    mmv_patience: int | None = None
    contrast_iters: int | None = None
    export: bool = True


@dataclass
class RunReport:
    scenario_name: str
    grid: YeeGrid
    cell_mask: np.ndarray = field(repr=False)
    f_noise: np.ndarray = field(repr=False)
    trace: mmv.MmvTrace = None
    inversion: contrast_mod.InversionState = None
    j_hat: np.ndarray = field(default=None, repr=False)       # (3N, P) full grid
    chi: np.ndarray = field(default=None, repr=False)         # (3N,) full grid
    indicator_chi: np.ndarray = field(default=None, repr=False)
    indicator_src: np.ndarray = field(default=None, repr=False)
    indicator_true: np.ndarray = field(default=None, repr=False)
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    noise_mode: str = "per-element"
    out_dir: Path | None = None


def phi_cache_key(grid: YeeGrid, receivers, tol: float) -> str:
    h = hashlib.sha256()
    h.update(grid.content_hash().encode())
    for rec in receivers:
        h.update(np.asarray(rec.position, float).tobytes())
        h.update(",".join(rec.components).encode())
    h.update(np.float64(tol).tobytes())
    return h.hexdigest()[:16]


def load_or_build_phi(a, measurement, tol, cache_dir=None, workers=1):
    """Build the scattering matrix, reusing an on-disk copy when available."""
    key = phi_cache_key(a.grid, measurement.receivers, tol)
    path = Path(cache_dir) / f"phi-{key}.csmat" if cache_dir is not None else None
    if path is not None and path.exists():
        log.info("scattering matrix: cache hit %s", path.name)
        return scattering_mod.ScatteringMatrix.load(path), path, True
    phi = scattering_mod.build_scattering_matrix(
        a, measurement, tol=tol, workers=workers
    )
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        phi.save(path)
    return phi, path, False


def _fresh_dir(base: Path) -> Path:
    """Never clobber an existing report directory: suffix with a counter."""
    if not base.exists():
        return base
    for k in range(2, 1000):
        cand = base.with_name(f"{base.name}-{k}")
        if not cand.exists():
            return cand
    raise CsinvError(f"cannot find a free report directory near {base}")


def run_scenario(scenario: Scenario, options: RunOptions | None = None) -> RunReport:
    options = options or RunOptions()
    timings = {}
    t_all = time.perf_counter()

    def stage(name):
        timings[name] = time.perf_counter()
        log.info("stage %s ...", name)

    def stage_done(name):
        timings[name] = time.perf_counter() - timings[name]
        log.info("stage %s done in %.1f s", name, timings[name])

    seed = scenario.noise.seed if options.seed is None else options.seed
    zeta = scenario.noise.zeta if options.zeta is None else options.zeta

    stage("synthesize")
    f_clean, truth_meta = synthesize_data(scenario, workers=options.workers)
    stage_done("synthesize")

    f_noise = add_noise(f_clean, zeta, seed, scenario.noise.mode)

    stage("operator")
    grid = inversion_grid(scenario, mismatched=options.mismatched_background)
    pml = build_pml(grid)
    a_inv = fdfd.assemble(grid, pml)
    measurement = scattering_mod.build_measurement(grid, scenario.receivers)
    phi, phi_path, cached = load_or_build_phi(
        a_inv,
        measurement,
        scenario.inversion_tol,
        cache_dir=options.phi_cache,
        workers=options.workers,
    )
    stage_done("operator")

    stage("sources")
    split = scattering_mod.split_cv(phi, f_noise, scenario.cv_receivers)
    mask = active_cells(grid, scenario.inversion_region)
    rows = component_rows(mask)
    n_active = int(mask.sum())
    problem = mmv.MmvProblem(
        phi_r=split.phi_r[:, rows],
        phi_cv=split.phi_cv[:, rows],
        f_r=split.f_r,
        f_cv=split.f_cv,
        n_groups=n_active,
    )
    max_iter = scenario.mmv_max_iter if options.mmv_max_iter is None else options.mmv_max_iter
    patience = scenario.mmv_patience if options.mmv_patience is None else options.mmv_patience
    j_red, trace = mmv.solve_mmv_cv(problem, max_iter=max_iter, patience=patience)
    j_full = np.zeros((grid.n_unknowns, problem.n_sources), complex)
    j_full[rows] = j_red
    stage_done("sources")

    stage("totals")
    sources = source_set(scenario)
    e_inc, _ = fdfd.incident_fields(
        a_inv, sources, tol=scenario.inversion_tol, workers=options.workers
    )
    totals = contrast_mod.compute_total_fields(
        a_inv, j_full, e_inc, tol=scenario.inversion_tol, workers=options.workers
    )
    stage_done("totals")

    stage("contrast")
    iters = scenario.contrast_iters if options.contrast_iters is None else options.contrast_iters
    eps_b_rows = np.tile(grid.eps_flat(), 3)[rows]
    chi_red, inv_state = contrast_mod.invert_contrast(
        j_hat=j_red,
        e_tot=totals.e_tot[rows],
        e_inc=totals.e_inc[rows],
        phi=phi.values[:, rows],
        f=f_noise,
        eps_b=eps_b_rows,
        iters=iters,
    )
    chi_full = np.zeros(grid.n_unknowns, complex)
    chi_full[rows] = chi_red
    stage_done("contrast")

    stage("metrics")
    ind_chi = shape_indicator_contrast(chi_full)
    ind_src = shape_indicator_sources(j_full)
    chi_true, truth_mask = truth_on_grid(scenario, inversion_grid(scenario))
    ind_true = shape_indicator_contrast(chi_true)
    metrics = {}
    true_centroid = weighted_centroid(ind_true, grid)
    for label, ind in (("chi", ind_chi), ("src", ind_src)):
        centroid = weighted_centroid(ind, grid)
        if centroid is not None and true_centroid is not None:
            err = float(np.linalg.norm(np.subtract(centroid, true_centroid)))
            metrics[f"centroid_error_{label}"] = err
            metrics[f"centroid_error_{label}_cells"] = err / grid.spacing[0]
        metrics[f"support_overlap_{label}"] = support_overlap(ind, truth_mask)
    if trace.gamma_cv.size:
        metrics["cv_best_iteration"] = int(trace.best_index)
        metrics["cv_best_residual"] = float(trace.gamma_cv[trace.best_index])
    if inv_state.records:
        metrics["data_error_final"] = inv_state.records[-1].data_error
        metrics["state_error_final"] = inv_state.records[-1].state_error
    metrics["noise_zeta"] = zeta
    metrics["seed"] = seed
    metrics["phi_cached"] = int(cached)
    metrics.update({f"truth_{k}": v for k, v in truth_meta.items()})
    stage_done("metrics")

    timings["total"] = time.perf_counter() - t_all
    report = RunReport(
        scenario_name=scenario.name,
        grid=grid,
        cell_mask=mask,
        f_noise=f_noise,
        trace=trace,
        inversion=inv_state,
        j_hat=j_full,
        chi=chi_full,
        indicator_chi=ind_chi,
        indicator_src=ind_src,
        indicator_true=ind_true,
        metrics=metrics,
        timings=timings,
        noise_mode=scenario.noise.mode,
    )
    if options.export and options.out_dir is not None:
        report.out_dir = export_report(report, scenario, options)
    return report


def trace_csv_columns(trace: mmv.MmvTrace) -> dict:
    return {
        "iter": trace.iterations,
        "tau": trace.tau,
        "gamma_r": trace.gamma_r,
        "gamma_cv": trace.gamma_cv,
    }


def export_report(report: RunReport, scenario: Scenario, options: RunOptions) -> Path:
    out = _fresh_dir(Path(options.out_dir) / scenario.name)
    out.mkdir(parents=True)
    io.write_csv(out / "trace.csv", trace_csv_columns(report.trace))
    if report.inversion.records:
        report.inversion.write_csv(out / "error_curve.csv")
    io.save_complex_matrix(
        out / "measurements.csmat", report.f_noise, kind="measurements",
        omega=scenario.omega, seed=report.metrics.get("seed"),
    )
    io.save_complex_matrix(
        out / "contrast_sources.csmat", report.j_hat, kind="sources",
        omega=scenario.omega, grid_hash=report.grid.content_hash(),
    )
    grid = report.grid
    omega = scenario.omega
    chi_iso = contrast_mod.isotropic_contrast(report.chi)
    io.write_vtk_scalars(
        out / "chi.vtk",
        grid,
        {
            "chi_re": chi_iso.real,
            "chi_im": chi_iso.imag,
            "delta_eps_r": chi_iso.real,
            "delta_sigma": -omega * EPS0 * chi_iso.imag,
            "indicator": report.indicator_chi,
            "indicator_sources": report.indicator_src,
        },
        title=f"{scenario.name} reconstruction",
    )
    # cross sections through the strongest reconstructed cell
    if report.indicator_chi.max() > 0:
        peak = int(np.argmax(report.indicator_chi))
        center = grid.cell_centers()[peak]
        for axis, tag in ((0, "x"), (1, "y"), (2, "z")):
            io.write_slice_csv(
                out / f"chi_slice_{tag}.csv", grid, chi_iso, axis, center[axis]
            )
    io.write_csv(
        out / "report.csv",
        {
            "metric": list(report.metrics.keys()),
            "value": [report.metrics[k] for k in report.metrics],
        },
    )
    io.write_csv(
        out / "timings.csv",
        {"stage": list(report.timings.keys()),
         "seconds": [report.timings[k] for k in report.timings]},
    )
    if scenario.source_path is not None and scenario.source_path.exists():
        (out / "config.toml").write_bytes(scenario.source_path.read_bytes())
    resolved = _jsonable(asdict_scenario(scenario, options))
    (out / "resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    return out


def asdict_scenario(scenario: Scenario, options: RunOptions) -> dict:
    d = asdict(scenario)
    d["options"] = asdict(options)
    return d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
