"""Command-line entry point: run pipeline stages or whole scenarios.

Stages write their artifacts (documented binary containers, CSV traces, VTK
volumes) under an output root so expensive products are reusable:

    csinv forward         --config scene.toml        # synthetic measurements
    csinv build-phi       --config scene.toml        # scattering matrix cache
    csinv invert-sources  --config scene.toml        # contrast sources + trace
    csinv invert-contrast --config scene.toml        # contrast volumes
    csinv run-scenario    --config scene.toml        # everything, fresh report dir
    csinv export          --input file.csmat --out-csv file.csv

Exit codes: 0 success, 2 argument errors, 3 configuration problems,
4 stage/solver failures, 5 missing input artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import contrast as contrast_mod
from . import fdfd, harness, io, mmv
from . import scattering as scattering_mod
from .config import load_scenario
from .errors import ArtifactError, ConfigError, CsinvError, SolveFailure
from .grid import build_pml

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_STAGE = 4
EXIT_MISSING_ARTIFACT = 5

log = logging.getLogger("csinv")


def _out_root(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get("CSINV_OUT", "csinv-out"))


def _run_dir(args, scenario) -> Path:
    d = _out_root(args) / scenario.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load(args):
    scenario = load_scenario(args.config)
    if args.seed is not None:
        scenario.noise.seed = args.seed
    if args.zeta is not None:
        scenario.noise.zeta = args.zeta
    return scenario


def _snapshot_config(scenario, out_dir: Path):
    if scenario.source_path is not None and scenario.source_path.exists():
        (out_dir / "config.toml").write_bytes(scenario.source_path.read_bytes())


def _options(args, scenario) -> harness.RunOptions:
    return harness.RunOptions(
        out_dir=_out_root(args),
        phi_cache=_out_root(args) / "phi",
        workers=args.threads,
        mismatched_background=args.mismatch,
        seed=args.seed,
        zeta=args.zeta,
        mmv_max_iter=args.mmv_max_iter,
        mmv_patience=args.mmv_patience,
        contrast_iters=args.contrast_iters,
    )


def cmd_forward(args) -> int:
    scenario = _load(args)
    run_dir = _run_dir(args, scenario)
    target = run_dir / "measurements.csmat"
    if target.exists() and not args.force:
        raise ArtifactError(f"{target} exists; pass --force to overwrite")
    f_clean, meta = harness.synthesize_data(scenario, workers=args.threads)
    f_noise = harness.add_noise(
        f_clean, scenario.noise.zeta, scenario.noise.seed, scenario.noise.mode
    )
    io.save_complex_matrix(
        run_dir / "measurements_clean.csmat", f_clean, kind="measurements",
        omega=scenario.omega, **meta,
    )
    io.save_complex_matrix(
        target, f_noise, kind="measurements", omega=scenario.omega,
        seed=scenario.noise.seed, zeta=scenario.noise.zeta,
        noise_mode=scenario.noise.mode, **meta,
    )
    _snapshot_config(scenario, run_dir)
    print(target)
    return EXIT_OK


def _resolve_phi_arg(args) -> Path | None:
    """--phi accepts a file path or a bare cache hash."""
    if not args.phi:
        return None
    cand = Path(args.phi)
    if cand.exists():
        return cand
    if "/" not in args.phi:
        hashed = _out_root(args) / "phi" / f"phi-{args.phi}.csmat"
        if hashed.exists():
            return hashed
    raise ArtifactError(f"scattering matrix {args.phi!r} not found")


def _build_phi(args, scenario):
    grid = harness.inversion_grid(scenario, mismatched=args.mismatch)
    pml = build_pml(grid)
    a = fdfd.assemble(grid, pml)
    measurement = scattering_mod.build_measurement(grid, scenario.receivers)
    explicit = _resolve_phi_arg(args)
    if explicit is not None:
        return scattering_mod.ScatteringMatrix.load(explicit), explicit, True, grid, a, measurement
    phi, path, cached = harness.load_or_build_phi(
        a, measurement, scenario.inversion_tol,
        cache_dir=_out_root(args) / "phi", workers=args.threads,
    )
    return phi, path, cached, grid, a, measurement


def cmd_build_phi(args) -> int:
    scenario = _load(args)
    phi, path, cached, *_ = _build_phi(args, scenario)
    print(f"{path} ({'cached' if cached else 'built'}; {phi.shape[0]}x{phi.shape[1]})")
    return EXIT_OK


def cmd_invert_sources(args) -> int:
    scenario = _load(args)
    run_dir = _run_dir(args, scenario)
    meas_path = run_dir / "measurements.csmat"
    if not meas_path.exists():
        raise ArtifactError(
            f"missing input artifact {meas_path}: run 'csinv forward' first"
        )
    f_noise, _ = io.load_complex_matrix(meas_path)
    phi, _, _, grid, _, _ = _build_phi(args, scenario)
    split = scattering_mod.split_cv(phi, f_noise, scenario.cv_receivers)
    mask = harness.active_cells(grid, scenario.inversion_region)
    rows = harness.component_rows(mask)
    problem = mmv.MmvProblem(
        phi_r=split.phi_r[:, rows], phi_cv=split.phi_cv[:, rows],
        f_r=split.f_r, f_cv=split.f_cv, n_groups=int(mask.sum()),
    )
    max_iter = scenario.mmv_max_iter if args.mmv_max_iter is None else args.mmv_max_iter
    patience = scenario.mmv_patience if args.mmv_patience is None else args.mmv_patience
    j_red, trace = mmv.solve_mmv_cv(problem, max_iter=max_iter, patience=patience)
    j_full = np.zeros((grid.n_unknowns, problem.n_sources), complex)
    j_full[rows] = j_red
    io.save_complex_matrix(
        run_dir / "contrast_sources.csmat", j_full, kind="sources",
        omega=scenario.omega, grid_hash=grid.content_hash(),
        best_iteration=int(trace.best_index),
    )
    io.write_csv(run_dir / "trace.csv", harness.trace_csv_columns(trace))
    print(run_dir / "contrast_sources.csmat")
    return EXIT_OK


def cmd_invert_contrast(args) -> int:
    scenario = _load(args)
    run_dir = _run_dir(args, scenario)
    src_path = run_dir / "contrast_sources.csmat"
    meas_path = run_dir / "measurements.csmat"
    for path, producer in ((src_path, "invert-sources"), (meas_path, "forward")):
        if not path.exists():
            raise ArtifactError(
                f"missing input artifact {path}: run 'csinv {producer}' first"
            )
    j_full, _ = io.load_complex_matrix(src_path)
    f_noise, _ = io.load_complex_matrix(meas_path)
    phi, _, _, grid, a_inv, _ = _build_phi(args, scenario)
    mask = harness.active_cells(grid, scenario.inversion_region)
    rows = harness.component_rows(mask)
    sources = harness.source_set(scenario)
    e_inc, _ = fdfd.incident_fields(a_inv, sources, tol=scenario.inversion_tol)
    totals = contrast_mod.compute_total_fields(
        a_inv, j_full, e_inc, tol=scenario.inversion_tol
    )
    iters = scenario.contrast_iters if args.contrast_iters is None else args.contrast_iters
    chi_red, state = contrast_mod.invert_contrast(
        j_hat=j_full[rows], e_tot=totals.e_tot[rows], e_inc=totals.e_inc[rows],
        phi=phi.values[:, rows], f=f_noise,
        eps_b=np.tile(grid.eps_flat(), 3)[rows], iters=iters,
    )
    chi_full = np.zeros(grid.n_unknowns, complex)
    chi_full[rows] = chi_red
    chi_iso = contrast_mod.isotropic_contrast(chi_full)
    from .grid import EPS0

    io.write_vtk_scalars(
        run_dir / "chi.vtk", grid,
        {
            "chi_re": chi_iso.real,
            "chi_im": chi_iso.imag,
            "delta_eps_r": chi_iso.real,
            "delta_sigma": -scenario.omega * EPS0 * chi_iso.imag,
        },
        title=f"{scenario.name} contrast",
    )
    if state.records:
        state.write_csv(run_dir / "error_curve.csv")
    io.save_complex_matrix(
        run_dir / "contrast.csmat", chi_full[:, None], kind="contrast",
        omega=scenario.omega, grid_hash=grid.content_hash(),
    )
    print(run_dir / "chi.vtk")
    return EXIT_OK


def cmd_run_scenario(args) -> int:
    scenario = _load(args)
    report = harness.run_scenario(scenario, _options(args, scenario))
    for stage_name, seconds in report.timings.items():
        print(f"[timing] {stage_name}: {seconds:.2f} s", file=sys.stderr)
    print(report.out_dir if report.out_dir is not None else "(no export dir)")
    return EXIT_OK


def cmd_export(args) -> int:
    values, header = io.load_complex_matrix(args.input)
    out_csv = Path(args.out_csv) if args.out_csv else Path(args.input).with_suffix(".csv")
    rows, cols = values.shape
    flat = values.ravel()
    io.write_csv(
        out_csv,
        {
            "row": np.repeat(np.arange(rows), cols),
            "col": np.tile(np.arange(cols), rows),
            "re": flat.real,
            "im": flat.imag,
        },
    )
    print(out_csv)
    if args.vtk:
        if not args.config:
            raise ArtifactError("--vtk needs --config to reconstruct the grid")
        scenario = load_scenario(args.config)
        grid = harness.inversion_grid(scenario)
        if rows != grid.n_unknowns:
            raise ArtifactError(
                f"{args.input}: {rows} rows do not match the scenario grid "
                f"({grid.n_unknowns} unknowns)"
            )
        out_vtk = Path(args.input).with_suffix(".vtk")
        io.write_field_vtk(out_vtk, values[:, 0], grid)
        print(out_vtk)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csinv",
        description="Linearized 3-D contrast source inversion pipeline",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="scenario TOML file")
        p.add_argument("--out", default=None, help="output root (default $CSINV_OUT)")
        p.add_argument("--threads", "-j", type=int, default=scattering_mod.default_workers())
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--zeta", type=float, default=None)
        p.add_argument("--mismatch", action="store_true",
                       help="invert with the configured inexact background")
        p.add_argument("--phi", default=None, help="explicit scattering-matrix file")
        p.add_argument("--mmv-max-iter", type=int, default=None)
        p.add_argument("--mmv-patience", type=int, default=None)
        p.add_argument("--contrast-iters", type=int, default=None)

    p = sub.add_parser("forward", help="synthesize noisy measurements")
    add_common(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("build-phi", help="build or load the scattering matrix")
    add_common(p)
    p.set_defaults(func=cmd_build_phi)

    p = sub.add_parser("invert-sources", help="estimate contrast sources")
    add_common(p)
    p.set_defaults(func=cmd_invert_sources)

    p = sub.add_parser("invert-contrast", help="reconstruct the contrast")
    add_common(p)
    p.set_defaults(func=cmd_invert_contrast)

    p = sub.add_parser("run-scenario", help="run the whole pipeline")
    add_common(p)
    p.set_defaults(func=cmd_run_scenario)

    p = sub.add_parser("export", help="dump a binary matrix artifact to CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--vtk", action="store_true",
                   help="also write a |E| volume (field-sized artifacts only)")
    p.add_argument("--config", default=None, help="scenario file defining the grid")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"error (missing artifact): {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except (SolveFailure, CsinvError) as exc:
        print(f"error (stage failure): {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(f"[timing] command total: {time.perf_counter() - t0:.2f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
