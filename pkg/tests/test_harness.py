from importlib import resources

import numpy as np
import pytest

from csinv import config, fdfd, harness
from csinv.errors import ConfigError, CsinvError
from csinv.grid import Region, Shape, build_grid, build_pml, complex_permittivity

OMEGA = 2 * np.pi * 2.0e8

SCENARIO_DIR = resources.files("csinv") / "scenarios"
DESK_SCENES = ["free_space_smoke.toml", "free_space_cube.toml", "gpr_cube.toml", "tw_cross.toml"]
ALL_SCENES = DESK_SCENES + ["gpr_server_scale.toml", "tw_server_scale.toml"]


def _scenario(name):
    return config.load_scenario(SCENARIO_DIR / name)


# ---------------------------------------------------------------------------
# configuration


@pytest.mark.parametrize("name", ALL_SCENES)
def test_shipped_scenarios_parse(name):
    scen = _scenario(name)
    assert scen.source_positions.shape[1] == 3
    assert len(scen.receivers) >= 2
    assert set(scen.cv_receivers) < set(range(len(scen.receivers)))


def test_server_templates_are_marked():
    assert _scenario("gpr_server_scale.toml").scale == "server"
    assert _scenario("tw_server_scale.toml").scale == "server"


def test_server_template_matches_reference_layout():
    scen = _scenario("gpr_server_scale.toml")
    assert scen.source_positions.shape[0] == 36     # 6 x 6 sources
    assert len(scen.receivers) == 81                # 9 x 9 receivers
    assert len(scen.cv_receivers) == 12             # 12 held-out receivers
    assert 2 * (81 - 12) == 138                     # reconstruction rows
    # receiver pitch is half a free-space wavelength
    xs = sorted({r.position[0] for r in scen.receivers})
    assert xs[1] - xs[0] == pytest.approx(0.75, rel=1e-12)


def test_default_cv_subset_spread():
    picks = config.default_cv_subset(81)
    assert len(picks) == 12
    assert picks == sorted(set(picks))
    assert all(0 <= p < 81 for p in picks)


def test_scenario_validation_errors(tmp_path):
    scen = _scenario("free_space_smoke.toml")
    import dataclasses

    bad = dataclasses.replace(scen, truth_refine=1.2)
    with pytest.raises(ConfigError):
        bad.validate()
    bad = dataclasses.replace(scen, cv_receivers=[0, 1, 2, 3])
    with pytest.raises(ConfigError):
        bad.validate()
    bad = dataclasses.replace(scen, cv_receivers=[9])
    with pytest.raises(ConfigError):
        bad.validate()


def test_malformed_config_rejected(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[domain]\nextent = [0.5, 0.5, 0.5]\n")
    with pytest.raises(ConfigError):
        config.load_scenario(path)
    with pytest.raises(ConfigError):
        config.load_scenario(tmp_path / "missing.toml")


def test_inverse_crime_guard_on_shipped_scenes():
    # truth grids are at least 1.5x finer than inversion grids everywhere
    for name in DESK_SCENES:
        scen = _scenario(name)
        assert scen.truth_refine >= 1.5
        inv = harness.inversion_grid(scen)
        bg, full = harness.truth_grids(scen)
        assert bg.spacing[0] == pytest.approx(inv.spacing[0] / scen.truth_refine)
        assert full.dims != inv.dims


def test_mismatch_variants_configured():
    assert _scenario("gpr_cube.toml").mismatch.eps_factor == 1.25
    assert _scenario("tw_cross.toml").mismatch.eps_factor == 0.75
    assert _scenario("tw_server_scale.toml").mismatch.wall_thickness == 0.75


# ---------------------------------------------------------------------------
# background mismatch


def test_apply_mismatch_eps_factor():
    soil = Region(Shape("box", (0, 0, 0), size=(1, 1, 1)), 3.0 - 0.4j)
    out = harness.apply_mismatch([soil], config.MismatchSpec(eps_factor=1.25))
    assert out[0].eps == pytest.approx(1.25 * (3.0 - 0.4j))


def test_apply_mismatch_clamps_to_physical():
    thin = Region(Shape("box", (0, 0, 0), size=(1, 1, 1)), 1.1 - 0.1j)
    out = harness.apply_mismatch([thin], config.MismatchSpec(eps_factor=0.5))
    assert out[0].eps.real >= 1.0


def test_apply_mismatch_wall_thickness():
    wall = Region(Shape("box", (0, 0, 0.25), size=(1, 1, 0.5)), 4.0 + 0j)
    out = harness.apply_mismatch([wall], config.MismatchSpec(wall_thickness=0.75))
    assert out[0].shape.size[2] == 0.75
    assert out[0].shape.size[:2] == (1, 1)


# ---------------------------------------------------------------------------
# noise model


def test_add_noise_zero_fraction_identity():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((6, 3)) + 1j * rng.standard_normal((6, 3))
    assert np.array_equal(harness.add_noise(f, 0.0, 1), f)


def test_add_noise_amplitude_bound():
    # each perturbation is bounded by zeta * sqrt(2) * max |f_p| per source
    rng = np.random.default_rng(1)
    f = rng.standard_normal((40, 4)) + 1j * rng.standard_normal((40, 4))
    zeta = 0.05
    noisy = harness.add_noise(f, zeta, 3, "per-element")
    for p in range(4):
        bound = zeta * np.sqrt(2) * np.max(np.abs(f[:, p]))
        assert np.max(np.abs(noisy[:, p] - f[:, p])) <= bound + 1e-15


def test_add_noise_deterministic_under_seed():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((10, 2)) + 1j * rng.standard_normal((10, 2))
    a = harness.add_noise(f, 0.05, 42)
    b = harness.add_noise(f, 0.05, 42)
    c = harness.add_noise(f, 0.05, 43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_add_noise_per_vector_mode():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((10, 2)) + 1j * rng.standard_normal((10, 2))
    noisy = harness.add_noise(f, 0.05, 7, "per-vector")
    for p in range(2):
        delta = noisy[:, p] - f[:, p]
        assert np.allclose(delta, delta[0], rtol=1e-12)  # one draw per source
    with pytest.raises(CsinvError):
        harness.add_noise(f, 0.05, 7, "per-antenna")
    with pytest.raises(CsinvError):
        harness.add_noise(f, -0.1, 7)


# ---------------------------------------------------------------------------
# indicators and metrics


def test_indicator_contrast_hand_values():
    chi = np.zeros(9, complex)
    assert np.all(harness.shape_indicator_contrast(chi) == 0)
    chi[0] = chi[3] = chi[6] = 1.0  # the three components of cell 0
    ind = harness.shape_indicator_contrast(chi)
    assert ind[0] == pytest.approx(1.0)
    assert np.all(ind[1:] == 0)


def test_indicator_sources_hand_values():
    j = np.zeros((9, 1), complex)
    j[1] = 3.0
    j[4] = 4.0  # cell 1: components (3, 4, 0) -> norm 5
    ind = harness.shape_indicator_sources(j)
    assert ind[1] == pytest.approx(5.0)
    assert ind[0] == 0 and ind[2] == 0


def test_indicator_sources_sums_over_sources():
    j = np.zeros((3, 2), complex)
    j[0, 0] = 3 + 4j
    j[0, 1] = 5.0
    ind = harness.shape_indicator_sources(j)
    assert ind[0] == pytest.approx(10.0)


def test_support_overlap_and_centroid():
    grid = build_grid((0.4, 0.4, 0.4), [], OMEGA, pml_cells=0, spacing=0.08)
    ind = np.zeros(grid.n_cells)
    ind[5] = 1.0
    truth = np.zeros(grid.n_cells, bool)
    truth[5] = True
    assert harness.support_overlap(ind, truth) == pytest.approx(1.0)
    truth[5] = False
    truth[6] = True
    assert harness.support_overlap(ind, truth) == pytest.approx(0.0)
    c = harness.weighted_centroid(ind, grid)
    assert np.allclose(c, grid.cell_centers()[5])
    assert harness.weighted_centroid(np.zeros(grid.n_cells), grid) is None


def test_truth_rasterization_on_inversion_grid():
    scen = _scenario("free_space_smoke.toml")
    grid = harness.inversion_grid(scen)
    chi_true, mask = harness.truth_on_grid(scen, grid)
    assert mask.any()
    n = grid.n_cells
    assert np.array_equal(chi_true[:n], chi_true[n : 2 * n])
    assert np.all(chi_true[:n][mask] == 1.0 + 0j)  # eps 2 against vacuum


# ---------------------------------------------------------------------------
# synthesis


def test_synthesize_no_scatterer_zero_data():
    import dataclasses

    scen = dataclasses.replace(_scenario("free_space_smoke.toml"), targets=[])
    f, meta = harness.synthesize_data(scen)
    assert np.all(f == 0)


def test_scattered_magnitude_grows_with_contrast():
    import dataclasses

    scen = _scenario("free_space_smoke.toml")
    norms = []
    for delta in (0.5, 1.0, 2.0):
        target = Region(
            Shape("box", (0.05, 0.0, 0.0), size=(0.2, 0.2, 0.2)), (1.0 + delta) + 0j
        )
        variant = dataclasses.replace(scen, targets=[target])
        f, _ = harness.synthesize_data(variant)
        norms.append(np.linalg.norm(f))
    assert norms[0] < norms[1] < norms[2]


def test_reciprocity_swapped_source_receiver():
    # reflecting box without absorbers keeps the operator symmetric, so a
    # co-located source/receiver swap reproduces the sampled field
    grid = build_grid((0.5, 0.5, 0.5), [], OMEGA, pml_cells=0, spacing=0.05)
    a = fdfd.assemble(grid, build_pml(grid))
    tol = 1e-10
    pos_a = (-0.1, 0.0, 0.05)
    pos_b = (0.1, 0.05, -0.05)
    fields_a, _ = fdfd.incident_fields(
        a, fdfd.SourceSet([pos_a], [1.0], [0.0], OMEGA), tol=tol
    )
    fields_b, _ = fdfd.incident_fields(
        a, fdfd.SourceSet([pos_b], [1.0], [0.0], OMEGA), tol=tol
    )
    _, idx_b = grid.component_sample(pos_b, 0)
    _, idx_a = grid.component_sample(pos_a, 0)
    val_ab = fields_a[idx_b, 0]
    val_ba = fields_b[idx_a, 0]
    assert abs(val_ab - val_ba) / abs(val_ab) <= 1e-6


def test_run_scenario_zero_budgets_reports_initialization(tmp_path):
    # with every iteration budget at zero the report carries the raw
    # initialization (zero contrast sources, zero contrast) and trivial traces
    scen = _scenario("free_space_smoke.toml")
    opts = harness.RunOptions(
        out_dir=tmp_path, phi_cache=tmp_path / "phi", workers=1,
        mmv_max_iter=0, contrast_iters=0,
    )
    report = harness.run_scenario(scen, opts)
    assert np.all(report.j_hat == 0)
    assert np.all(report.chi == 0)
    assert report.trace.iterations.tolist() == [0]
    assert report.inversion.records == []
    assert (report.out_dir / "trace.csv").exists()


def test_active_cells_respects_region_and_absorbers():
    scen = _scenario("gpr_cube.toml")
    grid = harness.inversion_grid(scen)
    mask = harness.active_cells(grid, scen.inversion_region)
    centers = grid.cell_centers()
    assert mask.any()
    assert scen.inversion_region.contains(centers[mask]).all()
    p = grid.pml_cells
    picks = np.flatnonzero(mask)
    nx, ny, nz = grid.dims
    k = picks // (nx * ny)
    j = (picks % (nx * ny)) // nx
    i = picks % nx
    assert np.all((i >= p) & (i < nx - p))
    assert np.all((k >= p) & (k < nz - p))
    rows = harness.component_rows(mask)
    assert len(rows) == 3 * mask.sum()
