import numpy as np
import pytest

from csinv import fdfd, scattering
from csinv.errors import CsinvError, GridError
from csinv.grid import build_grid, build_pml

OMEGA = 2 * np.pi * 2.0e8


@pytest.fixture(scope="module")
def small_setup():
    grid = build_grid((0.4, 0.4, 0.4), [], OMEGA, pml_cells=3, spacing=0.05)
    a = fdfd.assemble(grid, build_pml(grid))
    receivers = [
        scattering.Receiver((x, y, 0.1))
        for x in (-0.1, 0.1)
        for y in (-0.1, 0.1)
    ]
    return grid, a, receivers


def test_receiver_on_sample_point_selects_exactly(small_setup):
    grid, _, _ = small_setup
    # place a receiver exactly on an x-component sample point
    cell = (grid.pml_cells + 2, grid.pml_cells + 1, grid.pml_cells + 1)
    pos = (
        grid.origin[0] + (cell[0] + 0.5) * grid.spacing[0],
        grid.origin[1] + cell[1] * grid.spacing[1],
        grid.origin[2] + cell[2] * grid.spacing[2],
    )
    op = scattering.build_measurement(grid, [scattering.Receiver(pos, ("x",))])
    row = op.selection.getrow(0)
    assert row.nnz == 1
    assert row.data[0] == 1.0
    nx, ny, _ = grid.dims
    expected = cell[0] + nx * cell[1] + nx * ny * cell[2]
    assert row.indices[0] == expected


def test_measurement_row_count_dual_component():
    # the reference layout: 81 receivers sampling two components -> 162 rows
    grid = build_grid((1.2, 1.2, 1.2), [], OMEGA, pml_cells=2, spacing=0.09)
    xs = np.linspace(-0.4, 0.4, 9)
    receivers = [scattering.Receiver((x, y, 0.0)) for x in xs for y in xs]
    op = scattering.build_measurement(grid, receivers)
    assert op.n_rows == 162
    assert np.all(np.diff(op.selection.indptr) == 1)  # one nonzero per row


def test_measurement_selection_semantics(small_setup):
    grid, _, receivers = small_setup
    op = scattering.build_measurement(grid, receivers)
    field = np.arange(grid.n_unknowns, dtype=complex)
    sampled = op.apply(field)
    assert np.array_equal(sampled, field[op.row_sample])


def test_receiver_in_absorber_rejected(small_setup):
    grid, _, _ = small_setup
    with pytest.raises(GridError):
        scattering.build_measurement(grid, [scattering.Receiver((0.0, 0.0, 0.19))])


def test_empty_measurement_builds_empty_matrix(small_setup):
    grid, a, _ = small_setup
    op = scattering.build_measurement(grid, [])
    phi = scattering.build_scattering_matrix(a, op, tol=1e-6)
    assert phi.shape == (0, grid.n_unknowns)


def test_two_path_consistency(small_setup):
    grid, a, receivers = small_setup
    op = scattering.build_measurement(grid, receivers)
    tol = 1e-8
    phi = scattering.build_scattering_matrix(a, op, tol=tol)
    rng = np.random.default_rng(9)
    for _ in range(3):
        j = rng.standard_normal(grid.n_unknowns) + 1j * rng.standard_normal(grid.n_unknowns)
        e, _ = fdfd.solve(a, j, tol=tol)
        direct = op.apply(e)
        via_phi = phi.values @ j
        err = np.linalg.norm(via_phi - direct) / np.linalg.norm(direct)
        assert err <= 10 * tol


def test_row_build_order_independence(small_setup):
    grid, a, receivers = small_setup
    tol = 1e-7
    op_fwd = scattering.build_measurement(grid, receivers)
    op_rev = scattering.build_measurement(grid, receivers[::-1])
    phi_fwd = scattering.build_scattering_matrix(a, op_fwd, tol=tol)
    phi_rev = scattering.build_scattering_matrix(a, op_rev, tol=tol)
    # same rows bitwise, just permuted with the receivers
    for q in range(len(receivers)):
        q_rev = len(receivers) - 1 - q
        for c in range(2):
            assert np.array_equal(
                phi_fwd.values[2 * q + c], phi_rev.values[2 * q_rev + c]
            )


def test_save_load_roundtrip(small_setup, tmp_path):
    grid, a, receivers = small_setup
    op = scattering.build_measurement(grid, receivers)
    phi = scattering.build_scattering_matrix(a, op, tol=1e-6)
    path = tmp_path / "phi.csmat"
    phi.save(path)
    loaded = scattering.ScatteringMatrix.load(path)
    assert np.array_equal(loaded.values, phi.values)
    assert loaded.omega == phi.omega
    assert loaded.grid_hash == phi.grid_hash
    assert loaded.tol == phi.tol
    assert np.array_equal(loaded.row_receiver, phi.row_receiver)


def _fake_phi(m_receivers=5, components=2, n=30):
    rng = np.random.default_rng(0)
    m = m_receivers * components
    return scattering.ScatteringMatrix(
        values=rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n)),
        row_receiver=np.repeat(np.arange(m_receivers), components),
        row_component=np.tile(np.arange(components), m_receivers),
        omega=OMEGA,
        grid_hash="test",
        tol=1e-6,
    )


def test_split_published_counts():
    # 81 receivers split 69/12 with two components -> 138 + 24 rows
    phi = _fake_phi(m_receivers=81, components=2, n=12)
    data = np.zeros((162, 4), complex)
    cv = list(range(12))
    split = scattering.split_cv(phi, data, cv)
    assert split.phi_r.shape[0] == 138
    assert split.phi_cv.shape[0] == 24


def test_split_single_receiver_two_rows():
    phi = _fake_phi()
    data = np.arange(10 * 3, dtype=complex).reshape(10, 3)
    split = scattering.split_cv(phi, data, [2])
    assert split.phi_cv.shape[0] == 2
    assert np.array_equal(split.f_cv, data[[4, 5]])


def test_split_remerge_is_permutation():
    phi = _fake_phi()
    data = np.arange(10 * 2, dtype=complex).reshape(10, 2)
    split = scattering.split_cv(phi, data, [0, 3])
    merged = np.sort(np.concatenate([split.rows_r, split.rows_cv]))
    assert np.array_equal(merged, np.arange(10))
    rebuilt = np.empty_like(phi.values)
    rebuilt[split.rows_r] = split.phi_r
    rebuilt[split.rows_cv] = split.phi_cv
    assert np.array_equal(rebuilt, phi.values)


def test_split_validation():
    phi = _fake_phi()
    data = np.zeros((10, 2), complex)
    with pytest.raises(CsinvError):
        scattering.split_cv(phi, data, [])  # empty held-out side
    with pytest.raises(CsinvError):
        scattering.split_cv(phi, data, [0, 1, 2, 3, 4])  # empty reconstruction side
    with pytest.raises(CsinvError):
        scattering.split_cv(phi, data, [7])  # unknown receiver
    with pytest.raises(CsinvError):
        scattering.split_cv(phi, np.zeros((9, 2), complex), [0])  # row mismatch
