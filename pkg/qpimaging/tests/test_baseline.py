"""Tests for the classical comparison suite: tomography, perturbation ratios, complexity."""

import math
import os

import numpy as np
import pytest

from qpimaging.sim.baseline import (
    ComplexityParams,
    TomographyConfig,
    complexity_grid,
    complexity_row,
    default_dk_grid,
    design_settings,
    design_vectors,
    dk_experiment,
    dk_point,
    eigen_error,
    frame_rank,
    resource_counts,
    simulate_tomography,
    tomography_row,
)
from qpimaging.sim.errors import ConfigError
from qpimaging.sim.numkit import make_density, random_density
from qpimaging.sim.qpca import make_rng


def test_design_frame_is_complete():
    for dim in (2, 3, 4):
        assert frame_rank(dim) == dim * dim
        vecs = design_vectors(dim)
        assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0)
    settings = design_settings(4)
    assert len(settings) == 1 + 2 * 6
    for idx in settings:
        basis = design_vectors(4)[idx]
        assert np.allclose(basis @ basis.conj().T, np.eye(4), atol=1e-12)


def test_analytic_tomography_is_exact():
    rho = random_density(4, make_rng(61), rank=2)
    rho_bar, err = simulate_tomography(rho, TomographyConfig(copies=0))
    assert err < 1e-10
    assert np.allclose(rho_bar.matrix, rho.matrix, atol=1e-10)


def test_tomography_error_falls_with_copies():
    rho = random_density(4, make_rng(62), rank=2)
    small, large = [], []
    for seed in range(5):
        small.append(simulate_tomography(rho, TomographyConfig(copies=10_000, seed=seed))[1])
        large.append(simulate_tomography(rho, TomographyConfig(copies=1_000_000, seed=seed))[1])
    # error scales like M^-1/2, so a hundredfold increase should cut it by about ten
    assert np.mean(large) < 0.3 * np.mean(small)


def test_tomography_needs_copies_for_every_setting():
    rho = random_density(4, make_rng(63))
    with pytest.raises(ConfigError):
        simulate_tomography(rho, TomographyConfig(copies=5))
    with pytest.raises(ConfigError):
        TomographyConfig(copies=10, reconstructor="bayes")
    with pytest.raises(ConfigError):
        TomographyConfig(copies=-1)


def test_diluted_mle_returns_physical_estimate():
    rho = random_density(3, make_rng(64), rank=2)
    cfg = TomographyConfig(copies=20_000, reconstructor="diluted_mle", seed=3)
    rho_bar, err = simulate_tomography(rho, cfg, make_rng(3))
    w = np.linalg.eigvalsh(rho_bar.matrix)
    assert w.min() >= -1e-12
    assert np.trace(rho_bar.matrix).real == pytest.approx(1.0)
    assert err < 0.1


def test_tomography_row_columns():
    rho = random_density(4, make_rng(65), rank=2)
    row = tomography_row(rho, TomographyConfig(copies=0, seed=9))
    assert row["dim"] == 4
    assert row["M"] == 0
    assert row["seed"] == 9
    assert row["eigvec_error"] < 1e-8


def test_eigen_error_flags_degenerate_gap():
    rho = make_density(np.diag([0.5, 0.5, 0.0]).astype(complex))
    report = eigen_error(rho, rho)
    assert report.warnings
    assert report.rows[0].bound is None
    assert report.rows[0].ratio is None


def test_eigen_error_identical_states():
    rho = random_density(3, make_rng(66), rank=2)
    report = eigen_error(rho, rho)
    assert report.eps_tom == pytest.approx(0.0, abs=1e-12)
    assert all(row.vector_deviation < 1e-10 for row in report.rows)


def test_perturbation_ratio_stays_below_one():
    rows = dk_experiment(*default_dk_grid(), relative=True)
    valid = [row["ratio"] for row in rows if not row["skipped"]]
    assert len(valid) == len(rows) == 9 * 12
    assert all(0.0 < row["eps_tom"] < 1.0 - row["r"] for row in rows)
    assert max(valid) <= 1.0 + 1e-6
    assert np.median(valid) >= 0.5


@pytest.mark.parametrize("r,frac", [(0.6, 0.3), (0.9, 0.01), (0.95, 0.95)])
def test_perturbation_ratio_closed_form(r, frac):
    # the perturbed V2 turns by half of arctan(eps / ((1 - eps)(1 - r)))
    eps = frac * (1.0 - r)
    turn = 0.5 * math.atan(frac / (1.0 - eps))
    expected = 2.0 * math.sin(0.5 * turn) / frac
    assert dk_point(r, eps) == pytest.approx(expected, rel=1e-7)


def test_perturbation_grid_marks_points_outside_the_gap():
    rows = dk_experiment([0.6, 0.9], [0.05, 0.2, 0.5])
    skipped = [row for row in rows if row["skipped"]]
    assert [(row["r"], row["eps_tom"]) for row in skipped] == [(0.6, 0.5), (0.9, 0.2), (0.9, 0.5)]
    assert all(math.isnan(row["ratio"]) for row in skipped)


def test_perturbation_needs_third_direction():
    with pytest.raises(ConfigError):
        dk_experiment([0.9], [0.01], dim=2)


def test_complexity_ratio_noise_free():
    row = complexity_row(ComplexityParams(n=10, r=10.0 / 11.0, gamma=0.0, eps_st=0.1))
    assert row["ratio"] == pytest.approx(390.0, rel=0.01)
    assert row["ratio"] >= 100
    assert row["m_qsp_noisy"] == pytest.approx(row["m_qsp"])


def test_complexity_ratio_with_noise():
    row = complexity_row(ComplexityParams(n=10, r=10.0 / 11.0, gamma=1e-3, eps_st=0.1))
    assert row["ratio"] == pytest.approx(1711.0, rel=0.01)
    assert row["ratio"] == row["ratio_noisy"]
    assert 0.0 < row["gap"] < 1.0


def test_noisy_cost_switches_to_two_stages_above_zero_noise():
    r = 0.9
    clean = complexity_row(ComplexityParams(n=10, r=r, gamma=0.0, eps_st=0.1))
    faint = complexity_row(ComplexityParams(n=10, r=r, gamma=1e-12, eps_st=0.1))
    small = complexity_row(ComplexityParams(n=10, r=r, gamma=1e-6, eps_st=0.1))
    assert clean["stages"] == 1
    assert clean["m_qsp_noisy"] == clean["m_qsp"]
    assert faint["stages"] == small["stages"] == 2
    # right of the switch the cost is continuous and tends to m_qsp / (1 - r)^2
    assert faint["m_qsp_noisy"] == pytest.approx(clean["m_qsp"] / (1.0 - r) ** 2, rel=1e-9)
    assert small["m_qsp_noisy"] == pytest.approx(faint["m_qsp_noisy"], rel=1e-5)


def test_complexity_constants_and_metadata():
    table = complexity_grid([10, 20], [0.9], [0.0], [0.1], {"m_qsp": 2.0})
    assert len(table.rows) == 2
    assert table.metadata["log"] == "natural"
    assert table.metadata["delta"] == "eps_st"
    assert table.metadata["constants"]["m_qsp"] == [2.0]
    base = complexity_row(ComplexityParams(n=10, r=0.9, gamma=0.0, eps_st=0.1))
    assert table.rows[0]["m_qsp"] == pytest.approx(2.0 * base["m_qsp"])
    with pytest.raises(ConfigError) as exc:
        ComplexityParams(n=10, r=0.9, gamma=0.0, eps_st=0.1, constants={"m_foo": 1.0})
    assert exc.value.code == "UNKNOWN_KEY"
    with pytest.raises(ConfigError):
        ComplexityParams(n=10, r=0.4, gamma=0.0, eps_st=0.1)


def test_resource_counts_for_ten_by_ten_array():
    rep = resource_counts(10, 0.1)
    assert rep.pixel_qubits == 100
    assert rep.register_qubits == 7
    assert rep.memory_qubits == 36
    assert rep.total_gates == 711
    assert 1e-4 <= rep.gate_error_threshold <= 1e-3
    assert rep.to_dict()["total_gates"] == 711
    with pytest.raises(ConfigError):
        resource_counts(1, 0.1)


@pytest.mark.stress
def test_tomography_error_grows_with_dimension():
    top = int(os.getenv("QPIMAGING_STRESS_TOMO_DIM", "16"))
    dims = [d for d in (4, 8, 16, 32, 64) if d <= top]
    errors = []
    for dim in dims:
        rho = random_density(dim, make_rng(dim), rank=2)
        errors.append(simulate_tomography(rho, TomographyConfig(copies=100_000, seed=dim))[1])
    assert all(a < b for a, b in zip(errors, errors[1:]))
