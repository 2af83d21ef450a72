"""Tests for the two-source model, SWAP-test estimators and the measurement pipeline."""

import math

import numpy as np
import pytest

from qpimaging.sim.errors import ConfigError, IllConditionedError, ModelError
from qpimaging.sim.estimation import (
    EigenModel,
    EigenSupply,
    Observable,
    OverlapSet,
    block_encode_offdiag,
    cross_term,
    estimate_b,
    estimate_r,
    estimate_r_swap,
    exact_overlaps,
    load_observable,
    measure_expectation,
    measurement_pipeline,
    phase_from_signs,
    phase_from_truth,
    reconstruct_observable,
    reference_protocol,
    resolve_prior,
    solve_model,
    swap_test,
    validation_reference,
)
from qpimaging.sim.numkit import PureState, make_density, random_hermitian, random_state
from qpimaging.sim.optics import mix_sources
from qpimaging.sim.qpca import make_rng


def _system(seed, b=0.7, dim=4):
    rng = make_rng(seed)
    psi1, psi2 = random_state(dim, rng), random_state(dim, rng)
    rho, psi2, h = mix_sources(psi1, psi2, b)
    r = float(rho.spectrum[0][-1])
    model = solve_model(r, b)
    supply = EigenSupply.from_model(model, psi1, psi2)
    o = Observable.normalized("O", random_hermitian(dim, rng))
    return rho, psi1, psi2, h, model, supply, o


def _system_with_overlap(seed, h, b, dim=4):
    # two sources with a chosen real overlap in a random frame
    rng = make_rng(seed)
    z = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    q, _ = np.linalg.qr(z)
    psi1 = PureState.from_vector(q[:, 0])
    psi2 = PureState.from_vector(h * q[:, 0] + math.sqrt(1.0 - h * h) * q[:, 1])
    rho, psi2, _ = mix_sources(psi1, psi2, b)
    model = solve_model(float(rho.spectrum[0][-1]), b)
    supply = EigenSupply.from_model(model, psi1, psi2)
    o = Observable.normalized("O", random_hermitian(dim, rng))
    return psi1, psi2, supply, o


def _expect(vec, o):
    return float(np.vdot(vec.amplitudes, (o.matrix * o.scale) @ vec.amplitudes).real)


def test_solve_model_recovers_overlap_and_eigenvectors():
    rho, _, _, h, model, supply, _ = _system(41)
    assert model.h == pytest.approx(h, abs=1e-10)
    assert np.allclose(model.c_tilde @ model.c, np.eye(2))
    assert np.allclose(np.linalg.eigvalsh(model.rho_y()), [1.0 - model.r, model.r])
    assert np.allclose(supply.rho(), rho.matrix, atol=1e-10)
    assert abs(np.vdot(supply.v1, supply.v2)) < 1e-10


def test_solve_model_rejects_bad_inputs():
    with pytest.raises(ModelError) as exc:
        solve_model(0.9, 1.0)
    assert exc.value.code == "FORBIDDEN_B"
    with pytest.raises(ModelError) as exc:
        solve_model(0.5, 0.7)
    assert exc.value.code == "DEGENERATE_R"
    with pytest.raises(ModelError) as exc:
        solve_model(0.4, 0.7)
    assert exc.value.code == "DEGENERATE_R"
    with pytest.raises(ModelError) as exc:
        solve_model(0.9, 0.95)
    assert exc.value.code == "INCONSISTENT_MODEL"


def test_model_text_form():
    model = solve_model(0.9, 0.7)
    again = EigenModel.from_kv(model.to_kv())
    assert again.h == pytest.approx(model.h)
    with pytest.raises(ModelError):
        EigenModel.from_kv("r=0.9\nb=0.7\nh=0.1\n")
    with pytest.raises(ConfigError) as exc:
        EigenModel.from_kv("r=0.9\nb=0.7\nx=1\n")
    assert exc.value.code == "UNKNOWN_KEY"


def test_overlap_text_form():
    ov = OverlapSet(0.5, 0.25, 0.1 - 0.2j, sources={"v12": "exact"})
    again = OverlapSet.from_kv(ov.to_kv())
    assert again.v12 == ov.v12
    assert again.sources == {"v12": "exact"}
    with pytest.raises(ConfigError) as exc:
        OverlapSet.from_kv("v11=1\nv22=1\n")
    assert exc.value.code == "MISSING_KEY"
    with pytest.raises(ConfigError) as exc:
        OverlapSet.from_kv("v11=1\nv22=1\nv12_re=0\nv12_im=0\nzzz=1\n")
    assert exc.value.code == "UNKNOWN_KEY"


def test_estimate_r_from_labels():
    r, err = estimate_r(["V1", "V1", "V2", None, "V1"])
    assert r == pytest.approx(0.75)
    assert err == pytest.approx(math.sqrt(0.75 * 0.25 / 4))
    with pytest.raises(ConfigError) as exc:
        estimate_r([None, "V1"])
    assert exc.value.code == "EMPTY_INPUT"


def test_estimate_r_swap_inverts_purity():
    r = 0.85
    r_hat, err = estimate_r_swap(1.0 - r + r * r, 0)
    assert r_hat == pytest.approx(r)
    assert err == 0.0


def test_swap_test_probability_and_validation():
    rho, *_ = _system(42)
    res = swap_test(rho, rho)
    assert res.p0_exact == pytest.approx(0.5 + 0.5 * np.trace(rho.matrix @ rho.matrix).real)
    assert res.counts == (0, 0)
    with pytest.raises(ConfigError):
        swap_test(rho, rho, 0.5)
    with pytest.raises(ConfigError):
        swap_test(rho, rho, 1.0, shots=10)
    shot = swap_test(rho, rho, 1.0, shots=1000, rng=make_rng(1))
    assert sum(shot.counts) == 1000
    branch = res.branch_state(0)
    assert np.trace(branch).real == pytest.approx(1.0)


def test_measure_expectation_exact_and_sampled():
    _, psi1, _, _, _, _, o = _system(43)
    exact, err = measure_expectation(psi1, o)
    assert err == 0.0
    assert exact == pytest.approx(float(np.vdot(psi1.amplitudes, o.matrix @ psi1.amplitudes).real))
    mean, stderr = measure_expectation(psi1, o, shots=20000, rng=make_rng(2))
    assert abs(mean - exact) < 5.0 * stderr + 1e-3


def test_exact_overlaps_reconstruct_both_sources():
    _, psi1, psi2, _, model, supply, o = _system(44)
    ov = exact_overlaps(supply.v1, supply.v2, o)
    assert reconstruct_observable(model, ov, 1) * o.scale == pytest.approx(_expect(psi1, o), abs=1e-10)
    assert reconstruct_observable(model, ov, 2) * o.scale == pytest.approx(_expect(psi2, o), abs=1e-10)
    cross = complex(np.vdot(psi1.amplitudes, o.matrix @ psi2.amplitudes))
    assert abs(cross_term(model, ov) - cross) < 1e-10
    with pytest.raises(ConfigError):
        reconstruct_observable(model, ov, 3)


def test_positive_observable_has_nonnegative_cauchy_schwarz_gap():
    _, _, _, _, _, supply, _ = _system(45)
    ov = exact_overlaps(supply.v1, supply.v2, validation_reference(supply))
    assert ov.cauchy_schwarz_gap() >= -1e-12


def test_validation_reference_overlaps():
    _, _, _, _, _, supply, _ = _system(46)
    o_ref = validation_reference(supply)
    ov = exact_overlaps(supply.v1, supply.v2, o_ref)
    assert ov.v11 == pytest.approx(0.75)
    assert ov.v22 == pytest.approx(0.5)
    assert abs(ov.v12 - 0.25) < 1e-10
    assert o_ref.norm_bound <= 1.0


def test_block_encoding_recovers_reference_magnitude():
    _, _, _, _, model, supply, _ = _system(47)
    o_ref = validation_reference(supply)
    res = block_encode_offdiag(supply, o_ref, phase_from_truth(supply, o_ref))
    assert res.magnitude == pytest.approx(0.25, abs=1e-9)
    assert abs(res.kappa - 0.25) < 1e-9
    assert res.success_expected == pytest.approx(0.625 ** 2)
    assert res.r_herald == pytest.approx(model.r)


def test_block_encoding_postselection_floor():
    _, _, _, _, model, supply, _ = _system(48)
    perp = np.eye(4, dtype=complex) - np.outer(supply.v1, supply.v1.conj())
    with pytest.raises(IllConditionedError) as exc:
        block_encode_offdiag(supply, Observable("P", perp), 1.0)
    assert exc.value.code == "POSTSELECTION_FLOOR"
    with pytest.raises(ConfigError):
        block_encode_offdiag(supply, Observable("big", 2.0 * np.eye(4)), 1.0)


def test_reference_protocol_matches_exact_overlaps():
    _, _, _, _, model, supply, o = _system(49)
    o_ref = validation_reference(supply)
    ref = exact_overlaps(supply.v1, supply.v2, o_ref)
    got = reference_protocol(supply, model, o_ref, o, ref)
    want = exact_overlaps(supply.v1, supply.v2, o)
    assert got.v11 == pytest.approx(want.v11, abs=1e-9)
    assert got.v22 == pytest.approx(want.v22, abs=1e-9)
    assert abs(got.v12 - want.v12) < 1e-9


def test_reference_protocol_kappa_floor():
    _, _, _, _, model, supply, o = _system(50)
    o_ref = validation_reference(supply)
    ref = OverlapSet(0.75, 0.5, 0.0)
    with pytest.raises(IllConditionedError) as exc:
        reference_protocol(supply, model, o_ref, o, ref)
    assert exc.value.code == "KAPPA_REF_FLOOR"


def test_phase_from_signs():
    assert phase_from_signs(1, 0) == 1.0
    assert phase_from_signs(0, -1) == -1j
    assert abs(phase_from_signs(-3, 2) - complex(-1, 1) / math.sqrt(2)) < 1e-15
    with pytest.raises(ConfigError):
        phase_from_signs(0, 0)


def test_pipeline_analytic_identity():
    _, psi1, psi2, _, _, supply, o = _system(51)
    o_ref = validation_reference(supply)
    report = measurement_pipeline(supply, 0.7, o, o_ref, phase_from_truth(supply, o_ref), seed=7)
    assert report.mode == "analytic"
    assert report.psi1 == pytest.approx(_expect(psi1, o), abs=1e-8)
    assert report.psi2 == pytest.approx(_expect(psi2, o), abs=1e-8)
    rows = report.rows()
    assert [row["quantity"] for row in rows][0] == "r"
    assert all(row["seed"] == 7 for row in rows)


def test_pipeline_uses_labels_and_swaps_rare_v1():
    _, _, _, _, model, supply, o = _system(52)
    o_ref = validation_reference(supply)
    labels = ["V2"] * 80 + ["V1"] * 20
    report = measurement_pipeline(supply, 0.7, o, o_ref, phase_from_truth(supply, o_ref),
                                  labels=labels)
    assert report.r_hat == pytest.approx(0.8)
    assert report.warnings


def test_pipeline_shot_mode_is_close():
    psi1, psi2, supply, o = _system_with_overlap(53, 0.3, 0.6)
    o_ref = validation_reference(supply)
    report = measurement_pipeline(supply, 0.6, o, o_ref, (1, 0), shots=1_000_000, rng=make_rng(54))
    assert report.mode == "shot"
    assert report.shots == 1_000_000
    assert abs(report.psi1 - _expect(psi1, o)) < 0.06
    assert abs(report.psi2 - _expect(psi2, o)) < 0.06


def test_pipeline_shot_error_falls_as_inverse_root_of_shots():
    psi1, psi2, supply, o = _system_with_overlap(58, 0.3, 0.6)
    o_ref = validation_reference(supply)
    want = _expect(psi2, o)
    levels = np.array([16_000, 64_000, 256_000, 1_024_000])
    rms = []
    for shots in levels:
        errors = [measurement_pipeline(supply, 0.6, o, o_ref, (1, 0), shots=int(shots),
                                       rng=make_rng(1000 + seed)).psi2 - want
                  for seed in range(40)]
        rms.append(math.sqrt(np.mean(np.square(errors))))
    slope = np.polyfit(np.log(levels), np.log(rms), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.1)


@pytest.mark.parametrize("seed", range(100))
def test_pipeline_identity_across_scenes(seed):
    rng = make_rng(5000 + seed)
    dim = int(rng.choice([3, 4, 6]))
    b = float(rng.uniform(0.55, 0.85)) if rng.random() < 0.5 else float(rng.uniform(0.15, 0.45))
    _, psi1, psi2, _, _, supply, o = _system(6000 + seed, b=b, dim=dim)
    o_ref = validation_reference(supply)
    report = measurement_pipeline(supply, b, o, o_ref, (1, 0))
    assert report.psi1 == pytest.approx(_expect(psi1, o), abs=1e-8)
    assert report.psi2 == pytest.approx(_expect(psi2, o), abs=1e-8)


def test_shot_mode_needs_a_generator():
    _, _, _, _, _, supply, o = _system(59)
    o_ref = validation_reference(supply)
    with pytest.raises(ConfigError):
        block_encode_offdiag(supply, o_ref, (1, 0), shots=100)
    with pytest.raises(ConfigError):
        measurement_pipeline(supply, 0.7, o, o_ref, (1, 0), shots=100)


def test_block_encoding_takes_the_phase_from_the_prior():
    _, _, _, _, _, supply, _ = _system(60)
    v1, v2 = supply.v1, supply.v2
    kappa = 0.2 + 0.1j
    m = 0.5 * np.eye(4, dtype=complex) + 0.25 * np.outer(v1, v1.conj())
    m += kappa * np.outer(v1, v2.conj()) + np.conj(kappa) * np.outer(v2, v1.conj())
    o_ref = Observable("O_ref", m)
    exact = block_encode_offdiag(supply, o_ref, kappa)
    assert abs(exact.kappa - kappa) < 1e-9
    assert exact.antisymmetric_overlap < 1e-12
    signs = block_encode_offdiag(supply, o_ref, (1, 1))
    assert abs(signs.kappa - abs(kappa) * complex(1.0, 1.0) / math.sqrt(2.0)) < 1e-9
    # a phase on V2 moves the true overlap but not what the circuit sees
    turned = EigenSupply(v1, v2 * np.exp(0.7j), supply.r)
    again = block_encode_offdiag(turned, o_ref, 1.0)
    assert abs(np.vdot(v1, m @ turned.v2) - kappa * np.exp(0.7j)) < 1e-12
    assert again.magnitude == pytest.approx(exact.magnitude, abs=1e-12)


def test_resolve_prior():
    assert resolve_prior((0, 1)) == 1j
    assert abs(resolve_prior(3.0 - 4.0j) - (0.6 - 0.8j)) < 1e-15
    assert resolve_prior(-2.0) == -1.0
    for bad in ((1,), (1, 0, 1), 0.0, complex("nan")):
        with pytest.raises(ConfigError):
            resolve_prior(bad)


def test_raw_matrices_are_density_matrices():
    _, _, _, _, _, supply, o = _system(61)
    raw = supply.rho()
    res = swap_test(supply.v1, raw)
    assert res.p0_exact == pytest.approx(0.5 * (1.0 + supply.r))
    mean, _ = measure_expectation(raw, o)
    assert mean == pytest.approx(float(np.trace(raw @ o.matrix).real))
    with pytest.raises(ConfigError) as exc:
        swap_test(np.ones((2, 3)), raw)
    assert exc.value.code == "DIMENSION_MISMATCH"


def test_load_observable_from_entry_list(tmp_path):
    path = tmp_path / "ref.csv"
    path.write_text("# row,col,re,im\n0,0,0.5,0\n0,1,0,0.25\n1,0,0,-0.25\n2,2,2.0,0\n")
    o_ref = load_observable(path, 3)
    assert o_ref.scale == pytest.approx(2.0)
    assert o_ref.matrix[0, 1] == pytest.approx(0.125j)
    assert o_ref.norm_bound == pytest.approx(1.0)
    with pytest.raises(ConfigError) as exc:
        load_observable(path, 2)
    assert exc.value.code == "DIMENSION_MISMATCH"
    with pytest.raises(ConfigError) as exc:
        load_observable(tmp_path / "missing.csv", 3)
    assert exc.value.code == "MISSING_FILE"
    path.write_text("0,0,0.5\n")
    with pytest.raises(ConfigError) as exc:
        load_observable(path, 3)
    assert exc.value.code == "BAD_VALUE"




def test_estimate_b_finds_true_intensity():
    _, psi1, psi2, _, model, supply, o = _system(55)
    ov = exact_overlaps(supply.v1, supply.v2, o)
    m1 = reconstruct_observable(model, ov, 1)
    m2 = reconstruct_observable(model, ov, 2)
    est = estimate_b(model.r, ov, lambda m: m + (m2 - m1))
    assert est.roots
    assert min(abs(b - 0.7) for b, _ in est.roots) < 1e-6


def test_estimate_b_flags_unidentifiable_observable():
    _, _, _, _, model, supply, _ = _system(56)
    ov = exact_overlaps(supply.v1, supply.v2, Observable("I", np.eye(4)))
    est = estimate_b(model.r, ov, lambda m: m)
    assert est.ambiguous
    assert est.warnings
    assert est.roots == []


@pytest.mark.parametrize("r", [0.55, 0.7, 0.9, 0.99])
def test_swap_test_purity_statistic(r):
    rho = make_density(np.diag([r, 1.0 - r, 0.0]))
    p0 = 1.0 - r + r * r
    res = swap_test(rho, rho, 1.0, shots=10_000, rng=make_rng(int(r * 100)))
    assert res.p0_exact == pytest.approx(p0)
    sigma = math.sqrt(p0 * (1.0 - p0) / 10_000)
    assert abs(res.p0_hat - p0) < 4.0 * sigma
