"""Tests for filter planning, step-polynomial synthesis and the sorting filter."""

import math

import numpy as np
import pytest

from qpimaging.sim.errors import (
    ConfigError,
    ModelError,
    PlanInfeasibleError,
    PolynomialError,
    UnsortableError,
)
from qpimaging.sim.numkit import make_density
from qpimaging.sim.qpca import PhotonStream, make_rng
from qpimaging.sim.qsp import (
    C_L,
    KAPPA,
    SWEEP_COLUMNS,
    FilterCache,
    StepSpec,
    build_step_poly,
    dump_plan,
    eigenphase_images,
    filter_circuit,
    filter_ideal,
    grid_deviation,
    label_frequencies,
    load_plan,
    plan,
    prior_pass,
    sweep_row,
    two_stage_filter,
)

# small-degree plan that the circuit simulation handles quickly
FAST = dict(c_l=1.3, k=200)


def _diag(*values):
    return make_density(np.diag(values).astype(complex))


def test_step_spec_validation():
    with pytest.raises(ConfigError):
        StepSpec(1.0, 0.6, 0.1)
    with pytest.raises(ConfigError):
        StepSpec(1.0, 0.1, 1.0)
    with pytest.raises(ConfigError):
        StepSpec(0.05, 0.1, 0.1)


def test_step_polynomial_meets_bounds():
    spec = StepSpec(1.0, 0.3, 0.1)
    poly = build_step_poly(spec)
    peak, dev = grid_deviation(poly, spec)
    assert peak <= 1.0
    assert dev <= spec.delta


def test_step_polynomial_degree_cap():
    with pytest.raises(PolynomialError) as exc:
        build_step_poly(StepSpec(1.0, 0.05, 0.01), degree_cap=3)
    assert exc.value.code == "DEGREE_CAP"


def test_plan_parameters_follow_budget():
    p = plan(0.9, 0.1, 0.05, synthesize=False)
    x = 0.1 * KAPPA / (C_L * math.log(1.0 / 0.05))
    assert p.x == pytest.approx(x)
    assert p.eps_g == pytest.approx(x * x)
    assert p.n_g * p.eps_g == pytest.approx(0.1)
    assert p.budget_residual < 1e-12
    assert p.spec.halfwidth == pytest.approx(KAPPA * x)
    assert p.spec.shift == pytest.approx(0.5 * x)
    assert p.k == math.floor(1.0 / x)
    assert p.predicted_photons == 1 + p.gate_count * p.steps_per_gate
    assert p.angles is None


def test_plan_needs_a_wide_enough_gap():
    with pytest.raises(PlanInfeasibleError) as exc:
        plan(0.6, 0.1, 0.05, synthesize=False)
    assert exc.value.max_halfwidth > 0.0


def test_plan_rejects_r_near_one_half():
    with pytest.raises(ModelError) as exc:
        plan(0.5, 0.1, 0.05, synthesize=False)
    assert exc.value.code == "DEGENERATE_R"


def test_noisy_plan_needs_dimension():
    with pytest.raises(ConfigError):
        plan(0.9, 0.1, 0.05, "noisy", gamma=0.1, synthesize=False)


def test_noisy_plan_stages():
    p1 = plan(0.9, 0.1, 0.05, "noisy", gamma=0.1, dim=4, stage=1, synthesize=False)
    p2 = plan(0.9, 0.1, 0.05, "noisy", gamma=0.1, dim=4, stage=2, synthesize=False)
    assert p1.lam_hi == pytest.approx(0.9 * 0.9 + 0.025)
    assert p2.lam_hi == pytest.approx(0.9 * 0.1 + 0.025)
    assert p2.lam_lo == pytest.approx(0.025)
    assert p2.kappa == pytest.approx(0.25 * (p2.lam_hi - p2.lam_lo))


def test_plan_file_round_trip(tmp_path):
    p = plan(0.95, 0.9, 0.4, **FAST)
    path = tmp_path / "stage1.plan"
    dump_plan(p, path)
    q = load_plan(path)
    assert q.gate_count == p.gate_count
    assert q.spec == p.spec
    assert np.allclose(q.angles.thetas, p.angles.thetas)
    assert np.allclose(q.poly.coefficients, p.poly.coefficients)


def test_plan_file_unknown_key(tmp_path):
    path = tmp_path / "bad.plan"
    dump_plan(plan(0.9, 0.1, 0.05, synthesize=False), path)
    path.write_text(path.read_text() + "bogus=1\n")
    with pytest.raises(ConfigError) as exc:
        load_plan(path)
    assert exc.value.code == "UNKNOWN_KEY"


def test_prior_pass_estimates_top_eigenvalue():
    rho = _diag(0.8, 0.2, 0.0)
    r = prior_pass(rho, make_rng(31), samples=2000)
    assert abs(r - 0.8) < 0.05


def test_ideal_filter_branch_weights():
    rho = _diag(0.95, 0.05, 0.0)
    p = plan(0.95, 0.1, 0.05, synthesize=False)
    branches = filter_ideal(rho, p.spec, p.x)
    probs = {o.label: prob for prob, o in branches}
    assert probs["V1"] == pytest.approx(0.95)
    assert probs["V2"] == pytest.approx(0.05)


def test_unsortable_eigenvalue_in_forbidden_zone():
    p = plan(0.95, 0.1, 0.05, synthesize=False)
    with pytest.raises(UnsortableError):
        filter_ideal(_diag(0.5, 0.5, 0.0), p.spec, p.x)


def test_ideal_mode_label_frequency_and_photons():
    rho = _diag(0.9, 0.1, 0.0)
    p = plan(0.9, 0.1, 0.05, synthesize=False)
    outcomes = [filter_circuit(PhotonStream(rho, seed=s), p, fidelity="ideal") for s in range(400)]
    freq = label_frequencies(outcomes)
    assert abs(freq["V1"] - 0.9) < 0.06
    assert all(o.photons == p.predicted_photons for o in outcomes)
    v1 = np.array([1.0, 0.0, 0.0])
    row = sweep_row(outcomes, p, r=0.9, gamma=0.0, v1=v1, v2=np.array([0.0, 1.0, 0.0]))
    assert set(row) == set(SWEEP_COLUMNS)
    assert row["fid_V1"] == pytest.approx(1.0)
    assert row["fid_V2"] == pytest.approx(1.0)


def test_budget_exhaustion_gives_partial_outcome():
    rho = _diag(0.9, 0.1, 0.0)
    p = plan(0.9, 0.1, 0.05, synthesize=False)
    out = filter_circuit(PhotonStream(rho, budget=10), p, fidelity="ideal")
    assert out.partial
    assert out.label is None
    assert out.photons == 10
    assert out.warnings
    assert label_frequencies([out]) == {}


def test_unknown_fidelity():
    p = plan(0.9, 0.1, 0.05, synthesize=False)
    with pytest.raises(ConfigError):
        filter_circuit(PhotonStream(_diag(0.9, 0.1, 0.0)), p, fidelity="exact")


def test_circuit_filter_sorts_and_cache_matches():
    rho = _diag(0.95, 0.05, 0.0)
    p = plan(0.95, 0.9, 0.4, **FAST)
    cache = FilterCache()
    cached = [filter_circuit(PhotonStream(rho, seed=s), p, cache=cache) for s in range(60)]
    fresh = [filter_circuit(PhotonStream(rho, seed=s), p) for s in range(3)]
    for a, b in zip(cached, fresh):
        assert a.label == b.label
        assert a.photons == b.photons == p.predicted_photons
    assert label_frequencies(cached).get("V1", 0.0) > 0.6
    v1_states = [o.conditional_state for o in cached if o.label == "V1"]
    assert v1_states
    assert v1_states[0].matrix[0, 0].real > 0.8


def test_circuit_filter_needs_synthesized_plan():
    p = plan(0.9, 0.1, 0.05, synthesize=False)
    with pytest.raises(ConfigError):
        filter_circuit(PhotonStream(_diag(0.9, 0.1, 0.0)), p)


def _noisy_setup(gamma=0.1):
    clean = np.diag([0.9, 0.1, 0.0, 0.0])
    rho = make_density(((1.0 - gamma) * clean + gamma * np.eye(4) / 4).astype(complex))
    p1 = plan(0.9, 0.1, 0.05, "noisy", gamma=gamma, dim=4, stage=1, synthesize=False)
    p2 = plan(0.9, 0.1, 0.05, "noisy", gamma=gamma, dim=4, stage=2, synthesize=False)
    return rho, p1, p2


def test_two_stage_ideal_labels():
    rho, p1, p2 = _noisy_setup()
    outcomes = [two_stage_filter(PhotonStream(rho, seed=s), 0.1, p1, p2, fidelity="ideal")
                for s in range(600)]
    freq = label_frequencies(outcomes)
    assert abs(freq["V1"] - 0.835) < 0.06
    assert abs(freq.get("V2", 0.0) - 0.115) < 0.05
    assert abs(freq.get("noise", 0.0) - 0.05) < 0.04
    second = [o for o in outcomes if o.label in ("V2", "noise")]
    assert all(len(o.aux_record) == 2 for o in second)
    assert all(o.photons == p1.predicted_photons + p2.predicted_photons - 1 for o in second)


def test_two_stage_rejects_unresolvable_gap():
    _, p1, p2 = _noisy_setup()
    rho = _diag(0.5, 0.45, 0.05, 0.0)
    with pytest.raises(PlanInfeasibleError):
        two_stage_filter(PhotonStream(rho), 0.1, p1, p2, fidelity="ideal")


def test_eigenphase_images_sit_outside_the_zone():
    p = plan(0.9, 0.1, 0.05, synthesize=False)
    hi, lo = eigenphase_images(0.9, p.x)
    assert hi == pytest.approx(0.9 * p.x)
    assert lo == pytest.approx(0.1 * p.x)
    assert not p.spec.forbidden(np.array([hi, lo])).any()


def _rank_two(dim, r, seed, gamma=0.0):
    rng = make_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim)))
    v1, v2 = q[:, 0], q[:, 1]
    clean = r * np.outer(v1, v1.conj()) + (1.0 - r) * np.outer(v2, v2.conj())
    return make_density((1.0 - gamma) * clean + gamma * np.eye(dim) / dim), v1, v2


def test_sorting_statistics_at_sixteen_modes():
    r, eps, delta, trials = 0.9, 0.1, 0.05, 2000
    rho, v1, v2 = _rank_two(16, r, 41)
    p = plan(r, eps, delta, synthesize=False)
    outcomes = [filter_circuit(PhotonStream(rho, seed=s), p, fidelity="ideal") for s in range(trials)]
    row = sweep_row(outcomes, p, r=r, gamma=0.0, v1=v1, v2=v2)
    sigma = math.sqrt(r * (1.0 - r) / trials)
    assert abs(row["label_freq_V1"] - r) <= 3.0 * sigma
    assert row["fid_V1"] >= 1.0 - (delta + eps)
    assert row["fid_V2"] >= 1.0 - (delta + eps)


def _photons_per_v2_sample(r, eps, delta=0.05):
    # a sorted V2 copy turns up once every 1/(1 - r) filter runs
    p = plan(r, eps, delta, synthesize=False)
    return p.predicted_photons / (1.0 - r)


def test_photon_cost_scales_as_inverse_precision():
    eps = np.array([0.2, 0.1, 0.05, 0.025])
    cost = [_photons_per_v2_sample(0.9, e) for e in eps]
    slope = np.polyfit(np.log(1.0 / eps), np.log(cost), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.2)


def test_photon_cost_scales_as_inverse_gap():
    r = np.array([0.75, 0.85, 0.95])
    cost = [_photons_per_v2_sample(float(v), 0.1) for v in r]
    slope = np.polyfit(np.log(1.0 / (1.0 - r)), np.log(cost), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.2)


def test_two_stage_filter_separates_a_faint_noise_floor():
    gamma, n, r, eps, delta, trials = 1e-3, 4, 0.9, 0.1, 0.05, 4000
    dim = n * n
    rho, v1, v2 = _rank_two(dim, r, 43, gamma=gamma)
    p1 = plan(r, eps, delta, "noisy", gamma=gamma, dim=dim, stage=1, synthesize=False)
    p2 = plan(r, eps, delta, "noisy", gamma=gamma, dim=dim, stage=2, synthesize=False)
    outcomes = [two_stage_filter(PhotonStream(rho, seed=s), gamma, p1, p2, fidelity="ideal")
                for s in range(trials)]
    row = sweep_row(outcomes, p1, r=r, gamma=gamma, v1=v1, v2=v2)
    assert row["fid_V2"] >= 1.0 - eps - delta
    p_noise = gamma * (n * n - 2) / (n * n)
    freq = label_frequencies(outcomes).get("noise", 0.0)
    assert abs(freq - p_noise) <= 3.0 * math.sqrt(p_noise * (1.0 - p_noise) / trials)
