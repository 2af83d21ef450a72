"""Quick invariant checks run by ``qpimaging selftest``.

Each check returns ``(passed, detail)``. A check that raises counts as failed
with the exception text as its detail, so one broken module does not hide the
rest.
"""

import logging
from typing import Callable, List, Tuple

import numpy as np

from ..sim.angles import laurent_to_angles
from ..sim.baseline import (
    ComplexityParams,
    TomographyConfig,
    complexity_row,
    default_dk_grid,
    dk_experiment,
    resource_counts,
    simulate_tomography,
)
from ..sim.estimation import (
    EigenSupply,
    Observable,
    measurement_pipeline,
    phase_from_truth,
    solve_model,
    validation_reference,
)
from ..sim.numkit import (
    make_density,
    random_density,
    random_hermitian,
    random_state,
    swap_operator,
    trace_distance,
)
from ..sim.optics import build_rho, load_scene, mix_sources
from ..sim.qpca import make_rng, measure_error_constant, trial_seed
from ..sim.qsp import filter_ideal, plan
from .config import BUNDLED_SCENE

logger = logging.getLogger(__name__)

Check = Callable[[np.random.Generator], Tuple[bool, str]]


def check_numkit(rng: np.random.Generator) -> Tuple[bool, str]:
    a, b = random_density(3, rng), random_density(3, rng)
    d = trace_distance(a, b)
    s = swap_operator(3)
    ok = 0.0 <= d <= 1.0 and np.allclose(s @ s, np.eye(9))
    return ok, f"trace_distance={d:.6f}"


def check_scene(rng: np.random.Generator) -> Tuple[bool, str]:
    scene, _ = load_scene(BUNDLED_SCENE)
    rho, truth = build_rho(scene)
    ok = rho.dim == 16 and 0.5 < truth.r <= 1.0 and 0.0 <= truth.h <= 1.0
    return ok, f"dim={rho.dim} h={truth.h:.6f} r={truth.r:.6f}"


def check_exponentiation(rng: np.random.Generator) -> Tuple[bool, str]:
    rows, worst = measure_error_constant(3, [4, 16], [0.5], rng)
    coarse, fine = rows[0]["trace_error"], rows[1]["trace_error"]
    return fine < coarse, f"k=4:{coarse:.3e} k=16:{fine:.3e} constant={worst:.3f}"


def check_angles(rng: np.random.Generator) -> Tuple[bool, str]:
    _, residual = laurent_to_angles(np.array([0.5, 0.0, 0.5]))
    return residual < 1e-6, f"cos residual={residual:.2e}"


def check_filter(rng: np.random.Generator) -> Tuple[bool, str]:
    rho = make_density(np.diag([0.9, 0.1, 0.0]).astype(complex))
    p = plan(0.9, 0.5, 0.2, synthesize=False)
    branches = filter_ideal(rho, p.spec, p.x)
    p_v1 = sum(prob for prob, o in branches if o.label == "V1")
    return abs(p_v1 - 0.9) < 1e-9, f"P(V1)={p_v1:.12f}"


def check_estimation(rng: np.random.Generator) -> Tuple[bool, str]:
    psi1, psi2 = random_state(4, rng), random_state(4, rng)
    rho, psi2, _h = mix_sources(psi1, psi2, 0.8)
    r = float(rho.spectrum[0][-1])
    supply = EigenSupply.from_model(solve_model(r, 0.8), psi1, psi2)
    o = Observable.normalized("O", random_hermitian(4, rng))
    o_ref = validation_reference(supply)
    report = measurement_pipeline(supply, 0.8, o, o_ref, phase_from_truth(supply, o_ref))
    full = o.matrix * o.scale
    truth = float(np.vdot(psi2.amplitudes, full @ psi2.amplitudes).real)
    err = abs(report.psi2 - truth)
    return err < 1e-8, f"|<psi2|O|psi2> error|={err:.2e}"


def check_tomography(rng: np.random.Generator) -> Tuple[bool, str]:
    rho = random_density(3, rng, rank=2)
    _, err = simulate_tomography(rho, TomographyConfig(copies=0))
    return err < 1e-9, f"analytic trace error={err:.2e}"


def check_davis_kahan(rng: np.random.Generator) -> Tuple[bool, str]:
    rows = dk_experiment(*default_dk_grid(), relative=True)
    ratios = [row["ratio"] for row in rows if not row["skipped"]]
    worst = max(ratios)
    return worst <= 1.0 + 1e-6, f"max ratio={worst:.6f} over {len(ratios)} points"


def check_complexity(rng: np.random.Generator) -> Tuple[bool, str]:
    row = complexity_row(ComplexityParams(n=10, r=10.0 / 11.0, gamma=0.0, eps_st=0.1))
    return row["ratio"] >= 100.0, f"noise-free ratio={row['ratio']:.1f}"


def check_resources(rng: np.random.Generator) -> Tuple[bool, str]:
    rep = resource_counts(10, 0.1)
    ok = rep.pixel_qubits == 100 and rep.memory_qubits == 36 and 1e-4 <= rep.gate_error_threshold <= 1e-3
    return ok, f"gates={rep.total_gates} threshold={rep.gate_error_threshold:.3e}"


CHECKS: List[Tuple[str, Check]] = [
    ("numkit", check_numkit),
    ("scene", check_scene),
    ("exponentiation", check_exponentiation),
    ("angles", check_angles),
    ("filter", check_filter),
    ("estimation", check_estimation),
    ("tomography", check_tomography),
    ("davis_kahan", check_davis_kahan),
    ("complexity", check_complexity),
    ("resources", check_resources),
]


def run_checks(master_seed: int) -> List[Tuple[str, bool, str]]:
    results = []
    for idx, (name, fn) in enumerate(CHECKS):
        rng = make_rng(trial_seed(master_seed, idx))
        try:
            ok, detail = fn(rng)
        except Exception as exc:
            logger.exception("selftest check %s raised", name)
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        logger.info("selftest %s: %s (%s)", name, "ok" if ok else "FAILED", detail)
        results.append((name, bool(ok), detail))
    return results
