"""Eigenbasis sorting by quantum signal processing.

An eigenvector of ρ with eigenvalue λ sees the rotation sequence as the
scalar phase τ = x·λ. A trigonometric polynomial f close to the periodic step
Θ_s (1 on (s, s+π), 0 on (s-π, s)) then routes the large eigenvalue to aux
|0⟩ and the small one to aux |1⟩, as long as no image x·λ falls into the
forbidden zones s ± Δ and s + π ± Δ.

Two fidelities share one interface. ``ideal`` maps the spectrum through the
exact step and charges the photon budget recorded in the plan. ``circuit``
simulates the full sequence with finite-k partial-SWAP steps and charges every
copy it consumes.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.special import erf, erfcinv

from .angles import QSPAngles, laurent_to_angles, rotation
from .errors import (
    ConfigError,
    ModelError,
    PlanInfeasibleError,
    PolynomialError,
    UnsortableError,
)
from .kvtext import format_kv, read_kv
from .numkit import DensityOperator, PureState, make_density, state_fidelity
from .qpca import (
    CHANNEL_NEGATIVE_TOL,
    JointState,
    PhotonStream,
    controlled_exp_rho,
    step_angles,
)

logger = logging.getLogger(__name__)

KAPPA = 0.25
C_L = 3.2
DEGREE_CAP = 10_000
GRID_POINTS = 10_000
PRIOR_SAMPLES = 500
WEIGHT_TOL = 1e-12
FIDELITIES = ("ideal", "circuit")


@dataclass(frozen=True)
class StepSpec:
    shift: float
    halfwidth: float
    delta: float

    def __post_init__(self) -> None:
        if not 0.0 < self.halfwidth < 0.5:
            raise ConfigError(f"halfwidth must lie in (0, 1/2), got {self.halfwidth}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.shift - self.halfwidth <= 0.0 or self.shift + self.halfwidth >= math.pi:
            raise ConfigError(
                f"forbidden zone ({self.shift - self.halfwidth:.4g}, "
                f"{self.shift + self.halfwidth:.4g}) leaves (0, pi)"
            )

    def _offset(self, tau: np.ndarray) -> np.ndarray:
        return np.mod(np.asarray(tau, dtype=float) - self.shift + math.pi, 2.0 * math.pi) - math.pi

    def forbidden(self, tau: np.ndarray) -> np.ndarray:
        """True where τ lies in s ± Δ or s + π ± Δ (mod 2π)."""
        off = np.abs(self._offset(tau))
        return (off < self.halfwidth) | (off > math.pi - self.halfwidth)

    def step(self, tau: np.ndarray) -> np.ndarray:
        """Exact periodic step Θ_s as a boolean array."""
        off = self._offset(tau)
        return (off > 0.0) & (off < math.pi)


@dataclass(frozen=True, eq=False)
class TrigPolynomial:
    """f(τ) = Σ_{j=-d..d} c_j e^{ijτ}; ``coefficients[d + j]`` holds c_j."""

    coefficients: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.coefficients, dtype=complex).reshape(-1)
        if len(c) % 2 == 0:
            raise ConfigError(f"coefficient count must be odd, got {len(c)}")
        object.__setattr__(self, "coefficients", c)

    @property
    def degree(self) -> int:
        return (len(self.coefficients) - 1) // 2

    def evaluate(self, tau: np.ndarray) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        w = np.exp(1j * tau)
        return np.polynomial.polynomial.polyval(w, self.coefficients) * w ** (-self.degree)

    def on_grid(self, points: int) -> Tuple[np.ndarray, np.ndarray]:
        """Values on the uniform grid τ_n = 2πn/M, M ≥ ``points`` and ≥ 4d + 4."""
        m = max(int(points), 4 * self.degree + 4)
        d = self.degree
        buf = np.zeros(m, dtype=complex)
        j = np.arange(-d, d + 1)
        buf[j % m] = self.coefficients
        tau = 2.0 * math.pi * np.arange(m) / m
        return tau, m * np.fft.ifft(buf)


def grid_deviation(poly: TrigPolynomial, spec: StepSpec, points: int = GRID_POINTS) -> Tuple[float, float]:
    """(max |f|, max |f - Θ_s| outside the forbidden zones) on a dense grid."""
    tau, values = poly.on_grid(points)
    keep = ~spec.forbidden(tau)
    target = spec.step(tau).astype(float)
    dev = float(np.max(np.abs(values[keep] - target[keep]), initial=0.0))
    return float(np.max(np.abs(values))), dev


def _step_coefficients(spec: StepSpec, beta: float, bandwidth: int) -> np.ndarray:
    n = 1 << int(math.ceil(math.log2(max(1024, 8 * bandwidth))))
    while True:
        tau = 2.0 * math.pi * np.arange(n) / n
        smooth = 0.5 * (1.0 + erf(beta * np.sin(tau - spec.shift)))
        c = np.fft.fft(smooth) / n
        edge = np.abs(c[n // 2 - n // 8: n // 2 + n // 8])
        if float(np.max(edge)) < 1e-13 or n >= 1 << 22:
            return c
        n *= 2


def build_step_poly(
    spec: StepSpec,
    *,
    degree_cap: int = DEGREE_CAP,
    grid_points: int = GRID_POINTS,
) -> TrigPolynomial:
    """Smallest-degree truncation of an erf-smoothed step meeting the δ bounds.

    The smoothed step (1 + erf(β sin(τ - s)))/2 is within δ/4 of Θ_s outside
    the zones; its Fourier series is cut where the discarded tail drops below
    δ/8 and the result is scaled so that max |f| = 1 - δ/8.
    """
    delta_a = 0.5 * spec.delta
    beta = float(erfcinv(delta_a)) / math.sin(spec.halfwidth)
    c = _step_coefficients(spec, beta, int(8 * beta) + 64)
    n = len(c)
    half = n // 2
    mags = np.abs(c[1:half]) + np.abs(c[n - 1: n - half: -1])
    # tails[d] = Σ_{|j| > d} |c_j|
    tails = np.concatenate([np.cumsum(mags[::-1])[::-1], [0.0]])
    meets = np.nonzero(tails <= 0.25 * delta_a)[0]
    degree = int(meets[0]) if len(meets) else half - 1
    capped = degree > degree_cap
    degree = min(degree, degree_cap)
    coeffs = np.concatenate([c[n - degree:], c[: degree + 1]]) if degree else c[:1].copy()
    poly = TrigPolynomial(coeffs)
    peak, _ = grid_deviation(poly, spec, grid_points)
    target_peak = 1.0 - 0.25 * delta_a
    if peak > target_peak:
        poly = TrigPolynomial(coeffs * (target_peak / peak))
    peak, dev = grid_deviation(poly, spec, grid_points)
    if capped or peak > 1.0 + 1e-9 or dev > spec.delta:
        raise PolynomialError(
            f"degree {degree} reaches deviation {dev:.3e} (target {spec.delta})",
            achieved=dev,
            hint="widen the forbidden zone or loosen delta",
        )
    logger.debug("step polynomial: degree=%d beta=%.3f dev=%.2e", degree, beta, dev)
    return poly


def poly_to_angles(poly: TrigPolynomial) -> QSPAngles:
    angles, _ = laurent_to_angles(poly.coefficients)
    return angles


def eigenphase_images(r: float, x: float) -> Tuple[float, float]:
    """Phases seen by the two signal eigenvectors: (x·r, x·(1-r))."""
    return x * r, x * (1.0 - r)


@dataclass(frozen=True, eq=False)
class QSPPlan:
    r_prior: float
    eps: float
    delta: float
    mode: str
    stage: int
    gamma: float
    dim: Optional[int]
    kappa: float
    c_l: float
    x: float
    k: int
    spec: StepSpec
    eps_g: float
    n_g: float
    gate_count: int
    split: int
    steps_per_gate: int
    lam_hi: float
    lam_lo: float
    poly: Optional[TrigPolynomial] = None
    angles: Optional[QSPAngles] = None

    @property
    def predicted_photons(self) -> int:
        """One memory copy plus one fresh copy per partial-SWAP step."""
        return 1 + self.gate_count * self.steps_per_gate

    @property
    def budget_residual(self) -> float:
        return abs(self.eps - self.n_g * self.eps_g)


def _signal_eigenvalues(r: float, mode: str, stage: int, gamma: float,
                        dim: Optional[int]) -> Tuple[float, float]:
    if mode == "noiseless":
        if stage != 1:
            raise ConfigError("noiseless plans have a single stage")
        return r, 1.0 - r
    if mode != "noisy":
        raise ConfigError(f"unknown plan mode {mode!r}")
    if dim is None or dim < 3:
        raise ConfigError("noisy plans need the state dimension (at least 3)")
    floor = gamma / dim
    p0 = (1.0 - gamma) * r + floor
    p2 = (1.0 - gamma) * (1.0 - r) + floor
    if stage == 1:
        return p0, p2
    if stage == 2:
        return p2, floor
    raise ConfigError(f"stage must be 1 or 2, got {stage}")


def plan(
    r_prior: float,
    eps: float,
    delta: float,
    mode: str = "noiseless",
    *,
    gamma: float = 0.0,
    dim: Optional[int] = None,
    stage: int = 1,
    kappa: Optional[float] = None,
    c_l: float = C_L,
    spec: Optional[StepSpec] = None,
    k: Optional[int] = None,
    synthesize: bool = True,
    degree_cap: int = DEGREE_CAP,
) -> QSPPlan:
    """Choose x, k, the step polynomial and its angles for a target ε and δ.

    Δ = κ·x and √ε_g = x = ε·κ/(c_L·log(1/δ)), so N_g = c_L·log(1/δ)/Δ gates
    spend exactly ε = N_g·ε_g. The step sits midway between the images of the
    eigenvalue to keep (λ_hi) and the one to reject (λ_lo).
    """
    if not 0.0 < eps < 1.0:
        raise ConfigError(f"eps must lie in (0, 1), got {eps}")
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    if not 0.0 < r_prior <= 1.0:
        raise ConfigError(f"r_prior must lie in (0, 1], got {r_prior}")
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    lam_hi, lam_lo = _signal_eigenvalues(r_prior, mode, stage, gamma, dim)
    if kappa is None:
        kappa = KAPPA if stage == 1 else 0.25 * (lam_hi - lam_lo)
    if kappa <= 0.0:
        raise PlanInfeasibleError(
            f"no gap between signal eigenvalues {lam_hi:.4g} and {lam_lo:.4g}",
            max_halfwidth=0.0,
        )
    x = eps * kappa / (c_l * math.log(1.0 / delta))
    eps_g = x * x
    if stage == 1 and abs(r_prior - 0.5) < 10.0 * eps_g:
        raise ModelError("r ≈ 1/2 unsupported: the two eigenphase images coincide",
                         code="DEGENERATE_R")
    if spec is None:
        max_halfwidth = 0.5 * x * (lam_hi - lam_lo)
        halfwidth = kappa * x
        if halfwidth > max_halfwidth * (1.0 + 1e-12):
            raise PlanInfeasibleError(
                f"halfwidth {halfwidth:.3e} exceeds the half gap {max_halfwidth:.3e} "
                f"between images of {lam_hi:.4g} and {lam_lo:.4g}",
                max_halfwidth=max_halfwidth,
                hint="supply a StepSpec explicitly or raise r_prior above 3/4",
            )
        spec = StepSpec(0.5 * x * (lam_hi + lam_lo), halfwidth, delta)
    n_g = eps / eps_g
    k = k if k is not None else max(1, math.floor(1.0 / x))
    steps = len(step_angles(x, k))
    poly: Optional[TrigPolynomial] = None
    angles: Optional[QSPAngles] = None
    if synthesize:
        poly = build_step_poly(spec, degree_cap=degree_cap)
        angles = poly_to_angles(poly)
        gate_count = 2 * poly.degree
    else:
        gate_count = 2 * math.ceil(0.5 * n_g)
    out = QSPPlan(
        r_prior=r_prior, eps=eps, delta=delta, mode=mode, stage=stage, gamma=gamma,
        dim=dim, kappa=kappa, c_l=c_l, x=x, k=k, spec=spec, eps_g=eps_g, n_g=n_g,
        gate_count=gate_count, split=gate_count // 2, steps_per_gate=steps,
        lam_hi=lam_hi, lam_lo=lam_lo, poly=poly, angles=angles,
    )
    logger.info(
        "plan stage=%d mode=%s x=%.4g k=%d L=%d photons=%d synthesized=%s",
        stage, mode, x, k, gate_count, out.predicted_photons, synthesize,
    )
    return out


class PlanFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    r_prior: float
    eps: float
    delta: float
    mode: str
    stage: int = Field(ge=1, le=2)
    gamma: float = 0.0
    dim: Optional[int] = None
    kappa: float
    c_l: float
    x: float = Field(gt=0)
    k: int = Field(ge=1)
    shift: float
    halfwidth: float
    eps_g: float
    n_g: float
    gate_count: int = Field(ge=0)
    split: int = Field(ge=0)
    steps_per_gate: int = Field(ge=0)
    lam_hi: float
    lam_lo: float
    coef_re: Optional[str] = None
    coef_im: Optional[str] = None
    thetas: Optional[str] = None
    phis: Optional[str] = None
    lam: Optional[float] = None


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",") if v.strip()])


def dump_plan(p: QSPPlan, path: Union[str, Path]) -> None:
    values: Dict[str, Any] = {
        "r_prior": p.r_prior, "eps": p.eps, "delta": p.delta, "mode": p.mode,
        "stage": p.stage, "gamma": p.gamma, "dim": p.dim, "kappa": p.kappa,
        "c_l": p.c_l, "x": p.x, "k": p.k, "shift": p.spec.shift,
        "halfwidth": p.spec.halfwidth, "eps_g": p.eps_g, "n_g": p.n_g,
        "gate_count": p.gate_count, "split": p.split,
        "steps_per_gate": p.steps_per_gate, "lam_hi": p.lam_hi, "lam_lo": p.lam_lo,
    }
    if p.poly is not None:
        values["coef_re"] = [float(v) for v in p.poly.coefficients.real]
        values["coef_im"] = [float(v) for v in p.poly.coefficients.imag]
    if p.angles is not None:
        values["thetas"] = [float(v) for v in p.angles.thetas]
        values["phis"] = [float(v) for v in p.angles.phis]
        values["lam"] = float(p.angles.lam)
    Path(path).write_text(format_kv(values), encoding="utf-8")


def load_plan(path: Union[str, Path]) -> QSPPlan:
    try:
        f = PlanFile(**read_kv(path))
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first.get("loc", ()))
        code = "UNKNOWN_KEY" if first.get("type") == "extra_forbidden" else "BAD_VALUE"
        raise ConfigError(f"plan key {loc!r}: {first.get('msg')}", code=code) from exc
    poly = None
    if f.coef_re is not None and f.coef_im is not None:
        poly = TrigPolynomial(_floats(f.coef_re) + 1j * _floats(f.coef_im))
    angles = None
    if f.thetas is not None and f.phis is not None:
        angles = QSPAngles(_floats(f.thetas), _floats(f.phis), float(f.lam or 0.0), f.split)
        if angles.gate_count != f.gate_count:
            raise ConfigError(
                f"plan lists {angles.gate_count} gates of angles but gate_count={f.gate_count}"
            )
    return QSPPlan(
        r_prior=f.r_prior, eps=f.eps, delta=f.delta, mode=f.mode, stage=f.stage,
        gamma=f.gamma, dim=f.dim, kappa=f.kappa, c_l=f.c_l, x=f.x, k=f.k,
        spec=StepSpec(f.shift, f.halfwidth, f.delta), eps_g=f.eps_g, n_g=f.n_g,
        gate_count=f.gate_count, split=f.split, steps_per_gate=f.steps_per_gate,
        lam_hi=f.lam_hi, lam_lo=f.lam_lo, poly=poly, angles=angles,
    )


def prior_pass(rho: DensityOperator, rng: np.random.Generator, samples: int = PRIOR_SAMPLES) -> float:
    """Cheap r estimate from ``samples`` spectral-oracle labels."""
    w, _ = rho.spectrum
    top = float(np.clip(w[-1], 0.0, 1.0))
    hits = int(rng.binomial(samples, top))
    r = hits / samples
    return max(r, 1.0 - r)


@dataclass
class FilterOutcome:
    label: Optional[str]
    conditional_state: Optional[Union[DensityOperator, PureState]]
    photons: int
    aux_record: List[int]
    fidelity: str
    partial: bool = False
    warnings: List[str] = field(default_factory=list)


class FilterCache:
    """Pre-measurement joint states for density-mode runs.

    In density mode the state before the aux measurement depends only on the
    memory, the signal source and the plan, so repeated trials share it.
    """

    def __init__(self) -> None:
        self._entries: List[Tuple[Any, Any, Any, JointState]] = []

    def get(self, tag: str, p: QSPPlan, source: DensityOperator) -> Optional[JointState]:
        for t, cp, cs, joint in self._entries:
            if t == tag and cp is p and cs is source:
                return joint
        return None

    def put(self, tag: str, p: QSPPlan, source: DensityOperator, joint: JointState) -> None:
        self._entries.append((tag, p, source, joint))


def _ideal_branches(
    memory: DensityOperator,
    signal: DensityOperator,
    spec: StepSpec,
    x: float,
    labels: Sequence[str],
) -> List[Tuple[float, FilterOutcome]]:
    w, v = signal.spectrum
    weights = np.einsum("ij,ik,kj->j", v.conj(), memory.matrix, v).real
    tau = x * w
    live = weights > WEIGHT_TOL
    bad = live & spec.forbidden(tau)
    if np.any(bad):
        raise UnsortableError(
            f"unsortable at this x: eigenvalues {np.round(w[bad], 6).tolist()} map into "
            f"the forbidden zone around {spec.shift:.4g} ± {spec.halfwidth:.3g}",
            hint="re-plan with a better r_prior or a narrower zone",
        )
    keep = spec.step(tau)
    out: List[Tuple[float, FilterOutcome]] = []
    for bit, mask in ((0, keep), (1, ~keep)):
        if not np.any(mask & live):
            continue
        proj = v[:, mask] @ v[:, mask].conj().T
        block = proj @ memory.matrix @ proj
        prob = float(np.trace(block).real)
        if prob <= WEIGHT_TOL:
            continue
        state = make_density(block / prob, negative_tol=CHANNEL_NEGATIVE_TOL)
        out.append((prob, FilterOutcome(labels[bit], state, 0, [bit], "ideal")))
    return out


def filter_ideal(rho: DensityOperator, spec: StepSpec, x: float) -> List[Tuple[float, FilterOutcome]]:
    """Spectral-oracle branches: exact step applied to ρ's own eigenphases."""
    return _ideal_branches(rho, rho, spec, x, ("V1", "V2"))


def _pick(rng: np.random.Generator, branches: List[Tuple[float, FilterOutcome]]) -> FilterOutcome:
    probs = np.array([p for p, _ in branches])
    idx = int(rng.choice(len(branches), p=probs / probs.sum()))
    return branches[idx][1]


def _partial(stream: PhotonStream, start: int, fidelity: str, record: List[int],
             memory: Optional[Union[DensityOperator, PureState]] = None) -> FilterOutcome:
    return FilterOutcome(
        label=None,
        conditional_state=memory,
        photons=stream.consumed - start,
        aux_record=record,
        fidelity=fidelity,
        partial=True,
        warnings=[f"photon budget exhausted after {stream.consumed} copies"],
    )


def _run_sequence(
    stream: PhotonStream,
    p: QSPPlan,
    memory: Union[DensityOperator, PureState],
    cache: Optional[FilterCache],
    tag: str,
) -> Optional[JointState]:
    """Joint aux/memory state just before the aux measurement, or None if starved."""
    if p.angles is None:
        raise ConfigError("plan carries no angles; build it with synthesize=True",
                          hint="use fidelity='ideal' for unsynthesized plans")
    if not isinstance(memory, DensityOperator):
        cache = None
    if cache is not None:
        hit = cache.get(tag, p, stream.source)
        if hit is not None:
            needed = p.gate_count * p.steps_per_gate
            return hit if stream.take(needed) == needed else None
    angles = p.angles
    joint = JointState.from_memory(memory)
    joint = joint.rotate_aux(rotation(angles.thetas[0], angles.phis[0], angles.lam))
    for j in range(1, angles.gate_count + 1):
        sign = 1 if j <= angles.split else -1
        joint, _ = controlled_exp_rho(joint, p.x, sign, p.k, stream)
        if stream.exhausted:
            return None
        joint = joint.rotate_aux(rotation(angles.thetas[j], angles.phis[j]))
    if cache is not None:
        cache.put(tag, p, stream.source, joint)
    return joint


def _measure(stream: PhotonStream, joint: JointState, labels: Sequence[str],
             record: List[int], start: int) -> FilterOutcome:
    probs = joint.aux_probabilities()
    bit = int(stream.rng.choice(2, p=probs / probs.sum()))
    _, state = joint.conditional_memory(bit)
    return FilterOutcome(labels[bit], state, stream.consumed - start, record + [bit], "circuit")


def filter_circuit(
    stream: PhotonStream,
    p: QSPPlan,
    *,
    fidelity: str = "circuit",
    trajectory: bool = False,
    cache: Optional[FilterCache] = None,
) -> FilterOutcome:
    """Sort one incoming copy into V1 (aux |0⟩) or V2 (aux |1⟩)."""
    if fidelity not in FIDELITIES:
        raise ConfigError(f"fidelity must be one of {FIDELITIES}, got {fidelity!r}")
    start = stream.consumed
    if stream.take(1) == 0:
        return _partial(stream, start, fidelity, [])
    if fidelity == "ideal":
        chosen = _pick(stream.rng, filter_ideal(stream.source, p.spec, p.x))
        if stream.take(p.predicted_photons - 1) < p.predicted_photons - 1:
            return _partial(stream, start, fidelity, [])
        chosen.photons = stream.consumed - start
        return chosen
    memory: Union[DensityOperator, PureState] = (
        PureState(stream.sample_pure()) if trajectory else stream.source
    )
    joint = _run_sequence(stream, p, memory, cache, "stage1")
    if joint is None:
        return _partial(stream, start, fidelity, [], memory)
    return _measure(stream, joint, ("V1", "V2"), [], start)


def _check_gap(stream: PhotonStream, p: QSPPlan, upper: int) -> None:
    w = np.sort(stream.source.spectrum[0])[::-1]
    if len(w) <= upper + 1:
        return
    gap = float(w[upper] - w[upper + 1])
    if 2.0 * p.spec.halfwidth > p.x * gap:
        raise PlanInfeasibleError(
            f"stage {p.stage} cannot resolve the measured gap {gap:.3e}",
            max_halfwidth=0.5 * p.x * gap,
        )


def two_stage_filter(
    stream: PhotonStream,
    gamma: float,
    plan1: QSPPlan,
    plan2: QSPPlan,
    *,
    fidelity: str = "circuit",
    trajectory: bool = False,
    cache: Optional[FilterCache] = None,
) -> FilterOutcome:
    """Sort a noisy copy into V1, V2 or the isotropic noise floor.

    Stage one splits V1 from the rest; a copy found on aux |1⟩ is filtered
    again with a step between the second eigenvalue and the floor γ/d.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    if abs(plan1.gamma - gamma) > 1e-12 or abs(plan2.gamma - gamma) > 1e-12:
        logger.warning("plans were built for gamma=%g/%g, filtering at %g",
                       plan1.gamma, plan2.gamma, gamma)
    _check_gap(stream, plan1, 0)
    _check_gap(stream, plan2, 1)
    start = stream.consumed
    first = filter_circuit(stream, plan1, fidelity=fidelity, trajectory=trajectory, cache=cache)
    if first.partial or first.label == "V1":
        return first
    memory = first.conditional_state
    if memory is None:
        raise ModelError("stage one finished without a conditional state")
    if fidelity == "ideal":
        if not isinstance(memory, DensityOperator):
            raise ConfigError("ideal two-stage filtering needs density-matrix memory",
                              hint="drop trajectory mode for fidelity=ideal")
        branches = _ideal_branches(memory, stream.source, plan2.spec, plan2.x, ("V2", "noise"))
        chosen = _pick(stream.rng, branches)
        needed = plan2.predicted_photons - 1
        if stream.take(needed) < needed:
            return _partial(stream, start, fidelity, first.aux_record, memory)
        chosen.photons = stream.consumed - start
        chosen.aux_record = first.aux_record + chosen.aux_record
        return chosen
    joint = _run_sequence(stream, plan2, memory, cache, "stage2")
    if joint is None:
        return _partial(stream, start, fidelity, first.aux_record, memory)
    return _measure(stream, joint, ("V2", "noise"), first.aux_record, start)


def label_frequencies(outcomes: Sequence[FilterOutcome]) -> Dict[str, float]:
    done = [o for o in outcomes if not o.partial]
    if not done:
        return {}
    out: Dict[str, float] = {}
    for o in done:
        if o.label is None:
            continue
        out[o.label] = out.get(o.label, 0.0) + 1.0 / len(done)
    return out


def _mean_fidelity(outcomes: Sequence[FilterOutcome], label: str, vec: np.ndarray) -> float:
    vals = [
        state_fidelity(o.conditional_state, vec)
        if isinstance(o.conditional_state, DensityOperator)
        else float(abs(np.vdot(vec, o.conditional_state.amplitudes)) ** 2)
        for o in outcomes
        if o.label == label and not o.partial and o.conditional_state is not None
    ]
    return float(np.mean(vals)) if vals else float("nan")


SWEEP_COLUMNS = [
    "r", "gamma", "eps", "delta", "x", "k", "L",
    "photons_mean", "photons_p95", "label_freq_V1", "fid_V1", "fid_V2",
]


def sweep_row(
    outcomes: Sequence[FilterOutcome],
    p: QSPPlan,
    *,
    r: float,
    gamma: float,
    v1: np.ndarray,
    v2: np.ndarray,
) -> Dict[str, float]:
    """One CSV row summarizing a batch of filter trials against true eigenvectors."""
    photons = np.array([o.photons for o in outcomes], dtype=float)
    return {
        "r": r,
        "gamma": gamma,
        "eps": p.eps,
        "delta": p.delta,
        "x": p.x,
        "k": p.k,
        "L": p.gate_count,
        "photons_mean": float(photons.mean()) if len(photons) else float("nan"),
        "photons_p95": float(np.percentile(photons, 95)) if len(photons) else float("nan"),
        "label_freq_V1": label_frequencies(outcomes).get("V1", 0.0),
        "fid_V1": _mean_fidelity(outcomes, "V1", v1),
        "fid_V2": _mean_fidelity(outcomes, "V2", v2),
    }
