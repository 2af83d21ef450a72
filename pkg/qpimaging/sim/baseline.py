"""Classical comparison suite.

Direct-detection state tomography with eigenvector extraction, the
eigenvector perturbation experiment that calibrates the Davis-Kahan constant,
and the closed-form sampling-complexity formulas that the quantum scheme is
compared against. All logarithms are natural.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .numkit import DensityOperator, eigh, trace_distance

logger = logging.getLogger(__name__)

DESIGNS = ("two_level",)
RECONSTRUCTORS = ("linear", "diluted_mle")
# frame rank is verified up to this dimension; beyond it the SVD dominates the run
FRAME_CHECK_MAX_DIM = 16
GAP_FLOOR = 1e-12
MLE_DILUTION = 0.5
MLE_MAX_ITER = 500
MLE_TOL = 1e-9
MLE_MIX = 1e-3
PROB_FLOOR = 1e-12
LOG_CONVENTION = "natural"
FORMULAS = ("m_qsp", "m_tom", "m_tom_full", "m_qsp_noisy", "two_stage", "alt_scheme")


@dataclass(frozen=True)
class TomographyConfig:
    """Single-copy tomography settings.

    ``copies == 0`` selects the analytic limit: outcome frequencies are the
    exact Born probabilities.
    """

    copies: int
    design: str = "two_level"
    reconstructor: str = "linear"
    seed: int = 0
    dilution: float = MLE_DILUTION
    max_iter: int = MLE_MAX_ITER

    def __post_init__(self) -> None:
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown measurement design {self.design!r}",
                              hint=f"use one of {', '.join(DESIGNS)}")
        if self.reconstructor not in RECONSTRUCTORS:
            raise ConfigError(f"unknown reconstructor {self.reconstructor!r}",
                              hint=f"use one of {', '.join(RECONSTRUCTORS)}")
        if self.copies < 0:
            raise ConfigError(f"copies must be >= 0, got {self.copies}")
        if self.dilution <= 0.0 or self.max_iter < 1:
            raise ConfigError("dilution must be positive and max_iter at least 1")

    @property
    def analytic(self) -> bool:
        return self.copies == 0


# ---------- measurement design ----------

def _pairs(dim: int) -> List[Tuple[int, int]]:
    return list(itertools.combinations(range(dim), 2))


def design_vectors(dim: int) -> np.ndarray:
    """Rows are the distinct projector vectors of the design.

    Index ``k < dim`` is the computational vector e_k; pair number p contributes
    ``(e_i ± e_j)/√2`` and ``(e_i ± i e_j)/√2`` at ``dim + 4p + {0, 1, 2, 3}``.
    """
    pairs = _pairs(dim)
    out = np.zeros((dim + 4 * len(pairs), dim), dtype=complex)
    out[:dim] = np.eye(dim)
    h = 1.0 / np.sqrt(2.0)
    for p, (i, j) in enumerate(pairs):
        base = dim + 4 * p
        out[base: base + 4, i] = h
        out[base, j] = h
        out[base + 1, j] = -h
        out[base + 2, j] = 1j * h
        out[base + 3, j] = -1j * h
    return out


def design_settings(dim: int) -> List[np.ndarray]:
    """Vector indices measured together by each projective setting.

    Setting 0 is the computational basis. Each pair (i, j) then has a real and
    an imaginary setting whose two rotated outcomes replace e_i and e_j.
    """
    settings = [np.arange(dim)]
    for p, (i, j) in enumerate(_pairs(dim)):
        rest = [k for k in range(dim) if k not in (i, j)]
        base = dim + 4 * p
        settings.append(np.array([base, base + 1] + rest))
        settings.append(np.array([base + 2, base + 3] + rest))
    return settings


def frame_rank(dim: int) -> int:
    vecs = design_vectors(dim)
    frame = np.einsum("ni,nj->nij", vecs, vecs.conj()).reshape(len(vecs), dim * dim)
    return int(np.linalg.matrix_rank(frame))


def check_frame(dim: int) -> None:
    if dim > FRAME_CHECK_MAX_DIM:
        return
    rank = frame_rank(dim)
    if rank < dim * dim:
        raise ConfigError(
            f"design frame has rank {rank}, operator space needs {dim * dim}",
            code="RANK_DEFICIENT",
        )


def born_probabilities(rho: DensityOperator, vecs: np.ndarray) -> np.ndarray:
    p = np.einsum("ni,ij,nj->n", vecs.conj(), rho.matrix, vecs).real
    return np.clip(p, 0.0, None)


def sample_counts(rho: DensityOperator, cfg: TomographyConfig,
                  rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Outcome counts and exposures (shots of settings containing each vector).

    In the analytic limit each setting gets unit exposure and the counts are
    the exact probabilities.
    """
    dim = rho.dim
    vecs = design_vectors(dim)
    settings = design_settings(dim)
    probs = born_probabilities(rho, vecs)
    counts = np.zeros(len(vecs))
    exposure = np.zeros(len(vecs))
    if cfg.analytic:
        for idx in settings:
            counts[idx] += probs[idx]
            exposure[idx] += 1.0
        return counts, exposure
    if cfg.copies < len(settings):
        raise ConfigError(
            f"{cfg.copies} copies cannot cover {len(settings)} measurement settings",
            hint="raise copies or use copies=0 for the analytic limit",
        )
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    share, extra = divmod(cfg.copies, len(settings))
    for s, idx in enumerate(settings):
        shots = share + (1 if s < extra else 0)
        p = probs[idx]
        p = p / p.sum()
        counts[idx] += rng.multinomial(shots, p)
        exposure[idx] += shots
    return counts, exposure


# ---------- reconstruction ----------

def project_density(matrix: np.ndarray) -> DensityOperator:
    """Nearest density operator by eigenvalue clipping and renormalization."""
    m = 0.5 * (matrix + matrix.conj().T)
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    if w.sum() <= 0.0:
        w = np.full_like(w, 1.0 / len(w))
    w = w / w.sum()
    return DensityOperator((v * w) @ v.conj().T)


def linear_inversion(counts: np.ndarray, exposure: np.ndarray, dim: int) -> np.ndarray:
    """Unprojected estimate from relative frequencies of the design outcomes."""
    freq = np.divide(counts, exposure, out=np.zeros_like(counts), where=exposure > 0)
    est = np.diag(freq[:dim]).astype(complex)
    for p, (i, j) in enumerate(_pairs(dim)):
        base = dim + 4 * p
        re = 0.5 * (freq[base] - freq[base + 1])
        im = 0.5 * (freq[base + 3] - freq[base + 2])
        est[i, j] = re + 1j * im
        est[j, i] = re - 1j * im
    return est


def diluted_mle(counts: np.ndarray, vecs: np.ndarray, start: DensityOperator, *,
                dilution: float = MLE_DILUTION, max_iter: int = MLE_MAX_ITER,
                tol: float = MLE_TOL) -> Tuple[DensityOperator, int]:
    """Diluted R ρ R iteration; returns the estimate and the iterations used."""
    dim = start.dim
    total = counts.sum()
    seen = counts > 0
    v = vecs[seen]
    weights = counts[seen] / total
    eye = np.eye(dim)
    rho = start.matrix
    for it in range(1, max_iter + 1):
        p = np.einsum("ni,ij,nj->n", v.conj(), rho, v).real
        r_op = (v.T * (weights / np.maximum(p, PROB_FLOOR))) @ v.conj()
        step = eye + dilution * r_op
        nxt = step @ rho @ step.conj().T
        nxt = 0.5 * (nxt + nxt.conj().T)
        nxt /= np.trace(nxt).real
        delta = float(np.max(np.abs(nxt - rho)))
        rho = nxt
        if delta < tol:
            return project_density(rho), it
    logger.warning("diluted MLE stopped at the iteration limit (%d)", max_iter)
    return project_density(rho), max_iter


def simulate_tomography(rho: DensityOperator, cfg: TomographyConfig,
                        rng: Optional[np.random.Generator] = None) -> Tuple[DensityOperator, float]:
    """Sample the design, reconstruct ρ̄ and report its trace distance to ρ."""
    check_frame(rho.dim)
    counts, exposure = sample_counts(rho, cfg, rng)
    rho_bar = project_density(linear_inversion(counts, exposure, rho.dim))
    if cfg.reconstructor == "diluted_mle" and not cfg.analytic:
        start = DensityOperator((1.0 - MLE_MIX) * rho_bar.matrix + MLE_MIX * np.eye(rho.dim) / rho.dim)
        rho_bar, iters = diluted_mle(counts, design_vectors(rho.dim), start,
                                     dilution=cfg.dilution, max_iter=cfg.max_iter)
        logger.debug("diluted MLE converged in %d iterations", iters)
    return rho_bar, trace_distance(rho, rho_bar)


# ---------- eigenvector error ----------

@dataclass(frozen=True)
class EigenDeviation:
    index: int
    eigenvalue: float
    eigenvalue_bar: float
    eigenvalue_deviation: float
    vector_deviation: float
    gap: float
    bound: Optional[float]
    ratio: Optional[float]


@dataclass(frozen=True)
class EigenErrorReport:
    eps_tom: float
    rows: List[EigenDeviation]
    warnings: List[str] = field(default_factory=list)


def phase_aligned_deviation(v: np.ndarray, w: np.ndarray) -> float:
    """‖v − e^{iφ}w‖ with φ maximizing Re⟨v|e^{iφ}w⟩."""
    ov = np.vdot(v, w)
    phase = np.conj(ov) / abs(ov) if abs(ov) > 0 else 1.0
    return float(np.linalg.norm(v - phase * w))


def eigen_error(rho: DensityOperator, rho_bar: DensityOperator, *, track: int = 2,
                eps_tom: Optional[float] = None) -> EigenErrorReport:
    """Deviation of the ``track`` leading eigenpairs of ``rho_bar`` from ``rho``.

    ``eps_tom`` defaults to the trace distance between the two operators.
    """
    eps = trace_distance(rho, rho_bar) if eps_tom is None else float(eps_tom)
    w, v = eigh(rho)
    wb, vb = eigh(rho_bar)
    order, order_bar = np.argsort(w)[::-1], np.argsort(wb)[::-1]
    rows: List[EigenDeviation] = []
    warnings: List[str] = []
    for k in range(min(track, rho.dim)):
        i, ib = order[k], order_bar[k]
        others = np.delete(w, i)
        gap = float(np.min(np.abs(others - w[i]))) if len(others) else float("inf")
        dev = phase_aligned_deviation(v[:, i], vb[:, ib])
        if gap < GAP_FLOOR:
            bound = ratio = None
            warnings.append(f"eigenvector {k + 1}: gap {gap:.1e} below floor, bound undefined")
        else:
            bound = eps / gap
            ratio = dev / bound if bound > 0 else None
        rows.append(EigenDeviation(
            index=k + 1,
            eigenvalue=float(w[i]),
            eigenvalue_bar=float(wb[ib]),
            eigenvalue_deviation=float(abs(w[i] - wb[ib])),
            vector_deviation=dev,
            gap=gap,
            bound=bound,
            ratio=ratio,
        ))
    return EigenErrorReport(eps_tom=eps, rows=rows, warnings=warnings)


TOMOGRAPHY_COLUMNS = ("dim", "M", "trace_error", "eigvec_error", "seed")


def tomography_row(rho: DensityOperator, cfg: TomographyConfig,
                   rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    rho_bar, err = simulate_tomography(rho, cfg, rng)
    report = eigen_error(rho, rho_bar, track=2)
    return {
        "dim": rho.dim,
        "M": cfg.copies,
        "trace_error": err,
        "eigvec_error": report.rows[-1].vector_deviation,
        "seed": cfg.seed,
    }


# ---------- perturbation experiment ----------

DK_COLUMNS = ("r", "eps_tom", "ratio", "skipped")


def default_dk_grid(r_points: int = 9, eps_points: int = 12) -> Tuple[np.ndarray, np.ndarray]:
    """r values in [0.55, 0.95] and ε_tom as log-spaced fractions of 1 − r.

    Pass the pair to :func:`dk_experiment` with ``relative=True``; every ε_tom
    then lies inside (0, 1 − r) for its own r.
    """
    return np.linspace(0.55, 0.95, r_points), np.logspace(-4, np.log10(0.95), eps_points)


def dk_point(r: float, eps_tom: float, dim: int = 3) -> float:
    """Deviation of |V₂⟩ over ε_tom/(1−r) for the one-direction perturbation."""
    basis = np.eye(dim, dtype=complex)
    v1, v2, v_pert = basis[:, 0], basis[:, 1], basis[:, 2]
    rho = r * np.outer(v1, v1.conj()) + (1.0 - r) * np.outer(v2, v2.conj())
    v_plus = (v_pert + v2) / np.sqrt(2.0)
    pert = (1.0 - eps_tom) * rho + eps_tom * np.outer(v_plus, v_plus.conj())
    _, vecs = eigh(pert)
    # eigenvalue ordering can cross V₁ at large eps; track by overlap instead
    k = int(np.argmax(np.abs(vecs.conj().T @ v2)))
    dev = phase_aligned_deviation(v2, vecs[:, k])
    return dev / (eps_tom / (1.0 - r))


def dk_experiment(
    r_grid: Iterable[float],
    eps_grid: Iterable[float],
    *,
    dim: int = 3,
    relative: bool = False,
) -> List[Dict[str, float]]:
    """Ratio table over the grid; points with ε_tom ≥ 1 − r are marked skipped.

    With ``relative`` each entry of ``eps_grid`` is a fraction of 1 − r.
    """
    if dim < 3:
        raise ConfigError("the perturbation direction needs dim >= 3")
    eps_values = [float(e) for e in eps_grid]
    rows: List[Dict[str, float]] = []
    skipped = 0
    for r in r_grid:
        r_f = float(r)
        for e in eps_values:
            eps_f = e * (1.0 - r_f) if relative else e
            if not (0.0 < eps_f < 1.0 - r_f):
                rows.append({"r": r_f, "eps_tom": eps_f, "ratio": float("nan"), "skipped": 1})
                skipped += 1
                continue
            rows.append({"r": r_f, "eps_tom": eps_f, "ratio": dk_point(r_f, eps_f, dim), "skipped": 0})
    if skipped:
        logger.info("perturbation grid: %d points outside eps_tom < 1 - r skipped", skipped)
    return rows


# ---------- sampling complexity ----------

@dataclass(frozen=True)
class ComplexityParams:
    n: int
    r: float
    gamma: float
    eps_st: float
    constants: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError(f"N must be positive, got {self.n}")
        if not 0.0 < self.eps_st < 1.0:
            raise ConfigError(f"eps_st must lie in (0, 1), got {self.eps_st}")
        if not 0.5 < self.r < 1.0:
            raise ConfigError(f"r must lie in (1/2, 1), got {self.r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        unknown = set(self.constants) - set(FORMULAS)
        if unknown:
            raise ConfigError(f"unknown formula constants: {sorted(unknown)}", code="UNKNOWN_KEY")

    def c(self, name: str) -> float:
        return float(self.constants.get(name, 1.0))


def noisy_gap(n: int, r: float, gamma: float) -> float:
    """Spectral gap of the rescaled stage-two signal against the noise floor."""
    floor = gamma / n ** 2
    return (1.0 - gamma) * (1.0 - r) / (1.0 - r + gamma * r - floor)


def complexity_row(p: ComplexityParams) -> Dict[str, float]:
    """Every closed form for one parameter point.

    The detection-error rate δ of the filter is taken equal to ε_st.

    ``m_qsp_noisy`` switches regime at γ = 0. Any noise floor forces the
    second filtering stage, whose cost 1/((1−γ)²(1−r)²) does not vanish as
    γ → 0⁺; with no floor there is no second stage and the noise-free cost
    applies. The ``stages`` column records which side of the switch a row
    is on.
    """
    n, r, g, eps = p.n, p.r, p.gamma, p.eps_st
    log_eps = np.log(eps)
    m_qsp = p.c("m_qsp") * log_eps ** 2 / ((1.0 - r) * eps ** 3)
    m_tom = p.c("m_tom") * 4.0 * n ** 2 * np.log(1.0 / (eps * (1.0 - r))) / (eps ** 2 * (1.0 - r) ** 2)
    m_tom_full = p.c("m_tom_full") * float(n) ** 6 / (eps ** 2 * (1.0 - r) ** 2)
    stages = 1 if g == 0.0 else 2
    stage_two = 1.0 if stages == 1 else 1.0 / ((1.0 - g) ** 2 * (1.0 - r) ** 2)
    m_qsp_noisy = p.c("m_qsp_noisy") * stage_two * log_eps ** 2 / ((1.0 - r) * eps ** 3)
    two_stage = p.c("two_stage") * (1.0 + 1.0 / ((1.0 - g) ** 2 * (1.0 - r) ** 2)) * log_eps ** 2 / eps
    spread = 1.0 - r + g * r - g / n ** 2
    alt = p.c("alt_scheme") * log_eps ** 4 * spread ** 2 / (
        eps ** 2 * ((2.0 * r - 1.0) * (1.0 - g) * (1.0 - r)) ** 2)
    ratio_free = m_tom / m_qsp
    ratio_noisy = m_tom_full / m_qsp_noisy
    row: Dict[str, float] = {
        "N": n,
        "r": r,
        "gamma": g,
        "eps_st": eps,
        "stages": stages,
        "m_qsp": float(m_qsp),
        "m_tom": float(m_tom),
        "ratio": float(ratio_free if stages == 1 else ratio_noisy),
        "m_tom_full": float(m_tom_full),
        "m_qsp_noisy": float(m_qsp_noisy),
        "two_stage": float(two_stage),
        "alt_scheme": float(alt),
        "gap": float(noisy_gap(n, r, g)),
        "ratio_noise_free": float(ratio_free),
        "ratio_noisy": float(ratio_noisy),
    }
    for name in FORMULAS:
        row[f"c_{name}"] = p.c(name)
    return row


COMPLEXITY_COLUMNS = (
    "N", "r", "gamma", "eps_st", "stages", "m_qsp", "m_tom", "ratio", "m_tom_full", "m_qsp_noisy",
    "two_stage", "alt_scheme", "gap", "ratio_noise_free", "ratio_noisy",
) + tuple(f"c_{name}" for name in FORMULAS)


@dataclass(frozen=True)
class ComplexityTable:
    rows: List[Dict[str, float]]
    metadata: Dict[str, object]


def complexity_tables(params: Iterable[ComplexityParams]) -> ComplexityTable:
    rows = [complexity_row(p) for p in params]
    constants = {name: sorted({row[f"c_{name}"] for row in rows}) for name in FORMULAS}
    return ComplexityTable(rows=rows, metadata={"log": LOG_CONVENTION, "delta": "eps_st",
                                                "constants": constants})


def complexity_grid(ns: Sequence[int], rs: Sequence[float], gammas: Sequence[float],
                    eps_values: Sequence[float], constants: Optional[Dict[str, float]] = None) -> ComplexityTable:
    consts = dict(constants or {})
    return complexity_tables(
        ComplexityParams(n=int(n), r=float(r), gamma=float(g), eps_st=float(e), constants=consts)
        for n, r, g, e in itertools.product(ns, rs, gammas, eps_values)
    )


# ---------- hardware resources ----------

@dataclass(frozen=True)
class ResourceReport:
    n: int
    eps_st: float
    snr: float
    c: float
    pixel_qubits: int
    register_qubits: int
    memory_qubits: int
    compression_gates: int
    controlled_ops: int
    processing_gates: int
    total_gates: int
    gate_error_threshold: float

    def to_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


def resource_counts(n: int, eps_st: float, *, snr: Optional[float] = None, c: float = 1.0) -> ResourceReport:
    """Qubit and two-qubit gate counts for an N×N array.

    The per-gate error threshold assumes one gate error spoils the whole run:
    1 / (total gates · SNR), with SNR defaulting to 1/ε_st.
    """
    if n < 2:
        raise ConfigError(f"N must be >= 2, got {n}")
    if not 0.0 < eps_st < 1.0:
        raise ConfigError(f"eps_st must lie in (0, 1), got {eps_st}")
    snr_v = float(snr) if snr is not None else 1.0 / eps_st
    register = int(np.ceil(2.0 * np.log2(n)))
    compression = int(np.ceil(n ** 2 * np.log2(n)))
    controlled = int(np.ceil(c * np.log(1.0 / eps_st) ** 2 / eps_st))
    processing = controlled * register
    total = compression + processing
    return ResourceReport(
        n=n,
        eps_st=eps_st,
        snr=snr_v,
        c=c,
        pixel_qubits=n * n,
        register_qubits=register,
        memory_qubits=5 * register + 1,
        compression_gates=compression,
        controlled_ops=controlled,
        processing_gates=processing,
        total_gates=total,
        gate_error_threshold=1.0 / (total * snr_v),
    )
