"""Measurement procedure on sorted photons.

Sorted copies give the eigenvalue r of ρ. Given the relative intensity b,
the two-source model fixes the overlap h = ⟨ψ₁|ψ₂⟩ and real coefficients
relating the source states ψ_k to the eigenvectors V_k, so any observable
on ψ_k follows from three overlaps on the eigenvectors:

    ⟨ψ_k|O|ψ_k⟩ = c₁ₖ²·⟨V₁|O|V₁⟩ + c₂ₖ²·⟨V₂|O|V₂⟩ + 2c₁ₖc₂ₖ·Re⟨V₁|O|V₂⟩.

The off-diagonal term for a general O is obtained from SWAP-test branch
statistics relative to a reference observable whose overlaps are measured
once, by block encoding.

Every estimator runs either analytically (exact branch means) or with a
finite number of shots drawn from a caller-supplied generator.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, IllConditionedError, ModelError
from .kvtext import format_kv, parse_kv
from .numkit import (
    DensityOperator,
    PureState,
    eigh,
    is_hermitian,
    kron,
    spectral_norm,
    swap_operator,
)

logger = logging.getLogger(__name__)

MODEL_TOL = 1e-10
KAPPA_REF_FLOOR = 1e-3
POSTSELECTION_FLOOR = 1e-3
B_SCAN_POINTS = 1000

StateLike = Union[PureState, DensityOperator, np.ndarray]


def _density_matrix(s: StateLike) -> np.ndarray:
    """Density matrix of a state; square 2-D arrays are taken as density matrices."""
    if isinstance(s, DensityOperator):
        return s.matrix
    if isinstance(s, PureState):
        vec = s.amplitudes
    else:
        arr = np.asarray(s, dtype=complex)
        if arr.ndim == 2 and arr.shape[0] == arr.shape[1] and arr.shape[0] > 1:
            return arr
        if arr.ndim == 2 and 1 not in arr.shape:
            raise ConfigError(f"state of shape {arr.shape} is neither a vector nor a square matrix",
                              code="DIMENSION_MISMATCH")
        vec = arr.reshape(-1)
    return np.outer(vec, vec.conj())


def estimate_r(labels: Sequence[Optional[str]]) -> Tuple[float, float]:
    """Fraction of V1 labels and its binomial standard error."""
    done = [lab for lab in labels if lab is not None]
    if len(done) < 2:
        raise ConfigError("need at least two filter labels to estimate r", code="EMPTY_INPUT")
    m = len(done)
    r = sum(1 for lab in done if lab == "V1") / m
    return r, math.sqrt(r * (1.0 - r) / m)


def estimate_r_swap(p0_hat: float, shots: int) -> Tuple[float, float]:
    """Invert P(0) = 1 - r + r² taking the root r ≥ 1/2."""
    p = min(1.0, max(0.75, float(p0_hat)))
    root = math.sqrt(4.0 * p - 3.0)
    r = 0.5 * (1.0 + root)
    sp = math.sqrt(p * (1.0 - p) / shots) if shots > 0 else 0.0
    return r, (sp / root if root > 0.0 else float("inf"))


@dataclass(frozen=True, eq=False)
class Observable:
    """Hermitian observable scaled to spectral norm ≤ 1.

    ``scale`` multiplies expectation values of ``matrix`` back into the units
    of the observable the caller started from.
    """

    name: str
    matrix: np.ndarray
    scale: float = 1.0

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=complex)
        if not is_hermitian(m, 1e-10 * max(1.0, float(np.max(np.abs(m), initial=0.0)))):
            raise ModelError(f"observable {self.name!r} is not Hermitian", code="NOT_HERMITIAN")
        object.__setattr__(self, "matrix", 0.5 * (m + m.conj().T))

    @classmethod
    def normalized(cls, name: str, matrix: np.ndarray) -> "Observable":
        m = np.asarray(matrix, dtype=complex)
        norm = spectral_norm(m)
        if norm <= 1.0:
            return cls(name, m, 1.0)
        return cls(name, m / norm, norm)

    @property
    def norm_bound(self) -> float:
        return spectral_norm(self.matrix)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])


def load_observable(path: Union[str, Path], dim: int, name: str = "O_ref") -> Observable:
    """Observable from a ``row,col,re,im`` entry list; unlisted entries are zero.

    Both (i, j) and (j, i) must be listed for off-diagonal entries. The
    matrix is rescaled to spectral norm ≤ 1 like :meth:`Observable.normalized`.
    """
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"observable file {p} not found", code="MISSING_FILE")
    try:
        table = np.loadtxt(p, delimiter=",", comments="#", ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"{p}: {exc}", code="BAD_VALUE") from exc
    if table.size == 0 or table.shape[1] != 4:
        raise ConfigError(f"{p}: expected rows of row,col,re,im", code="BAD_VALUE")
    m = np.zeros((dim, dim), dtype=complex)
    for i, j, re, im in table:
        ii, jj = int(i), int(j)
        if ii != i or jj != j or not (0 <= ii < dim and 0 <= jj < dim):
            raise ConfigError(f"{p}: entry ({i}, {j}) outside a {dim}x{dim} matrix",
                              code="DIMENSION_MISMATCH")
        m[ii, jj] = complex(re, im)
    return Observable.normalized(name, m)


@dataclass(frozen=True, eq=False)
class EigenModel:
    r: float
    b: float
    h: float
    a: float
    c_tilde: np.ndarray
    c: np.ndarray
    norms: np.ndarray

    def rho_y(self) -> np.ndarray:
        """ρ in the orthonormal basis (ψ₁, (ψ₂ - hψ₁)/√a)."""
        b, h, a = self.b, self.h, self.a
        off = (1.0 - b) * h * math.sqrt(a)
        return np.array([[b + (1.0 - b) * h * h, off], [off, (1.0 - b) * a]])

    def eigenvectors(self, psi1: StateLike, psi2: StateLike) -> Tuple[np.ndarray, np.ndarray]:
        p1 = psi1.amplitudes if isinstance(psi1, PureState) else np.asarray(psi1, dtype=complex)
        p2 = psi2.amplitudes if isinstance(psi2, PureState) else np.asarray(psi2, dtype=complex)
        ct = self.c_tilde
        return ct[0, 0] * p1 + ct[1, 0] * p2, ct[0, 1] * p1 + ct[1, 1] * p2

    def to_kv(self) -> str:
        return format_kv({"r": self.r, "b": self.b, "h": self.h})

    @classmethod
    def from_kv(cls, text: str) -> "EigenModel":
        values = parse_kv(text, source="<model>")
        unknown = set(values) - {"r", "b", "h"}
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}", code="UNKNOWN_KEY")
        model = solve_model(float(values["r"]), float(values["b"]))
        if "h" in values and abs(model.h - float(values["h"])) > 1e-8:
            raise ModelError(f"stored h={values['h']} disagrees with (r, b) -> h={model.h:.10f}")
        return model


def _eigen_column(lam: float, b: float, h: float) -> Tuple[float, float, float]:
    """Normalized (α, β) with V = αψ₁ + βψ₂, and the normalization N."""
    cand1 = (lam - (1.0 - b), (1.0 - b) * h)
    cand2 = (b * h, lam - b)
    alpha, beta = max(cand1, cand2, key=lambda v: math.hypot(*v))
    n = 1.0 / math.sqrt(alpha * alpha + beta * beta + 2.0 * alpha * beta * h)
    alpha, beta = n * alpha, n * beta
    if (alpha if abs(alpha) >= abs(beta) else beta) < 0.0:
        alpha, beta = -alpha, -beta
    return alpha, beta, n


def solve_model(r: float, b: float) -> EigenModel:
    """Two-source model from the top eigenvalue r and the intensity ratio b."""
    if not 0.0 < b < 1.0:
        raise ModelError(f"b={b} is outside (0, 1); the sources cannot be separated",
                         code="FORBIDDEN_B")
    if abs(r - 0.5) < 1e-12:
        raise ModelError("r ≈ 1/2 unsupported", code="DEGENERATE_R")
    if not 0.5 < r <= 1.0:
        raise ModelError(f"r={r} must be the top eigenvalue in (1/2, 1]", code="DEGENERATE_R",
                         hint="swap the labels so that V1 is the more frequent one")
    d = r * (1.0 - r)
    h2 = 1.0 - d / (b * (1.0 - b))
    if -MODEL_TOL < h2 < 0.0:
        h2 = 0.0
    if not 0.0 <= h2 < 1.0:
        raise ModelError(
            f"(r={r}, b={b}) gives h^2={h2:.6g} outside [0, 1)",
            hint="b must lie in [1-r, r] for an eigenvalue r",
        )
    h = math.sqrt(h2)
    cols = [_eigen_column(lam, b, h) for lam in (r, 1.0 - r)]
    c_tilde = np.array([[cols[0][0], cols[1][0]], [cols[0][1], cols[1][1]]])
    c = np.linalg.inv(c_tilde)
    if float(np.max(np.abs(c_tilde @ c - np.eye(2)))) > MODEL_TOL:
        raise ModelError("eigenvector coefficients are singular", code="INCONSISTENT_MODEL")
    norms = np.array([col[2] for col in cols])
    return EigenModel(r=r, b=b, h=h, a=1.0 - h2, c_tilde=c_tilde, c=c, norms=norms)


@dataclass
class OverlapSet:
    """⟨V₁|O|V₁⟩, ⟨V₂|O|V₂⟩ and ⟨V₁|O|V₂⟩ plus where each one came from."""

    v11: float
    v22: float
    v12: complex
    sources: Dict[str, str] = field(default_factory=dict)
    extras: Dict[str, float] = field(default_factory=dict)

    def cauchy_schwarz_gap(self) -> float:
        """v11·v22 - |v12|², nonnegative for positive semidefinite O."""
        return self.v11 * self.v22 - abs(self.v12) ** 2

    def to_kv(self) -> str:
        values: Dict[str, object] = {
            "v11": float(self.v11),
            "v22": float(self.v22),
            "v12_re": float(self.v12.real),
            "v12_im": float(self.v12.imag),
        }
        for key, src in self.sources.items():
            values[f"source_{key}"] = src
        return format_kv(values)

    @classmethod
    def from_kv(cls, text: str) -> "OverlapSet":
        values = parse_kv(text, source="<overlaps>")
        try:
            out = cls(
                v11=float(values.pop("v11")),
                v22=float(values.pop("v22")),
                v12=complex(float(values.pop("v12_re")), float(values.pop("v12_im"))),
            )
        except KeyError as exc:
            raise ConfigError(f"overlap key {exc.args[0]!r} missing", code="MISSING_KEY") from exc
        for key, src in values.items():
            if not key.startswith("source_"):
                raise ConfigError(f"unknown overlap key {key!r}", code="UNKNOWN_KEY")
            out.sources[key[len("source_"):]] = src
        return out


def exact_overlaps(v1: np.ndarray, v2: np.ndarray, o: Observable) -> OverlapSet:
    m = o.matrix
    return OverlapSet(
        v11=float(np.vdot(v1, m @ v1).real),
        v22=float(np.vdot(v2, m @ v2).real),
        v12=complex(np.vdot(v1, m @ v2)),
        sources={"v11": "exact", "v22": "exact", "v12": "exact"},
    )


def reconstruct_observable(model: EigenModel, overlaps: OverlapSet, which: int) -> float:
    """⟨ψ_which|O|ψ_which⟩ for which ∈ {1, 2}."""
    if which not in (1, 2):
        raise ConfigError(f"source index must be 1 or 2, got {which}")
    c1, c2 = model.c[0, which - 1], model.c[1, which - 1]
    return float(c1 * c1 * overlaps.v11 + c2 * c2 * overlaps.v22
                 + 2.0 * c1 * c2 * overlaps.v12.real)


def cross_term(model: EigenModel, overlaps: OverlapSet) -> complex:
    """⟨ψ₁|O|ψ₂⟩ from the eigenvector overlaps."""
    c = model.c
    return complex(
        c[0, 0] * c[0, 1] * overlaps.v11
        + c[1, 0] * c[1, 1] * overlaps.v22
        + c[0, 0] * c[1, 1] * overlaps.v12
        + c[1, 0] * c[0, 1] * np.conj(overlaps.v12)
    )


@dataclass
class SwapTestResult:
    omega: complex
    p0_exact: float
    p0_hat: float
    shots: int
    counts: Tuple[int, int]
    _a: np.ndarray = field(repr=False)
    _b: np.ndarray = field(repr=False)

    def branch_state(self, outcome: int) -> np.ndarray:
        """Normalized two-register state left behind by ancilla ``outcome``."""
        d = self._a.shape[0]
        sign = 1.0 if outcome == 0 else -1.0
        k = 0.5 * (np.eye(d * d, dtype=complex) + sign * self.omega * swap_operator(d))
        joint = kron(self._a, self._b)
        out = k @ joint @ k.conj().T
        p = float(np.trace(out).real)
        if p <= 0.0:
            raise ModelError(f"swap-test branch {outcome} has zero probability")
        return out / p


def swap_test(
    a: StateLike,
    b: StateLike,
    omega: complex = 1.0,
    shots: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> SwapTestResult:
    """Ancilla-controlled ω·SWAP test; ``shots=0`` means exact probabilities only."""
    am, bm = _density_matrix(a), _density_matrix(b)
    if am.shape != bm.shape:
        raise ConfigError(f"swap test on registers of shapes {am.shape} and {bm.shape}",
                          code="DIMENSION_MISMATCH")
    omega = complex(omega)
    if abs(abs(omega) - 1.0) > 1e-12:
        raise ConfigError(f"omega must be unimodular, got {omega}")
    p0 = 0.5 + 0.5 * omega.real * float(np.trace(am @ bm).real)
    p0 = min(1.0, max(0.0, p0))
    if shots > 0:
        if rng is None:
            raise ConfigError("shot-mode swap test needs a generator")
        zeros = int(rng.binomial(shots, p0))
        return SwapTestResult(omega, p0, zeros / shots, shots, (zeros, shots - zeros), am, bm)
    return SwapTestResult(omega, p0, p0, 0, (0, 0), am, bm)


def _measure_in_basis(
    sigma: np.ndarray,
    values: np.ndarray,
    basis: np.ndarray,
    shots: int,
    rng: Optional[np.random.Generator],
) -> Tuple[float, float]:
    probs = np.einsum("ij,ik,kj->j", basis.conj(), sigma, basis).real
    probs = np.clip(probs, 0.0, None)
    probs = probs / probs.sum()
    if shots <= 0:
        return float(probs @ values), 0.0
    if rng is None:
        raise ConfigError("shot-mode measurement needs a generator")
    counts = rng.multinomial(shots, probs)
    mean = float(counts @ values) / shots
    var = float(counts @ (values - mean) ** 2) / max(1, shots - 1)
    return mean, math.sqrt(var / shots)


def measure_expectation(
    state: StateLike,
    o: Observable,
    shots: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """⟨O⟩ from projective measurements in O's eigenbasis: (mean, stderr)."""
    w, v = eigh(o.matrix)
    return _measure_in_basis(_density_matrix(state), w, v, shots, rng)


def _measure_pair(
    sigma: np.ndarray,
    a: Observable,
    b: Observable,
    shots: int,
    rng: Optional[np.random.Generator],
) -> Tuple[float, float]:
    wa, va = eigh(a.matrix)
    wb, vb = eigh(b.matrix)
    return _measure_in_basis(sigma, np.kron(wa, wb), np.kron(va, vb), shots, rng)


@dataclass(frozen=True, eq=False)
class EigenSupply:
    """Access to |V₁⟩, |V₂⟩ copies and to ρ = r|V₁⟩⟨V₁| + (1-r)|V₂⟩⟨V₂|.

    The two vectors share one phase frame; every off-diagonal estimate is
    expressed in it.
    """

    v1: np.ndarray
    v2: np.ndarray
    r: float

    @classmethod
    def from_model(cls, model: EigenModel, psi1: StateLike, psi2: StateLike) -> "EigenSupply":
        v1, v2 = model.eigenvectors(psi1, psi2)
        return cls(v1, v2, model.r)

    @classmethod
    def from_density(cls, rho: DensityOperator, gamma: float = 0.0) -> "EigenSupply":
        """Top two eigenvectors of a (possibly noise-floored) ρ.

        Their phases are whatever the eigensolver returns, which is harmless
        because the estimators only see |V₁⟩⟨V₁|, |V₂⟩⟨V₂| and ρ.
        """
        w, v = rho.spectrum
        if rho.dim < 2:
            raise ModelError("need at least two dimensions for two eigenvectors")
        floor = gamma / rho.dim
        r = (float(w[-1]) - floor) / (1.0 - gamma)
        r = min(1.0, max(0.5, r))
        return cls(v[:, -1].astype(complex), v[:, -2].astype(complex), r)

    def rho(self) -> np.ndarray:
        return self.r * np.outer(self.v1, self.v1.conj()) + (1.0 - self.r) * np.outer(self.v2, self.v2.conj())


def phase_from_truth(supply: EigenSupply, o_ref: Observable) -> complex:
    """Validation-mode prior: the phase of the exact ⟨V₁|O_ref|V₂⟩."""
    k = complex(np.vdot(supply.v1, o_ref.matrix @ supply.v2))
    return k / abs(k) if abs(k) > 0.0 else 1.0 + 0.0j


def validation_reference(supply: EigenSupply) -> Observable:
    """Reference observable with ⟨V₁|O|V₁⟩ = 3/4 and ⟨V₁|O|V₂⟩ = 1/4.

    Built from the supply's own vectors, so it is only meant for simulated
    runs where the eigenvectors are known. Its spectrum lies in [1/4, 1],
    which keeps both post-selection and the κ_ref floor well clear.
    """
    v1, v2 = supply.v1, supply.v2
    dim = v1.shape[0]
    m = 0.5 * np.eye(dim, dtype=complex) + 0.25 * np.outer(v1, v1.conj())
    m += 0.25 * (np.outer(v1, v2.conj()) + np.outer(v2, v1.conj()))
    return Observable("O_ref", m)


def phase_from_signs(sign_re: int, sign_im: int) -> complex:
    """Prior phase from the signs of Re and Im; exact when one of them is zero."""
    z = complex(float(np.sign(sign_re)), float(np.sign(sign_im)))
    if z == 0:
        raise ConfigError("at least one sign must be nonzero", code="BAD_VALUE")
    return z / abs(z)


Prior = Union[complex, float, Tuple[int, int]]


def resolve_prior(prior: Prior) -> complex:
    """Unit phase for κ_ref from a (sign_re, sign_im) pair or a complex number."""
    if isinstance(prior, tuple):
        if len(prior) != 2:
            raise ConfigError(f"sign prior needs two entries, got {len(prior)}")
        return phase_from_signs(int(prior[0]), int(prior[1]))
    z = complex(prior)
    if not math.isfinite(abs(z)) or abs(z) == 0.0:
        raise ConfigError(f"phase prior {prior!r} has no direction")
    return z / abs(z)


@dataclass
class BlockEncodingResult:
    kappa: complex
    magnitude: float
    success_expected: float
    success_rate: float
    attempts: int
    a11: float
    norm2: float
    r_herald: float
    # overlap of |V_M⟩ with the antisymmetric ω = -1 source; zero for any O_ref
    antisymmetric_overlap: float = 0.0


def block_encode_offdiag(
    supply: EigenSupply,
    o_ref: Observable,
    prior: Prior,
    *,
    shots: int = 0,
    rng: Optional[np.random.Generator] = None,
    floor: float = POSTSELECTION_FLOOR,
) -> BlockEncodingResult:
    """⟨V₁|O_ref|V₂⟩ from the overlap of O_ref|V₁⟩⊗O_ref|V₁⟩ with |W₊₁⟩.

    The post-selected state |V_M⟩ succeeds with probability ‖O_ref V₁‖⁴. The
    |W₊₁⟩ source is the ω = 1 SWAP-test branch on (|V₁⟩, ρ), which still
    contains |V₁V₁⟩ with weight 2r/(1+r). The r here is read off the herald
    rate (1+r)/2 of that same test, and the |V₁V₁⟩ part is subtracted using
    the prefactors measured on |V₁⟩.

    Only |⟨V₁|O_ref|V₂⟩| is measurable this way: |V_M⟩ is exchange
    symmetric, so its overlap with the antisymmetric |W₋₁⟩ branch vanishes,
    and every input is unchanged when V₂ picks up a phase. ``prior`` fixes
    the argument, either as a (sign of Re, sign of Im) pair or as a complex
    number whose phase is used.
    """
    phase = resolve_prior(prior)
    if o_ref.norm_bound > 1.0 + 1e-12:
        raise ConfigError(f"O_ref must have spectral norm <= 1, got {o_ref.norm_bound:.4g}")
    if shots > 0 and rng is None:
        raise ConfigError("shot-mode block encoding needs a generator")
    o2 = Observable("O_ref^2", o_ref.matrix @ o_ref.matrix)
    a11, _ = measure_expectation(supply.v1, o_ref, shots, rng)
    norm2, _ = measure_expectation(supply.v1, o2, shots, rng)
    success = norm2 * norm2
    if success < floor:
        raise IllConditionedError(
            f"post-selection succeeds with probability {success:.2e}",
            bound=1.0 / max(success, 1e-300),
            code="POSTSELECTION_FLOOR",
            hint="pick a reference observable with larger weight on V1",
        )
    if abs(a11) < floor:
        raise IllConditionedError(
            f"|<V1|O_ref|V1>| = {abs(a11):.2e} is too small to normalize the overlap",
            bound=1.0 / max(abs(a11), 1e-300),
            code="KAPPA_REF_FLOOR",
        )
    attempts = shots
    rate = success
    if shots > 0:
        attempts = shots + int(rng.negative_binomial(shots, min(1.0, success)))
        rate = shots / attempts
    ov = o_ref.matrix @ supply.v1
    vm = np.kron(ov, ov) / norm2
    herald = swap_test(supply.v1, supply.rho(), 1.0, shots, rng)
    r_herald = min(1.0, max(0.0, 2.0 * herald.p0_hat - 1.0))
    if r_herald > 1.0 - 1e-12:
        raise ModelError("the swap-test source carries no V2 weight (r = 1)", code="DEGENERATE_R")
    w_source = herald.branch_state(0)
    m_exact = float(np.vdot(vm, w_source @ vm).real)
    anti = float(np.vdot(vm, herald.branch_state(1) @ vm).real)
    if shots > 0:
        p0 = 0.5 + 0.5 * min(1.0, max(0.0, m_exact))
        m = 2.0 * int(rng.binomial(shots, p0)) / shots - 1.0
    else:
        m = m_exact
    r_mix = 2.0 * r_herald / (1.0 + r_herald)
    direct = (a11 * a11 / norm2) ** 2
    w_overlap2 = max(0.0, (m - r_mix * direct) / (1.0 - r_mix))
    magnitude = math.sqrt(w_overlap2) * norm2 / (math.sqrt(2.0) * abs(a11))
    return BlockEncodingResult(
        kappa=magnitude * phase,
        magnitude=magnitude,
        success_expected=success,
        success_rate=rate,
        attempts=attempts,
        a11=a11,
        norm2=norm2,
        r_herald=r_herald,
        antisymmetric_overlap=max(0.0, anti),
    )


def reference_protocol(
    supply: EigenSupply,
    model: EigenModel,
    o_ref: Observable,
    o: Observable,
    ref: OverlapSet,
    *,
    shots: int = 0,
    rng: Optional[np.random.Generator] = None,
    kappa_floor: float = KAPPA_REF_FLOOR,
) -> OverlapSet:
    """Overlaps of ``o`` on the eigenvectors without sampling |V₂⟩ directly.

    ``ref`` holds the known overlaps of ``o_ref``. The ω = i SWAP test on
    (|V₁⟩, ρ) gives 𝔥_i and the symmetric part T; the antisymmetric branch of
    the ω = 1 test on (ρ, ρ) gives 𝔥₁.
    """
    kappa_ref = complex(ref.v12)
    if abs(kappa_ref) < kappa_floor:
        raise IllConditionedError(
            f"|kappa_ref| = {abs(kappa_ref):.2e} below floor {kappa_floor:.1e}",
            bound=1.0 / (2.0 * max(abs(kappa_ref), 1e-300)),
            code="KAPPA_REF_FLOOR",
            hint="choose a reference observable with a larger off-diagonal element",
        )
    if abs(ref.v11) < kappa_floor:
        raise IllConditionedError(
            f"|<V1|O_ref|V1>| = {abs(ref.v11):.2e} below floor {kappa_floor:.1e}",
            bound=1.0 / max(abs(ref.v11), 1e-300),
            code="KAPPA_REF_FLOOR",
        )
    r = model.r
    rho = supply.rho()
    b11, b11_err = measure_expectation(supply.v1, o, shots, rng)
    q11 = ref.v11 * b11

    swi = swap_test(supply.v1, rho, 1j, shots, rng)
    n0, n1 = swi.counts if shots > 0 else (0, 0)
    e0, _ = _measure_pair(swi.branch_state(0), o_ref, o, n0, rng)
    e1, _ = _measure_pair(swi.branch_state(1), o_ref, o, n1, rng)
    h_i = (e0 - e1) / (1.0 - r)
    t = (0.5 * (e0 + e1) - r * q11) / (1.0 - r)
    b22 = (2.0 * t - ref.v22 * b11) / ref.v11

    sw1 = swap_test(rho, rho, 1.0, shots, rng)
    m1 = sw1.counts[1] if shots > 0 else 0
    e_anti, _ = _measure_pair(sw1.branch_state(1), o_ref, o, m1, rng)
    h_1 = 2.0 * (t - e_anti)

    kappa = (h_1 + 1j * h_i) / (2.0 * np.conj(kappa_ref))
    logger.debug("reference protocol: h1=%.4g hi=%.4g T=%.4g", h_1, h_i, t)
    return OverlapSet(
        v11=b11,
        v22=float(b22),
        v12=complex(kappa),
        sources={"v11": "direct", "v22": "swap_i", "v12": "swap_1+swap_i"},
        extras={"h_1": float(h_1), "h_i": float(h_i), "T": float(t), "v11_stderr": b11_err},
    )


@dataclass
class BEstimate:
    roots: List[Tuple[float, float]]
    ambiguous: bool
    conditioning: List[float]
    warnings: List[str] = field(default_factory=list)


def estimate_b(
    r: float,
    overlaps: OverlapSet,
    f: Callable[[float], float],
    *,
    points: int = B_SCAN_POINTS,
    tol: float = 1e-10,
) -> BEstimate:
    """Solve ⟨ψ₂|O_F|ψ₂⟩ = F(⟨ψ₁|O_F|ψ₁⟩) for b.

    For each candidate b the model (and so both source expectations) follows
    from r; sign changes on a dense scan of the admissible b range are refined
    by bisection and every root is returned with its residual.
    """
    lo, hi = 1.0 - r, r
    if not lo < hi:
        raise ModelError("r ≈ 1/2 unsupported", code="DEGENERATE_R")

    def g(b: float) -> float:
        model = solve_model(r, b)
        m1 = reconstruct_observable(model, overlaps, 1)
        m2 = reconstruct_observable(model, overlaps, 2)
        return m2 - f(m1)

    pad = 1e-9 * (hi - lo)
    grid = np.linspace(lo + pad, hi - pad, points)
    vals = np.array([g(float(b)) for b in grid])
    out = BEstimate(roots=[], ambiguous=False, conditioning=[])
    if float(np.max(np.abs(vals))) < tol:
        out.ambiguous = True
        out.warnings.append("F leaves b unidentifiable: the residual vanishes on the whole range")
        return out
    for i in range(points - 1):
        ga, gb = vals[i], vals[i + 1]
        if ga == 0.0:
            root = float(grid[i])
        elif ga * gb < 0.0:
            root = float(brentq(g, grid[i], grid[i + 1], xtol=1e-14))
        else:
            continue
        model = solve_model(r, root)
        out.roots.append((root, abs(g(root))))
        out.conditioning.append(abs(cross_term(model, overlaps).real))
    if len(out.roots) != 1:
        out.ambiguous = True
        out.warnings.append(f"{len(out.roots)} candidate roots for b")
    for b, _ in out.roots:
        slope = (g(min(hi - pad, b + 1e-6)) - g(max(lo + pad, b - 1e-6))) / 2e-6
        if abs(slope) < 1e-8:
            out.ambiguous = True
            out.warnings.append(f"root b={b:.6f} is not isolated (flat residual)")
    return out


@dataclass
class EstimationReport:
    r_hat: float
    r_stderr: float
    model: EigenModel
    ref: OverlapSet
    overlaps: OverlapSet
    psi1: float
    psi2: float
    shots: int
    mode: str
    seed: Optional[int]
    block: Optional[BlockEncodingResult] = None
    warnings: List[str] = field(default_factory=list)

    def rows(self) -> List[Dict[str, object]]:
        """CSV rows: quantity, estimate, stderr, shots, mode, seed."""
        nan = float("nan")
        items = [
            ("r", self.r_hat, self.r_stderr),
            ("h", self.model.h, nan),
            ("v11", self.overlaps.v11, self.overlaps.extras.get("v11_stderr", nan)),
            ("v22", self.overlaps.v22, nan),
            ("v12_re", self.overlaps.v12.real, nan),
            ("v12_im", self.overlaps.v12.imag, nan),
            ("kappa_ref_abs", abs(self.ref.v12), nan),
            ("psi1_expectation", self.psi1, nan),
            ("psi2_expectation", self.psi2, nan),
        ]
        return [
            {"quantity": q, "estimate": float(v), "stderr": float(e), "shots": self.shots,
             "mode": self.mode, "seed": self.seed}
            for q, v, e in items
        ]


def measurement_pipeline(
    supply: EigenSupply,
    b: float,
    o: Observable,
    o_ref: Observable,
    prior: Prior,
    *,
    labels: Optional[Sequence[Optional[str]]] = None,
    r_estimate: Optional[Tuple[float, float]] = None,
    shots: int = 0,
    rng: Optional[np.random.Generator] = None,
    seed: Optional[int] = None,
) -> EstimationReport:
    """Estimate r, solve the model, measure the reference, then reconstruct O.

    ``labels`` come from the sorting filter. Without them ``r_estimate`` (for
    instance from a SWAP test) is used, and failing that the supply's exact r.
    """
    warnings: List[str] = []
    if labels is not None:
        r_hat, r_err = estimate_r(labels)
        if r_hat < 0.5:
            warnings.append("V1 was the rarer label; labels swapped")
            r_hat = 1.0 - r_hat
            supply = EigenSupply(supply.v2, supply.v1, 1.0 - supply.r)
    elif r_estimate is not None:
        r_hat, r_err = r_estimate
    else:
        r_hat, r_err = supply.r, 0.0
    model = solve_model(r_hat, b)
    a11, _ = measure_expectation(supply.v1, o_ref, shots, rng)
    a22, _ = measure_expectation(supply.v2, o_ref, shots, rng)
    block = block_encode_offdiag(supply, o_ref, prior, shots=shots, rng=rng)
    ref = OverlapSet(a11, a22, block.kappa,
                     sources={"v11": "direct", "v22": "direct_v2", "v12": "block_encoding"})
    overlaps = reference_protocol(supply, model, o_ref, o, ref, shots=shots, rng=rng)
    psi1 = reconstruct_observable(model, overlaps, 1) * o.scale
    psi2 = reconstruct_observable(model, overlaps, 2) * o.scale
    logger.info("pipeline: r=%.6f h=%.6f <psi2|O|psi2>=%.6g", r_hat, model.h, psi2)
    return EstimationReport(
        r_hat=r_hat, r_stderr=r_err, model=model, ref=ref, overlaps=overlaps,
        psi1=psi1, psi2=psi2, shots=shots, mode="shot" if shots > 0 else "analytic",
        seed=seed, block=block, warnings=warnings,
    )
