"""Dense complex linear algebra shared by every simulation module.

Operators are plain ``numpy`` complex arrays. Two small value types wrap them
where invariants matter: ``PureState`` (a normalized amplitude vector plus the
norm lost before normalization) and ``DensityOperator`` (trace one, positive
semidefinite). Both are immutable after construction, so the functions here
are safe to call from any number of workers at once.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np

from .errors import DensityError, DimensionError, HermiticityError

logger = logging.getLogger(__name__)

# Largest operator (entry count) kron is allowed to build.
MAX_ENTRIES = 2**20
HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-10
NEGATIVE_EIG_TOL = 1e-10
NORM_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class PureState:
    """Normalized amplitude vector.

    ``norm_deficit`` records ``1 - sum(|psi|^2)`` of the vector before it was
    normalized (the lost detection efficiency for pixelated states).
    """

    amplitudes: np.ndarray
    norm_deficit: float = 0.0

    def __post_init__(self) -> None:
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        norm2 = float(np.vdot(amps, amps).real)
        if abs(norm2 - 1.0) > NORM_TOL:
            raise DensityError(
                f"state norm {norm2:.3e} is not 1",
                code="NOT_NORMALIZED",
                hint="build states with PureState.from_vector",
            )
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "PureState":
        vec = np.asarray(vec, dtype=complex).reshape(-1)
        norm2 = float(np.vdot(vec, vec).real)
        if norm2 <= 0.0:
            raise DensityError("cannot normalize the zero vector", code="NOT_NORMALIZED")
        return cls(vec / np.sqrt(norm2), norm_deficit=1.0 - norm2)

    @property
    def dim(self) -> int:
        return int(self.amplitudes.shape[0])

    def projector(self) -> np.ndarray:
        return np.outer(self.amplitudes, self.amplitudes.conj())


@dataclass(frozen=True, eq=False)
class DensityOperator:
    """Trace-one positive semidefinite operator on a ``dim``-dimensional space.

    Construction symmetrizes the matrix and validates the trace and the
    smallest eigenvalue. Use :func:`make_density` when the input may carry
    small negative eigenvalues from roundoff that should be clamped.
    """

    matrix: np.ndarray
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"density operator must be square, got shape {m.shape}")
        m = 0.5 * (m + m.conj().T)
        tr = float(np.trace(m).real)
        if abs(tr - 1.0) > TRACE_TOL:
            raise DensityError(f"trace {tr:.12f} differs from 1")
        w_min = float(np.linalg.eigvalsh(m)[0])
        if w_min < -NEGATIVE_EIG_TOL:
            raise DensityError(f"minimum eigenvalue {w_min:.3e} is negative")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    @cached_property
    def spectrum(self) -> Tuple[np.ndarray, np.ndarray]:
        """Eigenvalues ascending with matching eigenvector columns."""
        return eigh(self.matrix)

    def expectation(self, observable: np.ndarray) -> float:
        return float(np.trace(self.matrix @ observable).real)


Operand = Union[np.ndarray, DensityOperator]


def _as_matrix(a: Operand) -> np.ndarray:
    if isinstance(a, DensityOperator):
        return a.matrix
    return np.asarray(a, dtype=complex)


def make_density(matrix: np.ndarray, *, negative_tol: float = NEGATIVE_EIG_TOL) -> DensityOperator:
    """Symmetrize ``matrix``, clamp small negative eigenvalues and renormalize.

    Eigenvalues in ``[-negative_tol, 0)`` are set to zero and the spectrum is
    rescaled to unit trace; anything more negative is an error.
    """
    m = np.asarray(matrix, dtype=complex)
    m = 0.5 * (m + m.conj().T)
    w, v = np.linalg.eigh(m)
    warnings: Tuple[str, ...] = ()
    if w[0] < -negative_tol:
        raise DensityError(
            f"minimum eigenvalue {w[0]:.3e} below tolerance -{negative_tol:.1e}",
            hint="the channel lost positivity; check the step size",
        )
    if w[0] < 0.0:
        warnings = (f"clamped eigenvalues down to {w[0]:.1e}",)
        w = np.clip(w, 0.0, None)
        m = (v * w) @ v.conj().T
    tr = float(np.trace(m).real)
    if tr <= 0.0:
        raise DensityError("operator has zero trace")
    return DensityOperator(m / tr, warnings=warnings)


def pure_density(state: Union[PureState, np.ndarray]) -> DensityOperator:
    vec = state.amplitudes if isinstance(state, PureState) else PureState.from_vector(state).amplitudes
    return DensityOperator(np.outer(vec, vec.conj()))


def kron(a: Operand, b: Operand, *, max_entries: int = MAX_ENTRIES) -> np.ndarray:
    """Tensor product ``a ⊗ b`` refusing results larger than ``max_entries``."""
    am, bm = _as_matrix(a), _as_matrix(b)
    am2 = am if am.ndim == 2 else am.reshape(-1, 1)
    bm2 = bm if bm.ndim == 2 else bm.reshape(-1, 1)
    entries = am2.size * bm2.size
    if entries > max_entries:
        raise DimensionError(
            f"kron result would hold {entries} entries (max {max_entries})",
            code="RESOURCE_EXHAUSTED",
        )
    out = np.kron(am, bm)
    return out


def partial_trace(joint: Operand, dims: Tuple[int, int], keep: int) -> np.ndarray:
    """Trace out one factor of a bipartite operator.

    ``keep=0`` keeps the first factor (traces the second), ``keep=1`` keeps the
    second factor.
    """
    m = _as_matrix(joint)
    d0, d1 = int(dims[0]), int(dims[1])
    if m.ndim != 2 or m.shape != (d0 * d1, d0 * d1):
        raise DimensionError(
            f"operator of shape {m.shape} does not factor as {d0}x{d1}",
            code="NOT_FACTORIZABLE",
        )
    t = m.reshape(d0, d1, d0, d1)
    if keep == 0:
        return np.einsum("ijkj->ik", t)
    if keep == 1:
        return np.einsum("ijil->jl", t)
    raise DimensionError(f"keep must be 0 or 1, got {keep}", code="NOT_FACTORIZABLE")


def is_hermitian(h: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    h = np.asarray(h)
    return h.ndim == 2 and h.shape[0] == h.shape[1] and float(np.max(np.abs(h - h.conj().T), initial=0.0)) <= tol


def eigh(h: Operand, tol: float = HERMITIAN_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """Hermitian eigendecomposition, eigenvalues ascending."""
    m = _as_matrix(h)
    scale = max(1.0, float(np.max(np.abs(m), initial=0.0)))
    if not is_hermitian(m, tol * scale):
        raise HermiticityError(
            f"matrix deviates from its adjoint by {np.max(np.abs(m - m.conj().T)):.3e}"
        )
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    return w, v


def herm_exp(h: Operand, scale: float) -> np.ndarray:
    """Unitary ``exp(i * scale * h)`` from the spectral decomposition of ``h``."""
    w, v = eigh(h)
    return (v * np.exp(1j * scale * w)) @ v.conj().T


def trace_distance(a: Operand, b: Operand) -> float:
    am, bm = _as_matrix(a), _as_matrix(b)
    if am.shape != bm.shape:
        raise DimensionError(f"shapes differ: {am.shape} vs {bm.shape}")
    diff = am - bm
    diff = 0.5 * (diff + diff.conj().T)
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(diff))))


def fidelity_pure(v: Union[PureState, np.ndarray], w: Union[PureState, np.ndarray]) -> float:
    va = v.amplitudes if isinstance(v, PureState) else np.asarray(v, dtype=complex)
    wa = w.amplitudes if isinstance(w, PureState) else np.asarray(w, dtype=complex)
    if va.shape != wa.shape:
        raise DimensionError(f"dimensions differ: {va.shape} vs {wa.shape}")
    return float(min(1.0, abs(np.vdot(va, wa)) ** 2))


def state_fidelity(rho: Operand, vec: Union[PureState, np.ndarray]) -> float:
    """``<v|rho|v>`` for a normalized vector ``v``."""
    va = vec.amplitudes if isinstance(vec, PureState) else np.asarray(vec, dtype=complex)
    return float(np.vdot(va, _as_matrix(rho) @ va).real)


def purity(rho: Operand) -> float:
    m = _as_matrix(rho)
    return float(np.trace(m @ m).real)


def swap_operator(dim: int) -> np.ndarray:
    """SWAP on two ``dim``-dimensional registers: S(u⊗v) = v⊗u."""
    idx = np.arange(dim * dim)
    s = np.zeros((dim * dim, dim * dim), dtype=complex)
    s[idx, (idx % dim) * dim + idx // dim] = 1.0
    return s


def random_state(dim: int, rng: np.random.Generator) -> PureState:
    return PureState.from_vector(rng.normal(size=dim) + 1j * rng.normal(size=dim))


def random_hermitian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return scale * 0.5 * (a + a.conj().T)


def random_density(dim: int, rng: np.random.Generator, rank: Optional[int] = None) -> DensityOperator:
    """Random density operator of the given rank (full rank by default)."""
    g = rng.normal(size=(dim, rank or dim)) + 1j * rng.normal(size=(dim, rank or dim))
    m = g @ g.conj().T
    return make_density(m / np.trace(m).real)


def spectral_norm(a: Operand) -> float:
    return float(np.linalg.norm(_as_matrix(a), 2))
