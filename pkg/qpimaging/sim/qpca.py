"""Density-matrix exponentiation with fresh photon copies.

One partial-SWAP interaction between a memory register σ and a fresh copy of ρ,
followed by discarding the fresh register, applies ``exp(-iθρ)`` to σ up to
O(θ²). Repeating it ⌈x·k⌉ times with angle 1/k (the last step shortened to the
residual) approximates ``exp(-ixρ) σ exp(ixρ)``. The controlled variant acts
on an auxiliary qubit ⊗ memory register; only the active control block sees
the interaction.

Two simulation modes are supported:

- density mode: registers are density matrices, the discarded register is
  traced out. Deterministic, used for error measurements.
- trajectory mode: the memory is a pure vector, every fresh copy is sampled
  from the eigen-ensemble of ρ and the discarded register is measured in the
  computational basis. Gives honest sample-to-sample variation.

Every fresh copy is drawn through a :class:`PhotonStream`, the single source of
photon accounting.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from .errors import DimensionError
from .numkit import (
    DensityOperator,
    PureState,
    herm_exp,
    kron,
    make_density,
    partial_trace,
    random_density,
    swap_operator,
    trace_distance,
)

logger = logging.getLogger(__name__)

CHANNEL_NEGATIVE_TOL = 1e-9
U64 = (1 << 64) - 1


def trial_seed(master_seed: int, trial_index: int) -> int:
    """Per-trial seed ``master_seed XOR trial_index`` (64-bit)."""
    return (int(master_seed) ^ int(trial_index)) & U64


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & U64))


@dataclass
class PhotonStream:
    """Supply of fresh copies of ``source`` for a single trial.

    ``consumed`` only ever grows. With a ``budget`` the stream grants copies
    until it is spent and then flags ``exhausted``; callers check the flag
    instead of catching an exception.
    """

    source: DensityOperator
    seed: int = 0
    budget: Optional[int] = None
    consumed: int = 0
    exhausted: bool = False
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.rng = make_rng(self.seed)

    @property
    def dim(self) -> int:
        return self.source.dim

    @property
    def remaining(self) -> Optional[int]:
        if self.budget is None:
            return None
        return max(0, self.budget - self.consumed)

    def take(self, n: int = 1) -> int:
        """Charge ``n`` copies; returns how many were granted."""
        granted = n if self.budget is None else min(n, self.remaining or 0)
        self.consumed += granted
        if granted < n:
            if not self.exhausted:
                logger.warning("photon budget %s exhausted after %d copies", self.budget, self.consumed)
            self.exhausted = True
        return granted

    def sample_pure(self) -> np.ndarray:
        """Draw one copy as a pure vector from the eigen-ensemble of the source.

        The caller is responsible for charging it with :meth:`take`.
        """
        w, v = self.source.spectrum
        p = np.clip(w, 0.0, None)
        idx = int(self.rng.choice(len(p), p=p / p.sum()))
        return v[:, idx]


def exp_swap(dim: int, x: float) -> np.ndarray:
    """exp(i·x·S) = cos(x)·I + i·sin(x)·S, exact because S² = I."""
    return math.cos(x) * np.eye(dim * dim, dtype=complex) + 1j * math.sin(x) * swap_operator(dim)


def step_angles(x: float, k: int) -> List[float]:
    """⌈x·k⌉ angles of 1/k each, the last shortened so they sum to x."""
    if x < 0:
        raise ValueError(f"x must be nonnegative, got {x}")
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if x == 0:
        return []
    n = max(1, math.ceil(x * k - 1e-12))
    angles = [1.0 / k] * (n - 1)
    angles.append(x - (n - 1) / k)
    return angles


def lloyd_step(
    sigma: DensityOperator, rho: DensityOperator, k: int, *, angle: Optional[float] = None
) -> DensityOperator:
    """Tr₁[exp(-iθS)(ρ⊗σ)exp(iθS)] with θ = 1/k unless ``angle`` is given."""
    if sigma.dim != rho.dim:
        raise DimensionError(f"register dims differ: {sigma.dim} vs {rho.dim}")
    theta = 1.0 / k if angle is None else angle
    d = rho.dim
    u = exp_swap(d, -theta)
    joint = u @ kron(rho, sigma) @ u.conj().T
    return make_density(partial_trace(joint, (d, d), keep=1), negative_tol=CHANNEL_NEGATIVE_TOL)


def exact_conjugation(sigma: DensityOperator, rho: DensityOperator, x: float) -> DensityOperator:
    """exp(-ixρ) σ exp(ixρ) from the spectral decomposition of ρ."""
    u = herm_exp(rho.matrix, -x)
    return make_density(u @ sigma.matrix @ u.conj().T)


def _trajectory_step(psi: np.ndarray, phi: np.ndarray, alpha: complex, beta: complex,
                     rng: np.random.Generator) -> np.ndarray:
    # memory ⊗ fresh after (αI + βS); the fresh register is measured
    joint = alpha * np.outer(psi, phi) + beta * np.outer(phi, psi)
    probs = np.sum(np.abs(joint) ** 2, axis=0)
    j = int(rng.choice(len(probs), p=probs / probs.sum()))
    out = joint[:, j]
    return out / np.linalg.norm(out)


def approx_exp_rho(
    sigma: Union[DensityOperator, PureState],
    x: float,
    k: int,
    stream: PhotonStream,
) -> Tuple[Union[DensityOperator, PureState], int]:
    """Approximate exp(-ixρ) σ exp(ixρ) with ⌈x·k⌉ fresh copies of ρ.

    A ``PureState`` input runs in trajectory mode. If the stream's budget runs
    out the remaining steps are skipped and ``stream.exhausted`` is set.
    """
    used = 0
    if isinstance(sigma, PureState):
        psi = sigma.amplitudes
        for theta in step_angles(x, k):
            if stream.take(1) == 0:
                break
            used += 1
            phi = stream.sample_pure()
            psi = _trajectory_step(psi, phi, math.cos(theta), -1j * math.sin(theta), stream.rng)
        return PureState(psi), used
    state = sigma
    for theta in step_angles(x, k):
        if stream.take(1) == 0:
            break
        used += 1
        state = lloyd_step(state, stream.source, k, angle=theta)
    return state, used


@dataclass
class JointState:
    """Auxiliary qubit ⊗ memory register.

    ``blocks`` has shape (2, d, 2, d) in density mode (blocks[a, :, b, :] is
    the ⟨a|·|b⟩ block) or (2, d) in trajectory mode.
    """

    blocks: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.blocks.shape[1])

    @property
    def is_pure(self) -> bool:
        return self.blocks.ndim == 2

    @classmethod
    def from_memory(cls, memory: Union[DensityOperator, PureState], aux: Optional[np.ndarray] = None) -> "JointState":
        aux = np.array([1.0, 0.0], dtype=complex) if aux is None else np.asarray(aux, dtype=complex)
        if isinstance(memory, PureState):
            return cls(np.einsum("a,m->am", aux, memory.amplitudes))
        q = np.outer(aux, aux.conj())
        return cls(np.einsum("ab,mn->ambn", q, memory.matrix))

    def matrix(self) -> np.ndarray:
        d = self.dim
        if self.is_pure:
            v = self.blocks.reshape(2 * d)
            return np.outer(v, v.conj())
        return self.blocks.reshape(2 * d, 2 * d)

    def trace(self) -> float:
        if self.is_pure:
            return float(np.sum(np.abs(self.blocks) ** 2))
        return float(np.einsum("aiai->", self.blocks).real)

    def aux_probabilities(self) -> np.ndarray:
        if self.is_pure:
            p = np.sum(np.abs(self.blocks) ** 2, axis=1)
        else:
            p = np.einsum("aiai->a", self.blocks).real
        return np.clip(p, 0.0, None)

    def rotate_aux(self, gate: np.ndarray) -> "JointState":
        if self.is_pure:
            return JointState(np.einsum("ab,bm->am", gate, self.blocks))
        return JointState(np.einsum("ac,cidj,bd->aibj", gate, self.blocks, gate.conj()))

    def conditional_memory(self, outcome: int) -> Tuple[float, Union[DensityOperator, PureState]]:
        """Probability of aux ``outcome`` and the normalized memory state."""
        p = float(self.aux_probabilities()[outcome])
        if p <= 0.0:
            raise ValueError(f"aux outcome {outcome} has zero probability")
        if self.is_pure:
            return p, PureState(self.blocks[outcome] / math.sqrt(p))
        block = self.blocks[outcome, :, outcome, :] / p
        return p, make_density(block, negative_tol=CHANNEL_NEGATIVE_TOL)

    def as_density(self) -> DensityOperator:
        return make_density(self.matrix(), negative_tol=CHANNEL_NEGATIVE_TOL)


def _control_coefficients(theta: float, sign: int) -> Tuple[np.ndarray, np.ndarray]:
    active = 0 if sign > 0 else 1
    alpha = np.ones(2, dtype=complex)
    beta = np.zeros(2, dtype=complex)
    alpha[active] = math.cos(theta)
    beta[active] = sign * 1j * math.sin(theta)
    return alpha, beta


def controlled_partial_swap(blocks: np.ndarray, rho: np.ndarray, theta: float, sign: int) -> np.ndarray:
    """One controlled partial-SWAP with a fresh ρ, fresh register traced out.

    ``sign=+1`` acts on the aux |0⟩ block towards exp(+iθρ); ``sign=-1`` acts
    on the aux |1⟩ block towards exp(-iθρ).
    """
    alpha, beta = _control_coefficients(theta, sign)
    aa = np.outer(alpha, alpha.conj())
    ab = np.outer(alpha, beta.conj())
    ba = np.outer(beta, alpha.conj())
    bb = np.outer(beta, beta.conj())
    right = np.einsum("aibj,jk->aibk", blocks, rho)
    left = np.einsum("ij,ajbk->aibk", rho, blocks)
    traces = np.einsum("aibi->ab", blocks)
    return (
        aa[:, None, :, None] * blocks
        + ab[:, None, :, None] * right
        + ba[:, None, :, None] * left
        + (bb * traces)[:, None, :, None] * rho[None, :, None, :]
    )


def controlled_exp_rho(
    joint: JointState, x: float, sign: int, k: int, stream: PhotonStream
) -> Tuple[JointState, int]:
    """Controlled exp(±ixρ) on the memory register, one fresh copy per step.

    ``sign=+1`` is the anticontrolled exp(+ixρ) (acts when aux is |0⟩),
    ``sign=-1`` the controlled exp(-ixρ) (acts when aux is |1⟩).
    """
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    if joint.dim != stream.dim:
        raise DimensionError(f"memory dim {joint.dim} differs from stream dim {stream.dim}")
    rho = stream.source.matrix
    blocks = joint.blocks
    used = 0
    for theta in step_angles(x, k):
        if stream.take(1) == 0:
            break
        used += 1
        if joint.is_pure:
            alpha, beta = _control_coefficients(theta, sign)
            phi = stream.sample_pure()
            # joint[a, m, j] over aux, memory, fresh
            full = (
                alpha[:, None, None] * blocks[:, :, None] * phi[None, None, :]
                + beta[:, None, None] * phi[None, :, None] * blocks[:, None, :]
            )
            probs = np.sum(np.abs(full) ** 2, axis=(0, 1))
            j = int(stream.rng.choice(len(probs), p=probs / probs.sum()))
            blocks = full[:, :, j] / math.sqrt(probs[j])
        else:
            blocks = controlled_partial_swap(blocks, rho, theta, sign)
    return JointState(blocks), used


def exact_controlled(joint: JointState, rho: DensityOperator, x: float, sign: int) -> JointState:
    """Exact controlled-unitary oracle for :func:`controlled_exp_rho`."""
    u = herm_exp(rho.matrix, sign * x)
    d = rho.dim
    eye = np.eye(d, dtype=complex)
    ops = np.stack([u, eye]) if sign > 0 else np.stack([eye, u])
    if joint.is_pure:
        return JointState(np.einsum("amn,an->am", ops, joint.blocks))
    return JointState(np.einsum("aij,ajbk,blk->aibl", ops, joint.blocks, ops.conj()))


def measure_error_constant(
    dim: int,
    k_values: List[int],
    x_values: List[float],
    rng: np.random.Generator,
    *,
    rank: Optional[int] = None,
) -> Tuple[List[dict], float]:
    """Sweep approx_exp_rho against the exact conjugation.

    Returns CSV-ready rows (dim, k, x, trace_error, photons) and the largest
    observed ``trace_error * k / x``, the accumulated-error constant.
    """
    rho = random_density(dim, rng, rank=rank)
    sigma = random_density(dim, rng)
    rows = []
    worst = 0.0
    for k in k_values:
        for x in x_values:
            stream = PhotonStream(rho)
            approx, photons = approx_exp_rho(sigma, x, k, stream)
            err = trace_distance(approx, exact_conjugation(sigma, rho, x))
            rows.append({"dim": dim, "k": k, "x": x, "trace_error": err, "photons": photons})
            if x > 0:
                worst = max(worst, err * k / x)
    return rows, worst
