"""Rotation angles for the single-auxiliary QSP sequence.

The sequence applied to the auxiliary qubit for an eigenvector whose signal
phase is w = exp(iτ) reads

    R(θ_L, φ_L, 0) · G_L · ... · R(θ_1, φ_1, 0) · G_1 · R(θ_0, φ_0, λ)

where G_j = diag(w, 1) for the first K (anticontrolled) gates and
G_j = w̄·diag(w, 1) for the remaining controlled ones, and

    R(θ, φ, λ) = [[e^{i(λ+φ)} cos θ, e^{iφ} sin θ],
                  [e^{iλ} sin θ,      -cos θ     ]].

Starting from aux |0⟩, the |0⟩ amplitude is w̄^{L-K} P(w) for a degree-L
polynomial P. A Laurent polynomial f of degree d is therefore realized with
L = 2d gates, K = d, and P(w) = w^d f(w).

Angles are found by peeling one layer at a time off the pair (P, Q), where Q
completes P to |P|² + |Q|² = 1 on the unit circle.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import SynthesisError

logger = logging.getLogger(__name__)

ROOTS_MAX_DEGREE = 24
CIRCLE_TOL = 1e-6
VERIFY_POINTS = 512
VERIFY_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class QSPAngles:
    thetas: np.ndarray
    phis: np.ndarray
    lam: float
    split: int

    @property
    def gate_count(self) -> int:
        return int(len(self.thetas) - 1)


def rotation(theta: float, phi: float, lam: float = 0.0) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array(
        [[np.exp(1j * (lam + phi)) * c, np.exp(1j * phi) * s], [np.exp(1j * lam) * s, -c]],
        dtype=complex,
    )


def scalar_response(angles: QSPAngles, tau: np.ndarray) -> np.ndarray:
    """Aux |0⟩ amplitude of the sequence with signal exp(iτ) substituted."""
    tau = np.asarray(tau, dtype=float)
    w = np.exp(1j * tau.reshape(-1))
    state = np.zeros((2, w.size), dtype=complex)
    state[0] = 1.0
    state = rotation(angles.thetas[0], angles.phis[0], angles.lam) @ state
    for j in range(1, angles.gate_count + 1):
        state[0] = state[0] * w
        if j > angles.split:
            state = state * w.conj()
        state = rotation(angles.thetas[j], angles.phis[j]) @ state
    return state[0].reshape(tau.shape)


def _eval_poly(coeffs: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.polynomial.polynomial.polyval(w, coeffs)


def _laurent_abs2(p: np.ndarray) -> np.ndarray:
    """Coefficients (powers -L..L) of |P(w)|² on the unit circle."""
    return np.convolve(p, np.conj(p[::-1]))


def complement_roots(p: np.ndarray) -> np.ndarray:
    """Q with |Q|² = 1 - |P|² on the circle by Fejér-Riesz root selection."""
    deg = len(p) - 1
    a = -_laurent_abs2(p)
    a[deg] += 1.0
    trim = 0
    scale = np.max(np.abs(a))
    while trim < deg and abs(a[trim]) < 1e-14 * scale and abs(a[-1 - trim]) < 1e-14 * scale:
        trim += 1
    core = a[trim: len(a) - trim]
    if len(core) == 1:
        q = np.zeros(deg + 1, dtype=complex)
        q[0] = np.sqrt(max(core[0].real, 0.0))
        return q
    roots = np.polynomial.polynomial.polyroots(core)
    mags = np.abs(roots)
    inside = list(roots[mags < 1.0 - CIRCLE_TOL])
    on = roots[np.abs(mags - 1.0) <= CIRCLE_TOL]
    if len(on):
        if len(on) % 2:
            raise SynthesisError("odd number of unit-circle roots in 1 - |P|^2",
                                 excess=0.0, code="COMPLETION_FAILED")
        # unit-circle roots are double; merge each with its nearest partner
        rest = list(on)
        while rest:
            z = rest.pop(0)
            j = int(np.argmin([abs(z - other) for other in rest]))
            mid = 0.5 * (z + rest.pop(j))
            inside.append(mid / abs(mid))
    q_core = np.polynomial.polynomial.polyfromroots(inside) if inside else np.ones(1, dtype=complex)
    ring = np.exp(1j * np.linspace(0.0, 2.0 * np.pi, 64, endpoint=False))
    target = 1.0 - np.abs(_eval_poly(p, ring)) ** 2
    got = np.abs(_eval_poly(q_core, ring)) ** 2
    idx = int(np.argmax(target))
    q_core = q_core * np.sqrt(max(target[idx], 0.0) / got[idx])
    q = np.zeros(deg + 1, dtype=complex)
    q[: len(q_core)] = q_core
    return q


def complement_fft(p: np.ndarray) -> np.ndarray:
    """Q as the outer function of sqrt(1 - |P|²), truncated to deg P."""
    deg = len(p) - 1
    n = 1 << int(np.ceil(np.log2(max(1024, 16 * (deg + 1)))))
    pad = np.zeros(n, dtype=complex)
    pad[: deg + 1] = p
    values = n * np.fft.ifft(pad)
    a = 1.0 - np.abs(values) ** 2
    if np.min(a) <= 0.0:
        raise SynthesisError("|P| reaches 1 on the circle; no smooth completion",
                             excess=float(np.max(np.abs(values)) - 1.0), code="COMPLETION_FAILED")
    coeff = np.fft.fft(0.5 * np.log(a)) / n
    analytic = np.zeros(n, dtype=complex)
    analytic[0] = coeff[0]
    analytic[1: n // 2] = 2.0 * coeff[1: n // 2]
    g = np.exp(n * np.fft.ifft(analytic))
    return (np.fft.fft(g) / n)[: deg + 1]


def complement(p: np.ndarray) -> np.ndarray:
    if len(p) - 1 <= ROOTS_MAX_DEGREE:
        return complement_roots(p)
    return complement_fft(p)


def _strip(p: np.ndarray, q: np.ndarray, split: int, dtype: type) -> QSPAngles:
    p = np.asarray(p, dtype=dtype).copy()
    q = np.asarray(q, dtype=dtype).copy()
    deg = len(p) - 1
    thetas = np.zeros(deg + 1)
    phis = np.zeros(deg + 1)
    for j in range(deg, 0, -1):
        lead_p, lead_q = p[j], q[j]
        if abs(lead_p) + abs(lead_q) > 1e-300:
            theta = np.arctan2(abs(lead_q), abs(lead_p))
            phi = np.angle(lead_p) - np.angle(lead_q)
        else:
            theta = np.arctan2(abs(p[0]), abs(q[0]))
            phi = np.angle(-q[0]) - np.angle(p[0]) if abs(p[0]) > 0 else 0.0
        c, s = np.cos(theta), np.sin(theta)
        e = np.exp(-1j * phi)
        top = e * c * p + s * q
        bottom = e * s * p - c * q
        p = top[1: j + 1].copy()
        q = bottom[:j].copy()
        thetas[j] = float(theta)
        phis[j] = float(phi)
    lam = float(np.angle(q[0])) if abs(q[0]) > 0 else 0.0
    thetas[0] = float(np.arctan2(abs(q[0]), abs(p[0])))
    phis[0] = float(np.angle(p[0]) - lam) if abs(p[0]) > 0 else 0.0
    return QSPAngles(thetas, phis, lam, split)


def verify_angles(angles: QSPAngles, target) -> float:
    """Largest deviation between the scalar response and ``target(tau)``."""
    tau = np.linspace(-np.pi, np.pi, VERIFY_POINTS, endpoint=False)
    return float(np.max(np.abs(scalar_response(angles, tau) - target(tau))))


def laurent_to_angles(coeffs: np.ndarray, *, tol: float = VERIFY_TOL) -> Tuple[QSPAngles, float]:
    """Angles realizing f(τ) = Σ_{j=-d..d} c_j e^{ijτ} on aux |0⟩.

    Returns the angles and the verified residual on a 512-point grid.
    """
    coeffs = np.asarray(coeffs, dtype=complex)
    d = (len(coeffs) - 1) // 2
    p = coeffs
    n = max(2048, 8 * len(p))
    pad = np.zeros(n, dtype=complex)
    pad[: len(p)] = p
    peak = float(np.max(np.abs(n * np.fft.ifft(pad))))
    if peak > 1.0 + 1e-12:
        raise SynthesisError(
            f"|f| exceeds 1 by {peak - 1.0:.3e}; no complementary polynomial exists",
            excess=peak - 1.0,
            code="COMPLETION_FAILED",
        )
    q = complement(p)

    def target(tau: np.ndarray) -> np.ndarray:
        w = np.exp(1j * tau)
        return _eval_poly(p, w) * w ** (-d)

    angles = _strip(p, q, d, complex)
    residual = verify_angles(angles, target)
    if residual > tol:
        logger.info("angle residual %.2e at degree %d; retrying in extended precision", residual, d)
        angles = _strip(p, q, d, np.clongdouble)
        residual = verify_angles(angles, target)
    if residual > tol:
        raise SynthesisError(
            f"angle sequence reproduces f only to {residual:.3e}",
            excess=residual,
            hint="reduce the polynomial degree or loosen delta",
        )
    logger.debug("angles synthesized: L=%d residual=%.2e", 2 * d, residual)
    return angles, residual
