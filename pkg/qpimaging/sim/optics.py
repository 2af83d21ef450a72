"""Photon source states from a Fourier-optics point spread function.

A point source at object-plane position (xi, nu) produces the complex field

    H(u, v) = exp(ik(xi²+nu²)/2z_o) exp(ik(u²+v²)/2z_i) / (λ² z_o z_i)
              * K(u/z_i + xi/z_o, v/z_i + nu/z_o)

on the detector, where K is the Fourier transform of the complex pupil
P·exp(iΦ) evaluated at spatial frequency (p/λ, q/λ). The field is projected
onto per-pixel mode profiles to give an N²-dimensional single-photon state,
and two such states are mixed into the heralded density operator.

The sampled pupil transform is computed once per pupil (zero-padded FFT) and
interpolated bilinearly to detector points. ``method="direct"`` evaluates the
same discrete transform exactly at each point instead, which is slower but
smooth in the detector coordinates.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.interpolate import RegularGridInterpolator

from .errors import DetectorMissError, ModelError, NyquistError, SceneError
from .kvtext import format_kv, read_kv
from .numkit import DensityOperator, PureState, make_density

logger = logging.getLogger(__name__)

DEFAULT_PAD = 4
DEFAULT_QUAD_ORDER = 8
DEFAULT_ETA_FLOOR = 1e-6
PROFILE_NORM_TOL = 1e-8

Field2D = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class PupilModel:
    """Sampled pupil plane.

    ``transmission`` and ``phase`` are square arrays on cell centres
    ``x_m = (m - (M-1)/2) * pitch``; axis 0 runs along x, axis 1 along y.
    """

    wavelength: float
    z_o: float
    z_i: float
    transmission: np.ndarray
    phase: np.ndarray
    pitch: float
    _cache: Dict[Any, Any] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        t = np.asarray(self.transmission, dtype=float)
        ph = np.asarray(self.phase, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1] or ph.shape != t.shape:
            raise SceneError(f"pupil arrays must be square and equal, got {t.shape} and {ph.shape}")
        ring = np.concatenate([t[0, :], t[-1, :], t[:, 0], t[:, -1]])
        if np.any(ring != 0.0):
            raise SceneError(
                "pupil transmission must vanish on the boundary ring",
                hint="increase pupil_samples or shrink the aperture",
            )
        if np.any(ph < -np.pi) or np.any(ph >= np.pi):
            raise SceneError("phase mask values must lie in [-pi, pi)")
        if min(self.wavelength, self.z_o, self.z_i, self.pitch) <= 0.0:
            raise SceneError("wavelength, distances and pitch must be positive")
        object.__setattr__(self, "transmission", t)
        object.__setattr__(self, "phase", ph)

    @property
    def samples(self) -> int:
        return int(self.transmission.shape[0])

    @property
    def k(self) -> float:
        return 2.0 * np.pi / self.wavelength

    def coordinates(self) -> np.ndarray:
        m = self.samples
        return (np.arange(m) - (m - 1) / 2.0) * self.pitch

    def complex_pupil(self) -> np.ndarray:
        return self.transmission * np.exp(1j * self.phase)

    def energy(self) -> float:
        """∫|P e^{iΦ}|² over the pupil plane."""
        return float(np.sum(self.transmission**2)) * self.pitch**2

    def scaled(self, factor: float) -> "PupilModel":
        return PupilModel(self.wavelength, self.z_o, self.z_i, factor * self.transmission,
                          self.phase, self.pitch)

    def max_frequency(self, pad: int = DEFAULT_PAD) -> float:
        mp = pad * self.samples
        return (mp // 2 - 1) / (mp * self.pitch)


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    return (np.asarray(phase, dtype=float) + np.pi) % (2.0 * np.pi) - np.pi


def circular_pupil(
    radius: float,
    samples: int,
    *,
    wavelength: float,
    z_o: float,
    z_i: float,
    phase_mask: Optional[np.ndarray] = None,
) -> PupilModel:
    """Unapodized circular aperture with a one-cell zero ring around it."""
    if samples < 8:
        raise SceneError(f"pupil_samples must be at least 8, got {samples}")
    pitch = 2.0 * radius / (samples - 2.5)
    x = (np.arange(samples) - (samples - 1) / 2.0) * pitch
    xx, yy = np.meshgrid(x, x, indexing="ij")
    transmission = (xx**2 + yy**2 <= radius**2).astype(float)
    if phase_mask is None:
        phase = np.zeros_like(transmission)
    else:
        phase = wrap_phase(phase_mask)
        if phase.shape != transmission.shape:
            raise SceneError(
                f"phase mask shape {phase.shape} does not match pupil {transmission.shape}"
            )
    return PupilModel(wavelength, z_o, z_i, transmission, phase, pitch)


@dataclass(frozen=True)
class PointSource:
    xi: float
    nu: float
    label: str = "star"

    def __post_init__(self) -> None:
        if not (np.isfinite(self.xi) and np.isfinite(self.nu)):
            raise SceneError(f"source {self.label} has non-finite coordinates")


def _kernel_grid(pupil: PupilModel, pad: int) -> Tuple[RegularGridInterpolator, RegularGridInterpolator]:
    key = ("fft", pad)
    if key in pupil._cache:
        return pupil._cache[key]
    m = pupil.samples
    mp = pad * m
    raw = np.fft.fftshift(np.fft.fft2(pupil.complex_pupil(), s=(mp, mp)))
    j = np.arange(mp) - mp // 2
    # cell centres sit (M-1)/2 samples before the FFT origin
    shift = np.exp(1j * np.pi * j * (m - 1) / mp)
    kgrid = pupil.pitch**2 * raw * shift[:, None] * shift[None, :]
    freqs = j / (mp * pupil.pitch)
    interp = (
        RegularGridInterpolator((freqs, freqs), kgrid.real, method="linear", bounds_error=True),
        RegularGridInterpolator((freqs, freqs), kgrid.imag, method="linear", bounds_error=True),
    )
    pupil._cache[key] = interp
    logger.debug("pupil transform cached: M=%d pad=%d df=%.3e", m, pad, freqs[1] - freqs[0])
    return interp


def _kernel_direct(pupil: PupilModel, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    x = pupil.coordinates()
    ex = np.exp(-2j * np.pi * fx[:, None] * x[None, :])
    ey = np.exp(-2j * np.pi * fy[:, None] * x[None, :])
    return pupil.pitch**2 * np.einsum("pm,mn,pn->p", ex, pupil.complex_pupil(), ey)


def pupil_transform(
    pupil: PupilModel,
    fx: np.ndarray,
    fy: np.ndarray,
    *,
    pad: int = DEFAULT_PAD,
    method: Literal["fft", "direct"] = "fft",
) -> np.ndarray:
    """Fourier transform of the complex pupil at spatial frequencies (fx, fy)."""
    fx = np.asarray(fx, dtype=float)
    fy = np.asarray(fy, dtype=float)
    shape = np.broadcast(fx, fy).shape
    fx, fy = (np.broadcast_to(a, shape).reshape(-1) for a in (fx, fy))
    fmax = float(np.max(np.abs(np.concatenate([fx, fy])), initial=0.0))
    limit = pupil.max_frequency(pad)
    if fmax > limit:
        required = int(np.ceil(2.0 * fmax * pupil.samples * pupil.pitch)) + 2
        raise NyquistError(
            f"detector window needs spatial frequency {fmax:.4g} 1/m but the pupil "
            f"sampling resolves only {limit:.4g} 1/m",
            required_samples=required,
            hint=f"use at least {required} pupil samples across the same window",
        )
    if method == "direct":
        out = _kernel_direct(pupil, fx, fy)
    else:
        re, im = _kernel_grid(pupil, pad)
        pts = np.stack([fx, fy], axis=-1)
        out = re(pts) + 1j * im(pts)
    return out.reshape(shape)


def psf_field(
    pupil: PupilModel,
    source: PointSource,
    u: np.ndarray,
    v: np.ndarray,
    *,
    pad: int = DEFAULT_PAD,
    method: Literal["fft", "direct"] = "fft",
) -> np.ndarray:
    """Complex amplitude H(u, v; xi, nu) at detector coordinates (metres)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    lam, zo, zi, k = pupil.wavelength, pupil.z_o, pupil.z_i, pupil.k
    fx = (u / zi + source.xi / zo) / lam
    fy = (v / zi + source.nu / zo) / lam
    kernel = pupil_transform(pupil, fx, fy, pad=pad, method=method)
    prefactor = np.exp(1j * k * (source.xi**2 + source.nu**2) / (2.0 * zo)) / (lam**2 * zo * zi)
    return prefactor * np.exp(1j * k * (u**2 + v**2) / (2.0 * zi)) * kernel


def normalized_field(
    pupil: PupilModel,
    source: PointSource,
    *,
    pad: int = DEFAULT_PAD,
    method: Literal["fft", "direct"] = "fft",
) -> Field2D:
    """Detector field of ``source`` scaled to unit energy over the whole plane."""
    scale = pupil.wavelength * pupil.z_o / np.sqrt(pupil.energy())

    def _field(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return scale * psf_field(pupil, source, u, v, pad=pad, method=method)

    return _field


@dataclass(frozen=True, eq=False)
class PixelGrid:
    """Square N×N detector with per-pixel mode profiles.

    Pixel (m, n) covers u ∈ [u0 + m·pitch, u0 + (m+1)·pitch] with
    u0 = origin_u − N·pitch/2 (likewise for v and n). The state index of pixel
    (m, n) is m·N + n.
    """

    n: int
    pitch: float
    origin: Tuple[float, float] = (0.0, 0.0)
    profile: Literal["flat_top", "gaussian"] = "flat_top"
    waist: float = 0.5
    quad_order: int = DEFAULT_QUAD_ORDER

    def __post_init__(self) -> None:
        if self.n < 1 or self.pitch <= 0.0:
            raise SceneError(f"invalid pixel grid n={self.n} pitch={self.pitch}")
        norm = float(np.sum(self._area_weights() * np.abs(self._profile_values()) ** 2))
        if abs(norm - 1.0) > PROFILE_NORM_TOL:
            raise SceneError(f"pixel profile normalization {norm:.10f} differs from 1")

    @property
    def dim(self) -> int:
        return self.n * self.n

    def edges(self, axis: int) -> np.ndarray:
        start = self.origin[axis] - self.n * self.pitch / 2.0
        return start + self.pitch * np.arange(self.n + 1)

    def _area_weights(self) -> np.ndarray:
        _, w = np.polynomial.legendre.leggauss(self.quad_order)
        return (self.pitch / 2.0) ** 2 * np.outer(w, w)

    def _profile_values(self) -> np.ndarray:
        t, _ = np.polynomial.legendre.leggauss(self.quad_order)
        if self.profile == "flat_top":
            return np.full((self.quad_order, self.quad_order), 1.0 / self.pitch)
        if self.profile == "gaussian":
            s = self.waist * self.pitch
            local = t * self.pitch / 2.0
            g = np.exp(-(local[:, None] ** 2 + local[None, :] ** 2) / (4.0 * s**2))
            norm = np.sqrt(np.sum(self._area_weights() * g**2))
            return g / norm
        raise SceneError(f"unknown mode profile {self.profile!r}")

    def profile_weights(self) -> np.ndarray:
        """Quadrature weights times the conjugate profile for one pixel."""
        return self._area_weights() * np.conj(self._profile_values())

    def nodes(self, axis: int) -> np.ndarray:
        """All quadrature abscissae along ``axis`` ordered pixel by pixel."""
        t, _ = np.polynomial.legendre.leggauss(self.quad_order)
        lo = self.edges(axis)[:-1]
        return (lo[:, None] + self.pitch * (t[None, :] + 1.0) / 2.0).reshape(-1)


def pixelate(
    field_fn: Field2D, grid: PixelGrid, *, eta_floor: float = DEFAULT_ETA_FLOOR
) -> Tuple[PureState, float]:
    """Project a detector field onto the pixel modes.

    Returns the normalized state and the detection efficiency
    η = Σ|ψ_mn|² (``state.norm_deficit == 1 - η``).
    """
    u = grid.nodes(0)
    v = grid.nodes(1)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    values = np.asarray(field_fn(uu, vv), dtype=complex)
    q = grid.quad_order
    values = values.reshape(grid.n, q, grid.n, q)
    amps = np.einsum("minj,ij->mn", values, grid.profile_weights())
    eta = float(np.sum(np.abs(amps) ** 2))
    if eta < eta_floor:
        raise DetectorMissError(
            f"captured fraction {eta:.3e} is below the floor {eta_floor:.1e}",
            eta=eta,
            hint="move the source onto the detector or enlarge the grid",
        )
    if eta > 1.0 + 1e-9:
        logger.warning("pixelation returned eta=%.12f > 1; field is not unit-normalized", eta)
    return PureState.from_vector(amps.reshape(-1)), eta


@dataclass(frozen=True)
class NoiseModel:
    gamma: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.gamma < 1.0):
            raise SceneError(f"gamma must lie in [0, 1), got {self.gamma}")


@dataclass(frozen=True, eq=False)
class Scene:
    sources: Tuple[PointSource, PointSource]
    b: float
    delta_vac: float
    pupil: PupilModel
    grid: PixelGrid
    noise: NoiseModel = NoiseModel()
    renormalize_b_by_eta: bool = False
    pad: int = DEFAULT_PAD
    psf_method: Literal["fft", "direct"] = "fft"
    eta_floor: float = DEFAULT_ETA_FLOOR

    def __post_init__(self) -> None:
        if not (0.0 <= self.b <= 1.0):
            raise SceneError(f"b must lie in [0, 1], got {self.b}")
        if not (0.0 < self.delta_vac <= 1.0):
            raise SceneError(f"delta_vac must lie in (0, 1], got {self.delta_vac}")


@dataclass(frozen=True, eq=False)
class SceneTruth:
    """Ground truth kept next to ρ for oracle checks only."""

    psi1: PureState
    psi2: PureState
    h: float
    r: float
    b: float
    eta1: float
    eta2: float


def source_states(scene: Scene) -> Tuple[Tuple[PureState, float], Tuple[PureState, float]]:
    out = []
    for src in scene.sources:
        fn = normalized_field(scene.pupil, src, pad=scene.pad, method=scene.psf_method)
        out.append(pixelate(fn, scene.grid, eta_floor=scene.eta_floor))
    return out[0], out[1]


def mix_sources(psi1: PureState, psi2: PureState, b: float) -> Tuple[DensityOperator, PureState, float]:
    """Rotate ψ₂'s global phase so ⟨ψ₁|ψ₂⟩ = h ≥ 0 and mix with weight b."""
    ov = complex(np.vdot(psi1.amplitudes, psi2.amplitudes))
    v2 = psi2.amplitudes
    if abs(ov) > 0.0:
        v2 = v2 * np.exp(-1j * np.angle(ov))
    psi2 = PureState(v2, norm_deficit=psi2.norm_deficit)
    h_complex = complex(np.vdot(psi1.amplitudes, v2))
    if abs(h_complex.imag) > 1e-12:
        raise ModelError(f"overlap <psi1|psi2> kept an imaginary part {h_complex.imag:.3g} after rotation")
    rho = b * psi1.projector() + (1.0 - b) * psi2.projector()
    return make_density(rho), psi2, float(h_complex.real)


def build_rho(scene: Scene) -> Tuple[DensityOperator, SceneTruth]:
    """Heralded two-source state on the N²-dimensional pixel space."""
    (psi1, eta1), (psi2, eta2) = source_states(scene)
    b = scene.b
    if scene.renormalize_b_by_eta and 0.0 < b < 1.0:
        b = b * eta1 / (b * eta1 + (1.0 - b) * eta2)
        logger.info("b renormalized by detection efficiency: %.6f -> %.6f", scene.b, b)
    rho, psi2, h = mix_sources(psi1, psi2, b)
    r = float(rho.spectrum[0][-1])
    logger.info("scene built: dim=%d h=%.6f r=%.6f eta=(%.4f, %.4f)", rho.dim, h, r, eta1, eta2)
    return rho, SceneTruth(psi1, psi2, h, r, b, eta1, eta2)


def apply_noise(rho: DensityOperator, noise: NoiseModel) -> DensityOperator:
    """Isotropic detection noise: (1-γ)ρ + γ I/dim."""
    if noise.gamma == 0.0:
        return rho
    d = rho.dim
    return DensityOperator((1.0 - noise.gamma) * rho.matrix + noise.gamma * np.eye(d) / d)


class SceneFile(BaseModel):
    """Keys accepted in a scene description file."""

    model_config = ConfigDict(extra="forbid")

    lambda_m: float = Field(gt=0)
    z_o_m: float = Field(gt=0)
    z_i_m: float = Field(gt=0)
    pupil_radius_m: float = Field(gt=0)
    pupil_samples: int = Field(ge=8)
    grid_n: int = Field(ge=1)
    pixel_pitch_m: float = Field(gt=0)
    source1_xi_m: float = 0.0
    source1_nu_m: float = 0.0
    source2_xi_m: float = 0.0
    source2_nu_m: float = 0.0
    b: float = Field(ge=0, le=1)
    delta_vac: float = Field(default=1.0, gt=0, le=1)
    gamma: float = Field(default=0.0, ge=0, lt=1)
    phase_mask_file: Optional[str] = None
    renormalize_b_by_eta: bool = False
    mode_profile: Literal["flat_top", "gaussian"] = "flat_top"
    quad_order: int = Field(default=DEFAULT_QUAD_ORDER, ge=2)
    pad_factor: int = Field(default=DEFAULT_PAD, ge=1)
    psf_method: Literal["fft", "direct"] = "fft"


def scene_from_values(values: Dict[str, Any], *, base_dir: Optional[Path] = None) -> Scene:
    try:
        cfg = SceneFile(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first.get("loc", ()))
        code = "UNKNOWN_KEY" if first.get("type") == "extra_forbidden" else (
            "MISSING_KEY" if first.get("type") == "missing" else "BAD_VALUE")
        raise SceneError(f"scene key {loc!r}: {first.get('msg')}", code=code) from exc
    mask = None
    if cfg.phase_mask_file:
        mask_path = Path(cfg.phase_mask_file)
        if base_dir is not None and not mask_path.is_absolute():
            mask_path = base_dir / mask_path
        mask = np.loadtxt(mask_path, ndmin=2)
    pupil = circular_pupil(
        cfg.pupil_radius_m,
        cfg.pupil_samples,
        wavelength=cfg.lambda_m,
        z_o=cfg.z_o_m,
        z_i=cfg.z_i_m,
        phase_mask=mask,
    )
    grid = PixelGrid(cfg.grid_n, cfg.pixel_pitch_m, profile=cfg.mode_profile,
                     quad_order=cfg.quad_order)
    sources = (
        PointSource(cfg.source1_xi_m, cfg.source1_nu_m, "star"),
        PointSource(cfg.source2_xi_m, cfg.source2_nu_m, "exoplanet"),
    )
    return Scene(
        sources=sources,
        b=cfg.b,
        delta_vac=cfg.delta_vac,
        pupil=pupil,
        grid=grid,
        noise=NoiseModel(cfg.gamma),
        renormalize_b_by_eta=cfg.renormalize_b_by_eta,
        pad=cfg.pad_factor,
        psf_method=cfg.psf_method,
    )


def load_scene(path: Union[str, Path]) -> Tuple[Scene, Dict[str, str]]:
    """Read a scene file; returns the scene and the raw key/value pairs."""
    p = Path(path)
    values = read_kv(p)
    return scene_from_values(dict(values), base_dir=p.parent), values


def dump_scene(values: Dict[str, Any], path: Union[str, Path]) -> None:
    Path(path).write_text(format_kv(values), encoding="utf-8")


def dump_state_csv(state: PureState, grid: PixelGrid, path: Union[str, Path]) -> None:
    amps = state.amplitudes.reshape(grid.n, grid.n)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "n", "re", "im"])
        for m in range(grid.n):
            for n in range(grid.n):
                w.writerow([m, n, repr(float(amps[m, n].real)), repr(float(amps[m, n].imag))])
