"""Synthetic time-varying MIMO-OFDM channel.

A sequence is generated from one random multipath geometry (gains, delays,
angles fixed for its duration); time variation enters only through the
per-path Doppler phase rotation. Frequency selectivity comes from the
per-subcarrier delay phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError
from .geometry import SPEED_OF_LIGHT, ArrayGeometry, doppler_shift, steering_vector


@dataclass(frozen=True)
class ChannelConfig:
    """Physical layer parameters for one simulated link."""

    f_c: float = 2.4e9
    k_total: int = 16  # total subcarriers; lower half uplink, upper half downlink
    subcarrier_spacing: float = 180e3
    n_paths: int = 6
    speed_kmh: float = 60.0
    sample_interval: float = 5e-4  # seconds between CSI frames
    geometry: ArrayGeometry | None = None
    delay_window: tuple = (0.0, 1.5e-6)  # seconds; uniform path delays
    delay_rms: float = 300e-9  # exponential power-delay profile constant
    los: bool = False
    rician_k: float = 10.0  # linear power ratio carried by the LoS path

    def __post_init__(self):
        if self.f_c <= 0:
            raise ConfigError(f"carrier frequency must be positive, got {self.f_c}")
        if self.k_total < 2 or self.k_total % 2:
            raise ConfigError(f"k_total must be even and >= 2, got {self.k_total}")
        if self.n_paths < 1:
            raise ConfigError(f"need at least one path, got {self.n_paths}")
        if self.sample_interval <= 0:
            raise ConfigError("sample_interval must be positive")
        if self.speed_kmh < 0:
            raise ConfigError("speed must be non-negative")
        if not (0 <= self.delay_window[0] < self.delay_window[1]):
            raise ConfigError(f"bad delay window {self.delay_window}")
        if self.geometry is None:
            object.__setattr__(
                self, "geometry", ArrayGeometry.half_wavelength(2, 2, self.wavelength)
            )

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def speed_mps(self) -> float:
        return self.speed_kmh / 3.6

    @property
    def n_t(self) -> int:
        return self.geometry.n_t

    @property
    def subcarrier_freqs(self) -> np.ndarray:
        """Absolute center frequency of each subcarrier, centered on f_c."""
        k = np.arange(self.k_total)
        return self.f_c + (k - self.k_total / 2) * self.subcarrier_spacing

    def with_speed(self, speed_kmh: float) -> "ChannelConfig":
        return replace(self, speed_kmh=speed_kmh)

    @staticmethod
    def desk() -> "ChannelConfig":
        return ChannelConfig()

    @staticmethod
    def paper() -> "ChannelConfig":
        """Full-scale stand-in: 32-element UPA, 96 subcarriers."""
        cfg = ChannelConfig(k_total=96, n_paths=20)
        return replace(cfg, geometry=ArrayGeometry.half_wavelength(8, 4, cfg.wavelength))


@dataclass
class MultipathParams:
    """One draw of the block-stationary path geometry."""

    gains: np.ndarray  # complex [M], sum |gain|^2 == 1
    delays: np.ndarray  # seconds [M]
    dopplers: np.ndarray  # Hz [M]
    azimuths: np.ndarray  # radians [M]
    elevations: np.ndarray  # radians [M]
    velocity_angles: np.ndarray  # radians [M]
    steering: np.ndarray  # complex [M, N_t], cached array responses


@dataclass
class CsiSequence:
    """CSI frames over time: complex [T, N_t, K_total]."""

    frames: np.ndarray
    speed_kmh: float
    sample_interval: float
    f_c: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def sample_paths(cfg: ChannelConfig, rng: np.random.Generator) -> MultipathParams:
    """Draw one multipath geometry.

    Delays are uniform in the configured window with an exponential
    power-delay profile over excess delay; the power vector is normalized
    per draw so the total channel power is exactly one. With `los` set,
    path 1 sits at the window start and carries the Rician fraction
    k/(k+1) of the power.
    """
    m = cfg.n_paths
    lo, hi = cfg.delay_window
    delays = rng.uniform(lo, hi, size=m)
    if cfg.los:
        delays[0] = lo
    weights = np.exp(-(delays - lo) / cfg.delay_rms)
    if cfg.los and m > 1:
        k = cfg.rician_k
        powers = np.empty(m)
        powers[0] = k / (k + 1)
        rest = weights[1:] / weights[1:].sum()
        powers[1:] = rest / (k + 1)
    else:
        powers = weights / weights.sum()
    phases = rng.uniform(0, 2 * np.pi, size=m)
    gains = np.sqrt(powers) * np.exp(1j * phases)

    azimuths = rng.uniform(-np.pi, np.pi, size=m)
    elevations = rng.uniform(0, np.pi, size=m)
    velocity_angles = rng.uniform(-np.pi, np.pi, size=m)
    dopplers = doppler_shift(cfg.speed_mps, cfg.wavelength, velocity_angles)
    steering = np.stack(
        [steering_vector(cfg.geometry, az, el, cfg.wavelength) for az, el in zip(azimuths, elevations)]
    )
    return MultipathParams(gains, delays, dopplers, azimuths, elevations, velocity_angles, steering)


def csi_frame(paths: MultipathParams, cfg: ChannelConfig, t: float) -> np.ndarray:
    """Channel matrix [N_t, K_total] at absolute time t (seconds)."""
    f_k = cfg.subcarrier_freqs
    phase = 2 * np.pi * (paths.dopplers[:, None] * t - paths.delays[:, None] * f_k[None, :])
    coeff = paths.gains[:, None] * np.exp(1j * phase)  # [M, K]
    return paths.steering.T @ coeff  # [N_t, K]


def generate_sequence(cfg: ChannelConfig, rng: np.random.Generator, n_frames: int) -> CsiSequence:
    """T consecutive frames at t = 0, dt, ..., (T-1) dt over one path draw."""
    if n_frames < 1:
        raise ConfigError(f"need at least one frame, got {n_frames}")
    paths = sample_paths(cfg, rng)
    frames = np.stack(
        [csi_frame(paths, cfg, i * cfg.sample_interval) for i in range(n_frames)]
    )
    return CsiSequence(frames, cfg.speed_kmh, cfg.sample_interval, cfg.f_c)


def add_awgn(frames, snr_db, rng: np.random.Generator):
    """Add circular complex white noise at the requested SNR.

    Noise power is `mean |H|^2 / 10^(snr/10)` measured on the input.
    `snr_db=None` means noiseless (identity). Accepts a CsiSequence or a
    complex ndarray and returns the same kind.
    """
    if isinstance(frames, CsiSequence):
        noisy = add_awgn(frames.frames, snr_db, rng)
        return CsiSequence(noisy, frames.speed_kmh, frames.sample_interval, frames.f_c)
    if snr_db is None:
        return frames.copy()
    sig_power = np.mean(np.abs(frames) ** 2)
    noise_power = sig_power / 10.0 ** (snr_db / 10.0)
    scale = np.sqrt(noise_power / 2.0)
    noise = scale * (rng.standard_normal(frames.shape) + 1j * rng.standard_normal(frames.shape))
    return frames + noise
