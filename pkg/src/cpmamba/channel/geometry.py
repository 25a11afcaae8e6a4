"""Uniform planar array geometry and per-path response."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

SPEED_OF_LIGHT = 2.99792458e8  # m/s


@dataclass(frozen=True)
class ArrayGeometry:
    """Transmit UPA: n_h x n_v elements spaced d_x/d_z meters apart."""

    n_h: int
    n_v: int
    d_x: float
    d_z: float

    def __post_init__(self):
        if self.n_h < 1 or self.n_v < 1:
            raise ConfigError(f"array needs at least one element per axis, got {self.n_h}x{self.n_v}")
        if self.d_x <= 0 or self.d_z <= 0:
            raise ConfigError("element spacings must be positive")

    @property
    def n_t(self) -> int:
        return self.n_h * self.n_v

    @staticmethod
    def half_wavelength(n_h: int, n_v: int, wavelength: float) -> "ArrayGeometry":
        return ArrayGeometry(n_h, n_v, wavelength / 2, wavelength / 2)


def steering_vector(geom: ArrayGeometry, azimuth: float, elevation: float, wavelength: float) -> np.ndarray:
    """Array response a(theta, phi): Kronecker product of the horizontal and
    vertical linear-array responses. Every entry has unit modulus.
    """
    phase_h = 2 * np.pi / wavelength * geom.d_x * np.sin(elevation) * np.cos(azimuth)
    phase_v = 2 * np.pi / wavelength * geom.d_z * np.sin(elevation) * np.sin(azimuth)
    a_h = np.exp(1j * phase_h * np.arange(geom.n_h))
    a_v = np.exp(1j * phase_v * np.arange(geom.n_v))
    return np.kron(a_h, a_v)


def doppler_shift(speed_mps: float, wavelength: float, velocity_angle: float) -> float:
    """Doppler frequency (Hz) for a path arriving at `velocity_angle` from
    the velocity vector: (v / lambda) * cos(angle).
    """
    if speed_mps < 0:
        raise ConfigError(f"speed must be non-negative, got {speed_mps}")
    return speed_mps / wavelength * np.cos(velocity_angle)
