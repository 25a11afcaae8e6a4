"""Dataset assembly and the CSID v1 file format.

Every sample is generated from its own RNG stream keyed by
(seed, split, sample index), so generation is deterministic and
independent of ordering or worker count. Frames are stored clean; noise
is injected downstream at train/eval time.

CSID v1 layout (little-endian):
    magic   4 bytes  b"CSID"
    u32     version (1)
    u32     n_samples, n_frames (T), n_t, k_total
    f64     f_c, sample_interval
    f64     speed_kmh[n_samples]
    c128    frames, row-major [sample][t][antenna][subcarrier]
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError
from ..numerics.rng import stream
from .simulate import ChannelConfig, generate_sequence

_MAGIC = b"CSID"
_VERSION = 1
_SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class DatasetSpec:
    """Sample counts and speed protocol for the three splits."""

    history_len: int = 16  # L
    horizon: int = 4  # P
    train_samples: int = 2048
    val_samples: int = 256
    test_samples_per_speed: int = 256
    speed_min_kmh: float = 10.0
    speed_max_kmh: float = 100.0
    test_speed_count: int = 10

    def __post_init__(self):
        if self.history_len < 1 or self.horizon < 1:
            raise ConfigError("history_len and horizon must be positive")
        if min(self.train_samples, self.val_samples, self.test_samples_per_speed) < 1:
            raise ConfigError("sample counts must be positive")
        if not 0 <= self.speed_min_kmh <= self.speed_max_kmh:
            raise ConfigError(f"bad speed range [{self.speed_min_kmh}, {self.speed_max_kmh}]")

    @property
    def n_frames(self) -> int:
        return self.history_len + self.horizon

    @property
    def test_speed_grid(self) -> np.ndarray:
        return np.linspace(self.speed_min_kmh, self.speed_max_kmh, self.test_speed_count)

    @staticmethod
    def desk() -> "DatasetSpec":
        return DatasetSpec()

    @staticmethod
    def paper() -> "DatasetSpec":
        return DatasetSpec(train_samples=8000, val_samples=1000, test_samples_per_speed=1000)


@dataclass
class CsiDataset:
    """In-memory split: clean frames plus per-sample generation speed."""

    frames: np.ndarray  # complex128 [S, T, N_t, K_total]
    speeds_kmh: np.ndarray  # [S]
    f_c: float
    sample_interval: float

    @property
    def n_samples(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


def _sample_speed(spec: DatasetSpec, split: str, index: int, rng) -> float:
    if split == "test":
        return float(spec.test_speed_grid[index // spec.test_samples_per_speed])
    return float(rng.uniform(spec.speed_min_kmh, spec.speed_max_kmh))


def split_size(spec: DatasetSpec, split: str) -> int:
    if split == "train":
        return spec.train_samples
    if split == "val":
        return spec.val_samples
    if split == "test":
        return spec.test_samples_per_speed * spec.test_speed_count
    raise ConfigError(f"unknown split {split!r}; expected train/val/test")


def build_dataset(
    cfg: ChannelConfig,
    spec: DatasetSpec,
    split: str,
    seed: int,
    workers: int = 1,
) -> CsiDataset:
    """Generate one split. Deterministic per (seed, split, index)."""
    n = split_size(spec, split)
    salt = _SPLITS[split]
    t_frames = spec.n_frames
    frames = np.empty((n, t_frames, cfg.n_t, cfg.k_total), dtype=np.complex128)
    speeds = np.empty(n)

    def make(i: int) -> None:
        rng = stream(seed, salt, i)
        speed = _sample_speed(spec, split, i, rng)
        seq = generate_sequence(cfg.with_speed(speed), rng, t_frames)
        frames[i] = seq.frames
        speeds[i] = speed

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(make, range(n)))
    else:
        for i in range(n):
            make(i)
    return CsiDataset(frames, speeds, cfg.f_c, cfg.sample_interval)


def write_csid(path, ds: CsiDataset) -> None:
    s, t, n_t, k_total = ds.frames.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<5I", _VERSION, s, t, n_t, k_total))
            fh.write(struct.pack("<2d", ds.f_c, ds.sample_interval))
            fh.write(ds.speeds_kmh.astype("<f8").tobytes())
            fh.write(ds.frames.astype("<c16").tobytes())
    except OSError as e:
        raise DataError(f"cannot write dataset to {path}: {e}") from e


def read_csid(path) -> CsiDataset:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError(f"cannot read dataset from {path}: {e}") from e
    if len(raw) < 4 + 20 + 16 or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a CSID file")
    version, s, t, n_t, k_total = struct.unpack_from("<5I", raw, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported CSID version {version}")
    f_c, dt = struct.unpack_from("<2d", raw, 24)
    off = 40
    speeds = np.frombuffer(raw, dtype="<f8", count=s, offset=off).copy()
    off += 8 * s
    expect = s * t * n_t * k_total
    frames = np.frombuffer(raw, dtype="<c16", count=-1, offset=off)
    if frames.size != expect:
        raise DataError(
            f"{path}: truncated or oversized payload ({frames.size} values, expected {expect})"
        )
    return CsiDataset(frames.reshape(s, t, n_t, k_total).copy(), speeds, f_c, dt)
