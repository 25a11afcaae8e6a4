"""Synthetic multipath MIMO-OFDM channel generation."""

from .dataset import CsiDataset, DatasetSpec, build_dataset, read_csid, split_size, write_csid
from .geometry import SPEED_OF_LIGHT, ArrayGeometry, doppler_shift, steering_vector
from .simulate import (
    ChannelConfig,
    CsiSequence,
    MultipathParams,
    add_awgn,
    csi_frame,
    generate_sequence,
    sample_paths,
)

__all__ = [
    "ArrayGeometry",
    "ChannelConfig",
    "CsiDataset",
    "CsiSequence",
    "DatasetSpec",
    "MultipathParams",
    "SPEED_OF_LIGHT",
    "add_awgn",
    "build_dataset",
    "csi_frame",
    "doppler_shift",
    "generate_sequence",
    "read_csid",
    "sample_paths",
    "split_size",
    "steering_vector",
    "write_csid",
]
