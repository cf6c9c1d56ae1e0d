# Copyright Contributors to the refsplat Project
# SPDX-License-Identifier: Apache-2.0
"""Multi-reference-frame dynamic Gaussian splatting."""

import json

from ._refsplat import (
    ConfigError,
    DataError,
    Error,
    InvalidStateError,
    NumericalError,
    RangeError,
    freeze_coefficient,
    procrustes_rotation,
    psnr,
    ransac_scale_shift,
    read_png,
    render,
    select_reference_frames,
    ssim,
)
from . import _refsplat

__all__ = [
    "ConfigError",
    "DataError",
    "Error",
    "InvalidStateError",
    "NumericalError",
    "RangeError",
    "config_defaults",
    "config_help",
    "config_hash",
    "freeze_coefficient",
    "procrustes_rotation",
    "psnr",
    "ransac_scale_shift",
    "read_png",
    "render",
    "select_reference_frames",
    "ssim",
    "synth",
    "train",
]


def config_defaults():
    """Every option as a flat dict of dotted keys."""
    return json.loads(_refsplat._config_defaults())


def config_help():
    return json.loads(_refsplat._config_help())


def config_hash(config=None):
    """Run-directory hash of a flat config dict; path keys do not contribute."""
    return _refsplat._config_hash(json.dumps(config or {}))


def synth(directory, config=None):
    """Writes a synthetic bundle and ground_truth.json; returns the ground truth summary."""
    return json.loads(_refsplat._synth(json.dumps(config or {}), str(directory)))


def train(bundle, checkpoint, config=None):
    """Initializes from a bundle, trains, writes the final checkpoint and returns a summary."""
    return json.loads(_refsplat._train(json.dumps(config or {}), str(bundle), str(checkpoint)))
