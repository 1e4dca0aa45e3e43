"""Frequency-domain image preprocessing.

Each spatial channel is transformed with an orthonormal 2-D DCT-II and,
when frequency input is enabled, appended to the stack after a
1/sqrt(H*W) rescale that keeps coefficient magnitudes comparable to the
[0, 1] spatial channels.  The orthonormal convention makes the
transform energy-preserving and exactly invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

SPATIAL = "spatial"
FREQUENCY = "frequency"


@dataclass(frozen=True)
class ImageStack:
    """Network input channels plus per-channel provenance tags."""

    channels: np.ndarray  # (C, H, W), spatial channels in [0, 1]
    tags: tuple[str, ...]

    def __post_init__(self):
        if self.channels.ndim != 3 or len(self.tags) != self.channels.shape[0]:
            raise ValueError("channels must be (C, H, W) with one tag per channel")


def dct2(channel: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of a single channel."""
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 2 or min(channel.shape) < 1:
        raise ValueError("channel must be a non-empty 2-D array")
    return scipy.fft.dctn(channel, type=2, norm="ortho")


def idct2(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of dct2 under the same orthonormal convention."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or min(coeffs.shape) < 1:
        raise ValueError("coeffs must be a non-empty 2-D array")
    return scipy.fft.idctn(coeffs, type=2, norm="ortho")


def make_input_stack(image: np.ndarray, use_frequency: bool) -> ImageStack:
    """Assemble the network input from spatial channels.

    With use_frequency the DCT of every spatial channel is appended,
    doubling the channel count; otherwise the stack is the identity.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    tags = (SPATIAL,) * image.shape[0]
    if not use_frequency:
        return ImageStack(channels=image.copy(), tags=tags)
    scale = 1.0 / np.sqrt(image.shape[1] * image.shape[2])
    freq = np.stack([dct2(ch) * scale for ch in image])
    return ImageStack(
        channels=np.concatenate([image, freq]),
        tags=tags + (FREQUENCY,) * image.shape[0],
    )
