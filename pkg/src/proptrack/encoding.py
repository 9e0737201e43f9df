"""Sine-cosine positional encodings for anchor boxes and scalar confidence scores."""

from __future__ import annotations

import math

import numpy as np

from .geometry import BoundingBox

TEMPERATURE = 10000.0
COORD_SCALE = 2.0 * math.pi
# Scores use a half-turn so s=0 and s=1 stay distinct on the lowest frequency.
SCORE_SCALE = math.pi


def encode_scalar(x: float, dim: int, scale: float = COORD_SCALE) -> np.ndarray:
    """Interleaved (sin, cos) ladder over `dim` slots.

    Pair k uses frequency TEMPERATURE**(2k/dim); the input is premultiplied
    by `scale` so values in [0, 1] sweep the lowest frequency once.
    """
    if dim <= 0 or dim % 2 != 0:
        raise ValueError(f"encoding dim must be a positive even number, got {dim}")
    k = np.arange(dim // 2, dtype=np.float64)
    freqs = TEMPERATURE ** (2.0 * k / dim)
    angles = x * scale / freqs
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def encode_box(b: BoundingBox, dim: int) -> np.ndarray:
    """Concatenated scalar encodings of (cx, cy, w, h), dim/4 slots each."""
    if dim % 4 != 0:
        raise ValueError(f"box encoding dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    return np.concatenate([
        encode_scalar(b.cx, quarter),
        encode_scalar(b.cy, quarter),
        encode_scalar(b.w, quarter),
        encode_scalar(b.h, quarter),
    ])


def encode_boxes(boxes: np.ndarray, dim: int) -> np.ndarray:
    """Vectorized encode_box over an (N, 4) center-form array."""
    if dim % 4 != 0:
        raise ValueError(f"box encoding dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    k = np.arange(quarter // 2, dtype=np.float64)
    freqs = TEMPERATURE ** (2.0 * k / quarter)
    angles = boxes[:, :, None] * COORD_SCALE / freqs[None, None, :]  # (N, 4, q/2)
    out = np.empty((boxes.shape[0], 4, quarter), dtype=np.float64)
    out[:, :, 0::2] = np.sin(angles)
    out[:, :, 1::2] = np.cos(angles)
    return out.reshape(boxes.shape[0], dim)


def encode_score(s: float, dim: int) -> np.ndarray:
    """Scalar encoding of a confidence score in [0, 1]."""
    if not (0.0 <= s <= 1.0):
        raise ValueError(f"score must lie in [0, 1], got {s}")
    return encode_scalar(s, dim, scale=SCORE_SCALE)
