"""Convex upsampling from 1/8 to full resolution.

Each 2x upsampling step assigns to fine pixel (2i+a, 2j+b) a convex
combination of the 3x3 coarse neighborhood centered on coarse cell (i, j).
Weights are softmax-normalized, so the output range never leaves the input
range. Border neighborhoods use edge replication.
"""

from __future__ import annotations

import numpy as np

from .geometry import DepthMap


class DimensionMismatch(ValueError):
    """Mask and depth map dimensions disagree."""


def softmax_masks(logits: np.ndarray) -> np.ndarray:
    """Normalize mask logits of shape (H, W, 2, 2, 9) over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 5 or logits.shape[2:] != (2, 2, 9):
        raise DimensionMismatch("mask logits must have shape (H, W, 2, 2, 9)")
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def uniform_masks(height: int, width: int) -> np.ndarray:
    """All-equal convex weights, i.e. a 3x3 box filter per fine pixel."""
    return np.full((height, width, 2, 2, 9), 1.0 / 9.0)


def _neighborhoods(coarse: np.ndarray) -> np.ndarray:
    """(H, W, 9) stack of the 3x3 edge-replicated neighborhood of each cell."""
    padded = np.pad(coarse, 1, mode="edge")
    h, w = coarse.shape
    stack = [
        padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
    ]
    return np.stack(stack, axis=-1)


def convex_upsample(coarse: DepthMap | np.ndarray, mask: np.ndarray) -> np.ndarray:
    """2x upsample a coarse map with per-fine-pixel convex weights.

    Args:
        coarse: (H, W) values or a DepthMap.
        mask: normalized weights of shape (H, W, 2, 2, 9); weight k in the
            last axis addresses neighbor (dy, dx) = (k // 3 - 1, k % 3 - 1).

    Returns:
        (2H, 2W) array.
    """
    values = coarse.values if isinstance(coarse, DepthMap) else np.asarray(coarse, dtype=np.float64)
    h, w = values.shape
    if mask.shape != (h, w, 2, 2, 9):
        raise DimensionMismatch(
            f"mask shape {mask.shape} does not match coarse map ({h}, {w})"
        )
    neigh = _neighborhoods(values)  # (H, W, 9)
    fine_blocks = np.einsum("hwabk,hwk->hwab", mask, neigh)
    return fine_blocks.transpose(0, 2, 1, 3).reshape(2 * h, 2 * w)


def upsample_to_full(depth8: DepthMap | np.ndarray, masks: list[np.ndarray] | None = None) -> np.ndarray:
    """Three cascaded 2x convex upsampling steps: 1/8 -> full resolution.

    With masks=None every step uses uniform weights, which is the behavior of
    an upsampling network with all-zero mask logits.
    """
    values = depth8.values if isinstance(depth8, DepthMap) else np.asarray(depth8, dtype=np.float64)
    for level in range(3):
        h, w = values.shape
        mask = uniform_masks(h, w) if masks is None else masks[level]
        values = convex_upsample(values, mask)
    return values
