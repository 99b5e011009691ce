"""Feature extraction and epipolar correlation volumes.

Matching features live on a grid at 1/8 of the image resolution. Grid
coordinate (j, i) corresponds to full-resolution pixel (8j, 8i), which is
exactly the mapping induced by dividing the intrinsics by 8. Correlation
between a target pixel and a continuous source location is a scaled dot
product of feature vectors, with the source features sampled bilinearly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import CameraIntrinsics, DepthMap, PixelCoord, RigidPose, project_points

# Depth hypotheses are clamped here to keep the projection well-defined.
MIN_HYPOTHESIS_DEPTH = 0.05

# Projection roundoff can push a coordinate a few ulps past the grid border;
# locations this close to the boundary still count as inside.
EDGE_EPS = 1e-9


class BadDimensions(ValueError):
    """Image dimensions not divisible by 8."""


class OutOfBounds(ValueError):
    """Requested grid coordinate lies outside the feature grid."""


class FeatureGrid:
    """Dense feature vectors on a regular grid, bilinearly sampleable."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError("feature grid must have shape (H, W, F)")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature grid must be finite")
        self.values = values

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def sample(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear sample at continuous grid coordinates.

        Returns (features (..., F), inside mask). Out-of-bounds locations
        return zero vectors and inside=False.
        """
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        inside = (
            (u >= -EDGE_EPS) & (u <= self.width - 1 + EDGE_EPS)
            & (v >= -EDGE_EPS) & (v <= self.height - 1 + EDGE_EPS)
        )
        uc = np.clip(u, 0, self.width - 1)
        vc = np.clip(v, 0, self.height - 1)
        u0 = np.clip(np.floor(uc).astype(int), 0, self.width - 2) if self.width > 1 else np.zeros_like(uc, dtype=int)
        v0 = np.clip(np.floor(vc).astype(int), 0, self.height - 2) if self.height > 1 else np.zeros_like(vc, dtype=int)
        fu = uc - u0
        fv = vc - v0
        vals = self.values
        out = (
            vals[v0, u0] * ((1 - fu) * (1 - fv))[..., None]
            + vals[v0, np.minimum(u0 + 1, self.width - 1)] * (fu * (1 - fv))[..., None]
            + vals[np.minimum(v0 + 1, self.height - 1), u0] * ((1 - fu) * fv)[..., None]
            + vals[np.minimum(v0 + 1, self.height - 1), np.minimum(u0 + 1, self.width - 1)]
            * (fu * fv)[..., None]
        )
        return np.where(inside[..., None], out, 0.0), inside


@dataclass(frozen=True)
class MonocularPyramid:
    """Context features at 1/2, 1/4 and 1/8 resolution."""

    level2: FeatureGrid
    level4: FeatureGrid
    level8: FeatureGrid


@dataclass(frozen=True)
class HypothesisSet:
    """Linearly spaced relative depth offsets, symmetric about zero."""

    count: int = 41
    spacing: float = 0.1

    def __post_init__(self):
        if self.count < 1 or self.count % 2 == 0:
            raise ValueError("hypothesis count must be odd and positive")
        if self.spacing <= 0:
            raise ValueError("hypothesis spacing must be positive")

    @property
    def offsets(self) -> np.ndarray:
        half = self.count // 2
        return (np.arange(self.count) - half) * self.spacing


class CorrelationVolume:
    """Per-pixel correlation scores: (H, W, n_hypotheses, 3, 3)."""

    def __init__(self, scores: np.ndarray, hypotheses: HypothesisSet):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 5 or scores.shape[3:] != (3, 3):
            raise ValueError("scores must have shape (H, W, n, 3, 3)")
        if not np.all(np.isfinite(scores)):
            raise ValueError("correlation scores must be finite")
        self.scores = scores
        self.hypotheses = hypotheses

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    def flattened(self) -> np.ndarray:
        """(H, W, n*9) layout with the patch fastest-varying."""
        h, w = self.scores.shape[:2]
        return self.scores.reshape(h, w, -1)


def _check_dims(image: np.ndarray) -> tuple[int, int]:
    h, w = image.shape[:2]
    if h % 8 or w % 8:
        raise BadDimensions(f"image dimensions ({h}, {w}) must be divisible by 8")
    return h, w


def _to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ np.array([0.299, 0.587, 0.114])


class DescriptorEncoder:
    """Hand-crafted matching descriptor; no learned parameters.

    Band-pass intensity, scaled gradients and band-pass color at two
    smoothing scales, L2-normalized per pixel, subsampled at stride 8.
    Smoothing keeps the fields slowly varying relative to the stride so
    bilinear interpolation on the grid approximates the continuous
    descriptor; normalization makes the correlation score behave like a
    cosine similarity, which is what sub-pixel epipolar matching needs.
    """

    def __init__(self, sigma_fine: float = 3.0, sigma_coarse: float = 6.0):
        if sigma_fine <= 0 or sigma_coarse <= 0:
            raise ValueError("descriptor scales must be positive")
        self.sigma_fine = sigma_fine
        self.sigma_coarse = sigma_coarse

    @property
    def channels(self) -> int:
        return 12

    def extract_features(self, image: np.ndarray) -> FeatureGrid:
        _check_dims(image)
        image = np.asarray(image, dtype=np.float64)
        gray = _to_gray(image)
        planes = []
        for sigma in (self.sigma_fine, self.sigma_coarse):
            smooth = gaussian_filter(gray, sigma, mode="nearest")
            gy, gx = np.gradient(smooth)
            band = smooth - gaussian_filter(smooth, 2.0 * sigma, mode="nearest")
            planes += [band, gx * sigma, gy * sigma]
            for c in range(3):
                channel = gray if image.ndim == 2 else image[..., c]
                ch = gaussian_filter(channel, sigma, mode="nearest")
                planes.append(ch - gaussian_filter(ch, 2.0 * sigma, mode="nearest"))
        stack = np.stack(planes, axis=-1)
        norms = np.linalg.norm(stack, axis=-1, keepdims=True)
        stack = stack / np.maximum(norms, 1e-6)
        return FeatureGrid(stack[::8, ::8, :])

    def extract_monocular(self, image: np.ndarray) -> MonocularPyramid:
        h, w = _check_dims(image)
        gray = _to_gray(image)
        levels = []
        for s in (2, 4, 8):
            sm = gaussian_filter(gray, s / 2.0, mode="nearest")
            gy, gx = np.gradient(sm)
            feat = np.stack([sm - 0.5, gx * s, gy * s], axis=-1)
            levels.append(FeatureGrid(feat[::s, ::s, :]))
        return MonocularPyramid(*levels)


def correlation_score(
    Ft: FeatureGrid, Fs: FeatureGrid, q_t: PixelCoord, q_s: PixelCoord
) -> float:
    """Scaled dot product between a target grid cell and a bilinear source sample."""
    it, jt = int(round(q_t.v)), int(round(q_t.u))
    if not (0 <= jt < Ft.width and 0 <= it < Ft.height):
        raise OutOfBounds(f"target coordinate ({q_t.u}, {q_t.v}) outside grid")
    fs, _ = Fs.sample(np.array(q_s.u), np.array(q_s.v))
    return float((Ft.values[it, jt] * fs).sum() / np.sqrt(Ft.channels))


def build_correlation_volume(
    Ft: FeatureGrid,
    Fs: FeatureGrid,
    depth: DepthMap,
    K_8: CameraIntrinsics,
    P: RigidPose,
    hyp: HypothesisSet = HypothesisSet(),
    d_min: float = MIN_HYPOTHESIS_DEPTH,
) -> CorrelationVolume:
    """Correlation scores along per-pixel depth hypothesis sweeps.

    For every grid pixel and every offset, the pixel is reprojected into the
    source view at depth max(current + offset, d_min) and a 3x3 patch of
    correlation scores is sampled at unit-pixel displacements around the
    projected location. Patches that project behind the source camera or
    outside the source grid contribute zeros.
    """
    h, w = depth.values.shape
    if (Ft.height, Ft.width) != (h, w):
        raise ValueError("feature grid and depth map dimensions differ")
    n = hyp.count
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)  # (N, 2)
    base = depth.values.ravel()
    scores = np.zeros((h * w, n, 3, 3))
    offs = hyp.offsets
    sqrt_f = np.sqrt(Ft.channels)
    ft_flat = Ft.values.reshape(h * w, -1)
    for k, delta in enumerate(offs):
        d = np.maximum(base + delta, d_min)
        uv_s, z, in_front = project_points(uv, d, K_8, P)
        for a in (-1, 0, 1):
            for b in (-1, 0, 1):
                fs, inside = Fs.sample(uv_s[:, 0] + b, uv_s[:, 1] + a)
                val = (ft_flat * fs).sum(axis=1) / sqrt_f
                val = np.where(in_front & inside, val, 0.0)
                scores[:, k, a + 1, b + 1] = val
    return CorrelationVolume(scores.reshape(h, w, n, 3, 3), hyp)
