"""Iterative fusion of correlation, monocular and sparse-depth cues.

All state lives at 1/8 resolution. Each iteration rebuilds the correlation
volume around the current depth estimate, computes the sparse-depth update,
lets an update operator fuse the cues into a per-pixel depth correction, and
clamps the result to stay strictly positive.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .encoding import (
    MIN_HYPOTHESIS_DEPTH,
    CorrelationVolume,
    FeatureGrid,
    HypothesisSet,
    build_correlation_volume,
)
from .geometry import CameraIntrinsics, DepthMap, RigidPose

DEFAULT_ITERATIONS = 10
DEFAULT_FALLBACK_DEPTH = 3.0


class DimensionMismatch(ValueError):
    """Grids fed to the integrator do not share dimensions."""


@dataclass
class IntegratorState:
    hidden: np.ndarray  # (H, W, c_h)
    depth: DepthMap
    iteration: int = 0

    def __post_init__(self):
        if self.hidden.shape[:2] != self.depth.values.shape:
            raise DimensionMismatch("hidden state and depth dimensions differ")
        if not np.all(self.depth.values > 0):
            raise ValueError("integrator depth must be fully initialized (> 0)")


@dataclass
class DeltaMaps:
    delta_c: np.ndarray
    delta_d: np.ndarray
    delta_f: np.ndarray


def init_depth(sparse_grid: DepthMap, fallback: float = DEFAULT_FALLBACK_DEPTH) -> DepthMap:
    """Initial dense depth: sparse cells keep their value, the rest get the mean.

    With no sparse cells at all, every cell gets the fallback value.
    """
    if fallback <= 0:
        raise ValueError("fallback depth must be positive")
    values = sparse_grid.values.copy()
    if np.any(sparse_grid.valid):
        fill = float(values[sparse_grid.valid].mean())
    else:
        fill = fallback
    values[~sparse_grid.valid] = fill
    return DepthMap(values, np.ones_like(values, dtype=bool))


def depth_delta(sparse_grid: DepthMap, current: DepthMap) -> np.ndarray:
    """Sparse-depth update: measurement minus prediction where measured, else 0."""
    if sparse_grid.values.shape != current.values.shape:
        raise DimensionMismatch("sparse grid and current depth dimensions differ")
    return np.where(sparse_grid.valid, sparse_grid.values - current.values, 0.0)


class AnalyticOperator:
    """Training-free reference update operator.

    Where a sparse measurement exists the fused update injects it exactly.
    Elsewhere the update moves the estimate a damped step toward the
    correlation peak along the hypothesis sweep: the hypothesis whose central
    score is highest, refined to sub-spacing accuracy by fitting a parabola
    through the scores of that hypothesis and its two neighbours. Ties
    (within tie_eps of the maximum) resolve to the smallest |offset| and
    suppress the refinement, so flat sweeps -- degenerate poses,
    all-out-of-bounds projections -- hold the estimate instead of jumping to
    the sweep boundary.

    The hidden state stores the previous peak offset and a per-cell step
    factor. When the proposed move reverses direction the cell is bracketing
    its fixed point, so its step factor halves; this freezes post-convergence
    oscillation instead of letting converged cells bounce between adjacent
    hypotheses.
    """

    kind = "analytic-reference"
    hidden_channels = 2

    def __init__(self, damping: float = 0.33, tie_eps: float = 0.002,
                 backoff: float = 0.5):
        if not (0 < damping <= 1):
            raise ValueError("damping must be in (0, 1]")
        if not (0 < backoff <= 1):
            raise ValueError("backoff must be in (0, 1]")
        self.damping = damping
        self.tie_eps = tie_eps
        self.backoff = backoff

    def __call__(
        self,
        hidden: np.ndarray,
        volume: CorrelationVolume,
        mono8: FeatureGrid | None,
        depth: DepthMap,
        delta_d: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        center = volume.scores[..., 1, 1]  # (H, W, n)
        offsets = volume.hypotheses.offsets
        n = offsets.size
        top = center.max(axis=2, keepdims=True)
        tied = center >= top - self.tie_eps
        best = np.argmin(np.where(tied, np.abs(offsets), np.inf), axis=2)
        # Sub-spacing peak refinement: parabola through the best hypothesis
        # and its neighbours. Degenerate (flat or edge-of-sweep) peaks and
        # tie-held cells keep the raw hypothesis offset.
        idx = np.clip(best, 1, n - 2)
        rows = np.indices(best.shape)
        s_minus = center[rows[0], rows[1], idx - 1]
        s_zero = center[rows[0], rows[1], idx]
        s_plus = center[rows[0], rows[1], idx + 1]
        curvature = s_minus - 2.0 * s_zero + s_plus
        with np.errstate(divide="ignore", invalid="ignore"):
            vertex = 0.5 * (s_minus - s_plus) / curvature
        sharp = curvature < -self.tie_eps
        vertex = np.where(sharp, np.clip(vertex, -0.5, 0.5), 0.0)
        vertex = np.where(best == idx, vertex, 0.0)
        raw = offsets[best] + vertex * volume.hypotheses.spacing
        if hidden.shape[2] < self.hidden_channels:
            hidden = np.zeros(raw.shape + (self.hidden_channels,))
        prev = hidden[..., 0]
        factor = np.where(hidden[..., 1] > 0, hidden[..., 1], self.damping)
        factor = np.where(raw * prev < 0, factor * self.backoff, factor)
        delta_c = factor * raw
        hidden = np.stack([raw, factor], axis=-1)
        has_sparse = delta_d != 0.0
        delta_f = np.where(has_sparse, delta_d, delta_c)
        return hidden, delta_c, delta_f


@dataclass
class IntegrationInputs:
    """Everything a refinement run needs besides its mutable state."""

    Ft: FeatureGrid
    Fs: FeatureGrid
    mono8: FeatureGrid | None
    sparse_grid: DepthMap
    K_8: CameraIntrinsics
    P_t_to_s: RigidPose
    hypotheses: HypothesisSet = field(default_factory=HypothesisSet)


def step(
    state: IntegratorState,
    volume: CorrelationVolume,
    mono8: FeatureGrid | None,
    sparse_grid: DepthMap,
    op,
    d_min: float = MIN_HYPOTHESIS_DEPTH,
) -> tuple[IntegratorState, DeltaMaps]:
    """One refinement iteration; returns the new state and the update maps."""
    shape = state.depth.values.shape
    if volume.scores.shape[:2] != shape or sparse_grid.values.shape != shape:
        raise DimensionMismatch("integrator inputs disagree on grid dimensions")
    if mono8 is not None and (mono8.height, mono8.width) != shape:
        raise DimensionMismatch("monocular features disagree on grid dimensions")
    delta_d = depth_delta(sparse_grid, state.depth)
    hidden, delta_c, delta_f = op(state.hidden, volume, mono8, state.depth, delta_d)
    # Anchor measured cells exactly: the fused update must reproduce the
    # measurement there even if the operator altered it.
    if op.kind == "analytic-reference":
        delta_f = np.where(sparse_grid.valid, sparse_grid.values - state.depth.values, delta_f)
    new_values = np.maximum(state.depth.values + delta_f, d_min)
    new_state = IntegratorState(
        hidden=hidden,
        depth=DepthMap(new_values, np.ones_like(new_values, dtype=bool)),
        iteration=state.iteration + 1,
    )
    return new_state, DeltaMaps(delta_c=delta_c, delta_d=delta_d, delta_f=delta_f)


def run(
    inputs: IntegrationInputs,
    n_iterations: int,
    op,
    init: DepthMap | None = None,
    hidden: np.ndarray | None = None,
    timings: dict | None = None,
) -> tuple[list[DepthMap], np.ndarray]:
    """Run the refinement loop, rebuilding the volume from the current depth.

    Returns the per-iteration depth estimates (length n_iterations) and the
    final hidden state. With n_iterations = 0 the list is empty and callers
    fall back to the initialization.
    """
    if n_iterations < 0:
        raise ValueError("iteration count must be >= 0")
    if init is None:
        init = init_depth(inputs.sparse_grid)
    if hidden is None:
        hidden = np.zeros(init.values.shape + (1,))
    state = IntegratorState(hidden=hidden, depth=init, iteration=0)
    history: list[DepthMap] = []
    for _ in range(n_iterations):
        t0 = time.monotonic()
        volume = build_correlation_volume(
            inputs.Ft, inputs.Fs, state.depth, inputs.K_8, inputs.P_t_to_s,
            inputs.hypotheses,
        )
        t1 = time.monotonic()
        state, _ = step(state, volume, inputs.mono8, inputs.sparse_grid, op)
        t2 = time.monotonic()
        if timings is not None:
            timings["volume"] = timings.get("volume", 0.0) + (t1 - t0)
            timings["integrate"] = timings.get("integrate", 0.0) + (t2 - t1)
        history.append(state.depth.copy())
    return history, state.hidden
