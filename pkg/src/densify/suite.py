"""The committed synthetic benchmark suite: 8 fixed scenes with fixed seeds.

These scenes back every statistical test and trend check in the test suite.
They are small enough to run on a laptop CPU but textured and geometrically
varied enough for epipolar matching to carry signal.

Most cases are "tier" scenes: two fronto-parallel textured billboards in
separate horizontal bands, observed under a lateral translation. This layout
keeps every evaluated cell's material inside the source frame (the tiers
extend beyond the image except for a right-hand margin sized to the largest
disparity), gives an exactly-known depth everywhere, and produces a large
mean-fill initialization error, which makes convergence of the refinement
loop easy to measure. The slant case pairs a tilted plane with a fixating
orbit and is the designated sequence for the temporal/spatial/pose-noise
trend sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, RigidPose
from .scene import Billboard, Plane, SceneSpec, Trajectory

SUITE_SEED = 20240811


@dataclass(frozen=True)
class SuiteCase:
    name: str
    scene: SceneSpec
    trajectory: Trajectory
    intrinsics: CameraIntrinsics
    seed: int


def _camera(size: int, focal_scale: float) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=focal_scale * size, fy=focal_scale * size,
        cx=size / 2.0, cy=size / 2.0, width=size, height=size,
    )


def _texture_scale(z: float, fx: float, wavelength_px: float = 20.0) -> float:
    """Noise frequency placing one texture period at ~wavelength_px pixels."""
    return 1.0 / (2.0 * wavelength_px * z / fx)


def _translate_trajectory(n_frames: int, steps: list[float]) -> Trajectory:
    """Camera slides along +x looking down +z.

    The per-interval steps are front-loaded: a large first baseline keeps
    the correlation peak well-conditioned even for the earliest target
    frame. The step list is cycled if the trajectory is longer.
    """
    poses = [RigidPose.identity()]
    x = 0.0
    for i in range(n_frames - 1):
        x += steps[i % len(steps)]
        poses.append(RigidPose(np.eye(3), np.array([x, 0.0, 0.0])))
    return Trajectory(timestamps=tuple(float(i) / 10.0 for i in range(n_frames)),
                      poses=tuple(poses))


def _orbit_trajectory(n_frames: int, focus_depth: float, base_arc: float,
                      decay: float = 0.6, period: int = 5) -> Trajectory:
    """Cameras on a circle around (0, 0, focus_depth), always facing it.

    Arc increments shrink geometrically within each period so that depth
    frames recur before the view drifts too far.
    """
    poses = []
    theta = 0.0
    for i in range(n_frames):
        if i > 0:
            theta += (base_arc / focus_depth) * decay ** ((i - 1) % period)
        c, s = np.cos(theta), np.sin(theta)
        R = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
        t = np.array([focus_depth * np.sin(theta), 0.0,
                      focus_depth - focus_depth * np.cos(theta)])
        poses.append(RigidPose(R, t))
    return Trajectory(timestamps=tuple(float(i) / 10.0 for i in range(n_frames)),
                      poses=tuple(poses))


def _tier_scene(K: CameraIntrinsics, z_near: float, z_far: float,
                seed: int, gap_cells: float = 4.0) -> SceneSpec:
    """Two fronto-parallel tiers in horizontal bands, far on top.

    Each tier extends past the left/top/bottom image borders, so the only
    in-frame silhouettes are the two seam edges around the central gap. The
    right edge sits at the frame-0 (source) image border minus half a cell;
    material any target frame needs therefore always projects inside the
    source frame for any baseline reachable from frame 0.
    """
    grid = K.width / 8.0
    prims = []
    for z, rows, tier_seed in [
        (z_far, (-4.0, grid / 2.0 - gap_cells / 2.0), seed),
        (z_near, (grid / 2.0 + gap_cells / 2.0, grid + 4.0), seed + 1),
    ]:
        x0 = (-5.0 * 8.0 - K.cx) * z / K.fx
        x1 = ((grid - 1.5) * 8.0 - K.cx) * z / K.fx
        y0 = (rows[0] * 8.0 - K.cy) * z / K.fy
        y1 = (rows[1] * 8.0 - K.cy) * z / K.fy
        prims.append(Billboard(
            center=((x0 + x1) / 2.0, (y0 + y1) / 2.0, z),
            half_extents=((x1 - x0) / 2.0, (y1 - y0) / 2.0),
            texture_seed=tier_seed,
            texture_scale=_texture_scale(z, K.fx),
            texture_octaves=4,
        ))
    return SceneSpec(primitives=tuple(prims))


def _tier_case(name: str, size: int, z_near: float, z_far: float,
               steps: list[float], seed: int, n_frames: int,
               gap_cells: float = 4.0) -> SuiteCase:
    K = _camera(size, 3.0)
    return SuiteCase(
        name=name,
        scene=_tier_scene(K, z_near, z_far, seed, gap_cells=gap_cells),
        trajectory=_translate_trajectory(n_frames, steps),
        intrinsics=K,
        seed=SUITE_SEED + seed,
    )


def benchmark_suite(n_frames: int = 6) -> list[SuiteCase]:
    slant_K = _camera(96, 2.0)
    slant_angle = np.deg2rad(25.0)
    cases = [
        _tier_case("tiers-64", 64, 1.0, 1.9,
                   [0.08, 0.015, 0.015, 0.015], seed=10, n_frames=n_frames,
                   gap_cells=2.0),
        SuiteCase(
            name="slant-96",
            scene=SceneSpec(primitives=(
                Plane(point=(0.0, 0.0, 2.0),
                      normal=(np.sin(slant_angle), 0.0, -np.cos(slant_angle)),
                      texture_seed=12,
                      texture_scale=_texture_scale(2.0, slant_K.fx, 30.0) * 1.5,
                      texture_octaves=4),
            )),
            trajectory=_orbit_trajectory(n_frames, focus_depth=2.0, base_arc=0.20),
            intrinsics=slant_K,
            seed=SUITE_SEED + 12,
        ),
        _tier_case("tiers-128", 128, 1.0, 1.9,
                   [0.08, 0.015, 0.015, 0.015], seed=20, n_frames=n_frames),
        _tier_case("tiers-160", 160, 0.9, 1.7,
                   [0.08, 0.02, 0.02, 0.02], seed=30, n_frames=n_frames),
        _tier_case("tiers-192", 192, 1.1, 2.0,
                   [0.08, 0.03, 0.03, 0.03], seed=40, n_frames=n_frames),
        _tier_case("tiers-256a", 256, 1.0, 1.9,
                   [0.08, 0.04, 0.04, 0.04], seed=50, n_frames=n_frames),
        _tier_case("tiers-256b", 256, 1.0, 2.0,
                   [0.08, 0.04, 0.04, 0.04], seed=60, n_frames=n_frames),
        _tier_case("tiers-256c", 256, 1.1, 2.0,
                   [0.08, 0.04, 0.04, 0.04], seed=70, n_frames=n_frames),
    ]
    return cases
