"""Small in-memory datasets for toy training and gradient checking."""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, RigidPose
from .scene import Plane, SceneSpec, Sphere, render_color, render_depth, sample_sparse
from .training import BufferFrame, TrainSample


def toy_dataset(n_scenes: int = 4, size: int = 48, n_points: int = 120,
                buffer_len: int = 2, seed: int = 7) -> list[TrainSample]:
    """Tiny textured scenes with one target view and a short source buffer."""
    if size % 8:
        raise ValueError("size must be divisible by 8")
    K = CameraIntrinsics(fx=2.0 * size, fy=2.0 * size, cx=size / 2.0,
                         cy=size / 2.0, width=size, height=size)
    rng = np.random.default_rng(seed)
    samples = []
    for s in range(n_scenes):
        z0 = 1.8 + 0.4 * rng.random()
        prims = [Plane(point=(0.0, 0.0, z0), normal=(0.0, 0.0, -1.0),
                       texture_seed=100 + 3 * s)]
        if s % 2:
            prims.append(Sphere(center=(0.2 * rng.standard_normal(),
                                        0.2 * rng.standard_normal(),
                                        z0 - 0.5),
                                radius=0.25, texture_seed=101 + 3 * s))
        scene = SceneSpec(primitives=tuple(prims))
        target_pose = RigidPose.identity()
        target_depth = render_depth(scene, target_pose, K)
        target_color = render_color(scene, target_pose, K)
        buffer = []
        for b in range(buffer_len):
            offset = np.array([0.12 * (b + 1), 0.0, 0.0])
            pose = RigidPose(np.eye(3), offset)
            depth = render_depth(scene, pose, K)
            color = render_color(scene, pose, K)
            sparse = sample_sparse(depth, n_points, seed=seed + 13 * s + b)
            buffer.append(BufferFrame(color=color, sparse=sparse, pose=pose))
        samples.append(TrainSample(
            target_color=target_color, target_gt=target_depth,
            target_pose=target_pose, intrinsics=K, buffer=buffer,
        ))
    return samples
