"""Shared fixtures: rendered sequences are expensive, so they are session-scoped."""

from __future__ import annotations

import numpy as np
import pytest

from densify.harness import save_sequence
from densify.scene import generate_sequence
from densify.suite import benchmark_suite


def suite_case(name: str, n_frames: int = 6):
    cases = {c.name: c for c in benchmark_suite(n_frames=n_frames)}
    return cases[name]


@pytest.fixture(scope="session")
def tier64_seq():
    """Small committed-suite sequence used by harness/CLI tests."""
    case = suite_case("tiers-64")
    return generate_sequence(case.scene, case.trajectory, tau=0.2, n_points=500,
                             seed=case.seed, K=case.intrinsics)


@pytest.fixture(scope="session")
def tier64_dir(tier64_seq, tmp_path_factory):
    path = tmp_path_factory.mktemp("seq") / "tiers-64"
    save_sequence(tier64_seq, path)
    return path


@pytest.fixture(scope="session")
def slant_seq():
    """The committed sequence designated for the trend sweeps."""
    case = suite_case("slant-96")
    return generate_sequence(case.scene, case.trajectory, tau=0.2, n_points=500,
                             seed=11, K=case.intrinsics)


@pytest.fixture(scope="session")
def tier128_views():
    """One target/source view pair of a committed tier case, with features."""
    from densify.encoding import DescriptorEncoder
    from densify.scene import render_color, render_depth

    case = suite_case("tiers-128", n_frames=2)
    K = case.intrinsics
    tgt_pose, src_pose = case.trajectory.poses[1], case.trajectory.poses[0]
    enc = DescriptorEncoder()
    tgt_depth = render_depth(case.scene, tgt_pose, K)
    src_depth = render_depth(case.scene, src_pose, K)
    return {
        "case": case,
        "K": K,
        "tgt_pose": tgt_pose,
        "src_pose": src_pose,
        "P_t_to_s": src_pose.inverse().compose(tgt_pose),
        "tgt_depth": tgt_depth,
        "src_depth": src_depth,
        "Ft": enc.extract_features(render_color(case.scene, tgt_pose, K)),
        "Fs": enc.extract_features(render_color(case.scene, src_pose, K)),
    }


def random_pose(rng: np.random.Generator, max_angle: float = 0.5,
                max_translation: float = 1.0):
    from densify.geometry import RigidPose

    q = np.concatenate([
        rng.uniform(-max_translation, max_translation, 3),
        rng.uniform(-max_angle, max_angle, 3),
    ])
    return RigidPose.from_vector6(q)
