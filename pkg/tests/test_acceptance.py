"""Acceptance criteria, one test per criterion.

Each test is self-contained at the stated tolerance and asserts its own
runtime budget. Trend tests run on the committed synthetic suite.
"""

import time

import numpy as np
import torch

from conftest import random_pose, suite_case
from densify.cli import main as cli_main
from densify.datasets import toy_dataset
from densify.decoder import softmax_masks, convex_upsample, upsample_to_full
from densify.encoding import (
    DescriptorEncoder,
    FeatureGrid,
    HypothesisSet,
    build_correlation_volume,
    correlation_score,
    MIN_HYPOTHESIS_DEPTH,
)
from densify.geometry import (
    CameraIntrinsics,
    DepthMap,
    PixelCoord,
    RigidPose,
    SparseDepthMap,
    project_point,
    reproject_sparse_depth,
)
from densify.harness import RunConfig, run_pipeline, sweep
from densify.integrator import (
    AnalyticOperator,
    IntegrationInputs,
    depth_delta,
    init_depth,
    run as run_integration,
)
from densify.network import DensifyNet, toy_network_config
from densify.scene import generate_sequence, render_depth, sample_sparse
from densify.suite import benchmark_suite
from densify.training import (
    LossConfig,
    _sample_loss,
    clip_global_norm,
    gradient_check,
    sequence_loss,
)
from test_evaluation import K_TSDF, plane_volume, sphere_depth


def test_criterion_01_geometry_oracle():
    start = time.monotonic()
    K = CameraIntrinsics(fx=60.0, fy=50.0, cx=31.5, cy=23.5, width=64, height=48)

    # Round-trip projection: target -> source -> target, relative error < 1e-7.
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 200:
        P = random_pose(rng, max_angle=0.2, max_translation=0.2)
        q = PixelCoord(rng.uniform(0, 63), rng.uniform(0, 47))
        depth = rng.uniform(0.5, 8.0)
        try:
            q_s, d_s = project_point(q, depth, K, P)
            q_b, d_b = project_point(q_s, d_s, K, P.inverse())
        except Exception:
            continue
        scale = max(abs(q.u), abs(q.v), 1.0)
        assert abs(q_b.u - q.u) / scale < 1e-7
        assert abs(q_b.v - q.v) / scale < 1e-7
        assert abs(d_b - depth) / depth < 1e-7
        checked += 1

    # Reprojected sparse depth against the analytic (rendered) scene surface.
    # The slant case is a single plane: no pixel is ever occluded, and the
    # exact depth at any sub-pixel location solves the ray-plane equation.
    case = suite_case("slant-96", n_frames=2)
    Ks = case.intrinsics
    src_pose, tgt_pose = case.trajectory.poses[0], case.trajectory.poses[1]
    src_depth = render_depth(case.scene, src_pose, Ks)
    sp = sample_sparse(src_depth, 300, seed=5)
    P_s_to_t = tgt_pose.inverse().compose(src_pose)
    out, _ = reproject_sparse_depth(sp, P_s_to_t, Ks)
    assert len(out) > 200
    plane = case.scene.primitives[0]
    p = np.asarray(plane.point)
    n = np.asarray(plane.normal)
    origin = tgt_pose.translation
    for u, v, d in zip(out.u, out.v, out.depth):
        dir_cam = np.array([(u - Ks.cx) / Ks.fx, (v - Ks.cy) / Ks.fy, 1.0])
        dir_world = tgt_pose.rotation @ dir_cam
        expected = float(n @ (p - origin) / (n @ dir_world))
        assert abs(d - expected) / expected < 1e-6

    # z-buffer rule against brute force, exactly.
    rng = np.random.default_rng(1)
    samples = SparseDepthMap(rng.uniform(-2, 34, 120), rng.uniform(-2, 26, 120),
                             rng.uniform(0.1, 5.0, 120))
    got = samples.rasterize(32, 24, scale=8)
    ref_values = np.zeros((3, 4))
    ref_valid = np.zeros((3, 4), bool)
    for u, v, d in zip(samples.u, samples.v, samples.depth):
        col, row = int(np.rint(u)) // 8, int(np.rint(v)) // 8
        if 0 <= col < 4 and 0 <= row < 3:
            if not ref_valid[row, col] or d < ref_values[row, col]:
                ref_values[row, col] = d
                ref_valid[row, col] = True
    assert np.array_equal(got.valid, ref_valid)
    assert np.array_equal(got.values, ref_values)
    assert time.monotonic() - start < 10.0


def test_criterion_02_correlation_and_delta_exactness():
    start = time.monotonic()
    rng = np.random.default_rng(3)
    K8 = CameraIntrinsics(fx=8.0, fy=8.0, cx=1.5, cy=1.5, width=4, height=4)
    Ft = FeatureGrid(rng.standard_normal((4, 4, 6)))
    Fs = FeatureGrid(rng.standard_normal((4, 4, 6)))
    depth = DepthMap(1.0 + rng.random((4, 4)))
    P = RigidPose(np.eye(3), np.array([0.05, -0.02, 0.01]))
    hyp = HypothesisSet()
    vol = build_correlation_volume(Ft, Fs, depth, K8, P, hyp)
    # Every entry equals an independent correlation-score evaluation, exactly.
    for i in range(4):
        for j in range(4):
            for k in range(hyp.count):
                d = max(depth.values[i, j] + hyp.offsets[k], MIN_HYPOTHESIS_DEPTH)
                q_s, _ = project_point(PixelCoord(float(j), float(i)), d, K8, P)
                for a in (-1, 0, 1):
                    for b in (-1, 0, 1):
                        ref = correlation_score(
                            Ft, Fs, PixelCoord(float(j), float(i)),
                            PixelCoord(q_s.u + b, q_s.v + a),
                        )
                        assert vol.scores[i, j, k, a + 1, b + 1] == ref

    # Sparse-depth update term pixel-for-pixel, including zero-update cells.
    valid = rng.random((6, 6)) < 0.5
    sparse = DepthMap(np.where(valid, 1.0 + rng.random((6, 6)), 0.0), valid)
    current = DepthMap(1.0 + rng.random((6, 6)))
    delta = depth_delta(sparse, current)
    for i in range(6):
        for j in range(6):
            if valid[i, j]:
                assert delta[i, j] == sparse.values[i, j] - current.values[i, j]
            else:
                assert delta[i, j] == 0.0
    assert time.monotonic() - start < 10.0


def test_criterion_03_hypothesis_contract():
    hyp = HypothesisSet()
    offs = hyp.offsets
    assert len(offs) == 41
    assert np.allclose(np.diff(offs), 0.1, atol=1e-12)
    assert np.allclose(offs, -offs[::-1], atol=1e-12)
    assert np.isclose(offs[20], 0.0)

    rng = np.random.default_rng(4)
    K8 = CameraIntrinsics(fx=16.0, fy=16.0, cx=3.5, cy=3.5, width=8, height=8)
    Ft = FeatureGrid(rng.standard_normal((8, 8, 8)))
    Fs = FeatureGrid(rng.standard_normal((8, 8, 8)))
    depth = DepthMap(2.5 + rng.random((8, 8)))
    vol = build_correlation_volume(Ft, Fs, depth, K8, RigidPose.identity(), hyp)
    spread = vol.scores.max(axis=2) - vol.scores.min(axis=2)
    assert spread.max() < 1e-9


def test_criterion_04_convex_upsampling():
    rng = np.random.default_rng(5)
    mask = softmax_masks(rng.standard_normal((6, 6, 2, 2, 9)) * 4)
    assert np.all(np.abs(mask.sum(axis=-1) - 1.0) <= 1e-6)

    out = convex_upsample(np.full((6, 6), 1.7), mask)
    assert np.allclose(out, 1.7, atol=1e-12)

    coarse = rng.uniform(0.5, 4.0, (6, 6))
    out = convex_upsample(coarse, mask)
    assert out.min() >= coarse.min() - 1e-12
    assert out.max() <= coarse.max() + 1e-12

    one_hot = np.zeros((6, 6, 2, 2, 9))
    one_hot[..., 4] = 1.0
    out = convex_upsample(coarse, one_hot)
    assert np.array_equal(out, np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1))

    full = upsample_to_full(rng.uniform(1.0, 2.0, (8, 8)))
    assert full.shape == (64, 64)


def test_criterion_05_loss_and_clipping():
    # Loss decomposition against a brute-force oracle at nu = 0.8.
    rng = np.random.default_rng(6)
    valid = rng.random((8, 8)) < 0.8
    valid[0, 0] = True
    gt = DepthMap(np.where(valid, 1.0 + rng.random((8, 8)), 0.0), valid)
    preds = [gt.values + rng.standard_normal((8, 8)) for _ in range(6)]
    nu = LossConfig().nu
    assert nu == 0.8
    ref = sum(
        nu ** (6 - i) * np.abs(p[valid] - gt.values[valid]).mean()
        for i, p in enumerate(preds, start=1)
    )
    assert abs(sequence_loss(preds, gt) - ref) < 1e-12

    # Gradient clipping keeps the global norm within 1 + 1e-6 on every step.
    model = DensifyNet(toy_network_config(), seed=0)
    sample = toy_dataset(n_scenes=1, size=24, n_points=40)[0]
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=0.01, momentum=0.9)
    for _ in range(5):
        loss = _sample_loss(model, sample, n_iterations=1, loss_cfg=LossConfig())
        opt.zero_grad()
        loss.backward()
        clip_global_norm(params, 1.0)
        norm = float(torch.sqrt(sum((p.grad**2).sum() for p in params)))
        assert norm <= 1.0 + 1e-6
        opt.step()


def test_criterion_06_gradient_fidelity():
    start = time.monotonic()
    torch.manual_seed(0)
    model = DensifyNet(toy_network_config(), seed=0)
    sample = toy_dataset(n_scenes=1, size=24)[0]

    def loss_fn():
        return _sample_loss(model, sample, n_iterations=1, loss_cfg=LossConfig())

    worst = 0.0
    for module in (model.geometry_encoder, model.monocular_encoder,
                   model.update, model.decoder):
        err = gradient_check(list(module.parameters()), loss_fn, eps=3e-5,
                             max_entries_per_param=2, seed=0)
        worst = max(worst, err)
    assert worst <= 1e-4
    assert time.monotonic() - start < 120.0


def test_criterion_07_analytic_operator_convergence():
    start = time.monotonic()
    n_iter = 10
    enc = DescriptorEncoder()
    hyp = HypothesisSet()
    op = AnalyticOperator()
    errs = [[] for _ in range(n_iter + 1)]
    for case in benchmark_suite():
        K = case.intrinsics
        seq = generate_sequence(case.scene, case.trajectory, tau=0.2,
                                n_points=500, seed=case.seed, K=K)
        feats = {}
        for frame in seq.frames:
            if frame.sparse is not None:
                continue  # convergence is measured on the target frames
            src = max((s for s in seq.frames
                       if s.sparse is not None and s.index <= frame.index),
                      key=lambda s: s.index)
            P = src.pose.inverse().compose(frame.pose)
            sp, _ = reproject_sparse_depth(src.sparse, P.inverse(), K)
            grid8 = sp.rasterize(K.width, K.height, scale=8)
            gt8 = DepthMap(frame.gt_depth.values[::8, ::8],
                           frame.gt_depth.valid[::8, ::8])
            for fr in (frame, src):
                if fr.index not in feats:
                    feats[fr.index] = enc.extract_features(fr.color)
            inputs = IntegrationInputs(
                Ft=feats[frame.index], Fs=feats[src.index], mono8=None,
                sparse_grid=grid8, K_8=K.scaled(8), P_t_to_s=P, hypotheses=hyp,
            )
            init = init_depth(grid8)
            history, _ = run_integration(inputs, n_iter, op, init=init)
            mask = gt8.valid
            errs[0].append(np.abs(init.values - gt8.values)[mask])
            for i, d in enumerate(history):
                errs[i + 1].append(np.abs(d.values - gt8.values)[mask])
    mae = [np.concatenate(e).mean() for e in errs]
    # Per-iteration MAE non-increasing, pooled over the suite.
    for i in range(n_iter):
        assert mae[i + 1] <= mae[i] + 1e-12
    # Final MAE at most 0.2x the initialization MAE.
    assert mae[-1] <= 0.2 * mae[0]
    # Iterations 8..10 change by less than 5%.
    for i in (8, 9):
        assert abs(mae[i + 1] - mae[i]) / mae[i] < 0.05
    assert time.monotonic() - start < 120.0


def test_criterion_08_trend_reproduction(slant_seq):
    start = time.monotonic()
    cfg = RunConfig(tau=0.2, seed=11)

    rows = sweep(slant_seq, "tau", [1.0, 0.5, 0.25, 0.2, 0.1], cfg)
    maes = [r["mae"] for r in rows]
    # Denser temporal sampling (larger tau) never hurts.
    for i in range(len(maes) - 1):
        assert maes[i] <= maes[i + 1] + 1e-12

    rows = sweep(slant_seq, "n_points", [500, 200, 100, 50], cfg)
    maes = [r["mae"] for r in rows]
    for i in range(len(maes) - 1):
        assert maes[i] <= maes[i + 1] + 1e-12

    base = run_pipeline(slant_seq, cfg)
    rows = sweep(slant_seq, "lambda", [0.0, 0.1, 0.2, 0.3], cfg)
    maes = [r["mae"] for r in rows]
    for i in range(len(maes) - 1):
        assert maes[i] <= maes[i + 1] + 1e-12
    assert maes[0] == base.aggregate.mae  # lambda = 0 bit-equal to noise-free
    assert time.monotonic() - start < 600.0


def test_criterion_09_3d_metrics():
    from densify.evaluation import (
        TSDFVolume,
        brute_force_nn,
        extract_mesh,
        metrics_3d,
        nearest_distances,
        tsdf_integrate,
    )

    start = time.monotonic()
    rng = np.random.default_rng(9)
    a = rng.standard_normal((500, 3))
    b = rng.standard_normal((500, 3))
    assert np.array_equal(nearest_distances(a, b), brute_force_nn(a, b))

    m = metrics_3d(a, a)
    assert (m.acc, m.comp, m.chamfer) == (0.0, 0.0, 0.0)
    assert (m.prec, m.recall, m.fscore) == (1.0, 1.0, 1.0)

    voxel = 0.02
    plane_mesh = extract_mesh(plane_volume(voxel_size=voxel, z0=1.5))
    plane_err = np.abs(plane_mesh.vertices[:, 2] - 1.5)
    assert np.quantile(plane_err, 0.95) <= voxel

    center, radius = np.array([0.0, 0.0, 1.5]), 0.4
    vol = TSDFVolume(origin=center - 0.6, dims=(60, 60, 60), voxel_size=voxel)
    tsdf_integrate(vol, sphere_depth(center, radius, K_TSDF),
                   RigidPose.identity(), K_TSDF)
    sphere_mesh = extract_mesh(vol)
    sphere_err = np.abs(
        np.linalg.norm(sphere_mesh.vertices - center, axis=1) - radius
    )
    assert np.quantile(sphere_err, 0.95) <= voxel
    assert time.monotonic() - start < 120.0


def test_criterion_10_end_to_end_determinism(tier64_dir, tmp_path):
    args = ["--seq", str(tier64_dir), "--iterations", "4", "--seed", "11"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli_main(["run", *args, "--out", str(out_a)]) == 0
    assert cli_main(["run", *args, "--out", str(out_b)]) == 0
    for name in ("report_frames.csv", "report_summary.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    ply_a, ply_b = tmp_path / "a.ply", tmp_path / "b.ply"
    assert cli_main(["mesh", *args, "--ply", str(ply_a)]) == 0
    assert cli_main(["mesh", *args, "--ply", str(ply_b)]) == 0
    assert ply_a.read_bytes() == ply_b.read_bytes()
