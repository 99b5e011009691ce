"""Sequence directory format, pipeline runner, sweeps and report emission.

Sequence directory layout::

    intrinsics.json   fx, fy, cx, cy, width, height
    poses.json        per-frame 4x4 row-major camera-to-world matrices
    color/NNNNNN.png  8-bit RGB, one per frame
    depth/NNNNNN.png  16-bit grayscale, millimeters, 0 = invalid; dense
                      ground truth, present on frames that can be evaluated
    sparse/NNNNNN.csv u,v,depth_m rows with sub-pixel coordinates; present
                      exactly on the frames where the depth sensor fired

A frame with a sparse file is "depth-bearing": it can serve as the source
view for itself and for every later frame up to the next depth-bearing one.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import decoder as decoder_mod
from .encoding import DescriptorEncoder, HypothesisSet
from .evaluation import Metrics2D, Metrics3D, TSDFVolume, extract_mesh, metrics_2d, metrics_3d, sample_mesh_points, tsdf_integrate
from .geometry import CameraIntrinsics, DepthMap, RigidPose, SparseDepthMap, reproject_sparse_depth
from .integrator import AnalyticOperator, IntegrationInputs, init_depth, run as run_integration
from .scene import Frame, Sequence, sample_sparse

logger = logging.getLogger(__name__)

MAX_DEPTH_MM = 65535


class FormatError(ValueError):
    """A sequence directory violates the documented layout."""


class MissingPose(FormatError):
    pass


class MissingIntrinsics(FormatError):
    pass


@dataclass(frozen=True)
class RunConfig:
    tau: float | None = None  # None: use the sparse frames stored on disk
    n_points: int = 500
    iterations: int = 10
    operator: str = "analytic"  # "analytic" | "learned"
    lam: float = 0.0
    seed: int = 0
    output_dir: str | None = None
    weights: str | None = None  # learned operator weights file

    def __post_init__(self):
        if self.tau is not None and not (0 < self.tau <= 1):
            raise ValueError("tau must be in (0, 1]")
        if self.iterations < 0 or self.n_points < 0:
            raise ValueError("iterations and n_points must be >= 0")
        if self.operator not in ("analytic", "learned"):
            raise ValueError(f"unknown operator kind {self.operator!r}")
        if self.lam < 0:
            raise ValueError("pose noise factor must be >= 0")


@dataclass
class FrameResult:
    frame: int
    source: int
    dropped_samples: int
    metrics: Metrics2D | None
    prediction: np.ndarray


@dataclass
class RunReport:
    frames: list[FrameResult]
    aggregate: Metrics2D | None
    timings_ms: dict[str, float]
    metrics3d: Metrics3D | None = None


# --------------------------------------------------------------------------
# Sequence directory I/O


def save_sequence(seq: Sequence, path: str | Path) -> None:
    path = Path(path)
    (path / "color").mkdir(parents=True, exist_ok=True)
    (path / "depth").mkdir(exist_ok=True)
    (path / "sparse").mkdir(exist_ok=True)
    K = seq.intrinsics
    with open(path / "intrinsics.json", "w") as fh:
        json.dump(
            {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
             "width": K.width, "height": K.height},
            fh, indent=2,
        )
    poses = [frame.pose.matrix().reshape(-1).tolist() for frame in seq.frames]
    with open(path / "poses.json", "w") as fh:
        json.dump(poses, fh)
    for frame in seq.frames:
        name = f"{frame.index:06d}"
        rgb = np.clip(np.rint(np.asarray(frame.color) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(path / "color" / f"{name}.png")
        mm = frame.gt_depth.values * 1000.0
        if np.any(mm > MAX_DEPTH_MM):
            raise FormatError("depth beyond 65.535 m cannot be stored")
        depth16 = np.rint(mm).astype(np.uint16)
        depth16[~frame.gt_depth.valid] = 0
        Image.fromarray(depth16).save(path / "depth" / f"{name}.png")
        if frame.sparse is not None:
            with open(path / "sparse" / f"{name}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["u", "v", "depth_m"])
                for u, v, d in zip(frame.sparse.u, frame.sparse.v, frame.sparse.depth):
                    writer.writerow([repr(float(u)), repr(float(v)), repr(float(d))])


def load_sequence(path: str | Path) -> Sequence:
    path = Path(path)
    intr_file = path / "intrinsics.json"
    if not intr_file.exists():
        raise MissingIntrinsics(f"{intr_file} not found")
    with open(intr_file) as fh:
        intr = json.load(fh)
    try:
        K = CameraIntrinsics(
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            width=int(intr["width"]), height=int(intr["height"]),
        )
    except (KeyError, ValueError) as exc:
        raise MissingIntrinsics(f"{intr_file}: {exc}") from exc
    poses_file = path / "poses.json"
    if not poses_file.exists():
        raise MissingPose(f"{poses_file} not found")
    with open(poses_file) as fh:
        pose_rows = json.load(fh)
    color_files = sorted((path / "color").glob("*.png"))
    if not color_files:
        raise FormatError(f"{path / 'color'}: no color frames found")
    indices = [int(f.stem) for f in color_files]
    if indices != list(range(len(indices))):
        raise FormatError(f"{path / 'color'}: frame indices must be dense from 0")
    if len(pose_rows) != len(indices):
        raise MissingPose(
            f"{poses_file}: {len(pose_rows)} poses for {len(indices)} frames"
        )
    seq = Sequence(intrinsics=K)
    for i in indices:
        name = f"{i:06d}"
        rgb = np.asarray(Image.open(path / "color" / f"{name}.png"), dtype=np.float64)
        if rgb.shape[:2] != (K.height, K.width):
            raise FormatError(f"color/{name}.png: size does not match intrinsics")
        color = rgb / 255.0
        pose = RigidPose.from_matrix(np.array(pose_rows[i], dtype=np.float64).reshape(4, 4))
        depth_file = path / "depth" / f"{name}.png"
        if depth_file.exists():
            raw = np.asarray(Image.open(depth_file), dtype=np.float64)
            if raw.shape != (K.height, K.width):
                raise FormatError(f"depth/{name}.png: size does not match intrinsics")
            gt = DepthMap(raw / 1000.0, raw > 0)
        else:
            gt = DepthMap(np.zeros((K.height, K.width)), np.zeros((K.height, K.width), bool))
        sparse = None
        sparse_file = path / "sparse" / f"{name}.csv"
        if sparse_file.exists():
            u, v, d = [], [], []
            with open(sparse_file) as fh:
                reader = csv.DictReader(fh)
                for row in reader:
                    try:
                        u.append(float(row["u"]))
                        v.append(float(row["v"]))
                        d.append(float(row["depth_m"]))
                    except (KeyError, TypeError, ValueError) as exc:
                        raise FormatError(f"sparse/{name}.csv: bad row {row}") from exc
            sparse = SparseDepthMap(np.array(u), np.array(v), np.array(d))
        seq.frames.append(Frame(index=i, timestamp=float(i), pose=pose,
                                color=color, gt_depth=gt, sparse=sparse))
    return seq


# --------------------------------------------------------------------------
# Pipeline


def _effective_frames(seq: Sequence, cfg: RunConfig) -> list[Frame]:
    """Apply tau/n_points overrides, resampling sparse depth from ground truth."""
    if cfg.tau is None:
        return seq.frames
    m = int(round(1.0 / cfg.tau))
    frames = []
    for f in seq.frames:
        if f.index % m == 0:
            if not np.any(f.gt_depth.valid):
                raise FormatError(
                    f"frame {f.index}: tau override needs dense depth to resample"
                )
            sparse = sample_sparse(f.gt_depth, cfg.n_points, seed=cfg.seed + f.index)
        else:
            sparse = None
        frames.append(replace_frame(f, sparse))
    return frames


def replace_frame(f: Frame, sparse) -> Frame:
    return Frame(index=f.index, timestamp=f.timestamp, pose=f.pose,
                 color=f.color, gt_depth=f.gt_depth, sparse=sparse)


def _used_pose(frame: Frame, cfg: RunConfig) -> RigidPose:
    """Pose fed to the pipeline: exact at lam=0, perturbed otherwise.

    Noise uses common random numbers across lam values (the draw depends only
    on the run seed and frame index), so the perturbation magnitude grows
    monotonically with lam.
    """
    if cfg.lam == 0:
        return frame.pose
    from .scene import perturb_pose

    return perturb_pose(frame.pose.to_vector6(), cfg.lam,
                        seed=cfg.seed * 100003 + frame.index)


def run_pipeline(seq: Sequence, cfg: RunConfig, model=None) -> RunReport:
    """Densify every frame of the sequence and evaluate against ground truth.

    Frames preceding the first depth-bearing frame are skipped with a
    warning. The per-stage timings exclude the first processed frame as
    warm-up when more than one frame is processed.
    """
    frames = _effective_frames(seq, cfg)
    K = seq.intrinsics
    K_8 = K.scaled(8)
    hyp = HypothesisSet()
    encoder = DescriptorEncoder()
    learned = cfg.operator == "learned"
    if learned:
        from .network import DensifyNet, LearnedOperator, load_weights, extract_features_net, extract_monocular_net
        import torch

        if model is None:
            model = DensifyNet(seed=cfg.seed)
            if cfg.weights:
                load_weights(model, cfg.weights)
        op = LearnedOperator(model)
    else:
        op = AnalyticOperator()

    sensor_indices = [f.index for f in frames if f.sparse is not None]
    results: list[FrameResult] = []
    timings = {"encode": [], "volume": [], "integrate": [], "decode": []}
    feature_cache: dict[int, object] = {}

    def features_for(frame: Frame):
        if frame.index not in feature_cache:
            if learned:
                feature_cache[frame.index] = extract_features_net(model, frame.color)
            else:
                feature_cache[frame.index] = encoder.extract_features(frame.color)
        return feature_cache[frame.index]

    for frame in frames:
        sources = [j for j in sensor_indices if j <= frame.index]
        if not sources:
            logger.warning("frame %d precedes the first depth frame; skipped", frame.index)
            continue
        src_idx = max(sources)
        src = frames[src_idx]
        t0 = time.monotonic()
        pose_t = _used_pose(frame, cfg)
        pose_s = _used_pose(src, cfg)
        P_t_to_s = pose_s.inverse().compose(pose_t)
        sparse_tgt, dropped = reproject_sparse_depth(src.sparse, P_t_to_s.inverse(), K)
        grid8 = sparse_tgt.rasterize(K.width, K.height, scale=8)
        Ft = features_for(frame)
        Fs = features_for(src)
        if learned:
            pyramid = extract_monocular_net(model, frame.color)
            mono8 = pyramid.level8
            with torch.no_grad():
                hidden0 = model.hidden_init(
                    torch.from_numpy(mono8.values.transpose(2, 0, 1)[None]).double()
                )[0].permute(1, 2, 0).numpy()
        else:
            pyramid = None
            mono8 = None
            hidden0 = np.zeros(grid8.values.shape + (1,))
        t1 = time.monotonic()
        inputs = IntegrationInputs(
            Ft=Ft, Fs=Fs, mono8=mono8, sparse_grid=grid8, K_8=K_8,
            P_t_to_s=P_t_to_s, hypotheses=hyp,
        )
        init = init_depth(grid8)
        stage_times = {"volume": 0.0, "integrate": 0.0}
        history, hidden = run_integration(
            inputs, cfg.iterations, op, init=init, hidden=hidden0,
            timings=stage_times,
        )
        depth8 = history[-1] if history else init
        t2 = time.monotonic()
        if learned:
            with torch.no_grad():
                full = model.decoder(
                    torch.from_numpy(depth8.values[None, None]).double(),
                    torch.from_numpy(hidden.transpose(2, 0, 1)[None]).double(),
                    torch.from_numpy(pyramid.level2.values.transpose(2, 0, 1)[None]).double(),
                    torch.from_numpy(pyramid.level4.values.transpose(2, 0, 1)[None]).double(),
                    torch.from_numpy(mono8.values.transpose(2, 0, 1)[None]).double(),
                )[0, 0].numpy()
        else:
            full = decoder_mod.upsample_to_full(depth8)
        full = full[: K.height, : K.width]
        t3 = time.monotonic()
        m2d = None
        if np.any(frame.gt_depth.valid):
            m2d = metrics_2d(DepthMap(full, np.ones_like(full, bool)), frame.gt_depth)
        results.append(FrameResult(frame=frame.index, source=src_idx,
                                   dropped_samples=dropped, metrics=m2d,
                                   prediction=full))
        timings["encode"].append(t1 - t0)
        timings["volume"].append(stage_times["volume"])
        timings["integrate"].append(stage_times["integrate"])
        timings["decode"].append(t3 - t2)

    evaluated = [r.metrics for r in results if r.metrics is not None]
    aggregate = None
    if evaluated:
        aggregate = Metrics2D(**{
            k: float(np.mean([m.as_dict()[k] for m in evaluated]))
            for k in evaluated[0].as_dict()
        })
    timings_ms = {}
    for stage, vals in timings.items():
        use = vals[1:] if len(vals) > 1 else vals  # first frame is warm-up
        timings_ms[stage] = 1000.0 * float(np.mean(use)) if use else 0.0
    return RunReport(frames=results, aggregate=aggregate, timings_ms=timings_ms)


def build_mesh(
    seq: Sequence,
    cfg: RunConfig,
    voxel_size: float = 0.04,
    report: RunReport | None = None,
    with_metrics: bool = False,
    model=None,
):
    """TSDF-fuse the predicted depth maps of a run and extract the mesh.

    Returns (mesh, metrics3d or None); metrics compare points sampled from
    the predicted-surface mesh against a mesh fused from ground-truth depth.
    """
    if report is None:
        report = run_pipeline(seq, cfg, model=model)
    K = seq.intrinsics
    all_pts = []
    preds = {r.frame: r.prediction for r in report.frames}
    frames = {f.index: f for f in seq.frames}
    for idx, pred in preds.items():
        pose = frames[idx].pose
        vals = np.asarray(pred)
        h, w = vals.shape
        uu, vv = np.meshgrid(np.arange(w), np.arange(h))
        x = (uu - K.cx) / K.fx * vals
        y = (vv - K.cy) / K.fy * vals
        pts = np.stack([x, y, vals], axis=-1).reshape(-1, 3)
        all_pts.append(pose.transform(pts))
    cloud = np.concatenate(all_pts, axis=0)
    lo = cloud.min(axis=0) - 2 * voxel_size
    hi = cloud.max(axis=0) + 2 * voxel_size
    dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int), 1)
    vol = TSDFVolume(origin=lo, dims=tuple(dims), voxel_size=voxel_size)
    gt_vol = TSDFVolume(origin=lo, dims=tuple(dims), voxel_size=voxel_size)
    for idx, pred in preds.items():
        frame = frames[idx]
        tsdf_integrate(vol, DepthMap(pred, np.ones_like(pred, bool)), frame.pose, K)
        if with_metrics and np.any(frame.gt_depth.valid):
            tsdf_integrate(gt_vol, frame.gt_depth, frame.pose, K)
    mesh = extract_mesh(vol)
    m3d = None
    if with_metrics:
        gt_mesh = extract_mesh(gt_vol)
        pred_pts = sample_mesh_points(mesh, seed=cfg.seed)
        gt_pts = sample_mesh_points(gt_mesh, seed=cfg.seed + 1)
        m3d = metrics_3d(pred_pts, gt_pts)
    return mesh, m3d


# --------------------------------------------------------------------------
# Sweeps and report files

SWEEP_AXES = ("tau", "n_points", "lambda", "iterations")


def sweep(seq: Sequence, axis: str, values: list, cfg: RunConfig, model=None) -> list[dict]:
    """Run the pipeline once per value of the chosen axis.

    Per-value failures are recorded in the row and the sweep continues.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep values must be nonempty")
    rows = []
    for value in values:
        row = {"value": value}
        try:
            if axis == "tau":
                run_cfg = replace(cfg, tau=float(value))
            elif axis == "n_points":
                run_cfg = replace(cfg, n_points=int(value))
            elif axis == "lambda":
                run_cfg = replace(cfg, lam=float(value))
            else:
                run_cfg = replace(cfg, iterations=int(value))
            report = run_pipeline(seq, run_cfg, model=model)
            if report.aggregate is None:
                row["error"] = "no evaluated frames"
            else:
                row.update(report.aggregate.as_dict())
                row.update({f"{k}_ms": v for k, v in report.timings_ms.items()})
        except Exception as exc:  # noqa: BLE001 - per-row error capture is the contract
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


METRIC_COLUMNS = ["mae", "rmse", "abs_rel", "sq_rel", "delta_105", "delta_125"]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def frames_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["frame", "source", "dropped_samples"] + METRIC_COLUMNS)
    for r in report.frames:
        row = [r.frame, r.source, r.dropped_samples]
        if r.metrics is None:
            row += [""] * len(METRIC_COLUMNS)
        else:
            d = r.metrics.as_dict()
            row += [_fmt(d[k]) for k in METRIC_COLUMNS]
        writer.writerow(row)
    return buf.getvalue()


def summary_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(METRIC_COLUMNS)
    if report.aggregate is not None:
        d = report.aggregate.as_dict()
        writer.writerow([_fmt(d[k]) for k in METRIC_COLUMNS])
    return buf.getvalue()


def timings_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    stages = list(report.timings_ms)
    writer.writerow([f"{s}_ms" for s in stages])
    writer.writerow([_fmt(report.timings_ms[s]) for s in stages])
    return buf.getvalue()


def sweep_csv(rows: list[dict]) -> str:
    keys = ["value"] + METRIC_COLUMNS + [f"{s}_ms" for s in ("encode", "volume", "integrate", "decode")] + ["error"]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(keys)
    for row in rows:
        writer.writerow([_fmt(row[k]) if k in row else "" for k in keys])
    return buf.getvalue()


def write_report(report: RunReport, out_dir: str | Path) -> None:
    """Emit report CSVs. Timings go to a separate file so that the metric
    reports are byte-identical across reruns of the same configuration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report_frames.csv").write_text(frames_csv(report))
    (out / "report_summary.csv").write_text(summary_csv(report))
    (out / "timings.csv").write_text(timings_csv(report))
