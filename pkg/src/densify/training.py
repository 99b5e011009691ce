"""Supervision loss, augmentation, gradient verification and toy training."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .evaluation import EmptyValidSet
from .geometry import CameraIntrinsics, DepthMap, RigidPose, SparseDepthMap
from .network import DTYPE, DensifyNet, forward_pipeline

FLIP_MIRROR = np.diag([-1.0, 1.0, 1.0])


class NonFiniteGradient(ArithmeticError):
    """An analytic or numeric gradient evaluated to NaN or infinity."""


class DivergedLoss(ArithmeticError):
    """The training loss became non-finite."""


@dataclass(frozen=True)
class LossConfig:
    nu: float = 0.8

    def __post_init__(self):
        if not (0 < self.nu <= 1):
            raise ValueError("decay factor must be in (0, 1]")


def sequence_loss(preds: list[DepthMap | np.ndarray], gt: DepthMap,
                  cfg: LossConfig = LossConfig()) -> float:
    """Exponentially decayed mean absolute error over the refinement sequence.

    Prediction i (1-based) is weighted by nu^(N-i), so the final iterate
    carries full weight. Each term averages |pred - gt| over valid gt pixels.
    """
    if not np.any(gt.valid):
        raise EmptyValidSet("ground truth has no valid pixels")
    n = len(preds)
    total = 0.0
    for i, pred in enumerate(preds, start=1):
        values = pred.values if isinstance(pred, DepthMap) else np.asarray(pred)
        if values.shape != gt.values.shape:
            raise ValueError("prediction and ground truth shapes differ")
        err = np.abs(values[gt.valid] - gt.values[gt.valid]).mean()
        total += cfg.nu ** (n - i) * err
    return float(total)


def sequence_loss_torch(preds: list[torch.Tensor], gt: DepthMap,
                        cfg: LossConfig = LossConfig()) -> torch.Tensor:
    if not np.any(gt.valid):
        raise EmptyValidSet("ground truth has no valid pixels")
    mask = torch.from_numpy(gt.valid)
    gt_t = torch.from_numpy(gt.values).to(DTYPE)
    n = len(preds)
    total = preds[0].new_zeros(())
    for i, pred in enumerate(preds, start=1):
        err = (pred - gt_t).abs()[mask].mean()
        total = total + cfg.nu ** (n - i) * err
    return total


@dataclass
class BufferFrame:
    color: np.ndarray
    sparse: SparseDepthMap
    pose: RigidPose  # camera-to-world


@dataclass
class TrainSample:
    target_color: np.ndarray
    target_gt: DepthMap
    target_pose: RigidPose  # camera-to-world
    intrinsics: CameraIntrinsics
    buffer: list[BufferFrame]
    source_index: int = 0

    def __post_init__(self):
        if not self.buffer:
            raise ValueError("source buffer must be nonempty")
        if not (0 <= self.source_index < len(self.buffer)):
            raise ValueError("source index outside buffer")

    @property
    def source(self) -> BufferFrame:
        return self.buffer[self.source_index]

    def relative_pose(self) -> RigidPose:
        """Target-camera to source-camera transform."""
        return self.source.pose.inverse().compose(self.target_pose)


def _flip_pose(pose: RigidPose) -> RigidPose:
    return RigidPose(FLIP_MIRROR @ pose.rotation @ FLIP_MIRROR,
                     FLIP_MIRROR @ pose.translation)


def _flip_sparse(sp: SparseDepthMap, width: int) -> SparseDepthMap:
    if len(sp) == 0:
        return SparseDepthMap.empty()
    return SparseDepthMap(width - 1 - sp.u, sp.v, sp.depth)


def _jitter(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    return brightness * ((image - 0.5) * contrast + 0.5)


def augment(sample: TrainSample, seed: int, jitter: bool = True,
            flip: bool | None = None) -> TrainSample:
    """Photometric jitter plus an optional geometry-consistent horizontal flip.

    The same jitter is applied to every view of the sample. A flip mirrors
    all images and sparse coordinates, moves the principal point, and
    conjugates every pose by the x-axis mirror so that reprojection between
    the flipped views stays exact. Passing flip explicitly overrides the
    random 50% decision.
    """
    rng = np.random.default_rng(seed)
    brightness = 1.0 + (rng.uniform(-0.2, 0.2) if jitter else 0.0)
    contrast = 1.0 + (rng.uniform(-0.2, 0.2) if jitter else 0.0)
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    K = sample.intrinsics

    def prep(img: np.ndarray) -> np.ndarray:
        out = _jitter(np.asarray(img, dtype=np.float64), brightness, contrast)
        return out[:, ::-1].copy() if do_flip else out

    if do_flip:
        K = CameraIntrinsics(K.fx, K.fy, K.width - 1 - K.cx, K.cy, K.width, K.height)
        gt = DepthMap(sample.target_gt.values[:, ::-1].copy(),
                      sample.target_gt.valid[:, ::-1].copy())
        tgt_pose = _flip_pose(sample.target_pose)
        buffer = [
            BufferFrame(prep(f.color), _flip_sparse(f.sparse, K.width), _flip_pose(f.pose))
            for f in sample.buffer
        ]
    else:
        gt = sample.target_gt.copy()
        tgt_pose = sample.target_pose
        buffer = [BufferFrame(prep(f.color), f.sparse, f.pose) for f in sample.buffer]
    return TrainSample(
        target_color=prep(sample.target_color),
        target_gt=gt,
        target_pose=tgt_pose,
        intrinsics=K,
        buffer=buffer,
        source_index=sample.source_index,
    )


def gradient_check(params: list[torch.nn.Parameter], loss_fn, eps: float = 1e-5,
                   max_entries_per_param: int = 8, seed: int = 0) -> float:
    """Compare analytic gradients to central finite differences.

    Args:
        params: parameters to check (a random subset of entries of each is
            probed, at most max_entries_per_param).
        loss_fn: deterministic closure returning a scalar tensor.
        eps: finite-difference half-step.

    Returns:
        Maximum relative error |analytic - numeric| / max(|numeric|, 1e-8)
        over all probed entries.
    """
    if eps <= 0:
        raise ValueError("finite-difference step must be positive")
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        if g is None:
            g = torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("analytic gradient is not finite")
        flat = p.detach().reshape(-1)
        n = flat.numel()
        idx = rng.choice(n, size=min(max_entries_per_param, n), replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteGradient("numeric gradient is not finite")
            analytic = g.reshape(-1)[i].item()
            rel = abs(analytic - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def clip_global_norm(params: list[torch.nn.Parameter], max_norm: float = 1.0) -> float:
    """Scale gradients so their global L2 norm is at most max_norm."""
    total = torch.sqrt(sum((p.grad**2).sum() for p in params if p.grad is not None))
    norm = float(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad.mul_(scale)
    return norm


def train_toy(
    dataset: list[TrainSample],
    steps: int,
    lr: float,
    seed: int,
    model: DensifyNet | None = None,
    n_iterations: int = 3,
    momentum: float = 0.9,
    loss_cfg: LossConfig = LossConfig(),
    augment_samples: bool = True,
) -> tuple[DensifyNet, list[float]]:
    """Small-scale training loop: SGD with momentum and global-norm-1 clipping.

    One sample per step; the source view is drawn at random from the sample's
    buffer. Returns the trained model and the per-step loss trace.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if model is None:
        model = DensifyNet(seed=seed)
    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum)
    trace: list[float] = []
    for _ in range(steps):
        sample = dataset[int(rng.integers(len(dataset)))]
        sample = replace(sample, source_index=int(rng.integers(len(sample.buffer))))
        if augment_samples:
            sample = augment(sample, seed=int(rng.integers(2**31)))
        loss = _sample_loss(model, sample, n_iterations, loss_cfg)
        if not torch.isfinite(loss):
            raise DivergedLoss(f"loss became {float(loss.detach())}")
        opt.zero_grad()
        loss.backward()
        clip_global_norm(params, 1.0)
        opt.step()
        trace.append(float(loss.detach()))
    return model, trace


def _sample_loss(model: DensifyNet, sample: TrainSample, n_iterations: int,
                 loss_cfg: LossConfig) -> torch.Tensor:
    from .geometry import reproject_sparse_depth

    K = sample.intrinsics
    src = sample.source
    P_t_to_s = sample.relative_pose()
    sparse_tgt, _ = reproject_sparse_depth(src.sparse, P_t_to_s.inverse(), K)
    grid8 = sparse_tgt.rasterize(K.width, K.height, scale=8)
    preds = forward_pipeline(
        model, sample.target_color, src.color, grid8, K, P_t_to_s, n_iterations
    )
    return sequence_loss_torch(preds, sample.target_gt, loss_cfg)
