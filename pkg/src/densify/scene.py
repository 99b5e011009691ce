"""Synthetic textured scenes: the ground-truth source for every experiment.

Scenes are unions of planes and spheres carrying world-anchored procedural
textures, so that the same surface point renders to the same color from any
viewpoint (up to resampling). Rendering is a per-pixel ray cast returning
z-depth, which makes the renderer an exact oracle for the projection code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, RigidPose, SparseDepthMap

RAY_EPS = 1e-6


class InvalidTau(ValueError):
    """Temporal sparsification ratio outside (0, 1]."""


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    texture_seed: int = 0
    texture_scale: float = 2.0
    texture_octaves: int = 4

    def __post_init__(self):
        p = np.asarray(self.point, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    texture_seed: int = 0
    texture_scale: float = 2.0
    texture_octaves: int = 4

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(
            self, "center", np.asarray(self.center, dtype=np.float64).reshape(3)
        )


@dataclass(frozen=True)
class Billboard:
    """Fronto-parallel textured rectangle at a fixed world depth.

    Occupies |x - cx| <= hx, |y - cy| <= hy on the plane z = cz. The shape
    gives piecewise-constant layered scenes whose depth is exactly constant
    per surface, which makes sparse-anchor and metric oracles exact.
    """

    center: np.ndarray
    half_extents: np.ndarray  # (hx, hy)
    texture_seed: int = 0
    texture_scale: float = 2.0
    texture_octaves: int = 4

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(2)
        if np.any(h <= 0):
            raise ValueError("billboard half extents must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)


@dataclass(frozen=True)
class Slab:
    """Finite textured rectangle on an arbitrary plane.

    The rectangle is centered at ``center`` and spanned by two orthogonal
    edge half-vectors ``half_u`` and ``half_v``; a point is inside when its
    projections onto the (normalized) edge directions stay within the edge
    lengths. This is the slanted counterpart of Billboard and lets scenes
    join surfaces at different depths with a continuous ramp.
    """

    center: np.ndarray
    half_u: np.ndarray
    half_v: np.ndarray
    texture_seed: int = 0
    texture_scale: float = 2.0
    texture_octaves: int = 4

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        hu = np.asarray(self.half_u, dtype=np.float64).reshape(3)
        hv = np.asarray(self.half_v, dtype=np.float64).reshape(3)
        if np.linalg.norm(hu) <= 0 or np.linalg.norm(hv) <= 0:
            raise ValueError("slab edge vectors must be nonzero")
        if abs(hu @ hv) > 1e-9 * np.linalg.norm(hu) * np.linalg.norm(hv):
            raise ValueError("slab edge vectors must be orthogonal")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_u", hu)
        object.__setattr__(self, "half_v", hv)

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.half_u, self.half_v)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class SphereCap:
    """One-sided spherical shell restricted to a slice of the sphere.

    ``surface`` selects which ray-sphere intersection counts: "near" keeps
    the entering (convex, camera-facing) hit, "far" the exiting one, which
    exposes the concave inside of the shell. A hit only counts when
    cut_offset <= dot(hit - center, cut_dir) <= cut_max and, when x_limit is
    finite, |hit_x - center_x| <= x_limit; everything else is a miss. Caps
    cut by a horizontal slice stay disjoint when stacked vertically, which
    planes and full spheres cannot do.
    """

    center: np.ndarray
    radius: float
    cut_dir: np.ndarray
    cut_offset: float = 0.0
    cut_max: float = np.inf
    surface: str = "near"
    x_limit: float = np.inf
    texture_seed: int = 0
    texture_scale: float = 2.0
    texture_octaves: int = 4

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere cap radius must be positive")
        if self.surface not in ("near", "far"):
            raise ValueError("sphere cap surface must be 'near' or 'far'")
        if self.x_limit <= 0:
            raise ValueError("sphere cap x limit must be positive")
        if self.cut_max <= self.cut_offset:
            raise ValueError("sphere cap cut_max must exceed cut_offset")
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        d = np.asarray(self.cut_dir, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(d)
        if norm <= 0:
            raise ValueError("cut direction must be nonzero")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "cut_dir", d / norm)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()


@dataclass(frozen=True)
class Trajectory:
    """Timestamped camera-to-world poses."""

    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(ts) != len(self.poses):
            raise ValueError("one timestamp per pose required")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)


@dataclass(frozen=True)
class NoiseConfig:
    lam: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("pose noise factor must be >= 0")


def _hash_lattice(ix, iy, iz, seed: int) -> np.ndarray:
    """Deterministic pseudo-random value in [0, 1) per integer lattice point."""
    h = (
        ix.astype(np.uint64) * np.uint64(73856093)
        ^ iy.astype(np.uint64) * np.uint64(19349663)
        ^ iz.astype(np.uint64) * np.uint64(83492791)
        ^ np.uint64(seed * 2654435761 % (1 << 32))
    )
    h = (h ^ (h >> np.uint64(13))) * np.uint64(0x5BD1E995)
    h = h ^ (h >> np.uint64(15))
    return (h % np.uint64(1 << 24)).astype(np.float64) / float(1 << 24)


def value_noise(points: np.ndarray, seed: int, octaves: int = 4, base_scale: float = 2.0) -> np.ndarray:
    """Multi-octave trilinear value noise in [0, 1] at world points (..., 3)."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros(pts.shape[:-1])
    amp_total = 0.0
    for o in range(octaves):
        freq = base_scale * (2.0**o)
        amp = 0.5**o
        p = pts * freq
        i0 = np.floor(p).astype(np.int64)
        f = p - i0
        f = f * f * (3.0 - 2.0 * f)
        acc = np.zeros(pts.shape[:-1])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (f[..., 0] if dx else 1 - f[..., 0])
                        * (f[..., 1] if dy else 1 - f[..., 1])
                        * (f[..., 2] if dz else 1 - f[..., 2])
                    )
                    acc += w * _hash_lattice(
                        i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz, seed + o
                    )
        out += amp * acc
        amp_total += amp
    return out / amp_total


def _ray_directions(K: CameraIntrinsics) -> np.ndarray:
    """Unnormalized camera-frame ray directions with unit z, shape (H, W, 3)."""
    u = np.arange(K.width, dtype=np.float64)
    v = np.arange(K.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack(
        [(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1
    )


def _intersect(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest positive hit per ray. Returns (t, hit_mask, primitive_index).

    ``dirs`` has unit z in the camera frame, so t equals z-depth.
    """
    t_best = np.full(dirs.shape[:-1], np.inf)
    idx = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        if isinstance(prim, Plane):
            denom = dirs @ prim.normal
            num = (prim.point - origin) @ prim.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        elif isinstance(prim, Sphere):
            oc = origin - prim.center
            a = np.sum(dirs * dirs, axis=-1)
            b = 2.0 * (dirs @ oc)
            c = oc @ oc - prim.radius**2
            disc = b * b - 4 * a * c
            t = np.full(dirs.shape[:-1], np.inf)
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t1 = (-b - sq) / (2 * a)
            t2 = (-b + sq) / (2 * a)
            tt = np.where(t1 > RAY_EPS, t1, t2)
            t[ok] = tt[ok]
        elif isinstance(prim, SphereCap):
            oc = origin - prim.center
            a = np.sum(dirs * dirs, axis=-1)
            b = 2.0 * (dirs @ oc)
            c = oc @ oc - prim.radius**2
            disc = b * b - 4 * a * c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            sign = -1.0 if prim.surface == "near" else 1.0
            t = np.where(ok, (-b + sign * sq) / (2 * a), np.inf)
            p = origin + np.where(ok, t, 0.0)[..., None] * dirs
            along = (p - prim.center) @ prim.cut_dir
            keep = ok & (along >= prim.cut_offset) & (along <= prim.cut_max)
            if np.isfinite(prim.x_limit):
                keep &= np.abs(p[..., 0] - prim.center[0]) <= prim.x_limit
            t = np.where(keep & (t > RAY_EPS), t, np.inf)
        elif isinstance(prim, Slab):
            n = prim.normal
            denom = dirs @ n
            num = (prim.center - origin) @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
            p = origin + t[..., None] * dirs - prim.center
            lu = np.linalg.norm(prim.half_u)
            lv = np.linalg.norm(prim.half_v)
            inside = (np.abs(p @ (prim.half_u / lu)) <= lu) & (
                np.abs(p @ (prim.half_v / lv)) <= lv
            )
            t = np.where(inside, t, np.inf)
        elif isinstance(prim, Billboard):
            dz = dirs[..., 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(dz) > 1e-12,
                             (prim.center[2] - origin[2]) / dz, np.inf)
            p = origin + t[..., None] * dirs
            inside = (
                (np.abs(p[..., 0] - prim.center[0]) <= prim.half_extents[0])
                & (np.abs(p[..., 1] - prim.center[1]) <= prim.half_extents[1])
            )
            t = np.where(inside, t, np.inf)
        else:  # pragma: no cover
            raise TypeError(f"unknown primitive {type(prim)}")
        better = (t > RAY_EPS) & (t < t_best)
        t_best = np.where(better, t, t_best)
        idx = np.where(better, k, idx)
    hit = np.isfinite(t_best)
    return t_best, hit, idx


def render_depth(scene: SceneSpec, pose: RigidPose, K: CameraIntrinsics) -> DepthMap:
    """Ray-cast z-depth of the nearest surface; misses are invalid pixels."""
    dirs_cam = _ray_directions(K)
    dirs_world = dirs_cam @ pose.rotation.T
    t, hit, _ = _intersect(scene, pose.translation, dirs_world)
    return DepthMap(np.where(hit, t, 0.0), hit)


def render_color(scene: SceneSpec, pose: RigidPose, K: CameraIntrinsics) -> np.ndarray:
    """World-anchored procedural color in [0, 1], shape (H, W, 3); black on miss."""
    dirs_cam = _ray_directions(K)
    dirs_world = dirs_cam @ pose.rotation.T
    t, hit, idx = _intersect(scene, pose.translation, dirs_world)
    pts = pose.translation + np.where(hit[..., None], t[..., None], 0.0) * dirs_world
    img = np.zeros((K.height, K.width, 3))
    for k, prim in enumerate(scene.primitives):
        mask = hit & (idx == k)
        if not np.any(mask):
            continue
        p = pts[mask]
        for c in range(3):
            img[..., c][mask] = value_noise(
                p, seed=prim.texture_seed * 17 + c,
                octaves=prim.texture_octaves, base_scale=prim.texture_scale,
            )
    return img


def sample_sparse(depth: DepthMap, n: int, seed: int) -> SparseDepthMap:
    """Uniform sample of n valid pixels without replacement (all of them if fewer)."""
    if n < 0:
        raise ValueError("sample count must be >= 0")
    rows, cols = np.nonzero(depth.valid)
    if n == 0 or len(rows) == 0:
        return SparseDepthMap.empty()
    rng = np.random.default_rng(seed)
    take = min(n, len(rows))
    pick = rng.choice(len(rows), size=take, replace=False)
    pick.sort()
    return SparseDepthMap(
        cols[pick].astype(np.float64),
        rows[pick].astype(np.float64),
        depth.values[rows[pick], cols[pick]],
    )


def perturb_pose(pose_q: np.ndarray, lam: float, seed: int) -> RigidPose:
    """Gaussian pose noise: each 6-DoF component gets std lam * |component|."""
    if lam < 0:
        raise ValueError("pose noise factor must be >= 0")
    q = np.asarray(pose_q, dtype=np.float64).reshape(6)
    rng = np.random.default_rng(seed)
    q_hat = q + rng.normal(size=6) * lam * np.abs(q)
    return RigidPose.from_vector6(q_hat)


@dataclass
class Frame:
    """One rendered frame of a sequence."""

    index: int
    timestamp: float
    pose: RigidPose  # camera-to-world
    color: np.ndarray
    gt_depth: DepthMap
    sparse: SparseDepthMap | None = None  # sensor samples, depth-bearing frames only


@dataclass
class Sequence:
    intrinsics: CameraIntrinsics
    frames: list[Frame] = field(default_factory=list)


def generate_sequence(
    scene: SceneSpec,
    traj: Trajectory,
    tau: float,
    n_points: int,
    seed: int,
    K: CameraIntrinsics,
) -> Sequence:
    """Render a sequence where every round(1/tau)-th frame carries sparse depth.

    tau is the sensor-to-RGB frame-rate ratio; frame 0 is always depth-bearing.
    """
    if not (0 < tau <= 1):
        raise InvalidTau(f"tau must be in (0, 1], got {tau}")
    m = int(round(1.0 / tau))
    seq = Sequence(intrinsics=K)
    for i, (ts, pose) in enumerate(zip(traj.timestamps, traj.poses)):
        depth = render_depth(scene, pose, K)
        color = render_color(scene, pose, K)
        sparse = None
        if i % m == 0:
            sparse = sample_sparse(depth, n_points, seed=seed + i)
        seq.frames.append(
            Frame(index=i, timestamp=float(ts), pose=pose, color=color,
                  gt_depth=depth, sparse=sparse)
        )
    return seq
