"""Depth-map metrics, point-cloud metrics, TSDF fusion and mesh extraction."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from .geometry import CameraIntrinsics, DepthMap, RigidPose

DEFAULT_VOXEL_SIZE = 0.04
DEFAULT_TRUNCATION_VOXELS = 3.0
DEFAULT_DISTANCE_THRESHOLD = 0.05
DEFAULT_SURFACE_DENSITY = 1e4  # points per square meter


class EmptyValidSet(ValueError):
    """No valid ground-truth pixels to evaluate against."""


class EmptyPointSet(ValueError):
    """A point-cloud operand is empty."""


class EmptySurface(ValueError):
    """The TSDF volume contains no zero crossing."""


@dataclass(frozen=True)
class Metrics2D:
    mae: float
    rmse: float
    abs_rel: float
    sq_rel: float
    delta_105: float
    delta_125: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Metrics3D:
    comp: float
    acc: float
    chamfer: float
    prec: float
    recall: float
    fscore: float

    def as_dict(self) -> dict:
        return asdict(self)


def metrics_2d(pred: DepthMap, gt: DepthMap) -> Metrics2D:
    """Standard depth error statistics over valid ground-truth pixels."""
    if pred.values.shape != gt.values.shape:
        raise ValueError("prediction and ground truth shapes differ")
    mask = gt.valid
    if not np.any(mask):
        raise EmptyValidSet("ground truth has no valid pixels")
    p = pred.values[mask]
    g = gt.values[mask]
    err = p - g
    ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    return Metrics2D(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err**2))),
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err**2 / g)),
        delta_105=float(np.mean(ratio < 1.05)),
        delta_125=float(np.mean(ratio < 1.25)),
    )


def brute_force_nn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbor distances from each point of a to the set b."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(b) == 0:
        raise EmptyPointSet("reference point set is empty")
    if len(a) == 0:
        return np.empty(0)
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return np.sqrt(d2.min(axis=1))


def nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """KD-tree accelerated nearest-neighbor distances (a -> b)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(b) == 0:
        raise EmptyPointSet("reference point set is empty")
    if len(a) == 0:
        return np.empty(0)
    tree = cKDTree(b)
    d, _ = tree.query(a, k=1)
    return d


def metrics_3d(
    pred_pts: np.ndarray,
    gt_pts: np.ndarray,
    threshold: float = DEFAULT_DISTANCE_THRESHOLD,
) -> Metrics3D:
    """Accuracy/completeness/chamfer and precision/recall/F-score."""
    pred_pts = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 3)
    gt_pts = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        raise EmptyPointSet("both point sets must be nonempty")
    d_pred = nearest_distances(pred_pts, gt_pts)
    d_gt = nearest_distances(gt_pts, pred_pts)
    acc = float(np.mean(d_pred))
    comp = float(np.mean(d_gt))
    prec = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    fscore = 0.0 if prec + recall == 0 else 2 * prec * recall / (prec + recall)
    return Metrics3D(
        comp=comp, acc=acc, chamfer=(acc + comp) / 2,
        prec=prec, recall=recall, fscore=fscore,
    )


class TSDFVolume:
    """Axis-aligned truncated signed distance volume with per-voxel weights."""

    def __init__(
        self,
        origin: np.ndarray,
        dims: tuple[int, int, int],
        voxel_size: float = DEFAULT_VOXEL_SIZE,
        truncation: float | None = None,
    ):
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in dims)
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation if truncation is not None
                                else DEFAULT_TRUNCATION_VOXELS * voxel_size)
        self.sdf = np.zeros(self.dims)
        self.weights = np.zeros(self.dims)

    def voxel_centers(self) -> np.ndarray:
        ii, jj, kk = np.meshgrid(
            *(np.arange(d) for d in self.dims), indexing="ij"
        )
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return self.origin + (idx + 0.5) * self.voxel_size


def tsdf_integrate(
    vol: TSDFVolume, depth: DepthMap, pose: RigidPose, K: CameraIntrinsics
) -> TSDFVolume:
    """Fuse one posed depth map into the volume (weight-1 running average).

    pose is camera-to-world. Voxels projecting outside the image, onto
    invalid pixels, or farther than one truncation band behind the observed
    surface are left untouched.
    """
    centers = vol.voxel_centers().reshape(-1, 3)
    world_to_cam = pose.inverse()
    cam = world_to_cam.transform(centers)
    z = cam[:, 2]
    in_front = z > 1e-9
    zs = np.where(in_front, z, 1.0)
    u = K.fx * cam[:, 0] / zs + K.cx
    v = K.fy * cam[:, 1] / zs + K.cy
    col = np.rint(u).astype(int)
    row = np.rint(v).astype(int)
    inside = (
        in_front
        & (col >= 0) & (col < K.width)
        & (row >= 0) & (row < K.height)
    )
    col_c = np.clip(col, 0, K.width - 1)
    row_c = np.clip(row, 0, K.height - 1)
    measured = depth.values[row_c, col_c]
    valid = inside & depth.valid[row_c, col_c]
    sdf = measured - z
    update = valid & (sdf > -vol.truncation)
    sdf = np.clip(sdf, -vol.truncation, vol.truncation)
    flat_sdf = vol.sdf.reshape(-1)
    flat_w = vol.weights.reshape(-1)
    w_new = flat_w[update] + 1.0
    flat_sdf[update] = (flat_sdf[update] * flat_w[update] + sdf[update]) / w_new
    flat_w[update] = w_new
    return vol


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (T, 3) int indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")


def extract_mesh(vol: TSDFVolume) -> Mesh:
    """Zero iso-surface of the volume via marching cubes.

    Unobserved voxels take the truncation value so they never produce
    surface on their own.
    """
    field = np.where(vol.weights > 0, vol.sdf, vol.truncation)
    observed = vol.weights > 0
    if not (np.any(field[observed] < 0) and np.any(field[observed] > 0)):
        raise EmptySurface("volume has no sign change")
    # Restricting to fully observed cubes keeps the iso-surface where depth
    # was actually measured; otherwise the surface closes around the border
    # of the observed region ("skirts" through unobserved space). The mask is
    # eroded because marching_cubes checks only one corner per cube.
    cube_mask = ndimage.binary_erosion(observed, structure=np.ones((3, 3, 3)))
    if not np.any(cube_mask):
        raise EmptySurface("no fully observed cube in the volume")
    try:
        verts, faces, _, _ = measure.marching_cubes(field, level=0.0, mask=cube_mask)
    except (ValueError, RuntimeError) as exc:
        raise EmptySurface(f"no surface within observed voxels: {exc}") from exc
    # marching_cubes indexes voxel corners; voxel (i,j,k) center sits at
    # origin + (idx + 0.5) * voxel_size.
    vertices = vol.origin + (verts + 0.5) * vol.voxel_size
    return Mesh(vertices=vertices, faces=faces)


def sample_mesh_points(
    mesh: Mesh, density: float = DEFAULT_SURFACE_DENSITY, seed: int = 0
) -> np.ndarray:
    """Uniform random points on the mesh surface at the given areal density."""
    v = mesh.vertices
    tris = v[mesh.faces]
    cross = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total == 0:
        raise EmptyPointSet("mesh has zero surface area")
    n = max(int(round(total * density)), 1)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = tris[pick, 0], tris[pick, 1], tris[pick, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def save_ply(mesh: Mesh, path) -> None:
    """Binary little-endian PLY: float32 vertices, uint32 triangle indices."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar uint vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        faces = mesh.faces.astype("<u4")
        rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<u4", (3,))])
        rec["n"] = 3
        rec["idx"] = faces
        fh.write(rec.tobytes())
