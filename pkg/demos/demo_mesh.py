"""Densify a committed scene, TSDF-fuse the predictions and export a mesh.

Usage: python demos/demo_mesh.py [output.ply]
"""

import sys

from densify.evaluation import save_ply
from densify.harness import RunConfig, build_mesh
from densify.scene import generate_sequence
from densify.suite import benchmark_suite


def main() -> None:
    ply = sys.argv[1] if len(sys.argv) > 1 else "demo_scene.ply"
    case = next(c for c in benchmark_suite() if c.name == "slant-96")
    print(f"rendering {case.name} ...")
    seq = generate_sequence(case.scene, case.trajectory, tau=0.2, n_points=500,
                            seed=11, K=case.intrinsics)
    cfg = RunConfig(tau=0.2, seed=11, iterations=10)
    mesh, m3d = build_mesh(seq, cfg, voxel_size=0.02, with_metrics=True)
    save_ply(mesh, ply)
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {ply}")
    print(f"chamfer {m3d.chamfer:.4f} m  accuracy {m3d.acc:.4f} m  "
          f"completeness {m3d.comp:.4f} m  f-score {m3d.fscore:.3f}")


if __name__ == "__main__":
    main()
