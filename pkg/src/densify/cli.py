"""Command-line entry points for simulation, runs, sweeps, meshing and training.

Exit codes: 0 success, 2 sequence/config format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .harness import (
    FormatError,
    RunConfig,
    build_mesh,
    load_sequence,
    run_pipeline,
    save_sequence,
    sweep,
    sweep_csv,
    write_report,
)
from .scene import generate_sequence
from .suite import benchmark_suite

logger = logging.getLogger(__name__)

EXIT_FORMAT = 2
EXIT_NUMERIC = 3


def _load_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
    cfg = RunConfig(**base)
    overrides = {}
    mapping = {
        "tau": "tau", "n_points": "n_points", "iterations": "iterations",
        "operator": "operator", "lam": "lam", "seed": "seed",
        "weights": "weights", "out": "output_dir",
    }
    for arg_name, field_name in mapping.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            overrides[field_name] = value
    return replace(cfg, **overrides)


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with run configuration defaults")
    p.add_argument("--tau", type=float)
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--operator", choices=["analytic", "learned"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--weights", help="weights file for the learned operator")


def cmd_simulate(args) -> int:
    cases = {c.name: c for c in benchmark_suite(n_frames=args.frames)}
    if args.case not in cases:
        logger.error("unknown case %r; available: %s", args.case, ", ".join(cases))
        return EXIT_FORMAT
    case = cases[args.case]
    seq = generate_sequence(
        case.scene, case.trajectory, tau=args.tau, n_points=args.n_points,
        seed=args.seed, K=case.intrinsics,
    )
    save_sequence(seq, args.out)
    print(f"wrote {len(seq.frames)} frames to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    seq = load_sequence(args.seq)
    report = run_pipeline(seq, cfg)
    out = cfg.output_dir or args.out or "."
    write_report(report, out)
    if report.aggregate:
        print(f"aggregate MAE {report.aggregate.mae:.4f} m over "
              f"{sum(r.metrics is not None for r in report.frames)} frames")
    print(f"reports written to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    seq = load_sequence(args.seq)
    values = [float(v) for v in args.values.split(",")]
    rows = sweep(seq, args.axis, values, cfg)
    out = Path(cfg.output_dir or args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_{args.axis}.csv").write_text(sweep_csv(rows))
    print(f"sweep table written to {out / f'sweep_{args.axis}.csv'}")
    return 0


def cmd_mesh(args) -> int:
    from .evaluation import save_ply

    cfg = _load_config(args)
    seq = load_sequence(args.seq)
    mesh, m3d = build_mesh(seq, cfg, voxel_size=args.voxel_size,
                           with_metrics=args.with_metrics)
    save_ply(mesh, args.ply)
    print(f"mesh with {len(mesh.vertices)} vertices written to {args.ply}")
    if m3d is not None:
        metrics_path = Path(args.ply).with_suffix(".metrics.csv")
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            d = m3d.as_dict()
            writer.writerow(d.keys())
            writer.writerow([repr(v) for v in d.values()])
        print(f"3D metrics written to {metrics_path}")
    return 0


def cmd_train_toy(args) -> int:
    from .network import DensifyNet, save_weights
    from .training import DivergedLoss, train_toy
    from .datasets import toy_dataset

    dataset = toy_dataset(n_scenes=args.scenes, size=args.size)
    try:
        model, trace = train_toy(dataset, steps=args.steps, lr=args.lr,
                                 seed=args.seed, n_iterations=args.iterations or 3)
    except DivergedLoss as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_NUMERIC
    save_weights(model, args.out)
    trace_path = Path(args.out).with_suffix(".loss.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, value in enumerate(trace):
            writer.writerow([i, repr(value)])
    print(f"weights written to {args.out}; loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    import torch

    from .network import DensifyNet, toy_network_config
    from .training import NonFiniteGradient, gradient_check
    from .datasets import toy_dataset
    from .training import _sample_loss, LossConfig

    torch.manual_seed(args.seed)
    model = DensifyNet(toy_network_config(), seed=args.seed)
    sample = toy_dataset(n_scenes=1, size=24)[0]

    def loss_fn():
        return _sample_loss(model, sample, n_iterations=1, loss_cfg=LossConfig())

    worst = 0.0
    for name, module in [
        ("geometry_encoder", model.geometry_encoder),
        ("monocular_encoder", model.monocular_encoder),
        ("update", model.update),
        ("decoder", model.decoder),
    ]:
        params = list(module.parameters())
        try:
            err = gradient_check(params, loss_fn, eps=args.eps,
                                 max_entries_per_param=2, seed=args.seed)
        except NonFiniteGradient as exc:
            logger.error("%s: %s", name, exc)
            return EXIT_NUMERIC
        print(f"{name}: max relative gradient error {err:.3e}")
        worst = max(worst, err)
    if worst > args.tolerance:
        logger.error("gradient check failed: %.3e > %.3e", worst, args.tolerance)
        return EXIT_NUMERIC
    print(f"gradient check passed at tolerance {args.tolerance:.1e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densify")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic sequence directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--case", default="tiers-256a")
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--n-points", dest="n_points", type=int, default=500)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="densify a sequence and write reports")
    p.add_argument("--seq", required=True)
    p.add_argument("--out")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run once per value of a parameter axis")
    p.add_argument("--seq", required=True)
    p.add_argument("--axis", required=True, choices=["tau", "n_points", "lambda", "iterations"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mesh", help="fuse predictions into a TSDF mesh (PLY)")
    p.add_argument("--seq", required=True)
    p.add_argument("--ply", required=True)
    p.add_argument("--voxel-size", type=float, default=0.04)
    p.add_argument("--with-metrics", action="store_true")
    _add_run_flags(p)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("train-toy", help="train the learnable stages at toy scale")
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference check of learned stages")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=3e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        logger.error("format error: %s", exc)
        return EXIT_FORMAT
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
