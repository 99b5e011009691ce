"""Train the learnable pipeline at toy scale and write the loss trace.

Usage: python demos/demo_train.py [weights.bin]
"""

import csv
import sys
from pathlib import Path

from densify.datasets import toy_dataset
from densify.network import save_weights
from densify.training import train_toy


def main() -> None:
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_weights.bin")
    dataset = toy_dataset(n_scenes=1, size=32, n_points=80)
    print("training (120 steps, 1 scene, 32 px) ...")
    model, trace = train_toy(dataset, steps=120, lr=0.01, seed=3,
                             n_iterations=1, augment_samples=False)
    first = sum(trace[:10]) / 10
    last = sum(trace[-10:]) / 10
    print(f"loss {first:.4f} -> {last:.4f}  (ratio {last / first:.3f})")
    save_weights(model, out)
    trace_path = out.with_suffix(".loss.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows((i, repr(v)) for i, v in enumerate(trace))
    print(f"weights -> {out}; loss trace -> {trace_path}")


if __name__ == "__main__":
    main()
