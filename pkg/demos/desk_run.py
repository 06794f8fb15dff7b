"""Short desk-scale comparison on the bundled MNIST subset.

Trains the full 8-bit configuration and a float baseline for a few epochs
and prints their test accuracy.  ``--epochs 30`` reproduces the acceptance
schedule (about a minute per run on a laptop CPU).
"""
import argparse
import time
from pathlib import Path

from intflow.quantfn import BitWidthConfig
from intflow.trainer import TrainConfig, load_data, memory_report, train

DATA = Path(__file__).resolve().parents[1] / "data"

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=3)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

paths = {f"{split}_{kind}": str(DATA / f"mnist5k-{split}-{kind}-{'idx3' if kind == 'images' else 'idx1'}-ubyte.gz")
         for split in ("train", "test") for kind in ("images", "labels")}
data = load_data(TrainConfig(**paths))

runs = {
    "fp32": dict(roles=()),
    "8-bit, flag E2": dict(),
    "8-bit, 16-bit E2": dict(widths=BitWidthConfig(k_E2=16, e2_mode="plain_shift")),
}
for name, kw in runs.items():
    cfg = TrainConfig(**paths, epochs=args.epochs, seed=args.seed, **kw)
    t = time.perf_counter()
    model, metrics = train(cfg, data)
    last = metrics.epoch_rows()[-1]
    print(f"{name:18s} test {last['test_acc']:.3f}  train {last['train_acc']:.3f}  "
          f"({time.perf_counter() - t:.0f}s)")

rep = memory_report(model, BitWidthConfig())
print(f"W+A memory of the quantized stack: {rep['ratio']}x smaller than 32-bit")
