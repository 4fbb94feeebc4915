"""
Effect of the sanity terms on a trained regressor
=================================================

Train a baseline TinyNet without sanity terms, then finetune copies with
and without the self and cross terms and compare the sanity errors.
A smaller setting than the acceptance benchmark keeps this to a few
minutes; pass ``--full`` for the 40/8 pair, 64x64 benchmark.
"""

import argparse
import logging
import time

from sanereg.benchmark import run_variants
from sanereg.synth import make_dataset

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

if args.full:
    shape, n_train, n_test, base_epochs, finetune = (64, 64), 40, 8, 15, 8
else:
    shape, n_train, n_test, base_epochs, finetune = (48, 48), 16, 4, 10, 5

train = make_dataset(n_train, shape, magnitude=3.0, smoothness=8.0, seed=100)
test = make_dataset(n_test, shape, magnitude=3.0, smoothness=8.0, seed=10000)

start = time.perf_counter()
variants = {"E": {"lambda_s": 0.0, "lambda_c": 0.0}, "ES": {"lambda_c": 0.0},
            "ESC": {}, "ESC lambda_c=0.01": {"lambda_c": 0.01}}
results, beta = run_variants(train, test, variants, base_epochs=base_epochs,
                             finetune_epochs=finetune)
print(f"\nbeta from the baseline's peak displacement: {beta:.4f}")
print(f"{'variant':20s} {'Dice':>7s} {'SSE':>10s} {'CSE':>10s}  violators by epoch")
for name, r in results.items():
    trace = " ".join(f"{v:.4f}" for v in r.violators)
    print(f"{name:20s} {r.dice:7.4f} {r.sse:10.3g} {r.cse:10.3g}  {trace}")

e = results["E"]
for name in ("ES", "ESC"):
    print(f"SSE reduction {name} vs E: {e.sse / max(results[name].sse, 1e-300):.1f}x")
print(f"total time {time.perf_counter() - start:.0f}s")
