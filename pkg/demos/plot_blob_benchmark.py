"""
Every strategy on the synthetic blob continuum
==============================================

Three tasks of two Gaussian classes each, embedded in 10 dimensions. This
runs the same training loop as the MNIST-Fellowship benchmark but needs no
downloads and finishes in seconds, which makes it a convenient place to see
the single-head versus multi-head gap.
"""

import sys
from pathlib import Path

from clbench import data, experiment

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/blobs")

###############################################################################
# A small network and a larger learning rate than the image benchmark, since
# the blobs are easy and there are only a few hundred points per task.

cfg = experiment.ExperimentConfig(scenario="blobs", hidden_sizes=(32,), lr=0.05,
                                  batch_size=16, epochs_per_task=5, seed=0,
                                  out_dir=str(out))
suite = experiment.run_suite(cfg)

###############################################################################
# Final accuracy on the union of all test sets. In the multi-head setting the
# task label picks the head, so only within-task discrimination is needed.

print(f"{'strategy':10s} {'single-head':>12s} {'multi-head':>11s}")
for kind in ("finetune", "ewc", "ewc-kfac", "ogd", "rehearsal"):
    accs = [suite.results[(kind, s)].rows[-1].test_acc_global for s in data.SETTINGS]
    print(f"{kind:10s} {accs[0]:12.3f} {accs[1]:11.3f}")
print(f"per-epoch curves: {suite.path}")
