"""
t-SNE of the shared latent space
================================

Train fine-tuning on the blob continuum, reload the checkpoint, and embed
200 test latents in two dimensions. Points are coloured by task in the
SVG, which is written next to the embedding CSV.
"""

import sys
from pathlib import Path

from clbench import eval as E
from clbench import experiment

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/tsne")

cfg = experiment.ExperimentConfig(scenario="blobs", hidden_sizes=(32,), lr=0.05,
                                  batch_size=16, blob_per_class=200, seed=0,
                                  out_dir=str(out))
run = experiment.run_experiment(cfg)

###############################################################################
# The embedding uses perplexity 30 and 1000 iterations.

dump, info = experiment.run_tsne(run.paths["checkpoint"], cfg)
print(f"KL(P||Q) {info.kl_initial:.3f} at the start, {info.kl_final:.3f} at the end")

###############################################################################
# How far apart the task clouds are, relative to their own spread.

print(f"task separation (scale free): {E.scale_free_separation(dump.coords, dump.task_labels):.2f}")
print(f"wrote {out / 'embedding.csv'} and {out / 'scatter.svg'}")
