"""
Two linear separators on 2-D blobs
==================================

One logistic separator per task, trained in turn. The first one is left
untouched while the second learns. Given the task label, each separator
only has to split its own pair and both are perfect. Without it, the two
separators become four columns of one classifier and it depends on where
the second pair happens to sit.
"""

import sys
from pathlib import Path

from clbench import toy

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out")
out.mkdir(parents=True, exist_ok=True)

###############################################################################
# Layout 1: task 0 splits top from bottom, task 1 splits left from right.
# The pairs are far apart and even the four-way argmax gets everything right.

separated = toy.separator_demo(seed=0)
print("\n".join(separated.lines()))

###############################################################################
# Layout 2: the task 1 pair is rotated almost onto the task 0 pair. Class 0
# (task 0) now sits on the positive side of the second separator, which was
# never shown a single class 0 point.

overlap = toy.separator_demo(seed=0, overlap=True)
print("\n".join(overlap.lines()))

###############################################################################
# The CSVs hold the points and the two hyperplanes ``w1*x + w2*y + b = 0``
# for plotting with any tool.

for name, rep in (("separated", separated), ("overlap", overlap)):
    toy.write_demo_csv(rep, out / f"{name}_points.csv", out / f"{name}_hyperplanes.csv")
print(f"wrote CSVs to {out}/")
