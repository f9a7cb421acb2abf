"""
Why a frozen head cannot be fixed later
=======================================

Four points, two tasks, four output columns. Task 0 owns columns 0 and 1,
task 1 owns columns 2 and 3. Each task is solved on its own, yet once the
four columns share one argmax, task 0 points are claimed by task 1 columns.
Nothing in task 1's data mentions X0 or X1, so no loss computed during
task 1 can notice.
"""

import numpy as np

from clbench import toy

###############################################################################
# Every inner product, computed with integers so there is nothing to round.

report = toy.minimal_example()
for line in report.lines():
    print(line)

###############################################################################
# Within each task the right column wins: compare columns 0/1 for X0, X1
# and columns 2/3 for X2, X3.

p = report.products
print("task 0 alone:", np.argmax(p[:2, :2], axis=1), "expected [0 1]")
print("task 1 alone:", 2 + np.argmax(p[2:, 2:], axis=1), "expected [2 3]")

###############################################################################
# With all four columns in play, X0 and X1 are both taken by column 3.

print("single head:", report.predictions, "expected", list(toy.MINIMAL_LABELS))
