import numpy as np
import pytest

from clbench import toy
from clbench.linalg import DimensionError


def brute_force_violations(points, new_cols, old_cols, offset):
    out = set()
    for i, (x, y) in enumerate(points):
        for j, c in enumerate(new_cols):
            if sum(a * b for a, b in zip(x, old_cols[y])) <= sum(a * b for a, b in zip(x, c)):
                out.add((i, offset + j))
    return out


def test_minimal_example_products():
    r = toy.minimal_example()
    assert r.products.dtype.kind == "i"
    quoted = {(0, 0): 1, (0, 1): -1, (1, 0): -1, (1, 1): 1,
              (2, 2): -4, (2, 3): -6, (3, 2): -7, (3, 3): -3, (0, 3): 4}
    for (i, j), v in quoted.items():
        assert r.product(i, j) == v
    assert r.predictions[0] == 3


def test_minimal_example_violations_match_oracle():
    r = toy.minimal_example()
    pts = [(toy.MINIMAL_POINTS[i], i) for i in (0, 1)]
    cols = toy.MINIMAL_COLUMNS
    expected = brute_force_violations(pts, cols[2:], cols[:2], 2)
    assert {(v.point, v.column) for v in r.violations} == expected
    v03 = next(v for v in r.violations if (v.point, v.column) == (0, 3))
    assert (v03.lhs, v03.rhs) == (1, 4)
    # X1 is out-scored by A_2 as well: <X1,A_1>=1 < <X1,A_2>=3
    assert (1, 2) in expected


def test_task_one_pair_is_classified_correctly_within_task():
    r = toy.minimal_example()
    assert r.product(2, 2) > r.product(2, 3)
    assert r.product(3, 2) < r.product(3, 3)


def test_checker_empty_and_dim_mismatch():
    assert toy.check_intertask_inequality([([1.0, 2.0], 0)], [], [[1.0, 0.0]]) == []
    with pytest.raises(DimensionError):
        toy.check_intertask_inequality([([1.0, 2.0], 0)], [[1.0, 0.0, 0.0]], [[1.0, 0.0]])


def test_checker_agrees_with_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = int(rng.integers(1, 9))
        k_old, k_new = int(rng.integers(1, 4)), int(rng.integers(0, 4))
        n = int(rng.integers(1, 11))
        old_cols = rng.integers(-3, 4, (k_old, d)).tolist()
        new_cols = rng.integers(-3, 4, (k_new, d)).tolist()
        pts = [(rng.integers(-3, 4, d).tolist(), int(rng.integers(k_old))) for _ in range(n)]
        got = {(v.point, v.column) for v in toy.check_intertask_inequality(pts, new_cols, old_cols)}
        assert got == brute_force_violations(pts, new_cols, old_cols, k_old)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_separator_demo(seed):
    sep = toy.separator_demo(seed)
    over = toy.separator_demo(seed, overlap=True)
    for rep in (sep, over):
        assert min(rep.intra_task_acc) >= 0.95
        assert rep.multi_head_acc >= 0.95
        assert rep.frozen_unchanged
    assert over.single_head_acc < over.multi_head_acc
    assert over.inter_task_confusion > 0.5


def test_overlap_places_task0_class_on_positive_side_of_second_separator():
    rep = toy.separator_demo(0, overlap=True)
    class0 = rep.continuum.meta["centers"][0]
    assert rep.separators[1].margin(class0) > 0


def test_demo_dump(tmp_path):
    rep = toy.separator_demo(0, n_per_class=20)
    toy.write_demo_csv(rep, tmp_path / "p.csv", tmp_path / "h.csv")
    pts = (tmp_path / "p.csv").read_text().splitlines()
    assert pts[0] == "x,y,class,task" and len(pts) == 1 + 80
    planes = (tmp_path / "h.csv").read_text().splitlines()
    assert planes[0] == "w1,w2,b,task" and len(planes) == 3
