import numpy as np
import pytest

from clbench import nn


def make_model(dims=(8, 6, 4), n_classes=3, seed=0, multi_head=False, bias_scale=0.3):
    cfg = nn.MlpConfig(dims[0], tuple(dims[1:]), init_seed=seed)
    model = nn.init(cfg, n_classes, multi_head)
    rng = np.random.default_rng(seed + 1000)
    # nonzero biases so every parameter gets exercised by gradient checks
    for w in model.layers + [h.weight for h in model.heads]:
        w[:, -1] = bias_scale * rng.standard_normal(w.shape[0])
    return model


def central_diff(f, arr, idx, h=1e-5):
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def kink_free(model, x, margin=1e-3):
    _, cache = nn.forward(model, x, 0)
    return all(np.min(np.abs(z)) > margin for z in cache.preacts)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_fake_fellowship(root, n_train=60, n_test=30, seed=0, side=4, gz=True):
    """Six small IDX pairs in the fellowship layout; class c images are brighter at pixel c."""
    import gzip
    from pathlib import Path

    from clbench.data import IdxArray, serialize_idx

    rng = np.random.default_rng(seed)
    root = Path(root)
    for t, name in enumerate(("mnist", "fashion", "kmnist")):
        for prefix, n in (("train", n_train), ("t10k", n_test)):
            labels = np.arange(n) % 10
            imgs = rng.integers(0, 60, (n, side, side)).astype(np.uint8)
            flat = imgs.reshape(n, -1)
            flat[np.arange(n), labels + t] = 255
            d = root / name
            d.mkdir(parents=True, exist_ok=True)
            for kind, arr in (("images-idx3", imgs), ("labels-idx1", labels.astype(np.uint8))):
                raw = serialize_idx(IdxArray(list(arr.shape), arr.tobytes()))
                fname = f"{prefix}-{kind}-ubyte"
                if gz:
                    (d / (fname + ".gz")).write_bytes(gzip.compress(raw))
                else:
                    (d / fname).write_bytes(raw)
    return root


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
