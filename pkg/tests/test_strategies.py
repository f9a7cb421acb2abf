import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clbench import nn
from clbench import strategies as S
from clbench.data import Batch, Dataset, synthetic_blobs

from conftest import central_diff, kink_free, make_model, rel_err


def toy_data(rng, n=5, d=8, classes=3):
    return Dataset(rng.standard_normal((n, d)), rng.integers(0, classes, n))


def per_sample_grads(model, data, head=0):
    out = []
    for x, y in zip(data.images, data.labels):
        _, g = nn.loss_and_gradients(model, x[None, :], np.array([y]), head)
        out.append(g.trunk + [g.heads[head]])
    return out


def test_config_defaults():
    assert S.StrategyConfig("ewc").lam == 1000
    assert S.StrategyConfig("EWC_KFAC").lam == 10
    assert S.StrategyConfig("rehearsal").buffer_per_class == 100
    with pytest.raises(ValueError):
        S.StrategyConfig("si")
    with pytest.raises(ValueError):
        S.StrategyConfig("ewc", lam=-1)


def test_ewc_fisher_matches_per_sample_oracle(rng):
    model = make_model()
    data = toy_data(rng)
    ewc = S.make_strategy("ewc")
    ewc.consolidate(model, data)
    grads = per_sample_grads(model, data)
    for l, f in enumerate(ewc.anchors[0].fisher_diag):
        oracle = np.mean([g[l] ** 2 for g in grads], axis=0)
        assert np.max(np.abs(f - oracle)) < 1e-12
        assert np.all(f >= 0)


def test_ewc_fisher_zero_when_gradients_vanish(rng):
    model = make_model()
    for w in model.layers + [model.heads[0].weight]:
        w[:] = 0.0
    # a single-class head has zero cross-entropy gradient everywhere
    model.heads[0].weight = np.zeros((1, 5))
    data = Dataset(rng.standard_normal((6, 8)), np.zeros(6, int))
    ewc = S.make_strategy("ewc")
    ewc.consolidate(model, data)
    assert all(not np.any(f) for f in ewc.anchors[0].fisher_diag)


def test_consolidate_rejects_empty(rng):
    model = make_model()
    empty = Dataset(np.zeros((0, 8)), np.zeros(0, int))
    for kind in S.KINDS:
        with pytest.raises(S.ConsolidationError):
            S.make_strategy(kind).consolidate(model, empty)


def test_ewc_penalty_closed_forms(rng):
    model = make_model()
    ewc = S.make_strategy("ewc")
    ewc.consolidate(model, toy_data(rng))
    assert ewc.penalty_value(model) == 0
    anc = ewc.anchors[0]
    anc.fisher_diag = [np.ones_like(f) for f in anc.fisher_diag]
    n_params = 0
    for p in model.layers + [model.heads[0].weight]:
        p += 1.0
        n_params += p.size
    assert ewc.penalty_value(model) == pytest.approx(n_params / 2, rel=1e-12)


def test_ewc_regularize_identity_at_anchor(rng):
    model = make_model()
    ewc = S.make_strategy("ewc")
    data = toy_data(rng)
    ewc.consolidate(model, data)
    _, g = nn.loss_and_gradients(model, data.images, data.labels)
    out = ewc.regularize_gradient(model, g)
    assert all(np.array_equal(a, b) for a, b in zip(out.trunk, g.trunk))
    assert np.array_equal(out.heads[0], g.heads[0])


def test_kfac_single_sample_factor_is_rank_one(rng):
    model = make_model()
    data = toy_data(rng, n=1)
    kfac = S.make_strategy("ewc-kfac")
    kfac.consolidate(model, data)
    _, cache = nn.forward(model, data.images)
    for a_f, a in zip(kfac.anchors[0].a_factor, cache.inputs):
        assert np.array_equal(a_f, np.outer(a[0], a[0]))


def test_kfac_factors_psd_and_symmetric(rng):
    model = make_model()
    kfac = S.make_strategy("ewc-kfac")
    kfac.consolidate(model, toy_data(rng, n=20))
    for m in kfac.anchors[0].a_factor + kfac.anchors[0].g_factor:
        assert np.max(np.abs(m - m.T)) <= 1e-10
        assert np.linalg.eigvalsh(m).min() > -1e-10


def test_kfac_penalty_matches_explicit_kronecker(rng):
    # one trunk layer 4x3 (2 inputs + bias): perturb and compare to vec^T (A kron G) vec
    model = make_model((2, 4), 3)
    kfac = S.make_strategy("ewc-kfac")
    kfac.consolidate(model, toy_data(rng, n=10, d=2))
    anc = kfac.anchors[0]
    model.layers[0] += rng.standard_normal(model.layers[0].shape)
    model.heads[0].weight += rng.standard_normal(model.heads[0].weight.shape)
    expected = 0.0
    for w, w0, a, g in zip(model.layers + [model.heads[0].weight], anc.w_star,
                           anc.a_factor, anc.g_factor):
        vec = (w - w0).flatten(order="F")
        expected += 0.5 * vec @ np.kron(a, g) @ vec
    assert kfac.penalty_value(model) == pytest.approx(expected, rel=1e-10)


def combined_objective(model, strategy, x, y, lam):
    loss = nn.loss_ce(nn.forward(model, x)[0], y)[0]
    return loss + lam * strategy.penalty_value(model)


@pytest.mark.parametrize("kind", ["ewc", "ewc-kfac"])
def test_regularized_gradient_matches_finite_differences(kind, rng):
    model = make_model((6, 5, 4), 3, seed=3)
    strat = S.make_strategy(S.StrategyConfig(kind, lam=0.7))
    strat.consolidate(model, toy_data(rng, n=12, d=6))
    for w in model.layers + [model.heads[0].weight]:
        w += 0.05 * rng.standard_normal(w.shape)
    x, y = rng.standard_normal((6, 6)), rng.integers(0, 3, 6)
    assert kink_free(model, x)
    _, g = nn.loss_and_gradients(model, x, y)
    g = strat.regularize_gradient(model, g)
    worst = 0.0
    for w, gw in zip(model.layers + [model.heads[0].weight], g.trunk + [g.heads[0]]):
        for idx in np.ndindex(w.shape):
            fd = central_diff(lambda: combined_objective(model, strat, x, y, 0.7), w, idx)
            worst = max(worst, rel_err(gw[idx], fd))
    assert worst <= 1e-5


def test_single_head_anchor_covers_only_consolidated_rows(rng):
    model = make_model((8, 6, 4), 3)
    ewc = S.make_strategy("ewc")
    ewc.consolidate(model, toy_data(rng, n=10))
    nn.expand_head(model, 3, seed=1)
    model.heads[0].weight[3:] += 5.0  # new rows are free
    assert ewc.penalty_value(model) == 0
    model.heads[0].weight[0, 0] += 1.0
    assert ewc.penalty_value(model) > 0


def test_ogd_projection_properties(rng):
    model = make_model((8, 6, 4), 3)
    ogd = S.make_strategy(S.StrategyConfig("ogd", ogd_memory_per_task=15))
    ogd.consolidate(model, toy_data(rng, n=30), rng=rng)
    assert 0 < len(ogd.state) <= 15
    b = ogd.state.basis
    assert np.max(np.abs(b @ b.T - np.eye(len(b)))) <= 1e-8
    _, g = nn.loss_and_gradients(model, rng.standard_normal((4, 8)), rng.integers(0, 3, 4))
    flat = S.flatten_shared(model, g)
    proj = S.project_out(b, flat)
    assert S.project_is_orthogonal_check(ogd.state, flat) <= 1e-8
    assert np.max(np.abs(S.project_out(b, proj) - proj)) <= 1e-12
    out = ogd.regularize_gradient(model, g)
    assert np.max(np.abs(b @ S.flatten_shared(model, out))) <= 1e-8
    # gradient lying in the span projects to zero
    inside = b.T @ rng.standard_normal(len(b))
    assert np.max(np.abs(S.project_out(b, inside))) < 1e-12
    # already-orthogonal gradient is unchanged
    assert np.linalg.norm(S.project_out(b, proj) - proj) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_project_random_large_basis(seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((1000, 50)))
    state = S.OgdState(q.T.copy(), 300)
    assert S.project_is_orthogonal_check(state, rng.standard_normal(1000)) <= 1e-8


def test_ogd_basis_grows_with_head_and_respects_cap(rng):
    model = make_model((8, 6, 4), 3)
    ogd = S.make_strategy(S.StrategyConfig("ogd", ogd_memory_per_task=10, ogd_basis_cap=14))
    ogd.consolidate(model, toy_data(rng, n=20), rng=rng)
    nn.expand_head(model, 3, seed=1)
    data2 = Dataset(rng.standard_normal((20, 8)), rng.integers(3, 6, 20))
    ogd.consolidate(model, data2, rng=rng)
    assert len(ogd.state) == 14
    b = ogd.state.basis
    assert b.shape[1] == S.flatten_shared(model, nn.loss_and_gradients(model, data2.images, data2.labels)[1]).size
    assert np.max(np.abs(b @ b.T - np.eye(14))) <= 1e-8


def test_ogd_multi_head_leaves_inactive_heads_alone(rng):
    model = make_model((8, 6, 4), 3, multi_head=True)
    ogd = S.make_strategy(S.StrategyConfig("ogd", ogd_memory_per_task=10))
    ogd.consolidate(model, toy_data(rng, n=20), head_index=0, rng=rng)
    nn.add_head(model, 3, 3, seed=2)
    _, g = nn.loss_and_gradients(model, rng.standard_normal((4, 8)), rng.integers(0, 3, 4), 1)
    out = ogd.regularize_gradient(model, g)
    assert set(out.heads) == {1}
    assert np.array_equal(out.heads[1], g.heads[1])


def test_replay_buffer_reservoir_caps(rng):
    buf = S.ReplayBuffer(5)
    for i in range(100):
        buf.insert(np.full(2, i), i % 3, 0, rng)
    assert all(c == 5 for c in buf.counts().values())
    x, y, t = buf.arrays()
    assert all(int(xx[0]) % 3 == yy for xx, yy in zip(x, y))


def test_rehearsal_consolidate_fills_classes(rng):
    reh = S.make_strategy(S.StrategyConfig("rehearsal", buffer_per_class=100))
    data = Dataset(rng.standard_normal((1200, 3)), np.repeat(np.arange(10), 120))
    reh.consolidate(make_model((3, 4), 10), data, rng=rng)
    assert reh.buffer.counts() == {(0, c): 100 for c in range(10)}


def test_compose_batch(rng):
    batch = Batch(np.zeros((64, 3)), np.zeros(64, int), np.zeros(64, int))
    reh = S.make_strategy("rehearsal")
    assert reh.compose_batch(batch, rng) is batch
    reh.consolidate(make_model((3, 4), 2), Dataset(np.ones((50, 3)), np.ones(50, int)), task_label=1, rng=rng)
    ft = S.make_strategy("finetune")
    assert ft.compose_batch(batch, rng) is batch
    from_buffer = 0
    for _ in range(157):  # 157 * 64 >= 10,000 slots
        out = reh.compose_batch(batch, rng)
        assert out.x.shape == batch.x.shape
        from_buffer += int(np.sum(out.task == 1))
    frac = from_buffer / (157 * 64)
    assert 0.47 <= frac <= 0.53


def test_batch_gradients_multi_head_equals_weighted_groups(rng):
    model = make_model((8, 6, 4), 3, multi_head=True)
    nn.add_head(model, 3, 3, seed=4)
    x = rng.standard_normal((6, 8))
    y = rng.integers(0, 3, 6)
    task = np.array([0, 1, 1, 0, 1, 1])
    loss, g = S.batch_gradients(model, Batch(x, y, task))

    def total():
        out = 0.0
        for h in (0, 1):
            m = task == h
            out += m.sum() / 6 * nn.loss_ce(nn.forward(model, x[m], h)[0], y[m])[0]
        return out

    assert loss == pytest.approx(total(), rel=1e-13)
    w = model.heads[1].weight
    assert rel_err(g.heads[1][0, 1], central_diff(total, w, (0, 1))) < 1e-6
    w = model.layers[0]
    assert rel_err(g.trunk[0][2, 3], central_diff(total, w, (2, 3))) < 1e-6


@pytest.mark.parametrize("kind", S.KINDS)
def test_state_roundtrip(kind, tmp_path, rng):
    model = make_model()
    strat = S.make_strategy(S.StrategyConfig(kind, ogd_memory_per_task=5))
    strat.consolidate(model, toy_data(rng, n=12), rng=np.random.default_rng(1))
    for w in nn.all_parameters(model):
        w += 0.1
    path = tmp_path / "state.npz"
    S.save_state(strat, path)
    back = S.load_state(path)
    assert back.config == strat.config
    assert back.penalty_value(model) == strat.penalty_value(model)
    a = strat.state_arrays()
    b = back.state_arrays()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_penalties_positive_away_from_anchor(rng):
    blobs = synthetic_blobs(1, 3, 8, 40, seed=0)
    model = make_model((8, 6, 4), 3)
    for kind in ("ewc", "ewc-kfac"):
        strat = S.make_strategy(kind)
        strat.consolidate(model, blobs.tasks[0].train)
        moved = model.copy()
        moved.layers[0][0, 0] += 0.1
        assert strat.penalty_value(model) == 0
        assert strat.penalty_value(moved) > 0
