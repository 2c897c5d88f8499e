import csv

import numpy as np
import pytest

from glimpselab import model as M
from glimpselab import numerics as nx
from glimpselab.worldgen import encode_episode, generate_scene, sample_episode
from gradcheck import numeric_grad, rel_error


def small_params(hidden=4, layers=3, seed=0, dtype=np.float64):
    cfg = M.ModelConfig(hidden_size=hidden, num_gru_layers=layers)
    return M.init_params(cfg, np.random.default_rng(seed), dtype)


def random_inputs(g, T, B):
    x = np.zeros((T, B, 28))
    x[np.arange(T)[:, None], np.arange(B)[None, :], g.integers(0, 26, (T, B))] = 1
    x[:, :, 26:] = g.uniform(-4, 4, (T, B, 2))
    return x, g.integers(0, 26, (T, B))


@pytest.mark.parametrize("seed,hidden,T,B", [(0, 3, 4, 2), (1, 5, 3, 3), (2, 8, 2, 1)])
def test_full_model_gradcheck(seed, hidden, T, B):
    g = np.random.default_rng(seed)
    p = small_params(hidden, seed=seed)
    # nonzero biases so their gradients are exercised too
    for k, t in p.tensors.items():
        t.data += g.normal(scale=0.3, size=t.shape)
    x, y = random_inputs(g, T, B)
    loss, grads, _ = M.loss_and_grads(p, x, y)

    def f():
        logits, _ = M.forward_batch(p, x)
        return nx.softmax_cross_entropy(logits, y.reshape(-1))[0]

    for name, t in p.tensors.items():
        assert rel_error(grads[name], numeric_grad(f, t.data)) < 1e-5, name


def test_gru_cell_gradcheck(rng):
    H, B = 4, 3
    x = nx.Tensor2(rng.normal(size=(B, H)), True)
    h = nx.Tensor2(np.tanh(rng.normal(size=(B, H))), True)
    ws = [nx.Tensor2(rng.normal(size=s), True) for s in [(2 * H, H), (1, H)] * 3]
    seed = rng.normal(size=(B, H))
    with nx.GradTape() as tape:
        out = M.gru_cell(x, h, *ws)
    store = nx.backward(tape, (out, seed))

    def f():
        return float((M.gru_cell(x, h, *ws).data * seed).sum())

    for t in [x, h, *ws]:
        assert rel_error(store.get(t), numeric_grad(f, t.data)) < 1e-6


def test_zero_network_is_uniform(rng):
    p = small_params(6)
    for t in p.tensors.values():
        t.data[:] = 0
    x, y = random_inputs(rng, 7, 2)
    logits, _ = M.forward_batch(p, x)
    assert np.all(logits.data == 0)
    loss, _ = nx.softmax_cross_entropy(logits, y.reshape(-1))
    assert loss == pytest.approx(np.log(26), abs=1e-12)


def test_trace_bounds_and_capture_is_passive(rng):
    p = small_params(16, dtype=np.float32)
    for t in p.tensors.values():
        t.data *= 8  # push gates toward saturation
    ep = sample_episode(generate_scene(rng), 40, rng)
    x = encode_episode(ep)
    a, _ = M.forward_episode(p, x, capture=False)
    b, trace = M.forward_episode(p, x, capture=True)
    assert np.array_equal(a, b)
    assert len(trace) == 40
    for name in ("gru1", "gru2", "gru3"):
        assert np.all(np.abs(trace.layers[name]) <= 1.0)
    assert set(trace.layers) == set(M.LAYERS)
    assert np.array_equal(trace.logits, a)


def test_batch_and_episode_forward_agree(rng):
    p = small_params(8, dtype=np.float64)
    x, _ = random_inputs(rng, 5, 3)
    logits, _ = M.forward_batch(p, x)
    for b in range(3):
        single, _ = M.forward_episode(p, x[:, b])
        np.testing.assert_allclose(logits.data.reshape(5, 3, 26)[:, b], single, rtol=1e-12)


def test_initial_loss_near_ln26():
    cfg = M.ModelConfig(hidden_size=32)
    p = M.init_params(cfg, np.random.default_rng(0))
    g = np.random.default_rng(1)
    losses = []
    for _ in range(100):
        x, y = M.make_batch(g, 8, 10)
        logits, _ = M.forward_batch(p, x)
        losses.append(nx.softmax_cross_entropy(logits, y.reshape(-1))[0])
    assert abs(np.mean(losses) / np.log(26) - 1) < 0.02


def tiny_config(**kw):
    base = dict(hidden_size=8, seq_len=6, batch_scenes=4, total_batches=6, seed=3)
    base.update(kw)
    return M.ModelConfig(**base)


def test_training_log_and_determinism(tmp_path):
    r1 = M.train(tiny_config(), log_path=tmp_path / "a.csv", log_every=2,
                 checkpoint_path=tmp_path / "a.glck")
    r2 = M.train(tiny_config(), log_path=tmp_path / "b.csv", log_every=2)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for k in r1.params.tensors:
        assert np.array_equal(r1.params[k].data, r2.params[k].data)
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert tuple(rows[0]) == M.TRAIN_LOG_HEADER
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 4, 6]
    first_loss = float(rows[1][1])
    assert 3.0 <= first_loss <= 3.5
    assert (tmp_path / "a.glck").exists()


def test_checkpoint_roundtrip_bit_identical_logits(tmp_path, rng):
    r = M.train(tiny_config(total_batches=3))
    path = tmp_path / "m.glck"
    M.save_params(path, r.params)
    q = M.load_params(path)
    x, _ = random_inputs(rng, 9, 4)
    a, _ = M.forward_batch(r.params, x.astype(np.float32))
    b, _ = M.forward_batch(q, x.astype(np.float32))
    assert np.array_equal(a.data, b.data)


def test_nan_loss_aborts_with_diagnostic(tmp_path, monkeypatch):
    monkeypatch.setattr(M, "loss_and_grads", lambda p, x, y: (float("nan"), {}, None))
    with pytest.raises(M.TrainingDiverged, match="diagnostic"):
        M.train(tiny_config(), checkpoint_path=tmp_path / "m.glck")
    assert (tmp_path / "m.nan.glck").exists()


def test_constraint_reaches_training_scenes(monkeypatch):
    from glimpselab import worldgen as W
    seen = []
    real = M.generate_scene

    def spy(rng, constraint=None, n_tokens=None):
        seen.append(constraint)
        return real(rng, constraint, n_tokens)

    monkeypatch.setattr(M, "generate_scene", spy)
    c = W.TrainConstraint()
    M.train(tiny_config(total_batches=1), constraint=c)
    assert seen and all(s is c for s in seen)


def test_evaluate_curve_shape_and_ci(rng):
    p = small_params(8, dtype=np.float32)
    eps = M.fresh_episodes(30, 12, rng)
    curve = M.evaluate_curve(p, eps)
    assert curve.accuracy.shape == (12,)
    assert np.all(curve.ci_low <= curve.accuracy) and np.all(curve.accuracy <= curve.ci_high)
    assert curve.n == 30


def test_param_shapes_and_bad_checkpoint():
    p = small_params(5, layers=2)
    assert p["gru2.Wh"].shape == (10, 5)
    assert p["out.W"].shape == (5, 26)
    arrays = p.arrays()
    arrays["head.W"] = np.zeros((5, 4))
    with pytest.raises(nx.ShapeError):
        M.ModelParams.from_arrays(arrays)


def test_config_rejects_bad_dims():
    with pytest.raises(ValueError):
        M.ModelConfig(input_dim=30)
    assert M.ModelConfig.paper().hidden_size == 512
    assert M.ModelConfig.paper().total_batches == 40960
