import numpy as np
import pytest

from glimpselab import numerics as nx
from glimpselab.numerics import Tensor2
from gradcheck import numeric_grad, rel_error


def T(a, grad=True):
    return Tensor2(np.array(a, dtype=np.float64), requires_grad=grad)


def test_identity_matmul(rng):
    X = rng.normal(size=(3, 5))
    out = nx.matmul(T(np.eye(3)), T(X))
    assert np.array_equal(out.data, X)


def test_pointwise_definitions():
    assert np.array_equal(nx.relu(T([[-1.0, 2.0]])).data, [[0.0, 2.0]])
    assert nx.sigmoid(T([[0.0]])).data[0, 0] == 0.5
    assert nx.tanh(T([[0.0]])).data[0, 0] == 0.0


@pytest.mark.parametrize("op,a,b", [
    (nx.matmul, (2, 3), (4, 2)),
    (nx.add, (2, 3), (3, 2)),
    (nx.mul, (2, 3), (2, 4)),
    (nx.sub, (1, 3), (2, 3)),
    (nx.concat_cols, (2, 3), (3, 3)),
])
def test_shape_errors_name_both_shapes(op, a, b):
    with pytest.raises(nx.ShapeError) as e:
        op(T(np.zeros(a)), T(np.zeros(b)))
    assert str(a) in str(e.value) and str(b) in str(e.value)


def test_cross_entropy_uniform_and_saturated():
    loss, g = nx.softmax_cross_entropy(np.zeros((4, 26)), [0, 5, 25, 3])
    assert loss == pytest.approx(np.log(26), abs=1e-12)
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-15)
    logits = np.zeros((2, 26))
    logits[0, 7] = logits[1, 2] = 20.0
    loss, _ = nx.softmax_cross_entropy(logits, [7, 2])
    # +20 on the target leaves ln(1 + 25 e^-20) ~ 5.2e-8 of loss
    assert loss == pytest.approx(np.log1p(25 * np.exp(-20.0)), rel=1e-6)
    loss, _ = nx.softmax_cross_entropy(logits * 1.25, [7, 2])
    assert loss < 1e-8


def test_cross_entropy_gradient_matches_fd(rng):
    x = rng.normal(size=(5, 26))
    y = rng.integers(0, 26, 5)
    _, g = nx.softmax_cross_entropy(x, y)
    fd = numeric_grad(lambda: nx.softmax_cross_entropy(x, y)[0], x)
    assert rel_error(g, fd) < 1e-7


def test_softmax_rows_sum_to_one(rng):
    s = nx.softmax(rng.uniform(-10, 10, size=(100, 26)) * 50)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_sum_tanh_wx_gradient(rng):
    W = rng.normal(size=(4, 3))
    x = rng.normal(size=(3, 2))

    def f():
        return float(np.tanh(W @ x).sum())

    Wt, xt = T(W), T(x)
    with nx.GradTape() as tape:
        y = nx.tanh(nx.matmul(Wt, xt))
    grads = nx.backward(tape, (y, np.ones(y.shape)))
    assert rel_error(grads.get(Wt), numeric_grad(f, W)) < 1e-6
    assert rel_error(grads.get(xt), numeric_grad(f, x)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_composite_primitives_gradcheck(seed):
    """Every primitive chained together, random shapes up to 8x8."""
    g = np.random.default_rng(seed)
    n, k, m = g.integers(1, 9, 3)
    A, B = g.normal(size=(n, k)), g.normal(size=(k, m))
    C, bias = g.normal(size=(n, m)), g.normal(size=(1, m))
    D = g.normal(size=(n, 2))
    arrs = [A, B, C, bias, D]
    seedg = g.normal(size=(2 * n, m + 2))

    def build(ts):
        a, b, c, bb, d = ts
        u = nx.add(nx.matmul(a, b), bb)
        v = nx.mul(nx.sigmoid(u), nx.tanh(c))
        w = nx.sub(nx.relu(u), v)
        top = nx.concat_cols(w, d)
        both = nx.concat_rows([top, nx.slice_rows(nx.concat_rows([top, top]), n, 2 * n)])
        return both

    def f():
        return float((build([T(x, False) for x in arrs]).data * seedg).sum())

    ts = [T(x) for x in arrs]
    with nx.GradTape() as tape:
        out = build(ts)
    store = nx.backward(tape, (out, seedg))
    for t, x in zip(ts, arrs):
        assert rel_error(store.get(t), numeric_grad(f, x)) < 1e-6


def test_tape_replays_in_reverse_order():
    a = T([[1.0, 2.0]])
    seen = []
    with nx.GradTape() as tape:
        b = nx.tanh(a)
        c = nx.sigmoid(b)
    # wrap the recorded closures to log visit order
    for i, (out, inp, fn) in enumerate(tape.records):
        tape.records[i] = (out, inp, (lambda fn, i: lambda g: (seen.append(i), fn(g))[1])(fn, i))
    nx.backward(tape, (c, np.ones(c.shape)))
    assert seen == [1, 0]


def test_no_recording_without_tape_or_grad():
    a = T([[1.0]], grad=False)
    with nx.GradTape() as tape:
        nx.tanh(a)
    assert len(tape) == 0
    nx.tanh(T([[1.0]]))  # no active tape: nothing to record, no error


def test_missing_gradient_is_an_error():
    a, unused = T([[1.0]]), T([[2.0]])
    with nx.GradTape() as tape:
        b = nx.tanh(a)
    store = nx.backward(tape, (b, np.ones((1, 1))))
    with pytest.raises(nx.MissingGradientError, match="unused"):
        store.for_params({"a": a, "unused": unused})


def test_no_nonfinite_over_random_inputs(rng):
    for _ in range(1000):
        x = rng.uniform(-10, 10, size=(3, 4))
        w = rng.uniform(-10, 10, size=(4, 26))
        xt, wt = T(x), T(w)
        with nx.GradTape() as tape:
            h = nx.relu(nx.tanh(xt))
            s = nx.sigmoid(nx.matmul(xt, wt))
            out = nx.add(nx.matmul(h, wt), s)
        loss, g = nx.softmax_cross_entropy(out, rng.integers(0, 26, 3))
        store = nx.backward(tape, (out, g))
        assert np.isfinite(loss)
        assert np.all(np.isfinite(store.get(xt))) and np.all(np.isfinite(store.get(wt)))


def test_adam_zero_gradient_keeps_params():
    p = {"w": T(np.arange(6.0).reshape(2, 3))}
    before = p["w"].data.copy()
    st = nx.AdamState.for_params(p)
    for _ in range(10):
        nx.adam_step(p, {"w": np.zeros((2, 3))}, st)
    assert np.max(np.abs(p["w"].data - before)) < 1e-12


def test_adam_matches_textbook_update():
    w = T(np.array([[1.0, -2.0]]))
    st = nx.AdamState.for_params({"w": w})
    grads = [np.array([[0.5, -1.0]]), np.array([[0.1, 0.3]])]
    m = v = np.zeros((1, 2))
    ref = w.data.copy()
    for t, g in enumerate(grads, 1):
        nx.adam_step({"w": w}, {"w": g}, st, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=1e-14)


def test_adam_deterministic(rng):
    def run():
        g = np.random.default_rng(3)
        p = {"w": Tensor2(g.normal(size=(4, 4)).astype(np.float32), True)}
        st = nx.AdamState.for_params(p)
        for _ in range(100):
            nx.adam_step(p, {"w": g.normal(size=(4, 4)).astype(np.float32)}, st)
        return p["w"].data
    assert np.array_equal(run(), run())


def test_clip_global_norm():
    grads = {"a": np.array([[3.0]]), "b": np.array([[4.0]])}
    norm = nx.clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert nx.global_norm(grads) == pytest.approx(1.0)
    small = {"a": np.array([[0.3]])}
    nx.clip_global_norm(small, 1.0)
    assert small["a"][0, 0] == 0.3


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"x.W": rng.normal(size=(3, 2)).astype(np.float32), "x.b": np.zeros((1, 2), np.float32)}
    st = nx.AdamState({k: v + 1 for k, v in params.items()}, {k: v + 2 for k, v in params.items()}, 17)
    path = tmp_path / "c.glck"
    nx.save_checkpoint(path, params, st)
    got, st2 = nx.load_checkpoint(path)
    assert path.read_bytes()[:4] == b"GLCK"
    for k in params:
        assert np.array_equal(got[k], params[k])
        assert np.array_equal(st2.m[k], st.m[k]) and np.array_equal(st2.v[k], st.v[k])
    assert st2.step == 17


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "c.glck"
    nx.save_checkpoint(path, {"a": np.zeros((1, 1), np.float32)})
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(nx.CheckpointError, match="version 9"):
        nx.load_checkpoint(path)
    path.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(nx.CheckpointError, match="magic"):
        nx.load_checkpoint(path)
