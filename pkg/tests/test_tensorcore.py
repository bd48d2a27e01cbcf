import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from netlat import tensorcore as tc
from netlat.tensorcore import ParamStore, ShapeError, Tensor, backward, gradcheck


def param(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_shape():
    assert (tc.as_tensor(np.ones((2, 3))) @ np.ones((3, 1))).shape == (2, 1)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 1\)"):
        tc.matmul(np.ones((2, 3)), np.ones((2, 1)))
    with pytest.raises(ShapeError):
        tc.add(np.ones((2, 3)), np.ones((3, 2)))


def test_segment_softmax_closed_form():
    out = tc.segment_softmax(np.array([0.0, 0.0, 5.0]), np.array([0, 0, 1]), 2)
    np.testing.assert_allclose(out.data, [0.5, 0.5, 1.0], atol=1e-15)


def test_concat_feature_axis():
    xs = [np.ones((4, 8))] * 3
    assert tc.concat(xs, axis=1).shape == (4, 24)


def test_segment_reductions():
    x = np.array([[1.0], [2.0], [3.0]])
    seg = np.array([0, 0, 2])
    np.testing.assert_array_equal(tc.segment_sum(x, seg, 3).data, [[3.0], [0.0], [3.0]])
    np.testing.assert_array_equal(tc.segment_mean(x, seg, 3).data, [[1.5], [0.0], [3.0]])


def test_elementwise_values():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_allclose(tc.leaky_relu(x, 0.2).data, [-0.4, 0.0, 3.0])
    np.testing.assert_allclose(tc.abs(x).data, [2.0, 0.0, 3.0])
    np.testing.assert_allclose(tc.guarded_log_abs(x).data, np.log(np.abs(x) + 1e-7))
    np.testing.assert_allclose(tc.sigmoid(np.array([0.0])).data, [0.5])
    np.testing.assert_allclose(tc.softplus(np.array([0.0, 800.0])).data, [np.log(2), 800.0])
    np.testing.assert_allclose(tc.clip(x, -1, 1).data, [-1.0, 0.0, 1.0])


def test_linear_gradient():
    x = np.array([1.0, -2.0, 3.0])
    w = param(np.zeros(3))
    backward(tc.sum(x * w))
    np.testing.assert_array_equal(w.grad, x)


def test_unreached_param_gets_zero():
    w, v = param(np.ones(2)), param(np.ones(3))
    backward(tc.sum(w * w), [w, v])
    np.testing.assert_array_equal(v.grad, np.zeros(3))


def test_non_scalar_loss_rejected():
    with pytest.raises(ShapeError):
        backward(param(np.ones(2)) * 2.0)


def test_shared_subexpression_accumulates():
    w = param(np.array(3.0))
    y = w * w
    backward(y + y)
    assert w.grad == pytest.approx(12.0)


def test_numpy_left_operand():
    w = param(np.eye(2))
    out = np.ones((1, 2)) @ w
    assert isinstance(out, Tensor)


@pytest.mark.parametrize("seed", range(20))
def test_random_composition_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 4))
    w1, w2, w3 = (param(rng.normal(size=s) * 0.5) for s in [(4, 6), (6, 3), (3, 1)])
    s = sp.random(5, 5, density=0.5, random_state=seed, format="csr")
    seg = rng.integers(0, 3, size=5)

    def fn():
        h = tc.tanh(tc.spmm(s, x @ w1))
        h = tc.leaky_relu(h @ w2, 0.2) + tc.sigmoid(h @ w2)
        h = tc.segment_softmax(h, seg, 3) * tc.exp(h * 0.1)
        h = tc.concat([h, tc.abs(h) + 1.0], axis=1)
        return tc.mean(tc.log(tc.abs(h @ np.ones((6, 3)) @ w3) + 1.0))

    assert gradcheck(fn, [w1, w2, w3]) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    x = param(rng.uniform(0.5, 2.0, size=(3, 2)) * rng.choice([-1, 1], size=(3, 2)))
    for f in (tc.tanh, tc.sigmoid, tc.exp, tc.abs, tc.guarded_log_abs, tc.relu, tc.softplus,
              lambda t: tc.leaky_relu(t, 0.3), lambda t: tc.clip(t, -1.0, 1.0),
              lambda t: tc.transpose(t), lambda t: tc.reshape(t, (6,)),
              lambda t: tc.gather(t, np.array([2, 0, 0])), lambda t: t / (tc.abs(t) + 1.0),
              lambda t: t[:, 1:], lambda t: tc.segment_mean(t, np.array([1, 1, 0]), 2)):
        assert gradcheck(lambda: tc.sum(f(x) * f(x)), [x]) < 1e-4


def test_adam_zero_gradient_keeps_params():
    store = ParamStore()
    w = store.add("w", [1.0, 2.0])
    w.grad = np.zeros(2)
    store.adam_step(1e-3)
    np.testing.assert_array_equal(w.data, [1.0, 2.0])


def test_adam_quadratic():
    store = ParamStore()
    w = store.add("w", 0.0)
    for _ in range(10000):
        store.zero_grad()
        backward((w - 3.0) * (w - 3.0), store.tensors())
        store.adam_step(1e-3)
    assert abs(w.item() - 3.0) < 1e-2


def test_adam_deterministic():
    stores = []
    for _ in range(2):
        s = ParamStore()
        s.add("w", np.arange(4.0))
        for step in range(5):
            s["w"].grad = np.sin(np.arange(4.0) + step)
            s.adam_step(1e-2)
        stores.append(s["w"].data)
    np.testing.assert_array_equal(stores[0], stores[1])


def test_clip_grad_norm():
    store = ParamStore()
    a, b = store.add("a", np.zeros(2)), store.add("b", np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert store.clip_grad_norm(1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])


def test_duplicate_names_rejected():
    store = ParamStore()
    store.add("w", 1.0)
    with pytest.raises(KeyError):
        store.add("w", 2.0)


def test_checkpoint_roundtrip():
    store = ParamStore()
    store.add("a", np.arange(6.0).reshape(2, 3))
    store.add("b", 0.5)
    obj = json.loads(json.dumps(store.to_checkpoint("abc")))
    assert obj["format_version"] == tc.CHECKPOINT_VERSION and obj["config_hash"] == "abc"
    assert obj["params"][0] == {"name": "a", "shape": [2, 3], "values": [0, 1, 2, 3, 4, 5]}
    back = ParamStore.from_checkpoint(obj)
    for name, t in store:
        np.testing.assert_array_equal(back[name].data, t.data)
    obj["format_version"] = 99
    with pytest.raises(ValueError):
        ParamStore.from_checkpoint(obj)


def test_config_hash_key_order_irrelevant():
    assert tc.config_hash({"a": 1, "b": 2}) == tc.config_hash({"b": 2, "a": 1})
    assert tc.config_hash({"a": 1}) != tc.config_hash({"a": 2})


@given(arrays(float, st.integers(1, 12), elements=st.floats(-50, 50)), st.integers(1, 4), st.data())
@settings(max_examples=60, deadline=None)
def test_segment_softmax_sums_to_one(x, n_seg, data):
    seg = np.array(data.draw(st.lists(st.integers(0, n_seg - 1), min_size=len(x), max_size=len(x))))
    out = tc.segment_softmax(x, seg, n_seg).data
    assert np.all(np.isfinite(out))
    sums = np.bincount(seg, weights=out, minlength=n_seg)
    present = np.bincount(seg, minlength=n_seg) > 0
    np.testing.assert_allclose(sums[present], 1.0, atol=1e-12)


@given(arrays(float, (4, 3), elements=st.floats(-1e3, 1e3)))
@settings(max_examples=60, deadline=None)
def test_guarded_ops_finite(x):
    for f in (tc.tanh, tc.sigmoid, tc.guarded_log_abs, tc.softplus, lambda t: tc.exp(tc.clip(t, -1e3, 20))):
        assert np.all(np.isfinite(f(x).data))


def test_forward_bit_identical():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(50, 8)), rng.normal(size=(8, 4))
    seg = rng.integers(0, 10, size=50)
    a = tc.segment_softmax(tc.tanh(x @ w), seg, 10).data
    b = tc.segment_softmax(tc.tanh(x @ w), seg, 10).data
    assert a.tobytes() == b.tobytes()
