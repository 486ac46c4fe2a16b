import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpsnet import autodiff as ad
from rpsnet.autodiff import GraphError, NonFiniteError, Param, ParamStore, Tensor


def naive_matmul(x, w):
    n, k = x.shape
    out = np.zeros((n, w.shape[1]))
    for i in range(n):
        for j in range(w.shape[1]):
            for t in range(k):
                out[i, j] += x[i, t] * w[t, j]
    return out


def test_affine_identity_weights():
    out = ad.affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    assert out.data.tolist() == [[1.0, 2.0]]


def test_affine_hand_arithmetic():
    out = ad.affine(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    assert out.data.tolist() == [[6.0]]


def test_affine_matches_triple_loop(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    out = ad.affine(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, naive_matmul(x, w) + b, atol=1e-12)


def test_affine_shape_mismatch():
    with pytest.raises(ValueError):
        ad.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))
    with pytest.raises(ValueError):
        ad.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones(3)))


def test_relu_values():
    assert ad.relu(Tensor([[-1.0, 0.0, 2.0]])).data.tolist() == [[0.0, 0.0, 2.0]]
    assert not ad.relu(Tensor(-np.ones((2, 3)))).data.any()


def test_relu_gradient_by_finite_difference():
    x = Param("x", np.array([[1.5, -0.7]]))
    err = ad.grad_check(lambda: ad.total(ad.relu(x)), [x], h=1e-5)
    assert err < 1e-8
    assert not x.grad.any()  # grad_check clears what it accumulated
    ad.backward(ad.total(ad.relu(x)))
    assert x.grad.tolist() == [[1.0, 0.0]]


def test_log_softmax_examples():
    np.testing.assert_allclose(ad.log_softmax(Tensor([[0.0, 0.0]])).data, np.log([[0.5, 0.5]]))
    big = ad.log_softmax(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all()
    p = np.exp(ad.log_softmax(Tensor([[2.0, 0.0]]), temperature=2.0).data)
    e = np.exp(1.0)
    np.testing.assert_allclose(p, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-12)
    np.testing.assert_allclose(p, [[0.7311, 0.2689]], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.floats(0.1, 10.0), st.integers(0, 2**31))
def test_log_softmax_rows_normalised(n, c, t, seed):
    x = np.random.default_rng(seed).standard_normal((n, c)) * 20
    out = ad.log_softmax(Tensor(x), t).data
    lse = np.log(np.exp(out).sum(axis=1))
    assert np.abs(lse).max() < 1e-9


def test_log_softmax_rejects_bad_temperature():
    with pytest.raises(ValueError):
        ad.log_softmax(Tensor([[0.0, 1.0]]), 0.0)


def _params(rng, *shapes):
    return [Param(f"p{i}", rng.standard_normal(s)) for i, s in enumerate(shapes)]


@pytest.mark.parametrize("op", ["affine", "relu", "add", "mul", "scale", "scale_rows", "slice_cols",
                                "log_softmax", "mean", "mul_const"])
def test_every_op_passes_grad_check(op, rng):
    x, w, b, y = _params(rng, (3, 4), (4, 5), (5,), (3, 4))
    x.data += 0.3 * np.sign(x.data)  # keep relu inputs away from the kink
    weights = rng.standard_normal((3, 5))
    s = rng.uniform(0.5, 2.0, size=3)
    build = {
        "affine": lambda: ad.affine(x, w, b),
        "relu": lambda: ad.relu(x),
        "add": lambda: ad.add(x, y, x),
        "mul": lambda: ad.mul(x, y),
        "scale": lambda: ad.scale(x, -1.7),
        "scale_rows": lambda: ad.scale_rows(x, s),
        "slice_cols": lambda: ad.slice_cols(x, 2),
        "log_softmax": lambda: ad.log_softmax(x, 2.0),
        "mean": lambda: ad.mean(x),
        "mul_const": lambda: ad.mul_const(x, 3.0),
    }[op]

    def loss():
        out = build()
        if out.data.ndim == 0:
            return out
        c = np.cos(np.arange(out.data.size)).reshape(out.shape)
        return ad.total(ad.mul_const(out, c))

    assert ad.grad_check(loss, [x, w, b, y], samples=12) < 1e-4


def test_two_layer_mlp_cross_entropy_grad(rng):
    from rpsnet.objective import cross_entropy_seen

    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 3, size=6)
    w1, b1, w2, b2 = _params(rng, (5, 7), (7,), (7, 3), (3,))

    def loss():
        return cross_entropy_seen(ad.affine(ad.relu(ad.affine(Tensor(x), w1, b1)), w2, b2), y, 1, 3)

    assert ad.grad_check(loss, [w1, b1, w2, b2]) < 1e-4


def test_quadratic_grad_check():
    theta = Param("t", np.array([0.3, -1.2, 2.0]))
    assert ad.grad_check(lambda: ad.total(ad.mul(theta, theta)), [theta]) < 1e-6


def test_frozen_parameter_gets_no_gradient(rng):
    w, v = _params(rng, (3, 2), (3, 2))
    w.freeze()
    assert not w.requires_grad
    ad.backward(ad.total(ad.add(ad.mul(w, v), v)))
    assert not w.grad.any()
    assert v.grad.any()
    w.set_trainable(True)
    assert not w.requires_grad  # freezing is one-way


def test_backward_errors():
    with pytest.raises(GraphError):
        ad.backward(Tensor(1.0))
    p = Param("p", np.ones((2, 2)))
    with pytest.raises(GraphError):
        ad.backward(ad.relu(p))
    loss = ad.total(p)
    ad.backward(loss)
    with pytest.raises(GraphError):
        ad.backward(loss)  # graph was released


def test_no_grad_records_nothing():
    p = Param("p", np.ones(3))
    with ad.no_grad():
        out = ad.scale(p, 2.0)
    assert not out.requires_grad and out._backward is None


def test_nonfinite_values_raise():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        ad.scale(Tensor([1e308]), 10.0)


def test_gradients_accumulate_for_shared_inputs():
    p = Param("p", np.array([2.0]))
    ad.backward(ad.total(ad.add(p, p, p)))
    assert p.grad.tolist() == [3.0]


def adam_oracle(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
    return theta


def test_adam_matches_textbook_update(rng):
    p = Param("p", rng.standard_normal(6))
    start = p.data.copy()
    grads = [rng.standard_normal(6) for _ in range(5)]
    state = ad.AdamState(lr=1e-2)
    for g in grads:
        p.grad[...] = g
        ad.adam_step([p], state)
        assert not p.grad.any()
    np.testing.assert_allclose(p.data, adam_oracle(start, grads, 1e-2), rtol=1e-12, atol=1e-14)


def test_adam_zero_gradient_is_noop(rng):
    p = Param("p", rng.standard_normal((3, 3)))
    before = p.data.copy()
    state = ad.AdamState()
    for _ in range(3):
        ad.adam_step([p], state)
    assert np.array_equal(p.data, before)


def test_adam_skips_frozen(rng):
    p, q = _params(rng, (4,), (4,))
    p.grad[...] = 1.0
    q.grad[...] = 1.0
    p.freeze()
    before = p.data.copy()
    q_before = q.data.copy()
    ad.adam_step(ParamStore([p, q]), ad.AdamState())
    assert np.array_equal(p.data, before)
    assert not np.array_equal(q.data, q_before)


def test_step_lr_schedule():
    ms = [20, 30, 40]
    assert [ad.step_lr(1e-3, e, ms) for e in (0, 19, 20, 29, 30, 40, 49)] == [
        1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 1.25e-4, 1.25e-4]
    assert ad.scaled_milestones(50) == [20, 30, 40]
    assert ad.scaled_milestones(10) == [4, 6, 8]
    assert ad.scaled_milestones(1) == [1, 1, 1]


def test_param_store():
    store = ParamStore([Param("a", np.zeros(2)), Param("b", np.zeros(3))])
    assert store.names() == ["a", "b"] and "a" in store and len(store) == 2
    with pytest.raises(KeyError):
        store.add(Param("a", np.zeros(1)))
    store["a"].freeze()
    assert [p.name for p in store.trainable()] == ["b"]
