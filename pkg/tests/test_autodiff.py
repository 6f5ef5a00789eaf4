import numpy as np
import pytest

from bnmarl import autodiff as ad
from bnmarl.autodiff import MLP, Adam, Tensor, adam_step


def numeric_grad(f, arrays, h=1e-6):
    grads = []
    for k, x in enumerate(arrays):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            old = x[idx]
            x[idx] = old + h
            fp = f(*arrays)
            x[idx] = old - h
            fm = f(*arrays)
            x[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check(op, *arrays, h=1e-6, tol=1e-4):
    """Compare backward of ``sum(w * op(...))`` against central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = op(*[Tensor(a) for a in arrays]).shape
    w = np.random.default_rng(99).normal(size=out_shape)

    def scalar(*xs):
        return float(np.sum(w * op(*[Tensor(x) for x in xs]).data))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*leaves)
    ad.sum_(out * Tensor(w)).backward()
    expected = numeric_grad(scalar, [a.copy() for a in arrays], h)
    for leaf, num in zip(leaves, expected):
        denom = max(np.max(np.abs(num)), 1e-8)
        assert np.max(np.abs(leaf.grad - num)) / denom < tol


R = np.random.default_rng(0)
A = R.normal(size=(3, 4))
B = R.normal(size=(3, 4))
POS = R.uniform(0.5, 2.0, size=(3, 4))
AWAY = np.where(np.abs(A) < 0.1, 0.5, A)  # keep kinks out of the FD stencil

OPS = {
    "add": (lambda a, b: a + b, [A, B]),
    "add_broadcast": (lambda a, b: a + b, [A, R.normal(size=(4,))]),
    "sub": (lambda a, b: a - b, [A, B]),
    "neg": (lambda a: -a, [A]),
    "mul": (lambda a, b: a * b, [A, B]),
    "mul_broadcast": (lambda a, b: a * b, [A, R.normal(size=(3, 1))]),
    "div": (lambda a, b: a / b, [A, POS]),
    "matmul": (lambda a, b: a @ b, [A, R.normal(size=(4, 2))]),
    "matmul_batched": (lambda a, b: a @ b, [R.normal(size=(2, 3, 4)), R.normal(size=(2, 4, 3))]),
    "relu": (ad.relu, [AWAY]),
    "exp": (ad.exp, [A]),
    "log": (ad.log, [POS]),
    "abs": (ad.abs_, [AWAY]),
    "sum_axis": (lambda a: ad.sum_(a, axis=1), [A]),
    "sum_all": (lambda a: ad.sum_(a), [A]),
    "mean": (lambda a: ad.mean(a, axis=0), [A]),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=-1), [A]),
    "softmax": (lambda a: ad.softmax(a, axis=-1), [A]),
    "log_softmax": (lambda a: ad.log_softmax(a, axis=-1), [A]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [A, B]),
    "slice": (lambda a: a[1:, ::2], [A]),
    "slice_fancy": (lambda a: a[:, [0, 2, 2]], [A]),
    "gather": (lambda a: ad.gather(a, np.array([0, 3, 1])), [A]),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), [A]),
    "transpose": (ad.transpose, [A]),
    "minimum": (ad.minimum, [A, B]),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), [np.where(np.abs(np.abs(A) - 0.5) < 0.05, 0.2, A)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    op, arrays = OPS[name]
    check(op, *arrays)


def test_straight_through_forward_hard_backward_identity():
    soft = Tensor(np.array([0.2, 0.7]), requires_grad=True)
    st = ad.straight_through(np.array([0.0, 1.0]), soft)
    np.testing.assert_array_equal(st.data, [0.0, 1.0])
    ad.sum_(st * Tensor([3.0, 5.0])).backward()
    np.testing.assert_array_equal(soft.grad, [3.0, 5.0])


def test_relu_derivative_and_softmax_rows():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    ad.sum_(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])
    s = ad.softmax(Tensor(R.normal(size=(5, 7)) * 30))
    np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)


def test_three_layer_mlp_end_to_end():
    rng = np.random.default_rng(4)
    net = MLP([5, 8, 8, 3], rng)
    x = rng.normal(size=(6, 5))
    target = rng.normal(size=(6, 3))
    params = net.parameters()

    def loss_value():
        d = net(Tensor(x)).data - target
        return float(np.mean(d * d))

    out = net(Tensor(x)) - Tensor(target)
    ad.mean(out * out).backward()
    h = 1e-4
    for p in params:
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            old = p.data[idx]
            p.data[idx] = old + h
            fp = loss_value()
            p.data[idx] = old - h
            fm = loss_value()
            p.data[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        rel = np.max(np.abs(p.grad - num)) / max(np.max(np.abs(num)), 1e-8)
        assert rel < 1e-4


def test_diamond_graph_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * 2.0
    z = y * y + y * 3.0  # dz/dx = (2y + 3) * 2 = 30
    z.backward()
    assert x.grad == pytest.approx(30.0)


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.sum_(x * 2.0).backward()
    ad.sum_(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_ops_do_not_mutate_inputs():
    a = R.normal(size=(3, 4))
    keep = a.copy()
    t = Tensor(a, requires_grad=True)
    out = ad.log_softmax(ad.relu(t) * 2.0 + ad.exp(t), axis=-1)
    ad.sum_(out).backward()
    np.testing.assert_array_equal(t.data, keep)


def test_backward_errors():
    with pytest.raises(RuntimeError):
        Tensor(np.ones(2)).backward()
    with pytest.raises(RuntimeError):
        (Tensor(np.ones(2), requires_grad=True) * 2.0).backward()
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_adam_examples():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state, applied = adam_step([p], [np.zeros(2)], lr=0.1)
    assert applied
    np.testing.assert_array_equal(p.data, [1.0, -2.0])

    q = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    state = None
    for _ in range(200):
        prev = q.data.copy()
        state, _ = adam_step([q], [np.array([0.3, -5.0])], lr=0.01, state=state)
    np.testing.assert_allclose(q.data - prev, [-0.01, 0.01], rtol=1e-6)

    w = Tensor(np.array(5.0), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ((w - 2.0) * (w - 2.0)).backward()
        opt.step()
    assert abs(w.item() - 2.0) < 1e-6


def test_adam_skips_non_finite():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state, applied = adam_step([p], [np.array([np.nan])], lr=0.1)
    assert not applied and p.data[0] == 1.0 and state["t"] == 0
    opt = Adam([p], lr=0.1)
    p.grad = np.array([np.inf])
    opt.step()
    assert opt.skipped == 1 and p.data[0] == 1.0
