"""First- and second-order gradient checks against central finite
differences (the independent oracle for every registered op)."""

import numpy as np
import pytest

from lqvae import autodiff as ad
from lqvae.autodiff import Tensor, grad


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_op(op, x, n_extra_checks=0, h=1e-5, rtol=1e-4):
    """Compare reverse-mode gradient of sum(weight * op(x)) with FD."""
    rng = np.random.default_rng(7)
    w = rng.normal(size=np.asarray(op(Tensor(x)).data).shape)

    def scalar(a):
        return float((op(Tensor(a)).data * w).sum())

    t = Tensor(x, requires_grad=True)
    out = ad.tsum(op(t) * Tensor(w))
    (g,) = grad(out, [t])
    fg = fd_grad(scalar, x, h=h)
    denom = max(np.abs(fg).max(), 1e-8)
    assert np.abs(g.data - fg).max() / denom < rtol


UNARY_OPS = [
    ("exp", ad.exp, lambda r, s: r.normal(size=s)),
    ("log", ad.log, lambda r, s: r.uniform(0.5, 3.0, size=s)),
    ("tanh", ad.tanh, lambda r, s: r.normal(size=s)),
    ("sigmoid", ad.sigmoid, lambda r, s: r.normal(size=s)),
    ("sqrt", ad.sqrt, lambda r, s: r.uniform(0.5, 3.0, size=s)),
    ("abs", ad.absolute, lambda r, s: r.normal(size=s) + 0.3),
    ("leaky_relu", lambda t: ad.leaky_relu(t, 0.2), lambda r, s: r.normal(size=s) + 0.1),
    ("relu", ad.relu, lambda r, s: r.normal(size=s) + 0.1),
    ("neg", ad.neg, lambda r, s: r.normal(size=s)),
    ("pow3", lambda t: ad.power(t, 3.0), lambda r, s: r.normal(size=s)),
    ("sum0", lambda t: ad.tsum(t, axis=0), lambda r, s: r.normal(size=s)),
    ("mean", lambda t: ad.mean(t), lambda r, s: r.normal(size=s)),
    ("reshape", lambda t: ad.reshape(t, (-1,)), lambda r, s: r.normal(size=s)),
    ("transpose", lambda t: ad.transpose(t), lambda r, s: r.normal(size=s)),
    ("log_softmax", lambda t: ad.log_softmax(t, axis=-1), lambda r, s: r.normal(size=s)),
    ("softmax", lambda t: ad.softmax(t, axis=-1), lambda r, s: r.normal(size=s)),
    ("slice", lambda t: t[:, 1:3], lambda r, s: r.normal(size=s)),
]


@pytest.mark.parametrize("name,op,sampler", UNARY_OPS, ids=[n for n, _, _ in UNARY_OPS])
def test_unary_op_gradients_match_fd(name, op, sampler):
    rng = np.random.default_rng(42)
    for trial in range(100):
        x = sampler(rng, (3, 4))
        check_op(op, x)


@pytest.mark.parametrize("op", [ad.add, ad.mul, ad.div], ids=["add", "mul", "div"])
def test_binary_op_gradients_match_fd(op):
    rng = np.random.default_rng(3)
    for trial in range(100):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(3, 4))
        for side in (0, 1):
            fixed = Tensor(b if side == 0 else a)

            def partial(t, side=side, fixed=fixed):
                return op(t, fixed) if side == 0 else op(fixed, t)

            check_op(partial, a if side == 0 else b)


def test_broadcast_gradients_match_fd():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 4))
    row = rng.normal(size=(4,))
    check_op(lambda t: t + Tensor(row), a)
    check_op(lambda t: Tensor(a) * t, row)
    check_op(lambda t: Tensor(a) + t, np.array(1.5))


def test_matmul_gradients_match_fd():
    rng = np.random.default_rng(11)
    for trial in range(20):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        check_op(lambda t: ad.matmul(t, Tensor(b)), a)
        check_op(lambda t: ad.matmul(Tensor(a), t), b)
    # batched with broadcast over the leading dim
    a3 = rng.normal(size=(5, 3, 4))
    w = rng.normal(size=(4, 2))
    check_op(lambda t: ad.matmul(t, Tensor(w)), a3)
    check_op(lambda t: ad.matmul(Tensor(a3), t), w)


def test_unfold_fold_are_adjoint_and_correct():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(2, 3, 6, 6))
    pads = (1, 1, 1, 1)
    check_op(lambda t: ad.unfold(t, 3, 3, 1, pads), x)
    cols = rng.normal(size=(2, 3 * 9, 36))
    check_op(lambda t: ad.fold(t, (6, 6), 3, 3, 3, 1, pads), cols)
    # adjointness: <unfold(x), y> == <x, fold(y)>
    y = rng.normal(size=(2, 27, 36))
    lhs = (ad.unfold(Tensor(x), 3, 3, 1, pads).data * y).sum()
    rhs = (x * ad.fold(Tensor(y), (6, 6), 3, 3, 3, 1, pads).data).sum()
    assert abs(lhs - rhs) < 1e-10


def test_backward_chain_rule_examples():
    # f(x) = x^2 at x = 3 -> 6
    x = Tensor(3.0, requires_grad=True)
    (g,) = grad(ad.power(x, 2.0), [x])
    assert np.allclose(g.data, 6.0)

    # f = sum(W @ x), W = [[1,2],[3,4]], x = [1,1] -> dW = [[1,1],[1,1]]
    w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    xv = Tensor([[1.0], [1.0]])
    (gw,) = grad(ad.tsum(ad.matmul(w, xv)), [w])
    assert np.allclose(gw.data, np.ones((2, 2)))


def test_disconnected_parameter_gets_exact_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    out = ad.tsum(x * x)
    g_unused = grad(out, [unused])[0]
    assert np.all(g_unused.data == 0.0)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.AutodiffError, match="scalar"):
        grad(x * x, [x])
    with pytest.raises(ad.AutodiffError, match="scalar"):
        (x * x).backward()


def test_nan_producing_op_raises():
    x = Tensor([-1.0], requires_grad=True)
    with pytest.raises(ad.AutodiffError, match="non-finite"):
        ad.log(x)
    with pytest.raises(ad.AutodiffError, match="non-finite"):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_second_order_simple():
    # f(x) = x^3: f'' = 6x, via grad of grad
    x = Tensor(2.0, requires_grad=True)
    y = ad.power(x, 3.0)
    (g,) = grad(y, [x], create_graph=True)
    (gg,) = grad(ad.tsum(g), [x])
    assert np.allclose(gg.data, 12.0)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        out = ad.tsum(ad.tanh(ad.matmul(x, w)) ** 2.0)
        gx, gw = grad(out, [x, w])
        return out.data.copy(), gx.data.copy(), gw.data.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
