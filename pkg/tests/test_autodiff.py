import numpy as np
import pytest

from dualdec import autodiff as ad
from dualdec.autodiff import Tape, Tensor


def backward_of(build):
    """Run build() under a tape, backward the returned scalar, return leaves."""
    with Tape() as tape:
        loss, leaves = build()
        tape.backward(loss)
    return leaves


def test_matmul_shape():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 1)))
    assert ad.matmul(a, b).shape == (2, 1)


def test_matmul_shape_mismatch_names_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(a, b)


def test_softmax_of_equal_entries_is_uniform():
    v = Tensor(np.zeros((1, 3)))
    out = ad.softmax(v, axis=1)
    np.testing.assert_allclose(out.data, np.full((1, 3), 1.0 / 3.0), rtol=0, atol=1e-15)


def test_logsumexp_analytic():
    v = Tensor(np.array([[0.0, 10.0]]))
    out = ad.logsumexp(v, axis=1)
    expected = 10.0 + np.log1p(np.exp(-10.0))
    assert out.item() == pytest.approx(expected, abs=1e-12)
    assert out.item() == pytest.approx(10.0000454, abs=1e-6)


def test_unknown_axis_rejected():
    v = Tensor(np.zeros((2, 3)))
    with pytest.raises(ad.ShapeError, match="axis"):
        ad.softmax(v, axis=2)


def test_backward_square_sum():
    w = Tensor(np.array([[1.0, 2.0]]))
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(w, w))
        tape.backward(loss)
    np.testing.assert_array_equal(w.grad, [[2.0, 4.0]])


def test_backward_tanh_at_zero():
    x = Tensor(np.zeros((1, 1)))
    with Tape() as tape:
        tape.backward(ad.tanh(x))
    assert x.grad[0, 0] == 1.0


def test_backward_softmax_cross_entropy_uniform():
    # -log softmax(logits)[0] at uniform logits, 3 classes
    logits = Tensor(np.zeros((1, 3)))
    with Tape() as tape:
        lp = ad.log_softmax(logits, axis=1)
        loss = ad.scale(ad.narrow(lp, 1, 0, 1), -1.0)
        tape.backward(loss)
    np.testing.assert_allclose(logits.grad, [[-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]], atol=1e-15)


def test_backward_rejects_non_scalar():
    v = Tensor(np.zeros((1, 2)))
    with Tape() as tape:
        out = ad.tanh(v)
        with pytest.raises(ad.ShapeError):
            tape.backward(out)


def test_fanout_accumulates():
    x = Tensor(np.array([[3.0]]))
    with Tape() as tape:
        y = ad.add(ad.mul(x, x), x)  # x^2 + x
        tape.backward(y)
    assert x.grad[0, 0] == pytest.approx(7.0)


def test_stale_grad_is_checked():
    x = Tensor(np.array([[1.0, 2.0]]))
    with Tape() as tape:
        tape.backward(ad.sum_all(ad.mul(x, x)))
    with Tape() as tape:
        out = ad.sum_all(x)
        with pytest.raises(ad.StaleGradientError):
            tape.backward(out)


def test_gradient_linearity():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(2, 3)))
    a_coef, b_coef = 2.5, -1.25

    def run(build):
        w.grad = None
        with Tape() as tape:
            tape.backward(build())
        return w.grad.copy()

    f = lambda: ad.sum_all(ad.mul(w, w))
    g = lambda: ad.sum_all(ad.tanh(w))
    combined = run(lambda: ad.add(ad.scale(f(), a_coef), ad.scale(g(), b_coef)))
    separate = a_coef * run(f) + b_coef * run(g)
    np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-12)
    w.grad = None


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = Tensor(rng.normal(scale=50.0, size=(4, 7)))
        s = ad.softmax(x, axis=1)
        np.testing.assert_allclose(s.data.sum(axis=1), np.ones(4), rtol=0, atol=1e-12)


def test_determinism():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(3, 4))

    def run():
        x = Tensor(data.copy())
        w = Tensor(np.linspace(-1, 1, 8).reshape(4, 2))
        with Tape() as tape:
            loss = ad.sum_all(ad.tanh(ad.matmul(x, w)))
            tape.backward(loss)
        return loss.item(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


def test_grad_check_square():
    report = ad.grad_check(lambda t: ad.mul(t, t), Tensor(np.array([[3.0]])), step=1e-5)
    assert report.ok
    assert report.max_rel_err < 1e-9
    assert report.analytic[0, 0] == pytest.approx(6.0)


def test_grad_check_rejects_nonfinite():
    def f(t):
        return ad.sqrt(t)  # goes negative under perturbation

    with pytest.raises((ValueError, ad.ShapeError)):
        ad.grad_check(f, Tensor(np.array([[1e-7]])), step=1e-5)


# Every exposed operator passes grad_check on 10 random inputs (h=1e-5, tol=1e-4).
# Each factory returns (f, point): f deterministic, fixtures frozen per draw.

def _case_factories():
    def matmul(mk):
        b = Tensor(mk(3, 2))
        return lambda t: ad.sum_all(ad.matmul(t, b)), Tensor(mk(2, 3))

    def matmul_tb(mk):
        b = Tensor(mk(5, 3))
        return lambda t: ad.sum_all(ad.matmul(t, b, transpose_b=True)), Tensor(mk(2, 3))

    def matmul_ta(mk):
        b = Tensor(mk(3, 4))
        return lambda t: ad.sum_all(ad.matmul(t, b, transpose_a=True)), Tensor(mk(3, 2))

    def add(mk):
        row = Tensor(mk(1, 4))
        return lambda t: ad.sum_all(ad.mul(ad.add(t, row), ad.add(t, row))), Tensor(mk(3, 4))

    def sub(mk):
        row = Tensor(mk(1, 4))
        return lambda t: ad.sum_all(ad.mul(ad.sub(t, row), ad.sub(t, row))), Tensor(mk(3, 4))

    def mul(mk):
        return lambda t: ad.sum_all(ad.mul(t, t)), Tensor(mk(3, 4))

    def scale(mk):
        return lambda t: ad.sum_all(ad.scale(t, -2.5)), Tensor(mk(2, 2))

    def tanh(mk):
        return lambda t: ad.sum_all(ad.tanh(t)), Tensor(mk(2, 5))

    def sigmoid(mk):
        return lambda t: ad.sum_all(ad.sigmoid(t)), Tensor(mk(2, 5))

    def softmax(mk):
        w = Tensor(mk(3, 4))
        return lambda t: ad.sum_all(ad.mul(ad.softmax(t, 1), w)), Tensor(mk(3, 4))

    def log_softmax(mk):
        w = Tensor(mk(3, 4))
        return lambda t: ad.sum_all(ad.mul(ad.log_softmax(t, 1), w)), Tensor(mk(3, 4))

    def logsumexp0(mk):
        return lambda t: ad.sum_all(ad.logsumexp(t, 0)), Tensor(mk(4, 2))

    def logsumexp1(mk):
        return lambda t: ad.sum_all(ad.logsumexp(t, 1)), Tensor(mk(2, 4))

    def concat(mk):
        return (
            lambda t: ad.sum_all(ad.tanh(ad.concat([ad.narrow(t, 0, 0, 1), ad.narrow(t, 0, 1, 2)], axis=0))),
            Tensor(mk(3, 3)),
        )

    def narrow(mk):
        return lambda t: ad.sum_all(ad.mul(ad.narrow(t, 1, 1, 2), ad.narrow(t, 1, 0, 2))), Tensor(mk(2, 4))

    def conv1d(mk):
        k = Tensor(mk(2, 3))
        return lambda t: ad.sum_all(ad.tanh(ad.conv1d_same(t, k))), Tensor(mk(6, 1))

    def conv1d_kernel(mk):
        x = Tensor(mk(6, 1))
        return lambda t: ad.sum_all(ad.conv1d_same(x, t)), Tensor(mk(2, 3))

    def embedding(mk):
        row = Tensor(mk(1, 4))
        return lambda t: ad.sum_all(ad.mul(ad.embedding(t, 1), row)), Tensor(mk(3, 4))

    def sum_axis(mk):
        return lambda t: ad.sum_all(ad.mul(ad.sum_axis(t, 0), ad.sum_axis(t, 0))), Tensor(mk(3, 4))

    def mean(mk):
        return lambda t: ad.mean_all(ad.mul(t, t)), Tensor(mk(3, 4))

    def sqrt(mk):
        one = Tensor(np.ones((2, 3)))
        return lambda t: ad.sum_all(ad.sqrt(ad.add(ad.mul(t, t), one))), Tensor(mk(2, 3))

    def clamp_min(mk):
        return lambda t: ad.sum_all(ad.clamp_min(t, 0.1)), Tensor(mk(3, 3) + 3.0)

    def reshape(mk):
        return lambda t: ad.sum_all(ad.mul(ad.reshape(t, 2, 6), ad.reshape(t, 2, 6))), Tensor(mk(3, 4))

    def transpose(mk):
        b = Tensor(mk(3, 2))
        return lambda t: ad.sum_all(ad.matmul(ad.transpose(t), b)), Tensor(mk(3, 3))

    return [v for v in locals().values() if callable(v)]


@pytest.mark.parametrize("factory", _case_factories(), ids=lambda f: f.__name__)
def test_operator_grad_check(factory):
    rng = np.random.default_rng(abs(hash(factory.__name__)) % (2**32))
    mk = lambda *s: rng.normal(size=s)
    for _ in range(10):
        f, point = factory(mk)
        report = ad.grad_check(f, point, step=1e-5, tolerance=1e-4)
        assert report.ok, f"{factory.__name__}: {report!r} bad={report.bad_coords[:3]}"
