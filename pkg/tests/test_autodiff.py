import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptpix import autodiff as ad
from promptpix.autodiff import EvaluationError, ShapeError, Tape, Tensor

RNG = np.random.default_rng(1234)

finite_floats = st.floats(min_value=-30, max_value=30, allow_nan=False)


def rand(*shape, lo=-2.0, hi=2.0):
    return Tensor(RNG.uniform(lo, hi, shape))


# ---------------------------------------------------------------------------
# per-op gradient factories: every registered op is checked below
# ---------------------------------------------------------------------------

def _wrap(op):
    """Compose with a squaring sum so every output coordinate matters."""
    return lambda x: ad.sum_all(ad.mul(op(x), op(x)))


# constants are bound once per case via default args, so repeated calls of
# f (analytic pass + numeric probes) see the same values
OP_CASES = {
    "add": lambda: (_wrap(lambda x, c=rand(3, 4): ad.add(x, c)), rand(3, 4)),
    "sub": lambda: (_wrap(lambda x, c=rand(3, 4): ad.sub(c, x)), rand(3, 4)),
    "mul": lambda: (_wrap(lambda x, c=rand(3, 4): ad.mul(x, c)), rand(3, 4)),
    "scale": lambda: (_wrap(lambda x: ad.scale(x, -1.7)), rand(3, 4)),
    "add_scalar": lambda: (_wrap(lambda x: ad.add_scalar(x, 0.9)), rand(3, 4)),
    "exp": lambda: (_wrap(ad.exp), rand(3, 4)),
    "log": lambda: (_wrap(ad.log), rand(3, 4, lo=0.5, hi=3.0)),
    "powf": lambda: (_wrap(lambda x: ad.powf(x, 1.7)), rand(3, 4, lo=0.5, hi=3.0)),
    "sigmoid": lambda: (_wrap(ad.sigmoid), rand(3, 4)),
    "softplus": lambda: (_wrap(ad.softplus), rand(3, 4)),
    "gelu": lambda: (_wrap(ad.gelu), rand(3, 4)),
    "matmul": lambda: (_wrap(lambda x, c=rand(4, 2): ad.matmul(x, c)), rand(3, 4)),
    "transpose": lambda: (_wrap(ad.transpose), rand(3, 4)),
    "sum_all": lambda: (lambda x: ad.mul(ad.sum_all(x), ad.sum_all(x)), rand(3, 4)),
    "mean_all": lambda: (lambda x: ad.mul(ad.mean_all(x), ad.mean_all(x)), rand(3, 4)),
    "sum_rows": lambda: (_wrap(ad.sum_rows), rand(3, 4)),
    "sum_cols": lambda: (_wrap(ad.sum_cols), rand(3, 4)),
    "add_rowvec": lambda: (_wrap(lambda x, c=rand(4): ad.add_rowvec(x, c)), rand(3, 4)),
    "add_colvec": lambda: (_wrap(lambda x, c=rand(3): ad.add_colvec(x, c)), rand(3, 4)),
    "mul_rowvec": lambda: (_wrap(lambda x, c=rand(4): ad.mul_rowvec(x, c)), rand(3, 4)),
    "mul_colvec": lambda: (_wrap(lambda x, c=rand(3): ad.mul_colvec(x, c)), rand(3, 4)),
    "softmax_rows": lambda: (_wrap(ad.softmax_rows), rand(3, 4)),
    "pairwise_sqdist": lambda: (
        _wrap(lambda x, c=rand(2, 4): ad.pairwise_sqdist(x, c)), rand(3, 4)),
    "extract_patches": lambda: (
        _wrap(lambda x: ad.extract_patches(x, 4, 4, 3, 2, 1)), rand(16, 2)),
    "avg_pool_grid": lambda: (
        _wrap(lambda x: ad.avg_pool_grid(x, 4, 4, 2, 2)), rand(16, 2)),
    "upsample_bilinear": lambda: (
        _wrap(lambda x: ad.upsample_bilinear(x, 2, 2, 5, 5)), rand(4, 2)),
    "concat_cols": lambda: (
        _wrap(lambda x: ad.concat_cols([x, ad.powf(x, 2.0)])), rand(3, 4, lo=0.5, hi=2.0)),
    "linear": lambda: (
        _wrap(lambda x, w=rand(4, 2), b=rand(2): ad.linear(x, w, b)), rand(3, 4)),
    "layer_norm": lambda: (
        _wrap(lambda x, g=rand(4), b=rand(4): ad.layer_norm(x, g, b)), rand(3, 4)),
}


def test_every_registered_op_has_a_grad_case():
    assert set(OP_CASES) == set(ad.DIFFERENTIABLE_OPS)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_registered_op_gradients(name):
    # module invariant: rel err <= 1e-5 at eps=1e-5 on random inputs
    for _ in range(3):
        f, x = OP_CASES[name]()
        assert ad.grad_check(f, x, eps=1e-5) <= 1e-5


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    m = rand(2, 2)
    out = ad.matmul(Tensor(np.eye(2)), m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_hand_case():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_backward_vs_finite_differences():
    b = rand(4, 2)
    err = ad.grad_check(lambda x: ad.sum_all(ad.powf(ad.matmul(x, b), 2.0)),
                        rand(3, 4, lo=0.5, hi=2.0))
    assert err <= 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        ad.matmul(rand(3, 4), rand(3, 2))


def test_matmul_associativity():
    for seed in range(20):
        r = np.random.default_rng(seed)
        a, b, c = (Tensor(r.normal(size=s)) for s in [(3, 4), (4, 5), (5, 2)])
        left = ad.matmul(ad.matmul(a, b), c).data
        right = ad.matmul(a, ad.matmul(b, c)).data
        assert np.abs(left - right).max() <= 1e-9


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform_row():
    out = ad.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3])


def test_softmax_extreme_row_is_stable():
    out = ad.softmax_rows(Tensor([[1000.0, 0.0]]))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-300)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite_floats))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax_rows(Tensor(x))
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_backward_vs_finite_differences():
    c = rand(4, 5)
    err = ad.grad_check(
        lambda x: ad.sum_all(ad.mul(ad.softmax_rows(x), c)), rand(4, 5))
    assert err <= 1e-6


# ---------------------------------------------------------------------------
# gelu
# ---------------------------------------------------------------------------

def test_gelu_at_zero():
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=-8, max_value=8, allow_nan=False))
def test_gelu_reflection_identity(x):
    # gelu(x) - gelu(-x) = x * (Phi(x) + Phi(-x)) = x
    total = ad.gelu(Tensor([x])).data[0] - ad.gelu(Tensor([-x])).data[0]
    assert total == pytest.approx(x, abs=1e-12)


def test_gelu_at_one_matches_high_precision_erf():
    # 0.5 * (1 + erf(1/sqrt(2))) evaluated at 30 significant digits
    assert ad.gelu(Tensor([1.0])).data[0] == pytest.approx(0.841344746068542948, abs=1e-15)


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def test_linear_identity():
    x = rand(3, 4)
    out = ad.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x.data)


def test_linear_zero_input_broadcasts_bias():
    b = rand(4)
    out = ad.linear(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 4))), b)
    np.testing.assert_array_equal(out.data, np.tile(b.data, (3, 1)))


def test_linear_gradients_all_arguments():
    x, w, b = rand(3, 4), rand(4, 2), rand(2)

    def loss_with(x_, w_, b_):
        return ad.sum_all(ad.powf(ad.add_scalar(ad.linear(x_, w_, b_), 10.0), 2.0))

    assert ad.grad_check(lambda t: loss_with(t, w, b), x) <= 1e-6
    assert ad.grad_check(lambda t: loss_with(x, t, b), w) <= 1e-6
    assert ad.grad_check(lambda t: loss_with(x, w, t), b) <= 1e-6


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        ad.linear(rand(3, 4), rand(5, 2), rand(2))


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

def test_grad_check_sum_is_exact():
    assert ad.grad_check(ad.sum_all, rand(3, 3)) < 1e-10


def test_grad_check_quadratic_is_near_exact():
    err = ad.grad_check(lambda x: ad.sum_all(ad.mul(x, x)), Tensor([1.0, 2.0]), eps=1e-5)
    assert err <= 1e-8


def test_grad_check_eps_validation():
    with pytest.raises(ValueError):
        ad.grad_check(ad.sum_all, rand(2), eps=0.1)


def test_grad_check_nonfinite_raises():
    with np.errstate(invalid="ignore"), pytest.raises(EvaluationError):
        ad.grad_check(lambda x: ad.log(ad.sum_all(x)), Tensor([-1.0, 0.5]))


# ---------------------------------------------------------------------------
# tape mechanics
# ---------------------------------------------------------------------------

def test_tape_backward_through_chain():
    # wrong replay order would corrupt this chained gradient
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)          # x^2
        z = ad.mul(y, x)          # x^3
        out = ad.sum_all(ad.mul(z, y))  # x^5
        tape.backward(out)
    assert x.grad[0] == pytest.approx(5 * 2.0 ** 4)


def test_tape_clear_frees_records():
    with Tape() as tape:
        x = Tensor([1.0], requires_grad=True)
        ad.mul(x, x)
        assert len(tape) == 1
        tape.clear()
        assert len(tape) == 0


def test_tapes_do_not_nest():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass


def test_backward_requires_scalar():
    with Tape() as tape:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = ad.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_no_tape_means_no_tracking():
    x = Tensor([1.0], requires_grad=True)
    y = ad.mul(x, x)
    assert not y.requires_grad


def test_debug_mode_catches_nonfinite():
    with np.errstate(invalid="ignore"), pytest.raises(EvaluationError):
        ad.log(Tensor([-1.0]))


def test_grad_buffer_present_iff_requires_grad():
    t = Tensor([1.0, 2.0], requires_grad=True)
    assert t.grad is not None and t.grad.shape == t.data.shape
    t.set_requires_grad(False)
    assert t.grad is None
