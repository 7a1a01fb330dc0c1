import math

import numpy as np
import pytest

from tgsl import autodiff as ad


def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((3, 3))
    out = ad.forward_primitives([ad.constant(np.eye(3)), ad.constant(a)],
                                "matmul")
    assert np.allclose(out.values, a)


def test_sigmoid_at_zero():
    out = ad.sigmoid(ad.constant(np.zeros(1)))
    assert out.values[0] == 0.5


def test_logsumexp_equal_entries():
    # oracle: log(sum exp(c)) over 3 equal entries is c + ln 3
    c = 0.7
    out = ad.logsumexp(ad.constant(np.full(3, c)))
    assert abs(float(out.values) - (c + math.log(3))) < 1e-12


def test_forward_primitives_dispatch_and_unknown():
    x = ad.constant(np.array([0.3, -0.2]))
    for op in ("sigmoid", "relu", "sin", "cos"):
        ad.forward_primitives([x], op)
    ad.forward_primitives([x, x], "add")
    ad.forward_primitives([x, x], "elementwise-multiply")
    ad.forward_primitives([x], "sum-reduce")
    ad.forward_primitives([x], "mean-reduce")
    ad.forward_primitives([x], "logsumexp")
    ad.forward_primitives([x], "scale", c=2.0)
    ad.forward_primitives([x, x], "concat", axis=0)
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.forward_primitives([x], "conv2d")


def test_shape_errors_name_op_and_shapes():
    a = ad.constant(np.zeros((2, 3)))
    b = ad.constant(np.zeros((2, 3)))
    with pytest.raises(ad.ShapeError, match=r"matmul.*2, 3"):
        ad.matmul(a, b)
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat([a, ad.constant(np.zeros((2, 4)))], axis=0)


def test_verification_mode_rejects_nonfinite():
    bad = ad.constant(np.array([1.0, np.inf]))
    ad.relu(bad)   # fine outside verification mode
    with ad.verification_mode():
        with pytest.raises(ad.NonFiniteError):
            ad.relu(bad)


# ---------------------------------------------------------------------------
# backward

def test_backward_sigmoid_grad_quarter():
    x = ad.param(np.array([0.0]))
    with ad.Tape() as t:
        y = ad.sigmoid(x)
        t.backward(y)
    assert np.allclose(x.grad, [0.25])


def test_backward_product_rule():
    rng = np.random.default_rng(1)
    a = ad.param(rng.standard_normal(4))
    b = ad.param(rng.standard_normal(4))
    with ad.Tape() as t:
        t.backward(ad.sum_(ad.mul(a, b)))
    assert np.allclose(a.grad, b.values)
    assert np.allclose(b.grad, a.values)


def test_backward_requires_scalar():
    x = ad.param(np.zeros(3))
    with ad.Tape() as t:
        y = ad.relu(x)
        with pytest.raises(ad.ShapeError, match="scalar"):
            t.backward(y)


def test_backward_accumulates_additively():
    x = ad.param(np.array([0.3]))
    with ad.Tape() as t:
        y = ad.sigmoid(x)
        t.backward(y)
        g1 = x.grad.copy()
        t.backward(y)
    assert np.allclose(x.grad, 2 * g1)


def test_off_path_tensor_gets_zero_grid():
    x = ad.param(np.ones(3))
    z = ad.param(np.ones(2))
    with ad.Tape() as t:
        dead = ad.relu(z)      # recorded but not connected to the loss
        t.backward(ad.sum_(ad.mul(x, x)))
    assert z.grad is not None and np.all(z.grad == 0)
    assert dead.grad is not None and np.all(dead.grad == 0)


def test_five_op_composite_matches_finite_differences():
    rng = np.random.default_rng(7)

    def f(a, b):
        h = ad.relu(ad.matmul(a, b))            # matmul, relu
        return ad.mean(ad.mul(ad.sin(h), h))    # sin, mul, mean

    res = ad.grad_check(f, [rng.standard_normal((3, 4)),
                            rng.standard_normal((4, 2))])
    assert res.max_rel_err <= 1e-4


def test_tape_replay_bit_deterministic():
    def run():
        rng = np.random.default_rng(11)
        a = ad.param(rng.standard_normal((5, 5)))
        b = ad.param(rng.standard_normal((5, 5)))
        with ad.Tape() as t:
            y = ad.sum_(ad.sigmoid(ad.matmul(a, b)))
            t.backward(y)
        return y.values.copy(), a.grad.copy(), b.grad.copy()

    y1, ga1, gb1 = run()
    y2, ga2, gb2 = run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(ga1, ga2)
    assert np.array_equal(gb1, gb2)


def test_concat_narrow_roundtrip_routes_grads_disjointly():
    rng = np.random.default_rng(3)
    a = ad.param(rng.standard_normal((2, 3)))
    b = ad.param(rng.standard_normal((2, 4)))
    with ad.Tape() as t:
        cat = ad.concat([a, b], axis=1)
        back_a = ad.narrow(cat, 1, 0, 3)
        back_b = ad.narrow(cat, 1, 3, 4)
        assert np.array_equal(back_a.values, a.values)
        assert np.array_equal(back_b.values, b.values)
        t.backward(ad.sum_(back_a))
    assert np.all(a.grad == 1.0)
    assert np.all(b.grad == 0.0)   # gradient of the a-slice never leaks to b


def test_no_grad_suppresses_recording():
    x = ad.param(np.ones(2))
    with ad.Tape() as t:
        with ad.no_grad():
            y = ad.relu(x)
        assert not y.requires_grad
        assert len(t) == 0


# ---------------------------------------------------------------------------
# adam

def test_adam_first_step_magnitude_is_lr():
    # bias-corrected moments at t=1 make the update lr * g/(|g| + eps)
    p = ad.param(np.array([1.0]))
    p._grad = np.array([0.5])
    st = ad.AdamState([p], lr=1e-3)
    ad.adam_step([p], st)
    assert abs(abs(1.0 - p.values[0]) - 1e-3) < 1e-6
    assert np.all(p.grad == 0)         # grads zeroed afterwards
    assert st.step_count == 1


def test_adam_zero_grad_leaves_params_unchanged():
    p = ad.param(np.array([1.0, -2.0]))
    st = ad.AdamState([p], lr=1e-2)
    ad.adam_step([p], st)
    assert np.array_equal(p.values, [1.0, -2.0])


def test_adam_identical_params_identical_updates():
    a = ad.param(np.array([1.0]))
    b = ad.param(np.array([1.0]))
    a._grad = np.array([0.3])
    b._grad = np.array([0.3])
    st = ad.AdamState([a, b], lr=1e-2)
    ad.adam_step([a, b], st)
    assert np.array_equal(a.values, b.values)


def test_adam_missing_grad_names_parameter():
    p = ad.param(np.array([1.0]), name="enc.w")
    p._grad = None
    st = ad.AdamState([p])
    with pytest.raises(ValueError, match="enc.w"):
        ad.adam_step([p], st)


# ---------------------------------------------------------------------------
# grad_check

def test_grad_check_linear_map_is_exact():
    c = ad.constant(np.array([1.5, -2.0, 0.5]))
    res = ad.grad_check(lambda x: ad.sum_(ad.mul(x, c)),
                        [np.array([0.2, 0.4, -0.1])])
    assert res.max_rel_err <= 1e-10


def test_grad_check_flags_relu_kink():
    res = ad.grad_check(lambda x: ad.sum_(ad.relu(x)),
                        [np.array([1.0, 0.0, -1.0])])
    assert (0, 1) in res.skipped       # the coordinate sitting exactly at 0
    assert res.n_checked == 2


def test_grad_check_rejects_nonfinite_fn():
    with pytest.raises(ad.NonFiniteError):
        ad.grad_check(lambda x: ad.sum_(ad.log(x)), [np.array([5e-6])])
