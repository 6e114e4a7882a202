"""Tape engine tests: hand-computed examples, finite-difference oracles for
every differentiable primitive, and determinism of backward."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualflow import autodiff as ad
from dualflow.autodiff import Tape, Tensor
from dualflow.errors import ContractError, ShapeError
from dualflow.gradcheck import check_gradients, finite_difference_grads, max_rel_error
from dualflow.optim import AdamW, adamw_step


def t64(data, requires_grad=False):
    with ad.using_dtype(np.float64):
        return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def test_matmul_forward_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    out = ad.matmul(a, b)
    np.testing.assert_allclose(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_backward_matches_transpose_rule(f64):
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    with Tape() as tape:
        out = ad.sum_all(ad.matmul(a, b))
        tape.backward(out)
    g = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_sum_of_squares_gradient_is_2x(f64):
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_all(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2.0 * x.data)


def test_backward_requires_scalar_loss(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_accumulates_until_reset(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
        tape.backward(loss)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4.0 * x.data)
    ad.reset_grads([x])
    assert x.grad is None


def test_shared_input_gradients_sum(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.add(ad.mul(x, x), x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0)


def test_detach_blocks_gradient(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x.detach(), x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, x.data)


def test_no_tape_means_no_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.mul(x, x)
    assert not y.requires_grad


def test_backward_determinism(f64):
    rng = np.random.default_rng(7)
    grads = []
    for _ in range(2):
        w = Tensor(rng.normal(size=(4, 4)).copy(), requires_grad=True)
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4))
        with Tape() as tape:
            h = ad.tanh(ad.matmul(x, w))
            tape.backward(ad.sum_all(ad.mul(h, h)))
        grads.append(w.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(Tensor([1.0, 2.0]), Tensor([[1.0], [2.0]]))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# softmax and layer norm


def test_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(size=(5, 9)))
    out = ad.softmax_rows(x).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(5), atol=1e-6)
    assert (out >= 0).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50.0, 50.0))
def test_softmax_rows_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    with ad.using_dtype(np.float64):
        x = rng.normal(size=(3, 6))
        a = ad.softmax_rows(Tensor(x)).data
        b = ad.softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_softmax_extreme_logits_stay_finite():
    x = Tensor(np.array([[1e4, -1e4, 0.0]], dtype=np.float32))
    out = ad.softmax_rows(x).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-6)


def test_layer_norm_rows_standardized(f64, rng):
    x = Tensor(rng.normal(size=(4, 16)) * 3 + 1)
    g = Tensor(np.ones(16))
    b = Tensor(np.zeros(16))
    out = ad.layer_norm(x, g, b).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


# ---------------------------------------------------------------------------
# convolution specifics


def test_conv2d_depthwise_delta_kernel_is_identity(f64, rng):
    x = rng.normal(size=(6, 7, 4))
    k = np.zeros((3, 3, 4))
    k[1, 1, :] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(k), mode="depthwise3x3").data
    np.testing.assert_array_equal(out, x)


def test_conv2d_depthwise_matches_direct_sum(f64, rng):
    x = rng.normal(size=(5, 5, 2))
    k = rng.normal(size=(3, 3, 2))
    out = ad.conv2d(Tensor(x), Tensor(k), mode="depthwise3x3").data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    want = np.zeros_like(x)
    for h in range(5):
        for w in range(5):
            for c in range(2):
                for dy in range(3):
                    for dx in range(3):
                        want[h, w, c] += k[dy, dx, c] * xp[h + dy, w + dx, c]
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_conv2d_batched_matches_loop(f64, rng):
    x = rng.normal(size=(3, 5, 5, 4))
    k = rng.normal(size=(3, 3, 4))
    batched = ad.conv2d(Tensor(x), Tensor(k), mode="depthwise3x3").data
    for b in range(3):
        single = ad.conv2d(Tensor(x[b]), Tensor(k), mode="depthwise3x3").data
        np.testing.assert_allclose(batched[b], single, atol=1e-12)


def test_conv2d_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.ones((4, 4, 3))), Tensor(np.ones((3, 3, 2))), mode="depthwise3x3")
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.ones((4, 4, 3))), Tensor(np.ones((4, 2))), mode="pointwise1x1")


# ---------------------------------------------------------------------------
# finite-difference oracle for every differentiable primitive


def _primitive_cases(seed):
    rng = np.random.default_rng(seed)

    def p(shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale, requires_grad=True)

    a, b = p((3, 4)), p((3, 4))
    cases = [
        ("add", lambda: ad.sum_all(ad.mul(ad.add(a, b), ad.add(a, b))), [a, b]),
        ("sub", lambda: ad.sum_all(ad.mul(ad.sub(a, b), ad.sub(a, b))), [a, b]),
        ("mul", lambda: ad.sum_all(ad.mul(a, b)), [a, b]),
    ]
    m1, m2 = p((3, 5)), p((5, 2))
    cases.append(("matmul", lambda: ad.sum_all(ad.tanh(ad.matmul(m1, m2))), [m1, m2]))
    x = p((4, 6))
    cases.append(("softmax_rows", lambda: ad.sum_all(ad.mul(ad.softmax_rows(x), x)), [x]))
    ln_x, ln_g, ln_b = p((3, 8)), p((8,)), p((8,))
    cases.append(("layer_norm",
                  lambda: ad.sum_all(ad.mul(ad.layer_norm(ln_x, ln_g, ln_b),
                                            ad.layer_norm(ln_x, ln_g, ln_b))),
                  [ln_x, ln_g, ln_b]))
    e = p((3, 3), scale=0.5)
    cases.append(("exp", lambda: ad.sum_all(ad.exp(e)), [e]))
    lg = Tensor(np.abs(rng.normal(size=(3, 3))) + 0.5, requires_grad=True)
    cases.append(("log", lambda: ad.sum_all(ad.mul(ad.log(lg), lg)), [lg]))
    th = p((3, 3))
    cases.append(("tanh", lambda: ad.sum_all(ad.mul(ad.tanh(th), th)), [th]))
    lr = p((4, 4))
    cases.append(("leaky_relu", lambda: ad.sum_all(ad.mul(ad.leaky_relu(lr), lr)), [lr]))
    ge = p((4, 4))
    cases.append(("gelu", lambda: ad.sum_all(ad.mul(ad.gelu(ge), ge)), [ge]))
    dw_x, dw_k = p((4, 5, 3)), p((3, 3, 3), scale=0.5)
    cases.append(("conv_depthwise",
                  lambda: ad.sum_all(ad.mul(ad.conv2d(dw_x, dw_k, mode="depthwise3x3"),
                                            ad.conv2d(dw_x, dw_k, mode="depthwise3x3"))),
                  [dw_x, dw_k]))
    pw_x, pw_k = p((4, 4, 3)), p((3, 5), scale=0.5)
    cases.append(("conv_pointwise",
                  lambda: ad.sum_all(ad.tanh(ad.conv2d(pw_x, pw_k, mode="pointwise1x1"))),
                  [pw_x, pw_k]))
    bb_x, bb_b = p((3, 4, 5)), p((5,))
    cases.append(("add_bias", lambda: ad.sum_all(ad.mul(ad.add_bias(bb_x, bb_b),
                                                        ad.add_bias(bb_x, bb_b))), [bb_x, bb_b]))
    tk = p((3, 9))
    cases.append(("take_concat",
                  lambda: ad.sum_all(ad.mul(ad.concat_last([ad.take_last(tk, 0, 4),
                                                            ad.take_last(tk, 4, 9)]), tk)),
                  [tk]))
    ix = p((2, 3, 6))
    perm = rng.permutation(6)
    cases.append(("index_last", lambda: ad.sum_all(ad.mul(ad.index_last(ix, perm),
                                                          ad.index_last(ix, perm))), [ix]))
    rs = p((2, 3, 4))
    cases.append(("reshape_permute",
                  lambda: ad.sum_all(ad.mul(ad.permute(ad.reshape(rs, (2, 12)), (1, 0)),
                                            ad.permute(ad.reshape(rs, (2, 12)), (1, 0)))),
                  [rs]))
    sb = p((3, 2, 2))
    cases.append(("sum_batch", lambda: ad.sum_all(ad.mul(ad.sum_batch(sb), ad.sum_batch(sb))), [sb]))
    return cases


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_match_finite_differences(seed, f64):
    for name, f, params in _primitive_cases(seed):
        err = check_gradients(f, params)
        assert err < 1e-5, f"{name}: rel err {err:.3e} at seed {seed}"


def test_composite_gradient_matches_finite_differences(f64):
    rng = np.random.default_rng(3)
    w1 = Tensor(rng.normal(size=(6, 8)) * 0.3, requires_grad=True)
    b1 = Tensor(np.zeros(8), requires_grad=True)
    w2 = Tensor(rng.normal(size=(8, 4)) * 0.3, requires_grad=True)
    g = Tensor(np.ones(6), requires_grad=True)
    bmat = Tensor(np.zeros(6), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 6)))

    def f():
        h = ad.layer_norm(x, g, bmat)
        h = ad.gelu(ad.add_bias(ad.matmul(h, w1), b1))
        out = ad.softmax_rows(ad.matmul(h, w2))
        return ad.sum_all(ad.mul(out, out))

    err = check_gradients(f, [w1, b1, w2, g, bmat])
    assert err < 1e-4, f"composite rel err {err:.3e}"


def test_max_rel_error_scale():
    assert max_rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert max_rel_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_finite_difference_helper_on_quadratic(f64):
    x = Tensor([1.0, -2.0], requires_grad=True)
    (g,) = finite_difference_grads(lambda: ad.sum_all(ad.mul(x, x)), [x])
    np.testing.assert_allclose(g, 2.0 * x.data, atol=1e-6)


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_single_step_example(f64):
    p = np.array([1.0])
    m = np.zeros(1)
    v = np.zeros(1)
    adamw_step(p, np.array([1.0]), m, v, t=1, lr=0.1)
    np.testing.assert_allclose(p, [0.9], atol=1e-6)


def test_adamw_decay_only_scales_param(f64):
    p = Tensor([2.0], requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.1 * 0.01)], rtol=1e-12)


def test_adamw_descends_quadratic(f64):
    p = Tensor([5.0], requires_grad=True)
    opt = AdamW([p], lr=0.05)
    for _ in range(400):
        opt.zero_grad()
        with Tape() as tape:
            tape.backward(ad.sum_all(ad.mul(p, p)))
        opt.step()
    assert abs(p.data[0]) < 0.5


def test_dtype_switch_controls_tensor_width():
    with ad.using_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
