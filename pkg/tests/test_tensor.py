import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import conv_loop, dwconv_loop, matmul_loop, mean_loop
from secvit import tensor as T
from secvit.gradcheck import TOLERANCE, all_checks
from secvit.nn import AdamW, LinearParams, adamw_step, init_linear, sgd_step
from secvit.tensor import Tape, Tensor, finite_diff_grad, max_rel_error


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = T.matmul(t([[1, 0], [0, 1]]), t([[3, 4], [5, 6]]))
    assert np.array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot():
    assert T.matmul(t([[1, 2]]), t([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(T.matmul(t(a), t(b)).data, matmul_loop(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


@given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)))
def test_identity_matmul_is_exact(a):
    assert np.array_equal(T.matmul(t(np.eye(4)), t(a)).data, a)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_lastdim(t([0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    np.testing.assert_allclose(T.softmax_lastdim(t([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    y = T.softmax_lastdim(t(rng.normal(size=(4, 6)))).data
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)


def test_softmax_mask_zeroes_entries():
    y = T.softmax_lastdim(t([[1.0, 2.0, 3.0]]), np.array([True, False, True])).data
    assert y[0, 1] == 0.0
    np.testing.assert_allclose(y[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum(), atol=1e-15)


def test_softmax_fully_masked_row_is_zero():
    y = T.softmax_lastdim(t([[1.0, 2.0]]), np.array([False, False])).data
    assert np.array_equal(y, [[0.0, 0.0]])


@settings(max_examples=50)
@given(
    arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance(x, c):
    a = T.softmax_lastdim(t(x)).data
    b = T.softmax_lastdim(t(x + c)).data
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_f32_sums():
    x = Tensor(np.random.default_rng(1).normal(size=(8, 9)).astype(np.float32))
    y = T.softmax_lastdim(x).data
    assert y.dtype == np.float32
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- pooling / gather


def test_mean_pool_examples(rng):
    assert T.mean_pool_tokens(t([[1, 3], [3, 1]])).data.tolist() == [2.0, 2.0]
    assert T.mean_pool_tokens(t([[5, 7]])).data.tolist() == [5.0, 7.0]
    x = rng.normal(size=(16, 4))
    np.testing.assert_allclose(T.mean_pool_tokens(t(x)).data, mean_loop(x), atol=1e-12)


def test_mean_pool_empty():
    with pytest.raises(ValueError):
        T.mean_pool_tokens(t(np.zeros((0, 3))))


def test_gather_rows_examples():
    x = t([[1, 1], [2, 2], [3, 3]])
    assert T.gather_rows(x, [2, 0, 1]).data[:, 0].tolist() == [3, 1, 2]
    assert np.array_equal(T.gather_rows(x, [0, 1, 2]).data, x.data)


@pytest.mark.parametrize("idx", [[0, 0, 1], [0, 1, 3], [0, 1]])
def test_gather_rows_rejects_non_permutations(idx):
    with pytest.raises((ValueError, IndexError)):
        T.gather_rows(t(np.zeros((3, 2))), idx)


@given(st.permutations(list(range(7))))
def test_gather_inverse_is_identity_forward_and_backward(perm):
    perm = np.array(perm)
    inv = np.argsort(perm)
    x = t(np.arange(14.0).reshape(7, 2), grad=True)
    y = T.gather_rows(T.gather_rows(x, perm), inv)
    assert np.array_equal(y.data, x.data)
    g = np.random.default_rng(0).normal(size=(7, 2))
    y.backward(g)
    assert np.array_equal(x.grad, g)


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        T.take_rows(t(np.zeros((3, 2))), [3])


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_vector():
    out = T.layer_norm(t([[4.0, 4.0, 4.0]]), t([1, 1, 1]), t([0, 0, 0]))
    assert np.array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_already_normalized():
    out = T.layer_norm(t([1.0, -1.0]), t([1, 1]), t([0, 0]))
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)


def test_layer_norm_moments(rng):
    out = T.layer_norm(t(rng.normal(size=(3, 8)) * 5 + 2), t(np.ones(8)), t(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- convolutions


def test_dwconv_delta_is_identity(rng):
    x = rng.normal(size=(2, 5, 5))
    k = np.zeros((2, 3, 3))
    k[:, 1, 1] = 1
    assert np.array_equal(T.dwconv2d_3x3(t(x), t(k)).data, x)


def test_dwconv_counts_taps():
    out = T.dwconv2d_3x3(t(np.ones((1, 3, 3))), t(np.ones((1, 3, 3)))).data
    assert out[0, 1, 1] == 9 and out[0, 0, 0] == 4


def test_dwconv_matches_loop(rng):
    x, k = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 3, 3))
    np.testing.assert_allclose(T.dwconv2d_3x3(t(x), t(k)).data, dwconv_loop(x, k), atol=1e-12)


def test_dwconv_shape_mismatch():
    with pytest.raises(ValueError):
        T.dwconv2d_3x3(t(np.ones((2, 4, 4))), t(np.ones((3, 3, 3))))


def test_conv_stride2_delta_subsamples():
    x = np.arange(16.0).reshape(1, 4, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    assert np.array_equal(T.conv2d_stride(t(x), t(w), 2).data, x[:, ::2, ::2])


def test_conv_stride1_delta_routes_channels(rng):
    x = rng.normal(size=(2, 4, 5))
    w = np.zeros((2, 2, 3, 3))
    w[0, 1, 1, 1] = 1  # out 0 <- in 1
    w[1, 0, 1, 1] = 1  # out 1 <- in 0
    out = T.conv2d_stride(t(x), t(w), 1).data
    assert np.array_equal(out, x[::-1])


@pytest.mark.parametrize("stride,shape", [(1, (3, 5, 5)), (2, (3, 5, 5)), (2, (2, 6, 4))])
def test_conv_matches_loop(rng, stride, shape):
    x = rng.normal(size=shape)
    w = rng.normal(size=(4, shape[0], 3, 3))
    np.testing.assert_allclose(T.conv2d_stride(t(x), t(w), stride).data, conv_loop(x, w, stride), atol=1e-12)


def test_conv_batched_matches_unbatched(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))
    out = T.conv2d_stride(t(x), t(w), 2).data
    for i in range(3):
        np.testing.assert_allclose(out[i], conv_loop(x[i], w, 2), atol=1e-12)


def test_conv_rejects_bad_stride():
    with pytest.raises(ValueError):
        T.conv2d_stride(t(np.ones((1, 4, 4))), t(np.ones((1, 1, 3, 3))), 3)


# ---------------------------------------------------------------- misc ops


def test_gelu_values():
    y = T.gelu(t([0.0, 1.0, -1.0])).data
    np.testing.assert_allclose(y, [0.0, 0.8413447460685429, -0.15865525393145707], atol=1e-15)


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy_logits(t(np.zeros((4, 5))), [0, 1, 2, 3])
    assert loss.data == pytest.approx(np.log(5))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        T.cross_entropy_logits(t(np.zeros((2, 3))), [0, 3])


def test_add_broadcasts_bias_gradient():
    x = t(np.ones((4, 3)), grad=True)
    b = t(np.zeros(3), grad=True)
    T.sum_all(T.add(x, b)).backward()
    assert np.array_equal(b.grad, [4.0, 4.0, 4.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_results_raise():
    with pytest.raises(FloatingPointError):
        T.mul(t([1e308]), t([1e308]))


def test_no_grad_builds_no_graph():
    x = t([1.0, 2.0], grad=True)
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------- tape


def test_tape_order_and_single_visit():
    x = t([1.0, 2.0], grad=True)
    a = T.mul(x, x)
    b = T.add(a, a)  # a reused: must still be visited once
    loss = T.sum_all(b)
    tape = Tape.from_output(loss)
    pos = {id(r): i for i, r in enumerate(tape.records)}
    for r in tape.records:
        for p in r._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(r)]
    assert len(pos) == len(tape.records)
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)
    assert loss._parents == ()  # graph freed


# ---------------------------------------------------------------- finite differences


def test_finite_diff_sum_of_squares():
    g = finite_diff_grad(lambda x: T.sum_all(T.mul(x, x)), t([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_finite_diff_constant():
    assert np.array_equal(finite_diff_grad(lambda x: 3.0, t([1.0, 2.0])), [0.0, 0.0])


def test_finite_diff_requires_f64():
    with pytest.raises(TypeError):
        finite_diff_grad(lambda x: 0.0, Tensor(np.zeros(2, dtype=np.float32)))


def test_finite_diff_nonfinite():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda x: float("nan"), t([1.0]))


def test_max_rel_error_convention():
    assert max_rel_error(np.array([100.0]), np.array([101.0])) == pytest.approx(1 / 101)
    assert max_rel_error(np.array([0.0]), np.array([1e-7])) == pytest.approx(1e-7)


@pytest.mark.parametrize("name", list(all_checks()))
def test_backward_matches_finite_differences(name):
    err = all_checks()[name](np.random.default_rng(hash(name) % 2**32))
    assert err < TOLERANCE, f"{name}: {err:.3e}"


# ---------------------------------------------------------------- parameters and optimizers


def test_linear_params_validate_shapes():
    with pytest.raises(ValueError):
        LinearParams(t(np.zeros((2, 3))), t(np.zeros(3)))


def test_init_linear_bounds(rng):
    p = init_linear(rng, 16, 8)
    assert np.abs(p.weight.data).max() <= 0.25 and np.array_equal(p.bias.data, np.zeros(8))


def test_sgd_step():
    p = t([1.0, 2.0], grad=True)
    p.grad = np.array([0.5, -1.0])
    sgd_step([p], 0.1)
    np.testing.assert_allclose(p.data, [0.95, 2.1])


def test_adamw_first_step_is_lr_sign():
    # with bias correction the first Adam step is lr * g / (|g| + eps)
    p = t([1.0, -1.0], grad=True)
    p.grad = np.array([2.0, -3.0])
    adamw_step(p, np.zeros(2), np.zeros(2), 1, lr=0.1)
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)


def test_adamw_decoupled_decay_with_zero_grad():
    p = t(np.ones((2, 2)), grad=True)
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.zeros((2, 2))
    opt.step()
    np.testing.assert_allclose(p.data, 0.95)


def test_adamw_minimizes_quadratic():
    p = t([3.0, -2.0], grad=True)
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        T.sum_all(T.mul(p, p)).backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2
