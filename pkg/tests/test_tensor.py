import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import conv2d_loops, grad_check
from mlfsr import tensor as T
from mlfsr.tensor import ALLOCATOR, ParamStore, Tensor, no_grad

N_INSTANCES = 20


def rng_instances(seed=0):
    rng = np.random.default_rng(seed)
    return [np.random.default_rng(rng.integers(2**32)) for _ in range(N_INSTANCES)]


# --- reshape / permute -------------------------------------------------------------------

def test_reshape_round_trip():
    x = np.arange(6.0).reshape(2, 3)
    y = T.reshape(T.reshape(Tensor(x), (3, 2)), (2, 3))
    assert np.array_equal(y.data, x)


def test_permute_is_transpose():
    x = np.random.default_rng(0).standard_normal((2, 3))
    y = T.permute(Tensor(x), (1, 0)).data
    for i in range(2):
        for j in range(3):
            assert x[i, j] == y[j, i]


def test_permute_and_reshape_gradients():
    for rng in rng_instances(1):
        x = rng.standard_normal((2, 3))
        assert grad_check(lambda t: T.permute(t, (1, 0)), [x]) < 1e-6
        assert grad_check(lambda t: T.reshape(t, (3, 2)), [x]) < 1e-6


def test_reshape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        T.reshape(Tensor(np.zeros((2, 3))), (4, 2))


def test_permute_rejects_non_permutation():
    with pytest.raises(ValueError, match="permutation"):
        T.permute(Tensor(np.zeros((2, 3))), (0, 0))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=5, max_side=4),
                  elements=st.floats(-1e6, 1e6)), st.randoms())
def test_permute_round_trip_bitwise(x, rnd):
    axes = list(range(x.ndim))
    rnd.shuffle(axes)
    y = T.permute(T.permute(Tensor(x), axes), tuple(np.argsort(axes)))
    assert np.array_equal(y.data, x)
    z = T.reshape(T.reshape(Tensor(x), (-1,)), x.shape)
    assert np.array_equal(z.data, x)


# --- matmul ---------------------------------------------------------------------------------

def test_matmul_identity_and_hand_case():
    a = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(4))).data, a)
    out = T.matmul(Tensor(np.array([[1.0, 2], [3, 4]])), Tensor(np.array([[1.0], [1]])))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient():
    for rng in rng_instances(2):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert grad_check(T.matmul, [a, b]) < 1e-6
        ab = rng.standard_normal((2, 3, 4))
        assert grad_check(T.matmul, [ab, b]) < 1e-6


def test_matmul_inner_mismatch():
    with pytest.raises(ValueError, match="inner extents"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# --- conv2d ------------------------------------------------------------------------------------

def test_conv2d_identity_1x1():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.allclose(T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data, x, atol=0, rtol=1e-15)


def test_conv2d_ones_hand_count():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 1] == 6


def test_conv2d_matches_loops_and_gradient():
    for i, rng in enumerate(rng_instances(3)):
        k = (1, 3)[i % 2]
        x, w, b = rng.standard_normal((2, 3, 5, 4)), rng.standard_normal((2, 3, k, k)), rng.standard_normal(2)
        p = (k - 1) // 2
        assert np.allclose(T.conv2d(Tensor(x), Tensor(w), Tensor(b), p).data, conv2d_loops(x, w, b, p))
        assert grad_check(lambda a, ww, bb: T.conv2d(a, ww, bb, p), [x, w, b]) < 1e-6


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        T.conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 3, 3))), padding=1)


# --- conv1d depthwise -------------------------------------------------------------------------

def test_conv1d_identities():
    x = np.random.default_rng(0).standard_normal((2, 6, 3))
    assert np.array_equal(T.conv1d_depthwise(Tensor(x), Tensor(np.ones((1, 3)))).data, x)
    w = np.array([[0.0] * 3, [1.0] * 3])  # tap k-1 is the current token
    assert np.array_equal(T.conv1d_depthwise(Tensor(x), Tensor(w)).data, x)


def test_conv1d_is_causal():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 8, 2))
    w = rng.standard_normal((4, 2))
    y0 = T.conv1d_depthwise(Tensor(x), Tensor(w)).data
    x2 = x.copy()
    x2[0, 5] += 1.0
    y1 = T.conv1d_depthwise(Tensor(x2), Tensor(w)).data
    assert np.array_equal(y0[0, :5], y1[0, :5])
    assert not np.array_equal(y0[0, 5:], y1[0, 5:])


def test_conv1d_gradient():
    for rng in rng_instances(4):
        x, w, b = rng.standard_normal((2, 7, 3)), rng.standard_normal((4, 3)), rng.standard_normal(3)
        assert grad_check(T.conv1d_depthwise, [x, w, b]) < 1e-6


# --- layer norm ---------------------------------------------------------------------------------

def test_layer_norm_examples():
    out = T.layer_norm(Tensor(np.full((1, 4), 5.0)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.array_equal(out, np.zeros((1, 4)))
    out = T.layer_norm(Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-15)


def test_layer_norm_gradient():
    for rng in rng_instances(5):
        x, g, b = rng.standard_normal((3, 2, 5)), rng.standard_normal(5), rng.standard_normal(5)
        assert grad_check(T.layer_norm, [x, g, b]) < 1e-5


# --- activations -----------------------------------------------------------------------------------

def test_activation_values():
    z = Tensor(np.zeros(1))
    assert T.sigmoid(z).item() == 0.5
    assert abs(T.softplus(z).item() - math.log(2)) < 1e-15
    assert T.silu(z).item() == 0.0


def test_activations_stable_for_large_inputs():
    x = Tensor(np.array([-800.0, -40.0, 40.0, 800.0]))
    for fn in (T.sigmoid, T.silu, T.softplus):
        assert np.all(np.isfinite(fn(x).data))
    assert T.softplus(x).data[-1] == 800.0


@pytest.mark.parametrize("fn", [T.sigmoid, T.silu, T.softplus, T.exp])
def test_activation_gradients(fn):
    for rng in rng_instances(6):
        assert grad_check(fn, [rng.standard_normal((3, 4)) * 3]) < 1e-6


def test_softmax_rows_sum_to_one_and_gradient():
    for rng in rng_instances(7):
        x = rng.standard_normal((3, 5))
        assert np.allclose(T.softmax(Tensor(x)).data.sum(-1), 1.0, atol=1e-12)
        assert grad_check(T.softmax, [x]) < 1e-6


# --- reductions and elementwise --------------------------------------------------------------------

def test_mean_and_abs_subgradient():
    assert T.reduce_mean(Tensor(np.array([1.0, 2.0, 3.0]))).item() == 2.0
    x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
    T.abs_(x).sum().backward()
    assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_l1_gradient_away_from_kinks():
    for rng in rng_instances(8):
        x, y = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        y[np.abs(x - y) < 1e-3] += 0.01
        assert grad_check(lambda a, b: T.reduce_mean(T.abs_(T.sub(a, b))), [x, y]) < 1e-5


def test_broadcast_arithmetic_gradients():
    for rng in rng_instances(9):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 1))
        assert grad_check(T.add, [a, b]) < 1e-6
        assert grad_check(T.sub, [a, b]) < 1e-6
        assert grad_check(T.mul, [a, b]) < 1e-6
        assert grad_check(lambda t: T.reduce_sum(t, axis=(0, 2)), [a]) < 1e-6
        assert grad_check(lambda t: T.reduce_mean(t, axis=1, keepdims=True), [a]) < 1e-6


def test_reduce_axis_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        T.reduce_sum(Tensor(np.zeros((2, 3))), axis=2)


def test_getitem_split_flip_gradients():
    for rng in rng_instances(10):
        x = rng.standard_normal((3, 6))
        assert grad_check(lambda t: T.getitem(t, (slice(None), [0, 2, 2])), [x]) < 1e-6
        assert grad_check(lambda t: T.split_last(t, [2, 4])[1], [x]) < 1e-6
        assert grad_check(lambda t: T.flip(t, 1), [x]) < 1e-6


# --- pixel shuffle ---------------------------------------------------------------------------------

def test_pixel_shuffle_examples():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    assert np.array_equal(T.pixel_shuffle(Tensor(x), 1).data, x)
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    block = T.pixel_shuffle(Tensor(np.array([a, b, c, d]).reshape(1, 4, 1, 1)), 2).data[0, 0]
    assert np.array_equal(block, [[a, b], [c, d]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_pixel_shuffle_round_trip(n, c, h, w, s):
    x = np.random.default_rng(n * 100 + c * 10 + h).standard_normal((n, c * s * s, h, w))
    y = T.pixel_unshuffle(T.pixel_shuffle(Tensor(x), s), s)
    assert np.array_equal(y.data, x)


def test_pixel_shuffle_divisibility():
    with pytest.raises(ValueError):
        T.pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))), 2)


def test_pixel_shuffle_gradient():
    x = np.random.default_rng(11).standard_normal((1, 8, 2, 3))
    assert grad_check(lambda t: T.pixel_shuffle(t, 2), [x]) < 1e-6


# --- backward semantics ------------------------------------------------------------------------------

def test_backward_examples():
    x = Tensor(np.zeros(3), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * 2.0)


def test_gradients_accumulate_across_backward_passes():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((5, 4)))
    loss = T.reduce_sum(T.matmul(x, w))
    loss.backward()
    g1 = w.grad.copy()
    loss.backward()
    assert np.array_equal(w.grad, 2 * g1)


def test_shared_node_visited_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    assert x.grad[0] == 12.0


def test_unreachable_params_get_zero_grad():
    store = ParamStore({"a": Tensor(np.ones(2)), "b": Tensor(np.ones(3))})
    T.backward((store["a"] * 3.0).sum(), store)
    assert np.array_equal(store["b"].grad, np.zeros(3))
    assert np.array_equal(store["a"].grad, [3.0, 3.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_param_store_order_and_uniqueness():
    store = ParamStore()
    for k in ("b.x", "a.z", "a.y"):
        store[k] = Tensor(np.zeros(1))
    assert store.keys() == ["a.y", "a.z", "b.x"]
    with pytest.raises(KeyError, match="duplicate"):
        store["a.y"] = Tensor(np.zeros(1))
    assert store.scope("a")["z"] is store["a.z"]


def test_allocator_tracks_owned_buffers():
    ALLOCATOR.reset_peak()
    base = ALLOCATOR.live
    t = Tensor(np.zeros(1000, dtype=np.float64))
    assert ALLOCATOR.live - base == 8000
    view = T.reshape(t, (10, 100))  # a view owns nothing
    assert ALLOCATOR.live - base == 8000
    del t, view
    assert ALLOCATOR.live == base
    assert ALLOCATOR.peak - base >= 8000
