"""Primitive ops and reverse-mode gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mgtedit import tensor as T
from mgtedit.errors import ShapeError, TokenIndexError, UsageError
from mgtedit.tensor import GradTape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, *arrays, tol=1e-6):
    """``build(tensors, tape)`` returns a scalar Tensor; compare tape gradients with central differences."""
    ts = [Tensor(a) for a in arrays]
    tape = GradTape()
    for i, t in enumerate(ts):
        tape.watch(t, f"x{i}")
    grads = T.backward(tape, build(ts, tape))
    for i, t in enumerate(ts):
        num = numeric_grad(lambda: build(ts, None).item(), t.data)
        np.testing.assert_allclose(grads[f"x{i}"], num, atol=tol, rtol=tol)


# --------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(T.matmul(eye, eye).data, np.eye(2))


def test_matmul_hand_checked():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_matches_triple_loop(rng):
    # small integers keep every partial sum exact, so equality is bitwise
    a = rng.integers(-9, 10, (3, 4)).astype(float)
    b = rng.integers(-9, 10, (4, 2)).astype(float)
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))


def test_matmul_random_floats_close_to_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-14, atol=1e-15)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batched_shapes(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)


# --------------------------------------------------------------------------
# softmax, rms_norm, cross_entropy


def test_softmax_zero_row_is_uniform():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-16)


def test_softmax_is_stable_for_large_logits():
    with np.errstate(over="raise"):
        p = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert p[0, 0] == pytest.approx(1.0) and p[0, 1] == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(p))


def test_softmax_random_rows_sum_to_one(rng):
    p = T.softmax_rows(Tensor(rng.standard_normal((4, 5)))).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_softmax_rows_sum_over_many_random_matrices():
    r = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        m, n = r.integers(1, 9, 2)
        x = r.standard_normal((m, n)) * r.choice([1e-3, 1.0, 30.0, 500.0])
        p = T.softmax_rows(Tensor(x)).data
        assert np.all(p >= 0)
        worst = max(worst, np.abs(p.sum(axis=1) - 1).max())
    assert worst < 1e-12


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_property_rows_normalized(x):
    p = T.softmax_rows(Tensor(x)).data
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_rms_norm_unit_row():
    np.testing.assert_allclose(T.rms_norm(Tensor(np.ones((1, 5))), Tensor(np.ones(5))).data, 1.0, rtol=1e-6)


def test_rms_norm_hand_computation():
    out = T.rms_norm(Tensor([[3.0, 4.0]]), Tensor([1.0, 1.0]), eps=0.0).data
    np.testing.assert_allclose(out, [[3 / np.sqrt(12.5), 4 / np.sqrt(12.5)]], rtol=1e-15)
    # with the default epsilon the difference is below 1e-7 relative
    np.testing.assert_allclose(T.rms_norm(Tensor([[3.0, 4.0]]), Tensor([1.0, 1.0])).data, out, rtol=1e-7)


def test_rms_norm_output_has_unit_rms(rng):
    x = rng.standard_normal((1, 32))
    out = T.rms_norm(Tensor(x), Tensor(np.ones(32)), eps=0.0).data
    assert np.sqrt((out ** 2).mean()) == pytest.approx(1.0, abs=1e-9)
    # epsilon shifts the RMS by about eps / (2 mean(x^2)); negligible for large rows
    out = T.rms_norm(Tensor(x * 100), Tensor(np.ones(32))).data
    assert np.sqrt((out ** 2).mean()) == pytest.approx(1.0, abs=1e-9)


def test_rms_norm_zero_row_is_finite():
    out = T.rms_norm(Tensor(np.zeros((1, 4))), Tensor(np.ones(4))).data
    np.testing.assert_array_equal(out, 0.0)


def test_rms_norm_gain_shape_checked():
    with pytest.raises(ShapeError):
        T.rms_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def lse_oracle_ce(logits, targets):
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += lse - row[t]
    return total / len(targets)


def test_cross_entropy_uniform_logits():
    assert T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(np.log(4), abs=1e-15)


def test_cross_entropy_near_one_hot():
    logits = np.zeros((2, 5))
    logits[0, 2] = logits[1, 4] = 30.0
    assert T.cross_entropy(Tensor(logits), [2, 4]).item() == pytest.approx(0.0, abs=1e-11)


def test_cross_entropy_matches_lse_oracle(rng):
    logits = rng.standard_normal((3, 5)) * 3
    targets = [4, 0, 2]
    assert abs(T.cross_entropy(Tensor(logits), targets).item() - lse_oracle_ce(logits, targets)) < 1e-12


def test_cross_entropy_bad_target():
    with pytest.raises(TokenIndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(TokenIndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])


# --------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    tape = GradTape()
    tape.watch(x, "x")
    g = T.backward(tape, T.tsum(x, tape))
    np.testing.assert_array_equal(g["x"], np.ones((3, 4)))


def test_backward_self_dot_gives_2x(rng):
    xv = rng.standard_normal((1, 6))
    x = Tensor(xv)
    tape = GradTape()
    tape.watch(x, "x")
    loss = T.matmul(x, T.transpose(x, tape), tape)
    np.testing.assert_allclose(T.backward(tape, T.tsum(loss, tape))["x"], 2 * xv, rtol=1e-15)


def test_backward_rejects_untaped_loss(rng):
    x = Tensor(rng.standard_normal(3))
    tape = GradTape()
    tape.watch(x, "x")
    with pytest.raises(UsageError):
        T.backward(tape, T.tsum(x))  # built without the tape
    with pytest.raises(UsageError):
        T.backward(tape, Tensor(np.ones(1)))


def test_backward_rejects_non_scalar(rng):
    x = Tensor(rng.standard_normal(3))
    tape = GradTape()
    tape.watch(x, "x")
    with pytest.raises(UsageError):
        T.backward(tape, T.scale(x, 2.0, tape))


def test_backward_unused_param_gets_zeros():
    a, b = Tensor(np.ones(3)), Tensor(np.ones((2, 2)))
    tape = GradTape()
    tape.watch(a, "a")
    tape.watch(b, "b")
    g = T.backward(tape, T.tsum(a, tape))
    np.testing.assert_array_equal(g["b"], np.zeros((2, 2)))


def test_grad_matmul_broadcast(rng):
    check_grads(lambda ts, tp: T.tsum(T.matmul(ts[0], ts[1], tp), tp),
                rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)))


def test_grad_add_mul_broadcast(rng):
    check_grads(lambda ts, tp: T.tsum(T.mul(T.add(ts[0], ts[1], tp), ts[0], tp), tp),
                rng.standard_normal((3, 4)), rng.standard_normal(4))


def test_grad_softmax(rng):
    w = rng.standard_normal((3, 5))
    check_grads(lambda ts, tp: T.tsum(T.mul(T.softmax_rows(ts[0], tp), Tensor(w), tp), tp),
                rng.standard_normal((3, 5)))


def test_grad_rms_norm(rng):
    w = rng.standard_normal((3, 4))
    check_grads(lambda ts, tp: T.tsum(T.mul(T.rms_norm(ts[0], ts[1], tape=tp), Tensor(w), tp), tp),
                rng.standard_normal((3, 4)), rng.standard_normal(4))


def test_grad_silu(rng):
    check_grads(lambda ts, tp: T.tsum(T.mul(T.silu(ts[0], tp), ts[0], tp), tp), rng.standard_normal((2, 5)) * 3)


def test_silu_large_inputs_stay_finite():
    with np.errstate(all="raise"):
        out = T.silu(Tensor([-1000.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.0, 1000.0], atol=1e-300)


def test_grad_cross_entropy(rng):
    check_grads(lambda ts, tp: T.cross_entropy(ts[0], [1, 0, 3], tp), rng.standard_normal((3, 4)))


def test_grad_take_rows_repeated_indices(rng):
    w = rng.standard_normal((4, 3))
    check_grads(lambda ts, tp: T.tsum(T.mul(T.take_rows(ts[0], [2, 0, 2, 1], tp), Tensor(w), tp), tp),
                rng.standard_normal((5, 3)))


def test_take_rows_bad_index():
    with pytest.raises(TokenIndexError):
        T.take_rows(Tensor(np.ones((3, 2))), [3])


def test_grad_shape_ops(rng):
    w = rng.standard_normal((3, 2, 4))

    def build(ts, tp):
        x = T.concat([ts[0], ts[1]], axis=0, tape=tp)  # (6, 4)
        x = T.narrow(x, 0, 1, 4, tp)  # (3, 4)
        x = T.reshape(x, (3, 2, 2), tp)
        x = T.permute(x, (0, 2, 1), tp)
        x = T.reshape(x, (3, 4), tp)
        x = T.add_const(T.scale(x, 1.5, tp), 0.25, tp)
        y = T.matmul(T.transpose(x, tp), Tensor(w[:, 0, :]), tp)
        return T.tsum(y, tp)

    check_grads(build, rng.standard_normal((2, 4)), rng.standard_normal((4, 4)))


def test_grad_rope_rotate(rng):
    ang = rng.uniform(-3, 3, (3, 2))
    cos, sin = np.repeat(np.cos(ang), 2, axis=1), np.repeat(np.sin(ang), 2, axis=1)
    w = rng.standard_normal((3, 4))
    check_grads(lambda ts, tp: T.tsum(T.mul(T.rope_rotate(ts[0], cos, sin, tp), Tensor(w), tp), tp),
                rng.standard_normal((3, 4)))


def test_primitives_are_deterministic(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    r1 = T.softmax_rows(T.matmul(Tensor(a), Tensor(b))).data
    r2 = T.softmax_rows(T.matmul(Tensor(a.copy()), Tensor(b.copy()))).data
    assert r1.tobytes() == r2.tobytes()


def test_tensor_item_and_shape():
    t = Tensor([[2.5]])
    assert t.shape == (1, 1) and t.item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()
