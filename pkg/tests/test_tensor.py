import numpy as np
import pytest

from tissuegnn.errors import (
    ContractError,
    EmptyInputError,
    NonFiniteError,
    ShapeError,
)
from tissuegnn.tensor import AdamState, Tape, Tensor, adam_step

from gradcheck import fd_gradient, max_relative_error


# --------------------------------------------------------------------- #
# affine


def test_affine_identity():
    tape = Tape()
    x = tape.leaf([[1.0, 2.0]])
    w = tape.leaf([[1.0, 0.0], [0.0, 1.0]])
    b = tape.leaf([0.0, 0.0])
    out = tape.affine(x, w, b)
    assert np.array_equal(out.data, [[1.0, 2.0]])


def test_affine_zero_input_returns_bias():
    tape = Tape()
    x = tape.leaf([[0.0, 0.0]])
    w = tape.leaf([[5.0, -2.0], [1.0, 7.0]])
    b = tape.leaf([3.0, -1.0])
    out = tape.affine(x, w, b)
    assert np.array_equal(out.data, [[3.0, -1.0]])


def test_affine_hand_multiply():
    # [1,1] @ [[2,0],[1,3]] + [1,1] = [2+1+1, 0+3+1] = [4,4]
    tape = Tape()
    x = tape.leaf([[1.0, 1.0]])
    w = tape.leaf([[2.0, 0.0], [1.0, 3.0]])
    b = tape.leaf([1.0, 1.0])
    out = tape.affine(x, w, b)
    assert np.array_equal(out.data, [[4.0, 4.0]])


def test_affine_shape_mismatch_reports_both_shapes():
    tape = Tape()
    x = tape.leaf(np.zeros((2, 3)))
    w = tape.leaf(np.zeros((4, 5)))
    with pytest.raises(ShapeError) as err:
        tape.affine(x, w)
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


# --------------------------------------------------------------------- #
# activations


def test_swish_at_zero_and_one():
    tape = Tape()
    x = tape.leaf([[0.0, 1.0]])
    out = tape.activation(x, "swish")
    assert out.data[0, 0] == 0.0
    # 1 * 1/(1+e^-1)
    assert out.data[0, 1] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-12)
    assert out.data[0, 1] == pytest.approx(0.731058, abs=1e-6)


def test_relu_negative_clamps():
    tape = Tape()
    out = tape.activation(tape.leaf([[-2.5, 0.5]]), "relu")
    assert np.array_equal(out.data, [[0.0, 0.5]])


# --------------------------------------------------------------------- #
# dropout


def test_dropout_eval_mode_is_identity(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(7, 5)))
    out = tape.dropout(x, 0.5, training=False, seed=3)
    assert np.array_equal(out.data, x.data)


def test_dropout_p_zero_is_identity(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(7, 5)))
    out = tape.dropout(x, 0.0, training=True, seed=3)
    assert np.array_equal(out.data, x.data)


def test_dropout_inverted_scaling_statistics():
    tape = Tape()
    x = tape.leaf(np.ones((100_000, 1)))
    out = tape.dropout(x, 0.3, training=True, seed=99)
    survivors = out.data[out.data != 0.0]
    assert np.allclose(survivors, 1.0 / 0.7)
    assert abs(out.data.mean() - 1.0) < 0.02


def test_dropout_deterministic_under_seed(rng):
    x_arr = rng.normal(size=(50, 4))
    outs = []
    for _ in range(2):
        tape = Tape()
        outs.append(tape.dropout(tape.leaf(x_arr), 0.4, True, seed=7).data)
    assert np.array_equal(outs[0], outs[1])


def test_dropout_rejects_p_one():
    tape = Tape()
    with pytest.raises(ContractError):
        tape.dropout(tape.leaf(np.ones((2, 2))), 1.0, True, seed=0)


# --------------------------------------------------------------------- #
# pooling


def test_pool_examples():
    tape = Tape()
    x = tape.leaf([[1.0, 5.0], [3.0, 2.0]])
    assert np.array_equal(tape.pool(x, "max").data, [3.0, 5.0])
    assert np.array_equal(tape.pool(x, "mean").data, [2.0, 3.5])


def test_pool_single_row_returns_row():
    tape = Tape()
    x = tape.leaf([[4.0, -1.0, 2.0]])
    for kind in ("max", "mean"):
        assert np.array_equal(tape.pool(x, kind).data, [4.0, -1.0, 2.0])


def test_pool_empty_errors():
    tape = Tape()
    with pytest.raises(EmptyInputError):
        tape.pool(tape.leaf(np.zeros((0, 3))), "max")


def test_max_pool_gradient_routes_to_first_argmax():
    tape = Tape()
    x = tape.leaf(np.array([[2.0, 1.0], [2.0, 3.0]]), requires_grad=True)
    out = tape.pool(x, "max")
    loss = tape.sum_all(out)
    tape.backward(loss)
    # col 0 ties at 2.0 -> gradient goes to row 0 only
    assert np.array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0]])


# --------------------------------------------------------------------- #
# backward contract


def test_backward_dw_of_sum_wx():
    tape = Tape()
    x = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
    w = tape.leaf(np.zeros((2, 3)), requires_grad=True)
    loss = tape.sum_all(tape.affine(x, w))
    tape.backward(loss)
    # d(sum(xW))/dW[k,j] = sum_i x[i,k]
    assert np.array_equal(w.grad, np.tile(x.data.sum(axis=0)[:, None], (1, 3)))


def test_backward_constant_loss_no_error():
    tape = Tape()
    c = tape.leaf(np.asarray(5.0))
    tape.backward(c)  # no leaves, no gradients, no crash


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)), requires_grad=True)
    y = tape.scale(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_accumulates_without_reset():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)), requires_grad=True)
    loss = tape.sum_all(tape.scale(x, 3.0))
    tape.backward(loss)
    first = x.grad.copy()
    tape.backward(loss)
    assert np.array_equal(x.grad, 2.0 * first)


def test_tape_replay_identical_after_reset(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(4, 3)), requires_grad=True)
    h = tape.swish(tape.affine(x, tape.leaf(rng.normal(size=(3, 2)))))
    loss = tape.mean_all(tape.mul(h, h))
    tape.backward(loss)
    g1 = x.grad.copy()
    tape.zero_grads()
    tape.backward(loss)
    assert np.array_equal(x.grad, g1)


def test_fanout_gradients_accumulate():
    tape = Tape()
    x = tape.leaf(np.asarray([[2.0]]), requires_grad=True)
    y = tape.mul(x, x)          # x^2
    z = tape.add(y, x)          # x^2 + x
    loss = tape.sum_all(z)
    tape.backward(loss)
    assert x.grad[0, 0] == pytest.approx(2 * 2.0 + 1.0)


def test_check_finite_raises():
    tape = Tape(check_finite=True)
    x = tape.leaf(np.asarray([[700.0]]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        tape.mul(tape.leaf(np.asarray([[np.inf]])), x)


# --------------------------------------------------------------------- #
# finite-difference oracle over every differentiable op


def _op_cases(rng):
    """(name, arrays, tape builder) for every differentiable op.

    Builders map raw arrays to a scalar via a random projection so every
    output coordinate affects the loss.
    """
    cases = []

    def proj(tape, t, p):
        flat = tape.reshape(t, (t.data.size, 1))
        return tape.sum_all(tape.mul_const(flat, p.reshape(-1, 1)))

    def add_case(name, arrays, build):
        cases.append((name, arrays, build))

    n, d, k = int(rng.integers(2, 7)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
    p_out = rng.normal(size=n * k)

    add_case("affine", [rng.normal(size=(n, d)), rng.normal(size=(d, k)),
                        rng.normal(size=k)],
             lambda tape, ts: proj(tape, tape.affine(*ts), p_out))
    p_nd = rng.normal(size=n * d)
    for name in ("add", "sub", "mul"):
        add_case(name, [rng.normal(size=(n, d)), rng.normal(size=(n, d))],
                 lambda tape, ts, _n=name: proj(tape, getattr(tape, _n)(*ts), p_nd))
    add_case("scale", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.scale(ts[0], -1.7), p_nd))
    add_case("add_const", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.add_const(ts[0], 0.5), p_nd))
    add_case("mul_const", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.mul_const(ts[0], 2.5), p_nd))
    rot = rng.normal(size=(d, d))
    add_case("matmul_const", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.matmul_const(ts[0], rot), p_nd))
    add_case("sigmoid", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.sigmoid(ts[0]), p_nd))
    add_case("swish", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.swish(ts[0]), p_nd))
    # keep relu inputs away from the kink
    relu_in = rng.normal(size=(n, d))
    relu_in += np.sign(relu_in) * 0.05
    add_case("relu", [relu_in],
             lambda tape, ts: proj(tape, tape.relu(ts[0]), p_nd))
    add_case("tanh", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.tanh(ts[0]), p_nd))
    add_case("dropout", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.dropout(ts[0], 0.4, True, seed=11), p_nd))
    p_cat = rng.normal(size=n * (d + k))
    add_case("concat_cols", [rng.normal(size=(n, d)), rng.normal(size=(n, k))],
             lambda tape, ts: proj(tape, tape.concat_cols(ts), p_cat))
    idx = rng.integers(0, n, size=3 * n)
    p_gather = rng.normal(size=3 * n * d)
    add_case("gather_rows", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.gather_rows(ts[0], idx), p_gather))
    p_group = rng.normal(size=n * d)
    add_case("group_sum", [rng.normal(size=(n * k, d))],
             lambda tape, ts: proj(tape, tape.group_sum(ts[0], k), p_group))
    # spread group values so max pooling has no near-ties
    spread = rng.permuted(np.arange(n * k * d, dtype=float).reshape(n * k, d) * 0.1,
                          axis=0)
    add_case("group_pool_max", [spread + rng.normal(size=(n * k, d)) * 0.01],
             lambda tape, ts: proj(tape, tape.group_pool(ts[0], k, "max"), p_group))
    add_case("group_pool_mean", [rng.normal(size=(n * k, d))],
             lambda tape, ts: proj(tape, tape.group_pool(ts[0], k, "mean"), p_group))
    p_d = rng.normal(size=d)
    add_case("pool_mean", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.pool(ts[0], "mean"), p_d))
    add_case("reshape", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.reshape(ts[0], (d, n)), p_nd))
    add_case("scale_rows", [rng.normal(size=(n, d)), rng.normal(size=(n, 1))],
             lambda tape, ts: proj(tape, tape.scale_rows(*ts), p_nd))
    angles = rng.uniform(0, 2 * np.pi, size=(n, 1))
    p_n3 = rng.normal(size=n * 3)
    add_case("rotz_rows", [rng.normal(size=(n, 3))],
             lambda tape, ts: proj(
                 tape, tape.rotz_rows(ts[0], np.cos(angles), np.sin(angles)),
                 p_n3))
    p_n1 = rng.normal(size=n)
    add_case("sqnorm_rows", [rng.normal(size=(n, d))],
             lambda tape, ts: proj(tape, tape.sqnorm_rows(ts[0]), p_n1))
    add_case("l2norm_rows", [rng.normal(size=(n, d)) + 0.5],
             lambda tape, ts: proj(tape, tape.l2norm_rows(ts[0]), p_n1))
    add_case("sum_all", [rng.normal(size=(n, d))],
             lambda tape, ts: tape.scale(tape.sum_all(ts[0]), 0.7))
    add_case("mean_all", [rng.normal(size=(n, d))],
             lambda tape, ts: tape.scale(tape.mean_all(ts[0]), 1.3))
    return cases


def test_every_op_gradient_matches_finite_differences():
    """Analytic vs central FD, 100 random shape/seed draws across all ops."""
    draws = 0
    seed = 0
    while draws < 100:
        seed += 1
        rng = np.random.default_rng(seed)
        for name, arrays, build in _op_cases(rng):
            def scalar_f(*arrs):
                tape = Tape(recording=False)
                return build(tape, [tape.leaf(a) for a in arrs]).data
            for which in range(len(arrays)):
                tape = Tape()
                leaves = [tape.leaf(a.copy(), requires_grad=True) for a in arrays]
                loss = build(tape, leaves)
                tape.backward(loss)
                analytic = leaves[which].grad
                if analytic is None:
                    analytic = np.zeros_like(leaves[which].data)
                fd = fd_gradient(scalar_f, arrays, which)
                err = max_relative_error(analytic, fd)
                assert err < 1e-4, f"{name} arg{which}: rel err {err:.2e}"
            draws += 1
        if draws >= 100:
            break


def test_forward_determinism(rng):
    x_arr = rng.normal(size=(6, 4))
    w_arr = rng.normal(size=(4, 3))

    def run():
        tape = Tape()
        x = tape.leaf(x_arr)
        h = tape.dropout(tape.swish(tape.affine(x, tape.leaf(w_arr))), 0.3, True, 42)
        return tape.mean_all(tape.mul(h, h)).data
    assert np.array_equal(run(), run())


# --------------------------------------------------------------------- #
# Adam


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    adam_step({"p": p}, {"p": np.zeros(2)}, state)
    assert np.array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_hand_checked_first_step():
    # theta=0, g=1, lr=1e-3, t=1: mhat = 1, vhat = 1 -> step = lr/(1+eps)
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=1e-3)
    adam_step({"p": p}, {"p": np.array([1.0])}, state)
    expected = -1e-3 * (1.0 / (1.0 + 1e-8))
    assert p.data[0] == pytest.approx(expected, rel=1e-12)
    assert p.data[0] == pytest.approx(-0.000999999, abs=1e-9)


def test_adam_constant_gradient_step_sizes_non_increasing():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=1e-3)
    prev = p.data.copy()
    deltas = []
    for _ in range(5):
        adam_step({"p": p}, {"p": np.array([1.0])}, state)
        deltas.append(abs(p.data[0] - prev[0]))
        prev = p.data.copy()
    assert all(d2 <= d1 + 1e-15 for d1, d2 in zip(deltas, deltas[1:]))


def test_adam_minimizes_quadratic():
    p = Tensor(np.array([5.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    for _ in range(300):
        adam_step({"p": p}, {"p": 2.0 * p.data}, state)
    assert abs(p.data[0]) < 1e-2
