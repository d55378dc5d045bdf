import math

import numpy as np
import pytest

from bullygraph import autodiff as ad
from bullygraph.autodiff import (ShapeError, Tape, Variable, backward, clamp,
                                 concat, const, dot, grad_check, log, matmul,
                                 param, pick, row, smul, softmax, stack, total)

from oracles import fd_gradient


def rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


class TestMatmul:
    def test_identity(self):
        a = const(np.eye(2))
        b = const([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[3, 4], [5, 6]])

    def test_hand_dot_product(self):
        out = matmul(const([[1.0, 2.0]]), const([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as e:
            matmul(const(np.zeros((2, 3))), const(np.zeros((2, 3))))
        assert "(2, 3)" in str(e.value) and "(2, 3)" in str(e.value)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = param(rand(rng, 3, 3))
        b = param(rand(rng, 3, 3))
        with Tape() as tape:
            loss = total(matmul(a, b))
            backward(loss, tape)
        fd_a, fd_b = fd_gradient(lambda: float((a.data @ b.data).sum()),
                                 [a.data, b.data])
        assert np.max(np.abs(a.grad - fd_a) / np.maximum(1.0, np.abs(fd_a))) < 1e-6
        assert np.max(np.abs(b.grad - fd_b) / np.maximum(1.0, np.abs(fd_b))) < 1e-6

    def test_vector_operand_shapes(self):
        rng = np.random.default_rng(1)
        m = const(rand(rng, 2, 3))
        v = const(rand(rng, 3))
        np.testing.assert_allclose(matmul(m, v).data, m.data @ v.data)
        w = const(rand(rng, 2))
        np.testing.assert_allclose(matmul(w, m).data, w.data @ m.data)


class TestElementwise:
    def test_tanh_of_zero(self):
        np.testing.assert_array_equal(ad.tanh(const(np.zeros(4))).data, np.zeros(4))

    def test_sigmoid_of_zero(self):
        np.testing.assert_array_equal(ad.sigmoid(const(np.zeros(3))).data,
                                      np.full(3, 0.5))

    def test_mul_hand(self):
        out = ad.mul(const([1.0, 2.0]), const([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [3.0, 8.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(const(np.zeros(2)), const(np.zeros(3)))
        with pytest.raises(ShapeError):
            ad.mul(const(np.zeros((2, 2))), const(np.zeros(4)))

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = param(rand(rng, 4) * 10)
            y = param(rand(rng, 4) * 10)
            out = ad.tanh(ad.add(ad.mul(x, y), ad.sigmoid(ad.sub(x, y))))
            assert np.isfinite(out.data).all()


class TestSoftmax:
    def test_uniform_for_constant_inputs(self):
        for c in (-3.0, 0.0, 7.5):
            out = softmax(const(np.full(4, c)))
            np.testing.assert_allclose(out.data, np.full(4, 0.25), atol=1e-15)

    def test_single_element(self):
        np.testing.assert_array_equal(softmax(const([2.3])).data, [1.0])

    def test_hand_evaluation(self):
        out = softmax(const([math.log(1.0), math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_empty_input(self):
        with pytest.raises(ShapeError):
            softmax(const(np.zeros(0)))

    def test_sum_and_positivity(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            out = softmax(const(rand(rng, int(rng.integers(1, 9))) * 5))
            assert np.all(out.data > 0.0) and np.all(out.data <= 1.0)
            assert abs(out.data.sum() - 1.0) < 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            x = rand(rng, 6)
            shift = float(rng.uniform(-50, 50))
            a = softmax(const(x)).data
            b = softmax(const(x + shift)).data
            assert np.max(np.abs(a - b)) < 1e-12


class TestConcat:
    def test_basic(self):
        np.testing.assert_array_equal(concat(const([1.0, 2.0]), const([3.0])).data,
                                      [1.0, 2.0, 3.0])

    def test_empty_left(self):
        np.testing.assert_array_equal(concat(const(np.zeros(0)), const([5.0])).data,
                                      [5.0])

    def test_backward_splits_ones(self):
        a, b = param([1.0, 2.0]), param([3.0])
        with Tape() as tape:
            loss = total(concat(a, b))
            backward(loss, tape)
        np.testing.assert_array_equal(a.grad, [1.0, 1.0])
        np.testing.assert_array_equal(b.grad, [1.0])


class TestBackward:
    def test_scalar_passthrough(self):
        x = param(np.float64(4.0))
        backward(x)
        assert float(x.grad) == 1.0

    def test_square_sum(self):
        x = param([1.0, 2.0])
        with Tape() as tape:
            loss = total(ad.mul(x, x))
            backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = param([1.0, 2.0])
        with pytest.raises(ShapeError):
            backward(x)

    def test_accumulation_across_shared_uses(self):
        x = param([1.0, 3.0])
        with Tape() as tape:
            loss = total(ad.add(x, x))
            backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_linearity_on_shared_parameters(self):
        rng = np.random.default_rng(5)
        x = param(rand(rng, 4))

        def f():
            return total(ad.tanh(x))

        def g():
            return total(ad.mul(x, x))

        x.zero_grad()
        with Tape() as t:
            backward(f(), t)
        gf = x.grad.copy()
        x.zero_grad()
        with Tape() as t:
            backward(g(), t)
        gg = x.grad.copy()
        x.zero_grad()
        with Tape() as t:
            backward(ad.add(f(), g()), t)
        np.testing.assert_allclose(x.grad, gf + gg, atol=1e-12)

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(6)
        x = param(rand(rng, 5))
        y = param(rand(rng, 5))
        with Tape() as tape:
            loss = total(ad.tanh(ad.mul(x, ad.sigmoid(y))))
            backward(loss, tape)
        first = (x.grad.copy(), y.grad.copy())
        tape.zero_grads()
        backward(loss, tape)
        assert np.array_equal(first[0], x.grad)
        assert np.array_equal(first[1], y.grad)


class TestPerOpGradients:
    """Every recorded op's backward matches central finite differences."""

    CASES = {
        "add": lambda a, b: ad.add(a, b),
        "sub": lambda a, b: ad.sub(a, b),
        "mul": lambda a, b: ad.mul(a, b),
        "tanh": lambda a, b: ad.tanh(ad.mul(a, b)),
        "sigmoid": lambda a, b: ad.sigmoid(ad.add(a, b)),
        "concat": lambda a, b: concat(a, b),
        "scale": lambda a, b: ad.scale(ad.mul(a, b), -1.7),
        "add_const": lambda a, b: ad.add_const(ad.mul(a, b), 0.4),
        "smul": lambda a, b: smul(dot(a, b), a),
        "dot_clamp_log": lambda a, b: log(clamp(ad.sigmoid(
            stack([dot(a, b)])), 1e-12, 1.0 - 1e-12)),
        "softmax_pick": lambda a, b: smul(pick(softmax(ad.add(a, b)), 1), a),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_op(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        a = param(rand(rng, 4))
        b = param(rand(rng, 4))
        op = self.CASES[name]

        def f():
            return total(op(a, b))

        assert grad_check(f, [a, b], h=1e-5) < 1e-6

    def test_row_gather(self):
        rng = np.random.default_rng(7)
        m = param(rand(rng, 5, 3))

        def f():
            return total(ad.tanh(ad.add(row(m, 1), row(m, 3))))

        assert grad_check(f, [m], h=1e-5) < 1e-6

    def test_cmul(self):
        rng = np.random.default_rng(8)
        v = param(rand(rng, 6))
        mask = (rng.random(6) > 0.3) / 0.7

        def f():
            return total(ad.cmul(ad.tanh(v), mask))

        assert grad_check(f, [v], h=1e-5) < 1e-6

    def test_matmul_all_shapes(self):
        rng = np.random.default_rng(9)
        m = param(rand(rng, 3, 4))
        n = param(rand(rng, 4, 2))
        v = param(rand(rng, 4))

        def f():
            a = total(matmul(m, n))
            b = total(matmul(m, v))
            c = total(matmul(v, n))
            return ad.add(ad.add(a, b), c)

        assert grad_check(f, [m, n, v], h=1e-5) < 1e-6


class TestGradCheck:
    def test_linear_is_exact(self):
        # At theta = 0 the perturbed points are exactly representable, so the
        # central difference of a linear map carries no rounding at all.
        theta = param(np.zeros(3))
        assert grad_check(lambda: total(theta), [theta]) == 0.0
        # Elsewhere the only error left is float rounding of theta +- h.
        theta = param([0.5, -1.25, 2.0])
        assert grad_check(lambda: total(theta), [theta]) < 1e-9

    def test_tanh_sum(self):
        theta = param([0.3, -0.7])
        assert grad_check(lambda: total(ad.tanh(theta)), [theta]) < 1e-7

    def test_agrees_with_independent_fd(self):
        rng = np.random.default_rng(10)
        theta = param(rand(rng, 3))

        def f():
            return total(ad.sigmoid(ad.mul(theta, theta)))

        rel = grad_check(f, [theta])
        fd = fd_gradient(
            lambda: float(np.sum(1 / (1 + np.exp(-(theta.data * theta.data))))),
            [theta.data])[0]
        theta.zero_grad()
        with Tape() as t:
            backward(f(), t)
        assert rel < 1e-6
        np.testing.assert_allclose(theta.grad, fd, atol=1e-6)

    def test_non_finite_rejected(self):
        theta = param([1.0])

        def f():
            return log(ad.scale(theta, -1.0))  # log of a negative number

        with pytest.raises(FloatingPointError):
            grad_check(f, [theta])


class TestTape:
    def test_no_recording_without_tape(self):
        x = param([1.0, 2.0])
        out = ad.tanh(x)
        assert out.requires_grad
        assert x.node_id is None  # nothing registered anywhere

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(RuntimeError):
                with Tape():
                    pass

    def test_entries_hold_node_ids(self):
        x = param([1.0])
        with Tape() as tape:
            y = ad.tanh(x)
            z = ad.scale(y, 2.0)
        assert len(tape.entries) == 2
        out_ids = [e[0] for e in tape.entries]
        assert out_ids == sorted(out_ids)
        assert tape.entries[1][1] == (y.node_id,)
        assert z.node_id == tape.entries[1][0]

    def test_variable_grad_shape_matches_data(self):
        v = Variable(np.zeros((2, 3)))
        assert v.grad.shape == v.data.shape
        assert not v.grad.any()
