import numpy as np
import pytest

from conftest import finite_difference_grad
from confrank.autodiff import (Adam, EmbeddingTable, Node, Parameter,
                               ShapeMismatchError, EmbeddingIndexError, Tape)


def make_param(name, arr):
    return Parameter(name, np.asarray(arr, dtype=np.float64))


class TestDense:
    def test_identity_weights(self):
        tape = Tape()
        w = make_param("w", np.eye(2))
        b = make_param("b", [0.0, 0.0])
        out = tape.dense(Node([[1.0, 2.0]]), w, b)
        assert np.array_equal(out.data, [[1.0, 2.0]])

    def test_zero_weights_pass_bias(self):
        tape = Tape()
        w = make_param("w", np.zeros((2, 3)))
        b = make_param("b", [1.0, 2.0, 3.0])
        out = tape.dense(Node([[5.0, 7.0]]), w, b)
        assert np.array_equal(out.data, [[1.0, 2.0, 3.0]])

    def test_shape_mismatch_names_shapes(self):
        tape = Tape()
        w = make_param("w", np.zeros((3, 2)))
        b = make_param("b", np.zeros(2))
        with pytest.raises(ShapeMismatchError, match=r"\(1, 2\).*\(3, 2\)"):
            tape.dense(Node([[1.0, 2.0]]), w, b)

    def test_weight_gradient_matches_finite_differences(self):
        x = np.array([[1.0, 2.0]])
        w0 = np.array([[0.3, -0.2], [0.1, 0.4]])
        b = make_param("b", np.zeros(2))

        def loss_at(wv):
            tape = Tape()
            out = tape.dense(Node(x), make_param("w", wv), b)
            return float(tape.sum(out).data)

        tape = Tape()
        w = make_param("w", w0)
        loss = tape.sum(tape.dense(Node(x), w, b))
        tape.backward(loss)
        fd = finite_difference_grad(loss_at, w0.copy())
        assert np.allclose(w.grad, fd, atol=1e-6)


class TestActivations:
    def test_sigmoid_at_zero(self):
        tape = Tape()
        assert tape.sigmoid(Node([0.0])).data[0] == 0.5

    def test_relu(self):
        tape = Tape()
        assert np.array_equal(tape.relu(Node([-1.0, 0.0, 3.0])).data, [0.0, 0.0, 3.0])

    def test_sigmoid_gradient_at_zero(self):
        tape = Tape()
        p = make_param("x", [0.0])
        loss = tape.sum(tape.sigmoid(tape.leaf(p)))
        tape.backward(loss)
        assert abs(p.grad[0] - 0.25) < 1e-12

        def f(x):
            t = Tape()
            return float(t.sum(t.sigmoid(Node(x))).data)

        fd = finite_difference_grad(f, np.array([0.0]))
        assert abs(p.grad[0] - fd[0]) < 1e-8


class TestResidualBlock:
    @staticmethod
    def residual(tape, x, w1, b1, w2, b2):
        inner = tape.dense(tape.relu(tape.dense(x, w1, b1)), w2, b2)
        return tape.add(x, inner)

    def test_zero_block_is_identity(self):
        tape = Tape()
        zeros = lambda n, s: make_param(n, np.zeros(s))
        x = Node([[1.0, -2.0], [0.5, 3.0]])
        out = self.residual(tape, x, zeros("w1", (2, 2)), zeros("b1", 2),
                            zeros("w2", (2, 2)), zeros("b2", 2))
        assert np.array_equal(out.data, x.data)

    def test_scalar_case(self):
        tape = Tape()
        out = self.residual(tape, Node([[1.0]]),
                            make_param("w1", [[1.0]]), make_param("b1", [0.0]),
                            make_param("w2", [[2.0]]), make_param("b2", [0.0]))
        assert out.data[0, 0] == 3.0  # 1 + 2*relu(1)

    def test_input_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        w1v, b1v = rng.normal(size=(3, 3)), rng.normal(size=3)
        w2v, b2v = rng.normal(size=(3, 3)), rng.normal(size=3)
        x0 = rng.normal(size=(1, 3)) + 0.3  # keep away from relu kinks

        def f(xv):
            t = Tape()
            out = self.residual(t, Node(xv), make_param("w1", w1v),
                                make_param("b1", b1v), make_param("w2", w2v),
                                make_param("b2", b2v))
            return float(t.sum(out).data)

        tape = Tape()
        xp = make_param("x", x0)
        out = self.residual(tape, tape.leaf(xp), make_param("w1", w1v),
                            make_param("b1", b1v), make_param("w2", w2v),
                            make_param("b2", b2v))
        tape.backward(tape.sum(out))
        fd = finite_difference_grad(f, x0.copy())
        assert np.allclose(xp.grad, fd, rtol=1e-5, atol=1e-8)


class TestStopGradient:
    def test_forward_identity(self):
        tape = Tape()
        out = tape.stop_gradient(Node([1.0, 2.0, 3.0]))
        assert np.array_equal(out.data, [1.0, 2.0, 3.0])

    def test_barrier_blocks_all_gradient(self):
        tape = Tape()
        p = make_param("x", [1.0, 2.0])
        loss = tape.sum(tape.stop_gradient(tape.leaf(p)))
        tape.backward(loss)
        assert np.array_equal(p.grad, [0.0, 0.0])

    def test_x_times_stopped_x(self):
        # d/dx sum(x * sg(x)) = sg(x) = x, not 2x
        tape = Tape()
        p = make_param("x", [2.0])
        x = tape.leaf(p)
        loss = tape.sum(tape.mul(x, tape.stop_gradient(x)))
        tape.backward(loss)
        assert np.array_equal(p.grad, [2.0])


class TestEmbedding:
    def table(self, rows):
        t = EmbeddingTable("e", len(rows), len(rows[0]), np.random.default_rng(0))
        t.rows.value = np.asarray(rows, dtype=np.float64)
        return t

    def test_lookup(self):
        tape = Tape()
        out = tape.embedding(self.table([[1.0, 1.0], [2.0, 2.0]]), [1])
        assert np.array_equal(out.data, [[2.0, 2.0]])

    def test_duplicate_indices_accumulate(self):
        tape = Tape()
        table = self.table([[1.0, 1.0], [2.0, 2.0]])
        out = tape.embedding(table, [0, 0])
        tape.backward(tape.sum(out))
        assert np.array_equal(table.rows.grad[0], [2.0, 2.0])

    def test_untouched_row_gradient_is_zero(self):
        tape = Tape()
        table = self.table([[1.0, 1.0], [2.0, 2.0]])
        tape.backward(tape.sum(tape.embedding(table, [0])))
        assert np.array_equal(table.rows.grad[1], [0.0, 0.0])

    def test_out_of_range_reports_value(self):
        tape = Tape()
        with pytest.raises(EmbeddingIndexError, match="5"):
            tape.embedding(self.table([[1.0], [2.0]]), [0, 5])


class TestBackward:
    def test_constant_loss_gives_zero_gradients(self):
        tape = Tape()
        p = make_param("w", [1.0])
        tape.leaf(p)  # recorded but unused by the loss
        tape.backward(tape.constant(3.0))
        assert np.array_equal(p.grad, [0.0])

    def test_bce_gradient_analytic(self):
        # loss = BCE(sigmoid(w*x), y=1) at w=0, x=1 -> dL/dw = p - y = -0.5
        tape = Tape()
        w = make_param("w", [0.0])
        p = tape.sigmoid(tape.mul(tape.leaf(w), tape.constant([1.0])))
        loss = tape.scale(tape.sum(tape.log(p)), -1.0)
        tape.backward(loss)
        assert abs(w.grad[0] - (-0.5)) < 1e-12

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(Node([1.0, 2.0]))


class TestAdam:
    def test_zero_gradient_leaves_parameter(self):
        p = make_param("w", [1.0])
        opt = Adam([p], lr=0.1)
        opt.step()
        assert p.value[0] == 1.0

    def test_first_step_magnitude(self):
        # bias-corrected first step with g=1 moves by ~lr
        p = make_param("w", [0.0])
        p.grad = np.array([1.0])
        opt = Adam([p], lr=0.1)
        opt.step()
        assert abs(p.value[0] + 0.1) < 1e-8

    def test_determinism(self):
        def run():
            p = make_param("w", [0.3])
            opt = Adam([p], lr=0.01)
            for _ in range(5):
                p.grad = np.array([0.7])
                opt.step()
            return p.value[0]

        assert run() == run()

    def test_state_roundtrip_bit_exact(self):
        p = make_param("w", [0.3])
        opt = Adam([p], lr=0.01)
        p.grad = np.array([1.0])
        opt.step()
        saved = opt.state_dict()

        q = make_param("w", p.value.copy())
        opt2 = Adam([q], lr=0.01)
        opt2.load_state_dict(saved)
        p.grad = np.array([0.5])
        q.grad = np.array([0.5])
        opt.step()
        opt2.step()
        assert p.value[0] == q.value[0]


def test_softmax_gradient_matches_finite_differences():
    z0 = np.array([[0.3, -0.7]])

    def f(z):
        t = Tape()
        return float(t.sum(t.slice_cols(t.softmax(Node(z)), 0, 1)).data)

    tape = Tape()
    p = make_param("z", z0)
    loss = tape.sum(tape.slice_cols(tape.softmax(tape.leaf(p)), 0, 1))
    tape.backward(loss)
    fd = finite_difference_grad(f, z0.copy())
    assert np.allclose(p.grad, fd, atol=1e-8)


def test_dispose_clears_record_and_breaks_tape_cycle():
    # [TRIVIAL] after dispose the tape records nothing and is freed by
    # refcounting alone (no cycle left for the garbage collector)
    import gc
    import weakref

    tape = Tape()
    p = make_param("w", np.array([[1.0, 2.0]]))
    out = tape.relu(tape.leaf(p))
    assert np.array_equal(out.data, [[1.0, 2.0]])
    tape.dispose()
    assert tape._ops == []
    ref = weakref.ref(tape)
    gc.disable()
    try:
        del tape
        assert ref() is None
    finally:
        gc.enable()
