import numpy as np
import pytest

from lord import autograd as ag
from lord.autograd import AdamState, Graph, Tensor, adam_step, backward, zero_grad
from lord.errors import ShapeError, ValidationError

from helpers import check_gradients

rng = np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ag.matmul(a, Tensor(np.eye(2)))
        assert np.array_equal(out.data, a.data)

    def test_zero_annihilator(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ag.matmul(a, Tensor(np.zeros((2, 2))))
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_against_triple_loop(self):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        out = ag.matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - ref).max() < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_merge_associativity(self):
        # (W + s B A) x == W x + s (B (A x)), the algebraic backbone of
        # adapter merging
        w = rng.standard_normal((6, 5))
        b = rng.standard_normal((6, 2))
        a = rng.standard_normal((2, 5))
        x = rng.standard_normal((5, 1))
        s = 8.0
        merged = (w + s * b @ a) @ x
        split = w @ x + s * (b @ (a @ x))
        assert np.abs(merged - split).max() < 1e-9


class TestElementwise:
    def test_add_zero(self):
        x = Tensor(rng.standard_normal(5))
        assert np.array_equal(ag.add(x, 0.0).data, x.data)

    def test_scale_alpha_over_r(self):
        # alpha/r = 32/4 = 8
        out = ag.scale(Tensor([1.0, -1.0]), 8.0)
        assert np.array_equal(out.data, [8.0, -8.0])

    def test_mul_backward_product_rule(self):
        a = Tensor(np.array(2.0), requires_grad=True)
        b = Tensor(np.array(3.0))
        graph = Graph()
        with graph:
            out = ag.mul(a, b)
        backward(out, graph)
        assert a.grad == pytest.approx(3.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ag.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_dispatcher(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        assert np.array_equal(ag.elementwise("add", a, b).data, [4.0, 7.0])
        assert np.array_equal(ag.elementwise("sub", a, b).data, [-2.0, -3.0])
        assert np.array_equal(ag.elementwise("mul", a, b).data, [3.0, 10.0])
        assert np.array_equal(ag.elementwise("scale", a, 2.0).data, [2.0, 4.0])
        with pytest.raises(ValidationError):
            ag.elementwise("div", a, b)


class TestSigmoid:
    def test_at_zero(self):
        assert ag.sigmoid(Tensor(np.array(0.0))).data == pytest.approx(0.5)

    def test_strictly_inside_unit_interval(self):
        x = Tensor(np.array([-1e6, -50.0, 0.0, 50.0, 1e6]))
        out = ag.sigmoid(x).data
        assert (out > 0.0).all() and (out < 1.0).all()

    def test_gradient_at_zero(self):
        x = Tensor(np.array(0.0), requires_grad=True)
        graph = Graph()
        with graph:
            out = ag.sigmoid(x)
        backward(out, graph)
        assert x.grad == pytest.approx(0.25)


class TestLosses:
    def test_mse_zero_iff_equal(self):
        x = rng.standard_normal((3, 4))
        assert ag.mse_loss(Tensor(x), Tensor(x.copy())).data == 0.0

    def test_mse_mean(self):
        out = ag.mse_loss(Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
        assert out.data == pytest.approx(1.0)

    def test_mse_nonnegative(self):
        for _ in range(10):
            a, b = rng.standard_normal(6), rng.standard_normal(6)
            assert ag.mse_loss(Tensor(a), Tensor(b)).data >= 0.0

    def test_mse_gradient_matches_finite_differences(self):
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((3, 2))
        check_gradients(lambda x, y: ag.mse_loss(x, y), [a, b], rtol=1e-6)

    def test_bce_half(self):
        out = ag.bce_loss(Tensor(np.array(0.5)), 1.0)
        assert out.data == pytest.approx(np.log(2.0))

    def test_bce_confident_correct(self):
        out = ag.bce_loss(Tensor(np.array(1.0 - 1e-7)), 1.0)
        assert out.data == pytest.approx(1e-7, rel=1e-3)

    def test_bce_wrong_prediction(self):
        out = ag.bce_loss(Tensor(np.array(0.9)), 0.0)
        assert out.data == pytest.approx(-np.log(0.1))

    def test_bce_label_validation(self):
        with pytest.raises(ValidationError):
            ag.bce_loss(Tensor(np.array(0.5)), 0.5)

    def test_bce_nonnegative(self):
        for p in (1e-9, 0.3, 0.999, 1.0 - 1e-12):
            for label in (0.0, 1.0):
                assert ag.bce_loss(Tensor(np.array(p)), label).data >= 0.0


class TestBackward:
    def test_square(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        graph = Graph()
        with graph:
            y = ag.mul(x, x)
        backward(y, graph)
        assert x.grad == pytest.approx(6.0)

    def test_chain_rule_sigmoid(self):
        x = Tensor(np.array(0.0), requires_grad=True)
        graph = Graph()
        with graph:
            y = ag.sigmoid(ag.scale(x, 2.0))
        backward(y, graph)
        assert x.grad == pytest.approx(0.5)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        graph = Graph()
        with graph:
            y = ag.add(x, 1.0)
        with pytest.raises(ValidationError):
            backward(y, graph)

    def test_accumulation_until_zeroed(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        graph = Graph()
        with graph:
            y = ag.mul(x, x)
        backward(y, graph)
        backward(y, graph)
        assert x.grad == pytest.approx(12.0)
        zero_grad([x])
        assert x.grad is None

    def test_leaf_loss(self):
        x = Tensor(np.array(5.0), requires_grad=True)
        backward(x, Graph())
        assert x.grad == pytest.approx(1.0)

    def test_determinism_bit_identical(self):
        def run():
            r = np.random.default_rng(7)
            a = Tensor(r.standard_normal((4, 4)), requires_grad=True)
            b = Tensor(r.standard_normal((4, 4)), requires_grad=True)
            graph = Graph()
            with graph:
                out = ag.mse_loss(ag.relu(ag.matmul(a, b)), Tensor(np.zeros((4, 4))))
            backward(out, graph)
            return a.grad.tobytes(), b.grad.tobytes()

        assert run() == run()

    def test_topological_order_invariant(self):
        a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        graph = Graph()
        with graph:
            b = ag.relu(a)
            c = ag.matmul(b, b)
            ag.mse_loss(c, Tensor(np.zeros((2, 2))))
        seen = {id(a)}
        for node in graph.nodes:
            for inp in node.inputs:
                assert id(inp) in seen or not inp._from_op
            seen.add(id(node.output))

    def test_no_nested_graphs(self):
        with Graph():
            with pytest.raises(ValidationError):
                Graph().__enter__()


OPS = {
    "add": (lambda a, b: ag.add(a, b), 2, (3, 4)),
    "sub": (lambda a, b: ag.sub(a, b), 2, (3, 4)),
    "mul": (lambda a, b: ag.mul(a, b), 2, (3, 4)),
    "scale": (lambda a: ag.scale(a, -1.7), 1, (3, 4)),
    "matmul": (lambda a, b: ag.matmul(a, b), "matmul", None),
    "transpose": (lambda a: ag.transpose(a), 1, (3, 4)),
    "sigmoid": (lambda a: ag.sigmoid(a), 1, (3, 4)),
    "relu": (lambda a: ag.relu(a), 1, (3, 4)),
    "add_bias": (lambda a, b: ag.add_bias(a, b), "bias", None),
    "concat_cols": (lambda a, b: ag.concat_cols([a, b]), 2, (3, 4)),
    "stack_rows": (lambda a, b: ag.stack_rows([a, b]), 2, (3, 4)),
    "slice_rows": (lambda a: ag.slice_rows(a, 1, 3), 1, (4, 3)),
    "take_row": (lambda a: ag.take_row(a, 2), 1, (4, 3)),
    "repeat_rows": (lambda a: ag.repeat_rows(a, 5), 1, (1, 4)),
    "row_scale": (lambda a: ag.row_scale(a, np.array([0.5, -1.0, 2.0])), 1, (3, 4)),
    "col_scale": (lambda a, s: ag.col_scale(a, s), "gate", None),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_oracle_per_op(name):
    """Central finite differences against every differentiable op."""
    op, arity, shape = OPS[name]
    r = np.random.default_rng(hash(name) % 2**32)
    if arity == "matmul":
        arrays = [r.standard_normal((3, 4)), r.standard_normal((4, 2))]
    elif arity == "bias":
        arrays = [r.standard_normal((3, 4)), r.standard_normal(4)]
    elif arity == "gate":
        arrays = [r.standard_normal((3, 4)), r.uniform(0.1, 0.9, (3, 1))]
    else:
        arrays = [r.standard_normal(shape) for _ in range(arity)]

    def build(*tensors):
        out = op(*tensors)
        return ag.mse_loss(out, Tensor(np.zeros(out.shape)))

    check_gradients(build, arrays, rtol=1e-5)


@pytest.mark.parametrize("seed", [11, 22, 33, 44, 55])
def test_gradient_oracle_composite_graphs(seed):
    """Random deep compositions (depth >= 4) against finite differences."""
    r = np.random.default_rng(seed)
    w1 = r.standard_normal((5, 4)) * 0.7
    w2 = r.standard_normal((5, 5)) * 0.7
    b2 = r.standard_normal(5) * 0.3
    gate = r.uniform(0.2, 0.8, (3, 1))
    x = r.standard_normal((3, 4))
    target = r.standard_normal((3, 5))

    def build(tw1, tw2, tb2, tgate, tx):
        h1 = ag.sigmoid(ag.matmul(tx, ag.transpose(tw1)))
        h2 = ag.relu(ag.add_bias(ag.matmul(h1, ag.transpose(tw2)), tb2))
        h3 = ag.col_scale(h2, ag.sigmoid(tgate))
        h4 = ag.add(h3, ag.scale(h1, 0.5))
        return ag.mse_loss(h4, Tensor(target))

    check_gradients(build, [w1, w2, b2, gate, x], rtol=1e-5)


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        state = AdamState([p], lr=0.1)
        p.grad = np.zeros(2)
        adam_step([p], state)
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_first_step_magnitude(self):
        # bias-corrected first step with g=1 moves by ~lr
        p = Tensor(np.array(0.0), requires_grad=True)
        state = AdamState([p], lr=0.1)
        p.grad = np.array(1.0)
        adam_step([p], state)
        assert p.data == pytest.approx(-0.1, rel=1e-6)

    def test_converges_on_quadratic(self):
        # (x - 2)^2 from x = 0
        p = Tensor(np.array(0.0), requires_grad=True)
        state = AdamState([p], lr=0.2)
        for _ in range(50):
            p.grad = 2.0 * (p.data - 2.0)
            adam_step([p], state)
        assert abs(float(p.data) - 2.0) < 0.1

    def test_missing_grad_rejected(self):
        p = Tensor(np.array(0.0), requires_grad=True)
        state = AdamState([p], lr=0.1)
        with pytest.raises(ValidationError):
            adam_step([p], state)

    def test_step_counter_increments(self):
        p = Tensor(np.array(0.0), requires_grad=True)
        state = AdamState([p], lr=0.1)
        for k in range(1, 4):
            p.grad = np.array(1.0)
            adam_step([p], state)
            assert state.step == k

    def test_param_list_mismatch(self):
        p, q = Tensor(np.array(0.0), requires_grad=True), Tensor(np.array(0.0), requires_grad=True)
        state = AdamState([p], lr=0.1)
        q.grad = np.array(1.0)
        with pytest.raises(ValidationError):
            adam_step([q], state)


class TestTensorInvariants:
    def test_grad_shape_matches(self):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        graph = Graph()
        with graph:
            loss = ag.mse_loss(x, Tensor(np.zeros((3, 4))))
        backward(loss, graph)
        assert x.grad.shape == x.data.shape

    def test_debug_nan_check(self):
        with pytest.raises(ArithmeticError):
            ag.mul(Tensor(np.array([np.inf])), 0.0)

    def test_frozen_params_skip_grads(self):
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        graph = Graph()
        with graph, ag.no_grad_params([w]):
            loss = ag.mse_loss(ag.matmul(x, w), Tensor(np.zeros((2, 3))))
        backward(loss, graph)
        assert w.grad is None and x.grad is not None
        assert w.requires_grad  # restored on exit
