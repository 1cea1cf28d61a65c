import numpy as np
import pytest

from silo_lab import tensor as T
from silo_lab.tensor import ShapeError, Tape, Tensor


def grad_of(fn, *values):
    with Tape() as tape:
        xs = [tape.watch(Tensor(v)) for v in values]
        root = fn(*xs)
    return root, tape.gradient(root, xs)


def central_fd(fn, values, h=1e-5):
    """Central differences of the scalar ``fn`` (on numpy inputs, no tape)."""
    out = []
    for i, v in enumerate(values):
        v = np.asarray(v, dtype=np.float64)
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            plus = [np.array(a, dtype=np.float64) for a in values]
            minus = [np.array(a, dtype=np.float64) for a in values]
            plus[i][idx] += h
            minus[i][idx] -= h
            with T.no_tape():
                g[idx] = (fn(*map(Tensor, plus)).item() - fn(*map(Tensor, minus)).item()) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def away_from(x, kinks, margin=1e-3):
    """Push entries at least ``margin`` away from non-differentiable points."""
    x = np.array(x)
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + margin * np.where(x[close] >= k, 2.0, -2.0)
    return x


# -- forward examples


def test_add_example():
    np.testing.assert_array_equal(T.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])


def test_matmul_identity():
    v = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(T.matmul(np.eye(3), v).data, v)


def test_l2norm_example():
    assert T.l2norm([3.0, 4.0]).item() == 5.0


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as err:
        T.add(np.ones(3), np.ones(4))
    msg = str(err.value)
    assert "add" in msg and "(3,)" in msg and "(4,)" in msg
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="mul"):
        T.mul(np.ones((2, 2)), np.ones(2))


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_tensor_copies_its_input():
    src = np.array([1.0, 2.0])
    t = Tensor(src)
    src[0] = 9.0
    assert t.data[0] == 1.0


# -- backward examples


def test_backward_sum_of_squares():
    _, (g,) = grad_of(lambda x: T.tsum(T.mul(x, x)), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_backward_constant_root_gives_zero():
    with Tape() as tape:
        x = tape.watch(Tensor([1.0, 2.0]))
        c = T.tsum(Tensor([5.0, 6.0]))
    (g,) = tape.gradient(c, [x])
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_backward_l2norm_example():
    _, (g,) = grad_of(T.l2norm, [3.0, 4.0])
    np.testing.assert_allclose(g, [0.6, 0.8], rtol=0, atol=1e-15)


def test_backward_non_scalar_root_rejected():
    with Tape() as tape:
        x = tape.watch(Tensor([1.0, 2.0]))
        y = T.scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.gradient(y, [x])


def test_root_gradient_is_one():
    with Tape() as tape:
        x = tape.watch(Tensor(3.0))
    (g,) = tape.gradient(x, [x])
    assert g == 1.0


def test_gradient_accumulates_over_reuse():
    # f = x*x + 3x -> 2x + 3
    _, (g,) = grad_of(lambda x: T.tsum(T.add(T.mul(x, x), T.scale(x, 3.0))), [1.0, -2.0])
    np.testing.assert_array_equal(g, [5.0, -1.0])


def test_nodes_in_topological_order():
    with Tape() as tape:
        x = tape.watch(Tensor(np.ones(3)))
        y = T.tanh(T.scale(x, 2.0))
        T.tsum(T.mul(y, x))
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if tape.is_tracked(inp) and id(inp) != id(x):
                assert id(inp) in seen
        seen.add(id(node.output))


def test_untracked_inputs_record_nothing():
    with Tape() as tape:
        T.add(Tensor([1.0]), Tensor([2.0]))
    assert tape.nodes == []


def test_no_tape_suspends_recording():
    with Tape() as tape:
        x = tape.watch(Tensor([1.0]))
        with T.no_tape():
            T.scale(x, 2.0)
        T.scale(x, 3.0)
    assert tape.ops() == ["scale"]


def test_graph_ops_only_reports_ancestors_of_root():
    with Tape() as tape:
        x = tape.watch(Tensor([1.0, 2.0]))
        T.tanh(x)  # not an ancestor
        root = T.tsum(T.relu(x))
    assert tape.graph_ops(root) == {"relu", "sum"}


def test_custom_op_vjp():
    with Tape() as tape:
        x = tape.watch(Tensor([1.0, 2.0]))
        y = T.custom_op("double", (x,), 2 * x.data, lambda g: (2 * g,))
        root = T.tsum(y)
    assert "double" in tape.ops()
    np.testing.assert_array_equal(tape.gradient(root, [x])[0], [2.0, 2.0])


# -- clamp tie-break and zero-norm convention


def test_clamp_gradient_inside_outside_and_boundary():
    _, (g,) = grad_of(lambda x: T.tsum(T.clamp(x, -1.0, 1.0)), [-2.0, -1.0, 0.0, 0.5, 1.0, 3.0])
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0, 1.0, 0.0, 0.0])


def test_l2norm_gradient_at_zero_is_zero():
    _, (g,) = grad_of(T.l2norm, [0.0, 0.0])
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_l2norm_rowwise():
    x = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]])
    np.testing.assert_array_equal(T.l2norm(x, axis=1).data, [5.0, 0.0, 1.0])
    _, (g,) = grad_of(lambda a: T.tsum(T.l2norm(a, axis=1)), x)
    np.testing.assert_allclose(g, [[0.6, 0.8], [0.0, 0.0], [1.0, 0.0]], atol=1e-15)


# -- finite-difference sweep over every differentiable op

OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 2), (3, 2)], []),
    "sub": (lambda a, b: T.sub(a, b), [(3, 2), (3, 2)], []),
    "neg": (lambda a: T.neg(a), [(4,)], []),
    "mul": (lambda a, b: T.mul(a, b), [(3, 2), (3, 2)], []),
    "scale": (lambda a: T.scale(a, -1.7), [(5,)], []),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)], []),
    "matvec": (lambda a, b: T.matmul(a, b), [(3, 4), (4,)], []),
    "vecmat": (lambda a, b: T.matmul(a, b), [(4,), (4, 2)], []),
    "dot": (lambda a, b: T.matmul(a, b), [(4,), (4,)], []),
    "add_bias": (lambda a, b: T.add_bias(a, b), [(3, 4), (4,)], []),
    "tanh": (lambda a: T.tanh(a), [(3, 3)], []),
    "relu": (lambda a: T.relu(a), [(3, 3)], [0.0]),
    "clamp": (lambda a: T.clamp(a, -0.5, 1.0), [(3, 3)], [-0.5, 1.0]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], []),
}

SCALAR_OPS = {
    "sum": (T.tsum, [(3, 2)], []),
    "mean": (T.mean, [(3, 2)], []),
    "l1": (T.l1, [(6,)], [0.0]),
    "l2norm": (T.l2norm, [(5,)], []),
    "sumsq": (T.sumsq, [(2, 3)], []),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_vector_op_matches_finite_differences(name):
    op, shapes, kinks = OPS[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        inputs = [away_from(rng.uniform(-2, 2, size=s), kinks) for s in shapes]
        out_shape = op(*map(Tensor, inputs)).shape
        c = Tensor(rng.uniform(-1, 1, size=out_shape))
        fn = lambda *xs: T.tsum(T.mul(op(*xs), c))
        _, grads = grad_of(fn, *inputs)
        fds = central_fd(fn, inputs)
        worst = max(worst, max(rel_err(g, f) for g, f in zip(grads, fds)))
    assert worst < 1e-5, f"{name}: worst relative error {worst:.2e}"


@pytest.mark.parametrize("name", sorted(SCALAR_OPS))
def test_scalar_op_matches_finite_differences(name):
    op, shapes, kinks = SCALAR_OPS[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        inputs = [away_from(rng.uniform(-2, 2, size=s), kinks) for s in shapes]
        _, grads = grad_of(op, *inputs)
        fds = central_fd(op, inputs)
        worst = max(worst, max(rel_err(g, f) for g, f in zip(grads, fds)))
    assert worst < 1e-5, f"{name}: worst relative error {worst:.2e}"


def test_composite_mlp_like_expression():
    rng = np.random.default_rng(3)
    x, w, b = rng.uniform(-2, 2, (4, 3)), rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, 5)

    def fn(x, w, b):
        return T.l2norm(T.tanh(T.add_bias(T.matmul(x, w), b)))

    _, grads = grad_of(fn, x, w, b)
    for g, f in zip(grads, central_fd(fn, [x, w, b])):
        assert rel_err(g, f) < 1e-7
