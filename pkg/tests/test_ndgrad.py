import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hypelora import ndgrad as nd
from hypelora.ndgrad import Graph, NumericError, Tensor
from oracles import central_difference, naive_matmul, relative_error

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nd.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_row_by_column():
    # naive triple loop gives 1*3 + 2*4
    out = nd.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == naive_matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]


@pytest.mark.parametrize("m,k,n", [(5, 7, 3), (16, 16, 16), (1, 9, 4), (12, 3, 16)])
def test_matmul_matches_triple_loop(rng, m, k, n):
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(nd.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(nd.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(nd.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite), finite)
def test_softmax_rows_and_shift_invariance(x, c):
    s = nd.softmax(Tensor(x), axis=-1).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nd.softmax(Tensor(x + c)).data, s, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        nd.softmax(Tensor([0.0, np.nan]))
    with pytest.raises(NumericError):
        nd.softmax(Tensor([0.0, np.inf]))


def test_gelu_values():
    assert nd.gelu(Tensor(0.0)).data == 0.0
    assert abs(nd.gelu(Tensor(10.0)).data - 10.0) < 1e-6
    # 1 * Phi(1) with Phi(1) = 0.841344746068543 (mpmath, 30 digits)
    assert abs(nd.gelu(Tensor(1.0)).data - 0.841345) < 1e-5
    assert abs(nd.gelu(Tensor(1.0)).data - 0.841344746068543) < 1e-14


def test_layer_norm_constant_row_is_zero():
    ones, zeros = Tensor(np.ones(6)), Tensor(np.zeros(6))
    out = nd.layer_norm(Tensor(np.full((1, 6), 3.7)), ones, zeros)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)
    exact = nd.layer_norm(Tensor(np.full((2, 6), -1.5)), ones, zeros)
    np.testing.assert_array_equal(exact.data, np.zeros((2, 6)))


def test_layer_norm_matches_two_pass_formula(rng):
    x = rng.normal(2.0, 3.0, size=(4, 10))
    g, b = rng.normal(size=10), rng.normal(size=10)
    out = nd.layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-5).data
    for i in range(4):
        row = x[i]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        ref = [(v - mu) / math.sqrt(var + 1e-5) * gi + bi for v, gi, bi in zip(row, g, b)]
        np.testing.assert_allclose(out[i], ref, atol=1e-10)
    unit = nd.layer_norm(Tensor(x), Tensor(np.ones(10)), Tensor(b)).data
    np.testing.assert_allclose(unit.mean(axis=1), b.mean(), atol=1e-12)


def test_cross_entropy_examples():
    labels = [0, 3, 1]
    assert abs(nd.cross_entropy(Tensor(np.zeros((3, 4))), labels).data - math.log(4)) < 1e-15
    # log(1 + e), from mpmath: 1.3132616875182228
    assert abs(nd.cross_entropy(Tensor([[1.0, 2.0]]), [0]).data - 1.3132616875182228) < 1e-12
    big = np.zeros((2, 3))
    big[0, 1] = big[1, 2] = 800.0
    assert nd.cross_entropy(Tensor(big), [1, 2]).data < 1e-300


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        nd.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_backward_linear_and_square():
    x = Tensor(np.arange(5.0), requires_grad=True)
    nd.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(5))
    y = Tensor(3.0, requires_grad=True)
    nd.mul(y, y).backward()
    assert y.grad == 6.0


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        nd.scale(x, 2.0).backward()


def test_frozen_leaf_gets_no_grad():
    w = Tensor(np.ones((2, 2)))
    x = Tensor(np.ones((1, 2)), requires_grad=True)
    nd.sum(nd.matmul(x, w)).backward()
    assert w.grad is None
    assert x.grad is not None


def test_gradients_accumulate_until_cleared():
    x = Tensor(2.0, requires_grad=True)
    nd.mul(x, x).backward()
    nd.mul(x, x).backward()
    assert x.grad == 8.0
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with nd.no_grad():
        y = nd.scale(x, 2.0)
    assert not y.requires_grad and y.is_leaf


def test_graph_is_topological_with_unique_ids():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = nd.matmul(a, a)
    c = nd.add(b, a)
    loss = nd.sum(nd.gelu(c))
    g = Graph.trace(loss)
    pos = {n.node_id: i for i, n in enumerate(g.nodes)}
    assert len(pos) == len(g.nodes)
    for op, inputs, out in g.records():
        assert all(pos[i] < pos[out] for i in inputs)
    assert g.nodes[-1] is loss


# -- finite differences for every differentiable op --------------------

def _scalarise(out: Tensor, weights: np.ndarray) -> Tensor:
    return nd.sum(nd.mul(out, Tensor(weights)))


OPS = {
    "add": (lambda a, b: nd.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: nd.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: nd.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: nd.scale(a, -1.7), [(2, 5)]),
    "neg": (lambda a: nd.neg(a), [(4,)]),
    "exp": (lambda a: nd.exp(a), [(3, 3)]),
    # shifted square keeps log's argument positive
    "log": (lambda a: nd.log(nd.add(nd.mul(a, a), Tensor(0.5))), [(3, 3)]),
    "matmul": (lambda a, b: nd.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: nd.matmul(a, b), [(2, 3, 4, 5), (2, 3, 5, 2)]),
    "broadcast_matmul": (lambda a, b: nd.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "transpose": (lambda a: nd.transpose(a, (1, 2, 0)), [(2, 3, 4)]),
    "swapaxes": (lambda a: nd.swapaxes(a, -1, -2), [(2, 3, 4)]),
    "reshape": (lambda a: nd.reshape(a, (6, 2)), [(3, 4)]),
    "sum_axis": (lambda a: nd.sum(a, axis=1), [(3, 4)]),
    "mean": (lambda a: nd.mean(a, axis=0, keepdims=True), [(3, 4)]),
    "getitem": (lambda a: nd.getitem(a, (slice(None), 1)), [(3, 4, 2)]),
    "softmax": (lambda a: nd.softmax(a, axis=-1), [(3, 5)]),
    "log_softmax": (lambda a: nd.log_softmax(a, axis=-1), [(3, 5)]),
    "gelu": (lambda a: nd.gelu(a), [(4, 3)]),
    "layer_norm": (lambda x, g, b: nd.layer_norm(x, g, b), [(2, 3, 6), (6,), (6,)]),
    "embedding": (lambda t: nd.embedding(t, np.array([[0, 2, 2], [4, 1, 0]])), [(5, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    op, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(10):
        xs = [rng.normal(size=s) for s in shapes]
        w = rng.normal(size=op(*[Tensor(x) for x in xs]).shape)
        tensors = [Tensor(x, requires_grad=True) for x in xs]
        _scalarise(op(*tensors), w).backward()

        def f(*arrs):
            return float(_scalarise(op(*[Tensor(a) for a in arrs]), w).data)

        for i, t in enumerate(tensors):
            numeric = central_difference(f, xs, i)
            assert relative_error(t.grad, numeric) < 1e-4, (name, i)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(7)
    for _ in range(10):
        x = rng.normal(size=(4, 3))
        labels = rng.integers(0, 3, size=4)
        t = Tensor(x, requires_grad=True)
        nd.cross_entropy(t, labels).backward()
        numeric = central_difference(lambda a: float(nd.cross_entropy(Tensor(a), labels).data), [x], 0)
        assert relative_error(t.grad, numeric) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_matmul_property(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(m, k)), r.normal(size=(k, n))
    np.testing.assert_allclose(nd.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)
