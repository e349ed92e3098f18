import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfarec import numerics as nx


def fd_grad(f, x, h=1e-5):
    """Central differences of a scalar numpy function."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


class TestMatmul:
    def test_identity(self):
        M = np.arange(6.0).reshape(2, 3)
        out = nx.matmul(nx.tensor(np.eye(2)), nx.tensor(M))
        assert np.array_equal(out.values, M)

    def test_hand_product(self):
        out = nx.matmul(nx.tensor([[1.0, 2.0], [3.0, 4.0]]), nx.tensor([[0.0], [1.0]]))
        assert np.array_equal(out.values, [[2.0], [4.0]])

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 2))
        a, b = nx.tensor(a0.copy(), True), nx.tensor(b0.copy(), True)
        nx.sum(nx.mul(nx.matmul(a, b), nx.constant(w))).backward()
        ga = fd_grad(lambda x: np.sum((x @ b0) * w), a0.copy())
        gb = fd_grad(lambda x: np.sum((a0 @ x) * w), b0.copy())
        assert rel_err(a.grad, ga) < 1e-6
        assert rel_err(b.grad, gb) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 3))))

    def test_batched_shared_right_operand(self):
        rng = np.random.default_rng(0)
        a = nx.tensor(rng.normal(size=(2, 3, 4)), True)
        b = nx.tensor(rng.normal(size=(4, 5)), True)
        rep = nx.grad_check(lambda a, b: nx.sum(nx.tanh(nx.matmul(a, b))), [a, b])
        assert rep.passed, rep


class TestSoftplusBeta:
    def test_zero(self):
        assert nx.softplus_beta(nx.tensor([0.0]), 1.0).values[0] == pytest.approx(np.log(2), abs=1e-12)

    def test_asymptote(self):
        assert abs(nx.softplus_beta(nx.tensor([100.0]), 1.0).values[0] - 100.0) < 1e-9

    def test_direct_formula_and_sigmoid_gradient(self):
        x = nx.tensor([-1.5], True)
        out = nx.softplus_beta(x, 0.7)
        assert out.values[0] == pytest.approx(0.7 * np.log1p(np.exp(-1.5 / 0.7)), rel=1e-14)
        nx.sum(out).backward()
        assert x.grad[0] == pytest.approx(1.0 / (1.0 + np.exp(1.5 / 0.7)), rel=1e-12)
        fd = fd_grad(lambda v: 0.7 * np.log1p(np.exp(v[0] / 0.7)), np.array([-1.5]))
        assert rel_err(x.grad, fd) < 1e-8

    def test_beta_gradient(self):
        rng = np.random.default_rng(1)
        x = nx.tensor(rng.normal(size=(3, 2)) * 5, True)
        beta = nx.tensor(rng.uniform(0.3, 2.0, size=(3, 2)), True)
        rep = nx.grad_check(lambda x, b: nx.sum(nx.softplus_beta(x, b)), [x, beta])
        assert rep.passed, rep

    @pytest.mark.parametrize("beta", [0.0, -1.0])
    def test_beta_domain(self, beta):
        with pytest.raises(nx.ParameterDomainError):
            nx.softplus_beta(nx.tensor([1.0]), beta)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e3))
    def test_strictly_positive(self, x, beta):
        assert nx.softplus_beta(nx.tensor([x]), beta).values[0] > 0


class TestMaskedSoftmax:
    def test_uniform(self):
        p = nx.masked_softmax(nx.tensor(np.zeros((3, 3))), np.ones((3, 3), bool))
        assert np.allclose(p.values, 1 / 3, atol=1e-15)

    def test_first_row_causal(self):
        rng = np.random.default_rng(0)
        p = nx.masked_softmax(nx.tensor(rng.normal(size=(3, 3)) * 10), np.tril(np.ones((3, 3), bool)))
        assert np.array_equal(p.values[0], [1.0, 0.0, 0.0])

    def test_matches_large_negative_substitution(self):
        rng = np.random.default_rng(7)
        s = rng.normal(size=(4, 4))
        mask = np.tril(np.ones((4, 4), bool))
        sub = np.where(mask, s, -1e30)
        e = np.exp(sub - sub.max(axis=1, keepdims=True))
        oracle = e / e.sum(axis=1, keepdims=True)
        p = nx.masked_softmax(nx.tensor(s), mask).values
        assert np.allclose(p, oracle, atol=1e-15)
        assert np.all(p[~mask] == 0.0)

    def test_degenerate_row(self):
        mask = np.ones((2, 2), bool)
        mask[1] = False
        with pytest.raises(nx.DegenerateRowError):
            nx.masked_softmax(nx.tensor(np.zeros((2, 2))), mask)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, n, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((n, n)) < 0.6
        mask[np.arange(n), rng.integers(0, n, n)] = True
        p = nx.masked_softmax(nx.tensor(rng.normal(size=(n, n)) * 20), mask).values
        assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
        assert np.all(p[~mask] == 0.0)


class TestElementwise:
    def test_closed_forms(self):
        assert nx.tanh(nx.tensor([0.0])).values[0] == 0.0
        assert nx.sigmoid(nx.tensor([0.0])).values[0] == 0.5

    def test_l2_normalize_zero_row(self):
        out = nx.l2_normalize(nx.tensor(np.zeros((2, 3)))).values
        assert np.array_equal(out, np.zeros((2, 3)))

    def test_elu_gradient(self):
        x = nx.tensor([-0.3], True)
        nx.sum(nx.elu(x)).backward()
        fd = fd_grad(lambda v: np.expm1(v[0]), np.array([-0.3]))
        assert rel_err(x.grad, fd) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(nx.DimensionError):
            nx.add(nx.tensor(np.ones(3)), nx.tensor(np.ones(4)))

    def test_log_rejects_nonpositive(self):
        with pytest.raises(nx.NumericError):
            nx.log(nx.tensor([1.0, 0.0]))


UNARY = {
    "elu": nx.elu, "tanh": nx.tanh, "sigmoid": nx.sigmoid, "exp": nx.exp,
    "log_sigmoid": nx.log_sigmoid, "l2_normalize": nx.l2_normalize, "layer_norm": nx.layer_norm,
    "scale": lambda a: nx.scale(a, -2.5), "transpose": nx.transpose,
    "softplus": lambda a: nx.softplus_beta(a, 0.8),
    "mean_rows": lambda a: nx.mean(a, axis=0),
    "take_rows": lambda a: nx.take_rows(a, [2, 0, 2]),
    "reshape": lambda a: nx.reshape(a, (2, 6)),
    "log_abs": lambda a: nx.log(nx.add(nx.mul(a, a), nx.constant(np.ones(a.shape)))),
    "softmax": lambda a: nx.masked_softmax(a, np.tril(np.ones((4, 3), bool))),
}
BINARY = {
    "add": nx.add, "sub": nx.sub, "mul": nx.mul,
    "matmul_t": lambda a, b: nx.matmul(a, nx.transpose(b)),
    "concat": lambda a, b: nx.concat_rows([a, b]),
}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_pass_grad_check(name, seed):
    rng = np.random.default_rng(seed)
    x = nx.tensor(rng.normal(size=(4, 3)), True)
    w = rng.normal(size=UNARY[name](nx.constant(x.values)).shape)
    rep = nx.grad_check(lambda x: nx.sum(nx.mul(UNARY[name](x), nx.constant(w))), [x], h=1e-5, tol=1e-4)
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_pass_grad_check(name, seed):
    rng = np.random.default_rng(100 + seed)
    a = nx.tensor(rng.normal(size=(4, 3)), True)
    b = nx.tensor(rng.normal(size=(4, 3)), True)
    w = rng.normal(size=BINARY[name](nx.constant(a.values), nx.constant(b.values)).shape)
    rep = nx.grad_check(lambda a, b: nx.sum(nx.mul(BINARY[name](a, b), nx.constant(w))), [a, b])
    assert rep.passed, rep


class TestGradCheck:
    def test_quadratic(self):
        x = nx.tensor(np.random.default_rng(0).normal(size=5), True)
        rep = nx.grad_check(lambda x: nx.scale(nx.sum(nx.mul(x, x)), 0.5), [x])
        assert rep.max_rel_error < 1e-8

    def test_softplus_matmul_chain(self):
        rng = np.random.default_rng(2)
        a = nx.tensor(rng.normal(size=(3, 4)), True)
        b = nx.tensor(rng.normal(size=(4, 2)), True)
        rep = nx.grad_check(lambda a, b: nx.sum(nx.softplus_beta(nx.matmul(a, b), 0.5)), [a, b],
                            h=1e-5, tol=1e-4)
        assert rep.passed

    def test_corrupted_rule_is_reported(self):
        def bad_square(a):
            out = a.values ** 2

            def backward(g):
                a._accumulate(g * 3.0 * a.values)  # should be 2x

            return nx._make(out, (a,), backward, "bad_square")

        x = nx.tensor([0.7, -1.2], True)
        rep = nx.grad_check(lambda x: nx.sum(bad_square(x)), [x])
        assert not rep.passed

    def test_non_finite_forward(self):
        x = nx.tensor([0.0], True)
        with pytest.raises(nx.NumericError):
            nx.grad_check(lambda x: nx.sum(nx.scale(nx.exp(x), np.inf)), [x])


class TestBackward:
    def test_unused_tensor_grad_is_zero(self):
        a = nx.tensor([1.0, 2.0], True)
        unused = nx.tensor([3.0, 4.0], True)
        nx.sum(nx.mul(a, a)).backward()
        assert np.array_equal(unused.grad, [0.0, 0.0])
        assert unused.grad.shape == unused.values.shape

    def test_second_backward_is_an_error(self):
        a = nx.tensor([1.0], True)
        loss = nx.sum(nx.mul(a, a))
        loss.backward()
        with pytest.raises(nx.BackwardError):
            loss.backward()

    def test_record_is_topological(self):
        a = nx.tensor(np.ones((2, 2)), True)
        b = nx.tanh(nx.matmul(a, a))
        rec = nx.sum(nx.add(b, a)).backward()
        pos = {n.node_id: i for i, n in enumerate(rec.nodes)}
        assert rec.ops()[-1] == "sum"
        for node in rec.nodes:
            assert all(pos[p.node_id] < pos[node.node_id] for p in node._parents)

    def test_independent_subgraphs(self):
        rng = np.random.default_rng(5)
        a0, b0 = rng.normal(size=(3, 3)), rng.normal(size=(3,))

        def f(a):
            return nx.sum(nx.tanh(nx.matmul(a, a)))

        def g(b):
            return nx.sum(nx.softplus_beta(b, 1.3))

        a, b = nx.tensor(a0, True), nx.tensor(b0, True)
        nx.add(f(a), g(b)).backward()
        a2, b2 = nx.tensor(a0, True), nx.tensor(b0, True)
        f(a2).backward()
        g(b2).backward()
        assert np.array_equal(a.grad, a2.grad)
        assert np.array_equal(b.grad, b2.grad)

    def test_repeated_rows_sum_gradients(self):
        V = nx.tensor(np.eye(3), True)
        nx.sum(nx.take_rows(V, [1, 1, 2])).backward()
        assert np.array_equal(V.grad.sum(axis=1), [0.0, 6.0, 3.0])
