import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfarec import data
from nfarec import graph_encoder as ge
from nfarec import numerics as nx


def instance(seed, n_users=5, n_items=7, d=4):
    rng = np.random.default_rng(seed)
    Z = (rng.choice([-1, 1], size=(n_users, n_items)) * (rng.random((n_users, n_items)) < 0.5)).astype(np.int8)
    Z[np.arange(n_users), rng.integers(0, n_items, n_users)] = 1  # every user has a hyperedge
    corr = data.build_feedback_correlation(Z, 2)
    V = nx.tensor(rng.normal(size=(n_items, d)), True)
    params = ge.init_hgc_params(rng, d)
    return Z, corr, V, params


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_hgc_matches_explicit_products(layers):
    Z, corr, V, params = instance(layers, n_items=10)
    W = params["hgc.w1"].values
    lam = V.values
    for _ in range(layers):
        lam = corr.A_hat @ elu(lam @ W)
    got = ge.hgc_forward(corr.A_hat, V, params, layers).values
    assert np.max(np.abs(got - lam)) < 1e-10


def test_hand_two_item_graph():
    # identity weight, two connected items with self loops: A_hat is all 0.5
    V = nx.tensor([[1.0, 0.0], [0.0, -1.0]])
    params = {"hgc.w1": nx.tensor(np.eye(2))}
    out = ge.hgc_forward(np.full((2, 2), 0.5), V, params, 1).values
    e = np.expm1(-1.0)
    assert np.allclose(out, [[0.5, 0.5 * e], [0.5, 0.5 * e]], atol=1e-15)


def test_pooling_is_mean_of_rows():
    lam = nx.tensor(np.arange(12.0).reshape(4, 3))
    H = np.array([[1, 0, 1, 0], [0, 0, 0, 1]], float)
    got = ge.user_structural_rep(lam, H).values
    assert np.array_equal(got, [[3.0, 4.0, 5.0], [9.0, 10.0, 11.0]])


def test_feedback_rep_hand():
    lam = nx.tensor([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    H = np.array([[1.0, 1.0, 0.0]])
    Xm = np.array([[0.5, 0.0, 1.0], [0.0, 1.0, 0.25], [1.0, 0.25, 1.0]])
    got = ge.feedback_aware_rep(lam, H, Xm).values
    # (h X / 2) = [0.25, 0.5, 0.625] -> rows combined
    assert np.allclose(got, [[0.25 + 1.25, 0.5 + 1.25]], atol=1e-15)


def test_empty_hyperedge():
    with pytest.raises(ge.EmptyHyperedgeError):
        ge.user_structural_rep(nx.tensor(np.ones((2, 2))), np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_dimension_mismatch():
    with pytest.raises(nx.DimensionError):
        ge.hgc_forward(np.eye(3), nx.tensor(np.ones((2, 2))), {"hgc.w1": nx.tensor(np.eye(2))})


def test_negative_correlation_rejected():
    with pytest.raises(ValueError):
        ge.feedback_relay(np.ones((1, 2)), np.array([[1.0, -0.1], [-0.1, 1.0]]))


def test_conflicting_feedback_masks_e_h2_only():
    # user 0 likes item 0; everyone else rates items 0 and 1 oppositely,
    # so the correlation between them is negative and masked out
    Z = np.array([[1, 0, 0], [1, -1, 0], [-1, 1, 0], [1, -1, 0], [0, 0, 1]], np.int8)
    corr = data.build_feedback_correlation(Z, 1)
    corr.X_masked[0, 0] = 0.0  # drop the user's own-item correlation as well
    assert corr.X_masked[0, 1] == 0.0
    H = (Z != 0).astype(float)
    rng = np.random.default_rng(0)
    V = nx.tensor(rng.normal(size=(3, 4)))
    reps = ge.structural_reps(corr.A_hat, corr.X_masked, H, V, ge.init_hgc_params(rng, 4))
    assert np.array_equal(reps.e_H2.values[0], np.zeros(4))
    assert np.linalg.norm(reps.e_H1.values[0]) > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_e_h2_sign_flip_invariant(seed):
    Z, corr, V, params = instance(seed)
    flipped = data.build_feedback_correlation(-Z, 2)
    H = (Z != 0).astype(float)
    a = ge.structural_reps(corr.A_hat, corr.X_masked, H, V, params).e_H2.values
    b = ge.structural_reps(flipped.A_hat, flipped.X_masked, H, V, params).e_H2.values
    assert np.array_equal(a, b)


@pytest.mark.parametrize("literal", [False, True])
@pytest.mark.parametrize("layers", [1, 2])
def test_gradients_reach_embeddings_and_weights(literal, layers):
    Z, corr, V, params = instance(10 + layers)
    H = (Z != 0).astype(float)
    w = np.random.default_rng(1).normal(size=(Z.shape[0], V.shape[1]))

    def f(V, W1):
        reps = ge.structural_reps(corr.A_hat, corr.X_masked, H, V, {"hgc.w1": W1}, layers, literal=literal)
        return nx.add(nx.sum(nx.mul(reps.e_H1, nx.constant(w))), nx.sum(nx.tanh(reps.e_H2)))

    rep = nx.grad_check(f, [V, params["hgc.w1"]], h=1e-5, tol=1e-4)
    assert rep.passed, rep


def test_relay_precompute_matches():
    Z, corr, V, params = instance(3)
    H = (Z != 0).astype(float)
    relay = ge.feedback_relay(H, corr.X_masked)
    a = ge.structural_reps(corr.A_hat, corr.X_masked, H, V, params, relay=relay).e_H2.values
    b = ge.structural_reps(corr.A_hat, corr.X_masked, H, V, params).e_H2.values
    assert np.array_equal(a, b)
