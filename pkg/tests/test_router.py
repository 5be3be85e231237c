import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2restore import ops
from m2restore.errors import ContractError
from m2restore.nn import Linear
from m2restore.router import (DDER, INFER, TRAIN, ExpertBank, RoutingNoise, dder_forward, dispatch,
                              dispatch_dense, joint_features, perturb, route_scores, sparse_select)
from m2restore.tensor import Tensor, backward

from conftest import assert_grads, leaf


def make_router(rng, d=4, M=6, D=5, N=4, K=2):
    return DDER(d, M, D, N, K, rng)


# ---------------------------------------------------------------- joint features

def test_joint_features_concat(f64, rng):
    x = Tensor(rng.normal(size=(2, 4, 3, 5)))
    proj = Linear(6, 4, rng)
    xp = joint_features(x, Tensor(rng.normal(size=(2, 6))), proj)
    assert xp.shape == (2, 8, 3, 5)
    np.testing.assert_array_equal(xp.data[:, :4], x.data)
    t = proj(Tensor(np.zeros((2, 6)))).data
    zero = joint_features(x, Tensor(np.zeros((2, 6))), proj)
    np.testing.assert_array_equal(t, 0.0)
    np.testing.assert_array_equal(zero.data[:, 4:], 0.0)


# ---------------------------------------------------------------- scores

def test_alpha_zero_gives_base_score(f64, rng):
    r = make_router(rng)
    xp = Tensor(rng.normal(size=(1, 8, 3, 3)))
    r.alpha.data[...] = 0
    score, b, S = route_scores(xp, np.eye(5)[[1]], r.W_g, r.W_b, r.alpha)
    np.testing.assert_array_equal(S.data, score.data)


def test_one_hot_prior_selects_bias_row(f64, rng):
    r = make_router(rng)
    xp = Tensor(rng.normal(size=(1, 8, 3, 3)))
    _, b, _ = route_scores(xp, np.eye(5)[[3]], r.W_g, r.W_b, r.alpha)
    np.testing.assert_allclose(b.data[0], np.broadcast_to(r.W_b.data[3], (9, 4)), atol=1e-15)


def test_bias_gradient_is_counted_outer_product(f64, rng):
    r = make_router(rng)
    xp = Tensor(rng.normal(size=(2, 8, 3, 3)))
    d_g = rng.dirichlet(np.ones(5), size=2)
    backward(route_scores(xp, d_g, r.W_g, r.W_b, r.alpha)[2].sum())
    expected = 9 * np.outer(d_g.sum(axis=0), r.alpha.data)
    np.testing.assert_allclose(r.W_b.grad, expected, atol=1e-12)
    assert_grads(lambda: route_scores(xp, d_g, r.W_g, r.W_b, r.alpha)[2].sum(), [r.W_b, r.W_g, r.alpha])


def test_prior_width_mismatch(rng):
    r = make_router(rng)
    with pytest.raises(ContractError):
        route_scores(Tensor(np.zeros((1, 8, 2, 2))), np.ones((1, 3)) / 3, r.W_g, r.W_b, r.alpha)


# ---------------------------------------------------------------- perturbation

def test_infer_mode_is_noise_free(f64, rng):
    r = make_router(rng)
    xp = Tensor(rng.normal(size=(1, 8, 3, 3)))
    S = Tensor(rng.normal(size=(1, 9, 4)))
    S_tilde, _, mask = perturb(S, xp, r.W_n, INFER)
    assert S_tilde.data.tobytes() == S.data.tobytes()
    np.testing.assert_array_equal(mask, 0)


def test_zero_noise_weights_give_ln2(f64, rng):
    xp = Tensor(rng.normal(size=(1, 8, 3, 3)))
    _, sigma, _ = perturb(Tensor(np.zeros((1, 9, 4))), xp, Tensor(np.zeros((8, 4))), INFER)
    np.testing.assert_allclose(sigma.data, math.log(2), rtol=0, atol=1e-15)


def test_train_mode_seeded_reproducible_and_masked(f64, rng):
    xp = Tensor(rng.normal(size=(2, 8, 3, 3)))
    S = Tensor(rng.normal(size=(2, 9, 4)))
    W_n = Tensor(rng.normal(size=(8, 4)))
    a = perturb(S, xp, W_n, TRAIN, np.random.default_rng(7))
    b = perturb(S, xp, W_n, TRAIN, np.random.default_rng(7))
    np.testing.assert_array_equal(a[0].data, b[0].data)
    mask = a[2]
    assert set(np.unique(mask)) <= {0.0, 1.0}
    diff = a[0].data - S.data
    # unmasked experts are untouched at every pixel of every sample
    np.testing.assert_array_equal(diff[..., mask == 0], 0.0)
    assert (a[1].data > 0).all()


def test_train_mode_needs_rng(rng):
    with pytest.raises(ContractError):
        perturb(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 8, 2, 2))), Tensor(np.zeros((8, 4))), TRAIN)


def test_mask_is_bernoulli_half():
    masks = np.stack([RoutingNoise(s, [0]).mask(0, 4) for s in range(2000)])
    assert abs(masks.mean() - 0.5) < 0.03


def test_noise_split_batch_matches_full_batch():
    full = RoutingNoise(11, range(6))
    parts = [RoutingNoise(11, range(0, 2)), RoutingNoise(11, range(2, 6))]
    np.testing.assert_array_equal(full.normal(3, (5, 4)), np.concatenate([p.normal(3, (5, 4)) for p in parts]))
    np.testing.assert_array_equal(full.mask(3, 4), parts[1].mask(3, 4))


def test_noise_gradient_flows_through_sigma(f64, rng):
    xp = Tensor(rng.normal(size=(1, 8, 2, 2)))
    S = leaf(rng.normal(size=(1, 4, 4)))
    W_n = leaf(rng.normal(size=(8, 4)))
    noise = RoutingNoise(1, [0])
    assert noise.mask(0, 4).any()
    w = rng.normal(size=(1, 4, 4))
    assert_grads(lambda: (perturb(S, xp, W_n, TRAIN, noise)[0] * w).sum(), [S, W_n])


# ---------------------------------------------------------------- sparse select

def test_top2_example():
    Se = sparse_select(Tensor([[2.0, 1.0, 0.5, -1.0]], dtype=np.float64), 2).data[0]
    np.testing.assert_allclose(Se, [0.7311, 0.2689, 0, 0], atol=1e-4)
    assert Se[2] == 0 and Se[3] == 0


def test_k_equals_n_is_softmax(rng):
    v = rng.normal(size=(5, 6))
    np.testing.assert_allclose(sparse_select(Tensor(v, dtype=np.float64), 6).data,
                               ops.softmax(Tensor(v, dtype=np.float64)).data, atol=1e-15)


def test_sparsity_on_1000_rows(rng):
    for K in (1, 2, 3):
        Se = sparse_select(Tensor(rng.normal(size=(1000, 4)) * 3), K).data
        assert ((Se != 0).sum(axis=1) == K).all()
        assert (Se >= 0).all()
        np.testing.assert_allclose(Se.sum(axis=1), 1.0, atol=1e-6)


def test_ties_go_to_lower_index():
    Se = sparse_select(Tensor([[1.0, 1.0, 1.0, 0.0]], dtype=np.float64), 2).data[0]
    np.testing.assert_allclose(Se, [0.5, 0.5, 0, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(-50, 50), st.integers(1, 4))
def test_sparse_select_shift_invariant(seed, c, K):
    v = np.random.default_rng(seed).normal(size=(8, 4))
    a = sparse_select(Tensor(v, dtype=np.float64), K).data
    b = sparse_select(Tensor(v + c, dtype=np.float64), K).data
    np.testing.assert_array_equal(a != 0, b != 0)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_sparse_select_gradient(f64, rng):
    v = leaf(rng.normal(size=(6, 5)))
    w = rng.normal(size=(6, 5))
    assert_grads(lambda: (sparse_select(v, 2) * w).sum(), [v])
    backward((sparse_select(v, 2) * w).sum())
    dropped = sparse_select(v, 2).data == 0
    np.testing.assert_array_equal(v.grad[dropped], 0.0)


# ---------------------------------------------------------------- dispatch

def test_single_expert_all_ones(f64, rng):
    bank = ExpertBank(1, 4, 2.0, rng)
    x = Tensor(rng.normal(size=(2, 4, 3, 3)))
    y = dispatch(x, Tensor(np.ones((2, 9, 1))), bank)
    rows = x.data.transpose(0, 2, 3, 1).reshape(-1, 4)
    ref = bank[0](Tensor(rows)).data.reshape(2, 3, 3, 4).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(y.data, ref, atol=1e-14)


def test_identity_experts_pass_through(f64, rng):
    bank = ExpertBank(2, 4, 2.0, rng)
    for e in bank.experts:
        e.fc2.weight.data[...] = 0
        e.fc2.bias.data[...] = 0
    x = Tensor(rng.normal(size=(1, 4, 4, 4)))
    Se = sparse_select(Tensor(rng.normal(size=(1, 16, 2))), 1)
    np.testing.assert_allclose(dispatch(x, Se, bank).data, x.data, atol=1e-14)


def test_sparse_dispatch_matches_dense(f64, rng):
    bank = ExpertBank(4, 4, 2.0, rng)
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))
    S = rng.normal(size=(2, 25, 4))
    S[..., 3] -= 100  # expert 3 never selected: skipped entirely
    Se = sparse_select(Tensor(S), 2)
    np.testing.assert_allclose(dispatch(x, Se, bank).data, dispatch_dense(x, Se, bank).data, atol=1e-6)


def test_dispatch_linear_in_weights(f64, rng):
    bank = ExpertBank(4, 4, 2.0, rng)
    x = Tensor(rng.normal(size=(1, 4, 4, 4)))
    S1 = sparse_select(Tensor(rng.normal(size=(1, 16, 4))), 2).data
    S2 = sparse_select(Tensor(rng.normal(size=(1, 16, 4))), 2).data
    a = 0.3
    mix = dispatch(x, Tensor(a * S1 + (1 - a) * S2), bank).data
    ref = a * dispatch(x, Tensor(S1), bank).data + (1 - a) * dispatch(x, Tensor(S2), bank).data
    np.testing.assert_allclose(mix, ref, atol=1e-5)


def test_dispatch_gradient_sparse_equals_dense(f64, rng):
    bank = ExpertBank(3, 3, 2.0, rng)
    x = leaf(rng.normal(size=(1, 3, 3, 3)))
    Se = leaf(sparse_select(Tensor(rng.normal(size=(1, 9, 3))), 2).data)
    w = rng.normal(size=(1, 3, 3, 3))
    backward((dispatch(x, Se, bank) * w).sum())
    gs = [x.grad.copy(), Se.grad.copy()] + [p.grad.copy() for p in bank.parameters()]
    for t in [x, Se] + bank.parameters():
        t.grad = None
    backward((dispatch_dense(x, Se, bank) * w).sum())
    gd = [x.grad, Se.grad] + [p.grad for p in bank.parameters()]
    # zero weights are never trained (sparse_select blocks them), so only kept entries must agree
    kept = Se.data != 0
    gs[1], gd[1] = gs[1][kept], gd[1][kept]
    for a, b in zip(gs, gd):
        np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- full router

def test_infer_forward_bit_identical(rng):
    r = make_router(rng)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)))
    T = Tensor(rng.normal(size=(2, 6)))
    d = rng.dirichlet(np.ones(5), size=2)
    y1, s1 = r(x, T, d, INFER)
    y2, s2 = r(x, T, d, INFER)
    assert y1.data.tobytes() == y2.data.tobytes()
    assert ((s1.Se != 0).sum(axis=-1) == r.K).all()
    np.testing.assert_array_equal(s1.eps_mask, 0)
    np.testing.assert_array_equal(s1.S_tilde, s1.S)
    header, table = s1.to_table()
    assert table.shape == (2 * 16, len(header))


def test_router_end_to_end_gradient(f64, rng):
    r = make_router(rng)
    x = leaf(rng.normal(size=(2, 4, 4, 4)))
    T = leaf(rng.normal(size=(2, 6)))
    d = rng.dirichlet(np.ones(5), size=2)
    w = rng.normal(size=(2, 4, 4, 4))
    noise = RoutingNoise(3, [0, 1])
    for mode in (INFER, TRAIN):
        assert_grads(lambda: (dder_forward(x, T, d, r, mode, noise)[0] * w).sum(), [x, T] + r.parameters())


def test_router_rejects_bad_k(rng):
    with pytest.raises(ContractError):
        DDER(4, 6, 5, 4, 5, rng)
    with pytest.raises(ContractError):
        sparse_select(Tensor(np.zeros((1, 3))), 0)
