"""Optimizer-step contracts: the dense update against a hand-evaluated scalar
oracle, core projection/reconstruction against naive triple loops, the
identity-basis reduction, momentum recursions, and the one-sided baseline.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsrsim.collective import CommLedger, CommObjectKind
from tsrsim.linalg import orth
from tsrsim.optimizers import (AdamHyperparams, CoreMoments, DenseMoments,
                               ProjectionPair, dense_adamw_step,
                               one_sided_step, realign_core, reconstruct,
                               tsr_adam_step, tsr_project_core, tsr_sgd_step)


def rand(seed, rows, cols):
    return np.random.default_rng(seed).standard_normal((rows, cols))


def random_pair(seed, m, n, r):
    rng = np.random.default_rng(seed)
    return ProjectionPair(orth(rng.standard_normal((m, r))),
                          orth(rng.standard_normal((n, r))))


def triple_loop_core(G, U, V):
    """Naive independent evaluation of U^T G V."""
    m, n = G.shape
    r = U.shape[1]
    out = np.zeros((r, r))
    for a in range(r):
        for b in range(r):
            acc = 0.0
            for i in range(m):
                for j in range(n):
                    acc += U[i, a] * G[i, j] * V[j, b]
            out[a, b] = acc
    return out


# ---------------------------------------------------------------------------
# dense update


def test_dense_zero_gradient_is_identity_without_decay():
    W = rand(0, 3, 4)
    st0 = DenseMoments.zeros(3, 4)
    hp = AdamHyperparams(eta=0.01, weight_decay=0.0)
    W1, st1 = dense_adamw_step(W, np.zeros((3, 4)), st0, hp)
    assert (W1 == W).all()
    assert (st1.m == 0).all() and (st1.v == 0).all()
    assert st1.t == 1


def test_dense_scalar_oracle_first_step():
    # hand evaluation: g=1, b1=0.9, b2=0.999 => m=0.1, v=0.001,
    # bias-corrected m_hat=1, v_hat=1, update = -eta * 1/(1 + eps)
    hp = AdamHyperparams(eta=0.01, weight_decay=0.0, beta1=0.9, beta2=0.999,
                         epsilon=1e-8)
    W = np.zeros((1, 1))
    W1, st1 = dense_adamw_step(W, np.ones((1, 1)), DenseMoments.zeros(1, 1), hp)
    assert st1.m[0, 0] == pytest.approx(0.1, abs=1e-15)
    assert st1.v[0, 0] == pytest.approx(0.001, abs=1e-15)
    assert W1[0, 0] == pytest.approx(-0.01 * (1.0 / (1.0 + 1e-8)), abs=1e-15)


def test_dense_pure_decay_path():
    hp = AdamHyperparams(eta=0.01, weight_decay=0.1)
    W = np.ones((1, 1))
    W1, _ = dense_adamw_step(W, np.zeros((1, 1)), DenseMoments.zeros(1, 1), hp)
    assert W1[0, 0] == pytest.approx(0.999, abs=1e-15)


def test_dense_inputs_unchanged():
    W = rand(1, 2, 2)
    W_copy = W.copy()
    st0 = DenseMoments.zeros(2, 2)
    dense_adamw_step(W, rand(2, 2, 2), st0, AdamHyperparams())
    assert (W == W_copy).all()
    assert (st0.m == 0).all() and st0.t == 0


# ---------------------------------------------------------------------------
# projection / reconstruction


def test_project_coordinate_bases_pick_topleft_block():
    G = rand(3, 5, 6)
    P = ProjectionPair.identity(5, 6, 2)
    assert np.allclose(tsr_project_core(G, P), G[:2, :2], atol=0)


def test_project_recovers_planted_core():
    P = random_pair(4, 6, 5, 3)
    A = rand(5, 3, 3)
    G = P.U @ A @ P.V.T
    assert np.abs(tsr_project_core(G, P) - A).max() < 1e-12


def test_project_matches_triple_loop_oracle_seed3():
    rng = np.random.default_rng(3)
    G = rng.standard_normal((4, 5))
    P = ProjectionPair(orth(rng.standard_normal((4, 2))),
                       orth(rng.standard_normal((5, 2))))
    want = triple_loop_core(G, P.U, P.V)
    assert np.abs(tsr_project_core(G, P) - want).max() < 1e-12


def test_project_shape_mismatch():
    P = random_pair(5, 4, 6, 2)
    with pytest.raises(ValueError):
        tsr_project_core(np.zeros((3, 3)), P)


def test_reconstruct_zero_core():
    P = random_pair(6, 4, 5, 2)
    assert (reconstruct(P, np.zeros((2, 2))) == 0).all()


def test_reconstruct_identity_prefix():
    P = ProjectionPair.identity(4, 6, 2)
    out = reconstruct(P, np.eye(2))
    want = np.zeros((4, 6))
    want[:2, :2] = np.eye(2)
    assert (out == want).all()


def test_project_then_reconstruct_is_double_projection():
    P = random_pair(7, 8, 6, 3)
    G = rand(8, 8, 6)
    lifted = reconstruct(P, tsr_project_core(G, P))
    oracle = (P.U @ P.U.T) @ G @ (P.V @ P.V.T)
    assert np.abs(lifted - oracle).max() < 1e-12


# ---------------------------------------------------------------------------
# two-sided Adam


def test_tsr_adam_zero_core_zero_decay_is_identity():
    W = rand(9, 4, 4)
    P = random_pair(10, 4, 4, 2)
    hp = AdamHyperparams(weight_decay=0.0)
    W1, st1 = tsr_adam_step(W, np.zeros((2, 2)), CoreMoments.zeros(2), P, hp)
    assert (W1 == W).all()
    assert st1.t == 1


def test_tsr_adam_identity_reduction_over_100_steps():
    # with r = m = n and identity bases the core IS the gradient, so the
    # two-sided update must replay dense Adam exactly
    m = n = 5
    hp = AdamHyperparams(eta=0.02, weight_decay=0.01)
    P = ProjectionPair.identity(m, n, m)
    rng = np.random.default_rng(11)
    W_dense = rng.standard_normal((m, n))
    W_tsr = W_dense.copy()
    dense_st = DenseMoments.zeros(m, n)
    core_st = CoreMoments.zeros(m)
    for _ in range(100):
        g = rng.standard_normal((m, n))
        W_dense, dense_st = dense_adamw_step(W_dense, g, dense_st, hp)
        core = tsr_project_core(g, P)
        W_tsr, core_st = tsr_adam_step(W_tsr, core, core_st, P, hp)
        assert np.abs(W_dense - W_tsr).max() < 1e-10


def test_tsr_adam_rank1_scalar_oracle():
    hp = AdamHyperparams(eta=0.01, weight_decay=0.0)
    P = ProjectionPair(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
    W = np.zeros((2, 2))
    W1, _ = tsr_adam_step(W, np.ones((1, 1)), CoreMoments.zeros(1), P, hp)
    # single nonzero entry at (0, 1): the scalar-core Adam step lifted there
    want = -0.01 * (1.0 / (1.0 + 1e-8))
    assert W1[0, 1] == pytest.approx(want, abs=1e-15)
    mask = np.ones((2, 2), dtype=bool)
    mask[0, 1] = False
    assert (W1[mask] == 0).all()


def test_tsr_adam_scale_multiplies_lifted_update_only():
    hp = AdamHyperparams(eta=0.01, weight_decay=0.2, scale=3.0)
    hp1 = AdamHyperparams(eta=0.01, weight_decay=0.2, scale=1.0)
    P = random_pair(13, 4, 4, 2)
    W = rand(14, 4, 4)
    C = rand(15, 2, 2)
    W3, _ = tsr_adam_step(W, C, CoreMoments.zeros(2), P, hp)
    W1, _ = tsr_adam_step(W, C, CoreMoments.zeros(2), P, hp1)
    decayed = W * (1 - 0.01 * 0.2)
    assert np.abs((W3 - decayed) - 3.0 * (W1 - decayed)).max() < 1e-12


def test_weight_decay_geometric_on_zero_core_stream():
    hp = AdamHyperparams(eta=0.05, weight_decay=0.3)
    P = random_pair(16, 3, 3, 2)
    W = rand(17, 3, 3)
    st = CoreMoments.zeros(2)
    expected = W.copy()
    for _ in range(5):
        W, st = tsr_adam_step(W, np.zeros((2, 2)), st, P, hp)
        expected *= 1 - 0.05 * 0.3
        assert np.abs(W - expected).max() == 0.0


# ---------------------------------------------------------------------------
# two-sided momentum SGD


def test_tsr_sgd_beta_zero_is_projected_gd():
    P = random_pair(18, 5, 4, 2)
    W = rand(19, 5, 4)
    C = rand(20, 2, 2)
    W1, m1 = tsr_sgd_step(W, C, np.zeros((2, 2)), P, eta=0.1, beta=0.0)
    assert np.abs(W1 - (W - 0.1 * P.U @ C @ P.V.T)).max() < 1e-15
    assert (m1 == C).all()


def test_tsr_sgd_zero_inputs_fixed_point():
    P = random_pair(21, 4, 4, 2)
    W = rand(22, 4, 4)
    W1, m1 = tsr_sgd_step(W, np.zeros((2, 2)), np.zeros((2, 2)), P, 0.1, 0.9)
    assert (W1 == W).all() and (m1 == 0).all()


def test_tsr_sgd_two_step_momentum_recursion():
    # constant core c for two steps at beta=0.9:
    # m1 = 0.1 c, m2 = 0.9*0.1c + 0.1c = 0.19 c
    P = random_pair(23, 4, 4, 1)
    C = np.full((1, 1), 2.5)
    W = np.zeros((4, 4))
    m = np.zeros((1, 1))
    W, m = tsr_sgd_step(W, C, m, P, 0.1, 0.9)
    W, m = tsr_sgd_step(W, C, m, P, 0.1, 0.9)
    assert m[0, 0] == pytest.approx(0.19 * 2.5, abs=1e-15)


# ---------------------------------------------------------------------------
# one-sided baseline


def test_one_sided_ledger_charges_rn():
    ledger = CommLedger(2)
    W = np.zeros((512, 512))
    U = np.eye(512)[:, :128]
    st0 = DenseMoments.zeros(128, 512)
    one_sided_step(W, [rand(24, 512, 512)], U, st0, AdamHyperparams(),
                   step=1, layer="fc", ledger=ledger)
    assert len(ledger.records) == 1
    rec = ledger.records[0]
    assert rec.kind is CommObjectKind.ONE_SIDED_FACTOR
    assert rec.elements == 128 * 512
    assert rec.bytes == 131072


def test_one_sided_full_basis_reduces_to_dense():
    m = n = 6
    hp = AdamHyperparams(eta=0.03, weight_decay=0.05)
    U = np.eye(m)
    rng = np.random.default_rng(25)
    W_one = rng.standard_normal((m, n))
    W_dense = W_one.copy()
    st_one = DenseMoments.zeros(m, n)
    st_dense = DenseMoments.zeros(m, n)
    ledger = CommLedger(2)
    for t in range(1, 21):
        gs = [rng.standard_normal((m, n)) for _ in range(3)]
        W_one, st_one = one_sided_step(W_one, gs, U, st_one, hp,
                                       step=t, layer="fc", ledger=ledger)
        g_bar = sum(gs) / 3
        W_dense, st_dense = dense_adamw_step(W_dense, g_bar, st_dense, hp)
        assert np.abs(W_one - W_dense).max() < 1e-10


def test_one_sided_projector_recovers_inspan_gradient():
    rng = np.random.default_rng(26)
    U = orth(rng.standard_normal((8, 3)))
    G = U @ rng.standard_normal((3, 5))  # gradient fully inside span(U)
    assert np.abs(U @ (U.T @ G) - G).max() < 1e-10


# ---------------------------------------------------------------------------
# invariants


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), workers=st.integers(1, 6))
def test_core_linearity_under_all_reduce(seed, workers):
    rng = np.random.default_rng(seed)
    P = ProjectionPair(orth(rng.standard_normal((7, 3))),
                       orth(rng.standard_normal((5, 3))))
    gs = [rng.standard_normal((7, 5)) for _ in range(workers)]
    mean_core = sum(tsr_project_core(g, P) for g in gs) / workers
    core_of_mean = tsr_project_core(sum(gs) / workers, P)
    assert np.abs(mean_core - core_of_mean).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_projection_contracts_frobenius_norm(seed):
    rng = np.random.default_rng(seed)
    P = ProjectionPair(orth(rng.standard_normal((9, 4))),
                       orth(rng.standard_normal((6, 4))))
    G = rng.standard_normal((9, 6))
    assert np.linalg.norm(tsr_project_core(G, P)) <= np.linalg.norm(G) + 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_second_moment_stays_nonnegative(seed):
    rng = np.random.default_rng(seed)
    hp = AdamHyperparams()
    st_ = CoreMoments.zeros(3)
    P = ProjectionPair.identity(5, 5, 3)
    W = rng.standard_normal((5, 5))
    for _ in range(25):
        C = rng.standard_normal((3, 3))
        W, st_ = tsr_adam_step(W, C, st_, P, hp)
        assert (st_.v >= 0).all()


def test_moments_carry_across_basis_swap_by_default():
    # the step functions never touch the bases; carrying moments verbatim
    # across a refresh is the caller's (harness) default behavior
    st_ = CoreMoments(np.ones((2, 2)), np.full((2, 2), 0.5), 7)
    P_new = random_pair(31, 6, 5, 2)
    W = rand(32, 6, 5)
    _, st1 = tsr_adam_step(W, np.zeros((2, 2)), st_, P_new, AdamHyperparams())
    assert st1.t == 8  # counter is global, not reset at refresh


def test_realign_core_matches_double_projection():
    P_old = random_pair(33, 6, 5, 2)
    P_new = random_pair(34, 6, 5, 2)
    m_prev = rand(35, 2, 2)
    lifted_old = P_old.U @ m_prev @ P_old.V.T
    realigned = realign_core(m_prev, P_old, P_new)
    lifted_new = P_new.U @ realigned @ P_new.V.T
    oracle = (P_new.U @ P_new.U.T) @ lifted_old @ (P_new.V @ P_new.V.T)
    assert np.abs(lifted_new - oracle).max() < 1e-12


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        AdamHyperparams(eta=0.0)
    with pytest.raises(ValueError):
        AdamHyperparams(beta1=1.0)
    with pytest.raises(ValueError):
        AdamHyperparams(epsilon=0.0)
    with pytest.raises(ValueError):
        AdamHyperparams(weight_decay=-0.1)


def test_projection_pair_orthonormality_check():
    good = random_pair(36, 5, 4, 2)
    good.check_orthonormal(1e-8)
    bad = ProjectionPair(np.ones((4, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        bad.check_orthonormal(1e-8)
