import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comtrack.model import (
    FactorState,
    Hyperparams,
    Schedule,
    ShapeError,
    SufficientStats,
    full_objective,
    grad_o,
    grad_u,
    grad_v,
    history_constant,
    lambda_max_psd,
    lipschitz_o,
    phi,
    smooth_objective,
    stationarity_residual,
    update_stats,
    weight_sum,
)
from comtrack.snapshots import AdjacencySnapshot, SnapshotSeries, ValidationError

from oracles import central_difference, naive_full_objective, weighted_history_sum


def fold(history, beta):
    stats = SufficientStats.initial(history[0].shape[0])
    for t, a in enumerate(history):
        stats = update_stats(stats, AdjacencySnapshot(a, t), beta)
    return stats


def random_instance(rng, n, c, t_len=3):
    history = [rng.random((n, n)) for _ in range(t_len)]
    state = FactorState(rng.random((n, c)), rng.random((n, c)), rng.random((n, c)))
    return history, state


# --------------------------------------------------------------------------- types

def test_factor_state_rejects_negative_and_mismatched():
    with pytest.raises(ValidationError):
        FactorState(-np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        FactorState(np.ones((2, 2)), np.ones((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        FactorState(np.ones((2, 2)), np.ones((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        FactorState(np.ones((2, 0)), np.ones((2, 0)), np.zeros((2, 0)))


def test_hyperparams_validation():
    with pytest.raises(ValidationError):
        Hyperparams(beta=0.0, c=2, lambda_schedule=Schedule(1), mu_schedule=Schedule(1))
    with pytest.raises(ValidationError):
        Hyperparams(beta=1.5, c=2, lambda_schedule=Schedule(1), mu_schedule=Schedule(1))
    with pytest.raises(ValidationError):
        Hyperparams.synthetic_defaults(rho=0.0)
    with pytest.raises(ValidationError):
        Hyperparams.synthetic_defaults(alpha_u="fast")
    with pytest.raises(ValidationError):
        Schedule(-1.0)


def test_schedules_are_one_based():
    hp = Hyperparams.synthetic_defaults()
    assert hp.lam(1) == 0.05 and hp.lam(100) == 0.05
    assert hp.mu(1) == pytest.approx(0.1)
    assert hp.mu(100) == pytest.approx(1.0)


# --------------------------------------------------------------------------- sufficient statistics

def test_weight_sum_known_values():
    assert weight_sum(2, 0.5) == pytest.approx(1.5)
    assert weight_sum(7, 1.0) == 7.0
    assert weight_sum(0, 0.9) == 0.0


def test_beta_one_gives_plain_sums():
    rng = np.random.default_rng(0)
    hist = [rng.random((4, 4)) for _ in range(5)]
    stats = fold(hist, 1.0)
    assert stats.s_scalar == 5.0
    assert np.allclose(stats.s_mat, sum(hist))


def test_stats_match_brute_force_weighted_sum():
    rng = np.random.default_rng(1)
    hist = [rng.random((6, 6)) for _ in range(10)]
    stats = fold(hist, 0.97)
    ref = weighted_history_sum(hist, 0.97)
    assert np.linalg.norm(stats.s_mat - ref) <= 1e-12 * np.linalg.norm(ref)
    assert stats.s_scalar == pytest.approx(sum(0.97 ** k for k in range(10)), rel=1e-14)
    assert stats.count == 10


def test_update_stats_errors():
    stats = SufficientStats.initial(3)
    with pytest.raises(ShapeError):
        update_stats(stats, AdjacencySnapshot(np.zeros((4, 4)), 0), 0.9)
    with pytest.raises(ValidationError):
        update_stats(stats, AdjacencySnapshot(np.zeros((3, 3)), 1), 0.9)


def test_streaming_fold_equals_one_pass():
    rng = np.random.default_rng(2)
    hist = [rng.random((5, 5)) for _ in range(6)]
    s1 = fold(hist, 0.8)
    series = SnapshotSeries.from_arrays(hist)
    s2 = SufficientStats.initial(5)
    for snap in series:
        s2 = update_stats(s2, snap, 0.8)
    assert np.array_equal(s1.s_mat, s2.s_mat) and s1.s_scalar == s2.s_scalar


# --------------------------------------------------------------------------- objectives

def test_phi_vanishes_for_zero_factors():
    rng = np.random.default_rng(3)
    stats = fold([rng.random((4, 4))], 0.9)
    z = np.zeros((4, 2))
    assert phi(FactorState(z, rng.random((4, 2)), z), stats) == 0.0
    assert phi(FactorState(rng.random((4, 2)), z, rng.random((4, 2))), stats) == 0.0
    assert full_objective(FactorState.zeros(4, 2), stats, 1.0, 1.0) == 0.0


def test_phi_plus_constant_equals_direct_sum_small():
    rng = np.random.default_rng(4)
    hist, state = random_instance(rng, 6, 2, 4)
    stats = fold(hist, 0.9)
    direct = naive_full_objective(hist, state.u, state.v, state.o, 0.9, 0.0, 0.0) + history_constant(hist, 0.9)
    total = phi(state, stats) + history_constant(hist, 0.9)
    assert total == pytest.approx(direct, rel=1e-10)


def test_full_objective_matches_naive_recomputation():
    rng = np.random.default_rng(5)
    hist, state = random_instance(rng, 5, 3, 3)
    stats = fold(hist, 0.7)
    ours = full_objective(state, stats, 0.3, 0.2)
    assert ours == pytest.approx(naive_full_objective(hist, state.u, state.v, state.o, 0.7, 0.3, 0.2), rel=1e-10)
    assert full_objective(state, stats, 0.0, 0.0) == phi(state, stats)
    assert smooth_objective(state, stats, 0.3) == full_objective(state, stats, 0.3, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12), st.floats(0.05, 1.0))
def test_sufficient_statistic_equivalence(seed, t_len, beta):
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    hist, state = random_instance(rng, n, c, t_len)
    stats = fold(hist, beta)
    # brute force is the weighted residual sum; ours is phi plus the stored-history constant
    direct = naive_full_objective(hist, state.u, state.v, state.o, beta, 0.0, 0.0) + history_constant(hist, beta)
    assert phi(state, stats) + history_constant(hist, beta) == pytest.approx(direct, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_scaling_symmetry_of_phi(seed, scale):
    rng = np.random.default_rng(seed)
    hist, state = random_instance(rng, 4, 2, 2)
    stats = fold(hist, 0.9)
    scaled = FactorState(state.u * scale, state.v / scale, state.o * scale)
    assert phi(scaled, stats) == pytest.approx(phi(state, stats), rel=1e-9, abs=1e-9)


# --------------------------------------------------------------------------- gradients

def test_zero_state_zero_stats_gives_zero_gradients():
    stats = SufficientStats(np.zeros((3, 3)), 1.0, 0)
    st0 = FactorState.zeros(3, 2)
    for g in (grad_u(st0, stats, 1.0), grad_v(st0, stats, 1.0), grad_o(st0, stats)):
        assert not g.any()


def _fd_check(seed, n, c, lam=0.37, beta=0.8, t_len=3):
    rng = np.random.default_rng(seed)
    hist, state = random_instance(rng, n, c, t_len)
    stats = fold(hist, beta)
    # keep every entry away from 0 so the +-h probes stay feasible
    u, v, o = state.u + 0.05, state.v + 0.05, state.o + 0.05
    state = FactorState(u, v, o)
    cases = (
        (grad_u(state, stats, lam), u, lambda x: FactorState(x, v, o)),
        (grad_v(state, stats, lam), v, lambda x: FactorState(u, x, o)),
        (grad_o(state, stats), o, lambda x: FactorState(u, v, x)),
    )
    for g, x, build in cases:
        # smooth_objective has no O-dependent penalty, so its O-derivative is grad_o
        fd = central_difference(lambda y: smooth_objective(build(y), stats, lam), x)
        rel = np.abs(g - fd) / np.maximum(1.0, np.abs(fd))
        assert rel.max() <= 1e-5


def test_gradients_match_finite_differences_n5_c3():
    _fd_check(0, 5, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 8), st.integers(2, 4))
def test_gradient_correctness_random(seed, n, c):
    _fd_check(seed, n, c)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_grad_o_equals_grad_u_without_ridge(seed):
    rng = np.random.default_rng(seed)
    hist, state = random_instance(rng, 4, 2, 2)
    stats = fold(hist, 0.9)
    assert np.array_equal(grad_o(state, stats), grad_u(state, stats, 0.0))


# --------------------------------------------------------------------------- Lipschitz constants

def test_lipschitz_zero_v():
    assert lipschitz_o(np.zeros((4, 2)), 3.0) == 0.0


def test_lipschitz_scaled_orthonormal():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 3)))
    assert lipschitz_o(2.0 * q, 1.0) == pytest.approx(8.0, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_lambda_max_matches_dense_eigensolver(seed, c):
    v = np.random.default_rng(seed).random((10, c))
    g = v.T @ v
    assert abs(lambda_max_psd(g) - np.linalg.eigvalsh(g)[-1]) <= 1e-8 * max(1.0, np.linalg.eigvalsh(g)[-1])


def test_lipschitz_rejects_negative_scalar():
    with pytest.raises(ValidationError):
        lipschitz_o(np.ones((2, 2)), -1.0)


# --------------------------------------------------------------------------- stationarity

def test_stationarity_residual_zero_at_noiseless_truth():
    rng = np.random.default_rng(6)
    u, v = rng.random((6, 2)), rng.random((6, 2))
    stats = SufficientStats.single(u @ v.T)
    assert stationarity_residual(FactorState(u, v, np.zeros_like(u)), stats, 0.0, 0.0) <= 1e-12


def test_stationarity_residual_positive_off_optimum():
    rng = np.random.default_rng(7)
    stats = SufficientStats.single(rng.random((5, 5)))
    st_ = FactorState(rng.random((5, 2)), rng.random((5, 2)), rng.random((5, 2)))
    assert stationarity_residual(st_, stats, 0.1, 0.1) > 1e-3
