"""Actor-disturber-critic updates and the online learning loop."""

import numpy as np
import pytest

from graphgames.dynamics import FleetModel, ProbeSpec
from graphgames.errors import (
    DimensionMismatch,
    MissingReference,
    NumericalDivergence,
)
from graphgames.game import COOPERATIVE, NONCOOPERATIVE, GameWeights
from graphgames.graph import build_topology
from graphgames.online import (
    LearnerState,
    actor_update,
    adversary_targets,
    adversary_update,
    critic_update,
    disturber_update,
    initial_learner_state,
    lyapunov_diagnostic,
    run_online,
    td_error,
)
from graphgames.pi_solver import (
    decoupled_game_oracle,
    joint_stationary_policies_coop,
    kernel_dim,
    qkernel_from_value,
    riccati_oracle_single_agent,
)

from conftest import bench_model, bench_topology, coop_weights


def _scalar_setup(beta=3.0, mode=COOPERATIVE):
    model = FleetModel(A=np.array([[0.9]]), B=(np.array([[0.5]]),),
                       E=(np.array([[0.3]]),))
    top = build_topology([], [1], 1)
    weights = GameWeights(mode=mode, Q=(np.eye(1),), R_self=(np.eye(1),),
                          T_self=(np.eye(1),), R_cross={}, T_cross={},
                          attenuation=beta)
    return model, top, weights


def test_initial_state_shapes_and_curvature():
    model = bench_model()
    top = bench_topology()
    weights = coop_weights(attenuation=1.0, cross=0.3)
    st = initial_learner_state(weights, top, model, 1)
    m = kernel_dim(2, 1, 1, 2)
    assert st.W_c.shape == (m, m)
    assert np.allclose(st.W_c, st.W_c.T)
    S = st.critic_kernel()
    # the prior keeps the saddle curvature usable from the first step
    assert np.linalg.eigvalsh(S.block("u_self", "u_self"))[0] > 0.0
    assert np.linalg.eigvalsh(S.block("w_self", "w_self"))[-1] < 0.0
    with pytest.raises(ValueError):
        LearnerState(agent=1, mode=COOPERATIVE, n=1, p=1, q=1,
                     neighbor_order=(), W_c=np.eye(3), W_a=np.zeros((1, 1)),
                     W_d=np.zeros((1, 1)), alpha_c=-0.1)


def test_td_error_and_critic_update_formulas():
    rng = np.random.default_rng(0)
    m = 3
    W_c = rng.standard_normal((m, m))
    st = LearnerState(agent=1, mode=COOPERATIVE, n=1, p=1, q=1,
                      neighbor_order=(), W_c=0.5 * (W_c + W_c.T),
                      W_a=np.zeros((1, 1)), W_d=np.zeros((1, 1)),
                      alpha_c=0.07)
    z_k = rng.standard_normal(m)
    z_n = rng.standard_normal(m)
    r = 0.4
    e = td_error(st, z_k, r, z_n)
    assert e == pytest.approx(r + z_n @ st.W_c @ z_n - z_k @ st.W_c @ z_k)
    W_before = st.W_c.copy()
    critic_update(st, z_k, z_n, e)
    grad = np.outer(z_n, z_n) - np.outer(z_k, z_k)
    expected = W_before - 0.07 * e * grad
    assert np.allclose(st.W_c, 0.5 * (expected + expected.T), atol=1e-14)
    with pytest.raises(DimensionMismatch):
        td_error(st, z_k[:2], r, z_n)


def test_actor_and_disturber_gradient_steps():
    st = LearnerState(agent=1, mode=COOPERATIVE, n=2, p=1, q=1,
                      neighbor_order=(),
                      W_c=np.eye(kernel_dim(2, 1, 1, 0)),
                      W_a=np.array([[0.3], [0.1]]),
                      W_d=np.array([[0.2], [-0.1]]),
                      alpha_a=0.05, alpha_d=0.02)
    delta = np.array([1.0, -2.0])
    target = np.array([0.7])
    W_before = st.W_a.copy()
    actor_update(st, delta, target)
    err = W_before.T @ delta - target
    assert np.allclose(st.W_a, W_before - 0.05 * np.outer(delta, err),
                       atol=1e-14)
    W_before = st.W_d.copy()
    disturber_update(st, delta, target)
    err = W_before.T @ delta - target
    assert np.allclose(st.W_d, W_before - 0.02 * np.outer(delta, err),
                       atol=1e-14)


def test_adversary_targets_and_update():
    model = bench_model()
    top = bench_topology()
    weights = GameWeights(mode=NONCOOPERATIVE,
                          Q=tuple(np.eye(2) for _ in range(4)),
                          R_self=tuple(np.eye(1) for _ in range(4)),
                          T_self=tuple(np.eye(1) for _ in range(4)),
                          R_cross={k: 0.01 * np.eye(1)
                                   for k in [(1, 2), (1, 4)]},
                          T_cross={k: 0.01 * np.eye(1)
                                   for k in [(1, 2), (1, 4)]},
                          attenuation=8.0)
    st = initial_learner_state(weights, top, model, 1)
    delta = np.array([0.5, -0.3])
    u_t, u_adv_t, w_t, w_adv_t = adversary_targets(st, delta)
    assert set(u_adv_t) == {2, 4} and set(w_adv_t) == {2, 4}
    before = {j: st.W_a_adv[j].copy() for j in (2, 4)}
    adversary_update(st, delta, u_adv_t, w_adv_t)
    for j in (2, 4):
        err = before[j].T @ delta - u_adv_t[j]
        assert np.allclose(st.W_a_adv[j],
                           before[j] - st.alpha_a_adv * np.outer(delta, err),
                           atol=1e-14)


def _run_scalar_online(horizon=2000, **kwargs):
    model, top, weights = _scalar_setup(beta=3.0)
    st = initial_learner_state(weights, top, model, 1, alpha_a=0.5,
                               alpha_d=0.5)
    probe = ProbeSpec(amplitude=0.5, decay=0.0, seed=0)
    return model, top, weights, run_online(
        model, top, weights, COOPERATIVE, [st], horizon, probe=probe,
        seed=0, actuate_learned_disturbance=False, **kwargs)


def test_run_online_learns_scalar_saddle_gains():
    model, top, weights, result = _run_scalar_online()
    P = riccati_oracle_single_agent(model, weights, 1)
    S = qkernel_from_value(model, top, weights, 1, P, ())
    K_star, F_star = joint_stationary_policies_coop(S)
    st = result.states[0]
    assert np.allclose(st.W_a.T, K_star, atol=0.05)
    assert np.allclose(st.W_d.T, F_star, atol=0.05)
    assert result.td_errors.shape == (2000, 1)
    assert result.skipped_policy_updates == [0]
    # weight history carries one row per net per step, plus the initial row
    nets = {row[2] for row in result.weight_history}
    assert nets == {"critic", "actor", "disturber"}
    steps = {row[0] for row in result.weight_history}
    assert steps == set(range(2001))


def test_run_online_is_deterministic():
    _, _, _, r1 = _run_scalar_online(horizon=60)
    _, _, _, r2 = _run_scalar_online(horizon=60)
    assert np.array_equal(r1.states[0].W_c, r2.states[0].W_c)
    assert np.array_equal(r1.log.x, r2.log.x)
    assert np.array_equal(r1.td_errors, r2.td_errors)


def test_run_online_divergence_guard():
    model, top, weights = _scalar_setup(beta=3.0)
    st = initial_learner_state(weights, top, model, 1, alpha_c=50.0,
                               alpha_a=50.0, alpha_d=50.0)
    probe = ProbeSpec(amplitude=5.0, decay=0.0, seed=0)
    with pytest.raises(NumericalDivergence):
        run_online(model, top, weights, COOPERATIVE, [st], 2000, probe=probe,
                   seed=0, x_init=[np.array([50.0])])


def test_lyapunov_diagnostic_reference_required():
    _, _, _, result = _run_scalar_online(horizon=60)
    with pytest.raises(MissingReference):
        lyapunov_diagnostic(result, None)


def test_lyapunov_diagnostic_decreasing_toward_reference():
    model, top, weights, result = _run_scalar_online()
    P = riccati_oracle_single_agent(model, weights, 1)
    S = qkernel_from_value(model, top, weights, 1, P, ())
    K_star, F_star = joint_stationary_policies_coop(S)
    reference = [{"critic": S.S, "actor": K_star.T, "disturber": F_star.T}]
    reports = lyapunov_diagnostic(result, reference)
    rep = reports[0]
    assert rep.eventually_bounded
    assert rep.tail_sup <= rep.series[0]
    assert rep.rate_conditions["actor_rate"]
    assert rep.rate_conditions["disturber_rate"]


def test_run_online_mode_mismatch_rejected():
    model, top, weights = _scalar_setup(beta=3.0)
    st = initial_learner_state(weights, top, model, 1)
    with pytest.raises(DimensionMismatch):
        run_online(model, top, weights, NONCOOPERATIVE, [st], 10)
