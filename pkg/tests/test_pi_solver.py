"""Q-kernels, least-squares evaluation, Riccati oracle and policy iteration."""

import numpy as np
import pytest

from graphgames.dynamics import FleetModel, ProbeSpec, stacked_input_matrix
from graphgames.errors import (
    DimensionMismatch,
    IllPosedSaddle,
    MissingNeighborInput,
    NotAdmissible,
    RankDeficient,
)
from graphgames.game import COOPERATIVE, GameWeights, ValueKernel, stage_cost
from graphgames.graph import build_topology
from graphgames.pi_solver import (
    DataDrivenEval,
    EvaluationDataset,
    QKernel,
    bellman_residual,
    block_slices,
    collect_evaluation_data_coop,
    decoupled_game_oracle,
    improve_control_coop,
    improve_disturbance_coop,
    joint_stationary_policies_coop,
    joint_stationary_policies_noncoop,
    kernel_dim,
    lyapunov_policy_value_coop,
    policy_eval_lsq,
    qkernel_from_value,
    riccati_oracle_single_agent,
    run_pi_coop,
    run_pi_noncoop,
    split_noncoop_gain,
    stationary_policy_maps_coop,
)

from conftest import bench_model, bench_topology, coop_weights, pin_only_topology


def _scalar_setup(beta=3.0):
    model = FleetModel(A=np.array([[0.9]]), B=(np.array([[0.5]]),),
                       E=(np.array([[0.3]]),))
    top = build_topology([], [1], 1)
    weights = GameWeights(mode=COOPERATIVE, Q=(np.eye(1),),
                          R_self=(np.eye(1),), T_self=(np.eye(1),),
                          R_cross={}, T_cross={}, attenuation=beta)
    return model, top, weights


def test_block_slices_partition():
    slices = block_slices(2, 1, 1, (3, 5))
    m = kernel_dim(2, 1, 1, 2)
    covered = np.zeros(m, dtype=int)
    for key in ("delta", "u_self", ("u", 3), ("u", 5), "w_self",
                ("w", 3), ("w", 5)):
        covered[slices[key]] += 1
    assert np.all(covered == 1)
    assert slices["u_others"] == slice(3, 5)
    assert slices["w_others"] == slice(6, 8)


def test_qkernel_validation_and_assembly():
    with pytest.raises(DimensionMismatch):
        QKernel(agent=1, S=np.eye(3), mode=COOPERATIVE, n=1, p=1, q=1,
                neighbor_order=(2,))
    m = kernel_dim(1, 1, 1, 1)
    S = QKernel(agent=1, S=np.eye(m), mode=COOPERATIVE, n=1, p=1, q=1,
                neighbor_order=(2,))
    z = S.assemble_z([1.0], [2.0], {2: [3.0]}, [4.0], {2: [5.0]})
    assert np.array_equal(z, [1.0, 2.0, 3.0, 4.0, 5.0])
    assert S.value(z) == pytest.approx(float(z @ z))
    with pytest.raises(MissingNeighborInput):
        S.assemble_z([1.0], [2.0], {}, [4.0], {2: [5.0]})


def test_qkernel_from_value_bellman_identity():
    """z'Sz = r(z) + delta_next' P delta_next for any z, by construction."""
    model = bench_model()
    top = bench_topology()
    weights = coop_weights(attenuation=3.0, cross=0.3)
    rng = np.random.default_rng(4)
    for i in (1, 3):
        order = tuple(top.neighbors(i))
        P = ValueKernel(agent=i, P=np.array([[2.0, 0.3], [0.3, 1.5]]))
        S = qkernel_from_value(model, top, weights, i, P, order)
        M = stacked_input_matrix(model, top, i, order)
        for _ in range(5):
            z = rng.standard_normal(S.m)
            bm = S.block_map
            r = stage_cost(weights, i, z[bm["delta"]], z[bm["u_self"]],
                           {j: z[bm[("u", j)]] for j in order},
                           z[bm["w_self"]],
                           {j: z[bm[("w", j)]] for j in order})
            delta_next = M @ z
            assert S.value(z) == pytest.approx(r + P.value(delta_next),
                                               abs=1e-10)


def test_policy_eval_lsq_recovers_synthetic_kernel():
    rng = np.random.default_rng(5)
    m = 3
    S_true = rng.standard_normal((m, m))
    S_true = 0.5 * (S_true + S_true.T)
    count = 40
    Z = rng.standard_normal((count, m))
    Zn = rng.standard_normal((count, m))
    R = np.einsum("ki,ij,kj->k", Z, S_true, Z) \
        - np.einsum("ki,ij,kj->k", Zn, S_true, Zn)
    ds = EvaluationDataset(agent=1, Z=Z, R=R, Z_next=Zn, n=1, p=1, q=1,
                           neighbor_order=())
    S = policy_eval_lsq(ds, COOPERATIVE)
    assert np.allclose(S.S, S_true, atol=1e-9)
    assert S.residual_rms < 1e-9
    with pytest.raises(RankDeficient):
        policy_eval_lsq(EvaluationDataset(agent=1, Z=Z[:3], R=R[:3],
                                          Z_next=Zn[:3], n=1, p=1, q=1,
                                          neighbor_order=()), COOPERATIVE)


def test_riccati_oracle_saddle_properties():
    model, top, weights = _scalar_setup(beta=3.0)
    P = riccati_oracle_single_agent(model, weights, 1)
    assert P.P[0, 0] > 0.0
    # the kernel built from P must have correct curvature in u and w
    S = qkernel_from_value(model, top, weights, 1, P, ())
    assert S.block("u_self", "u_self")[0, 0] > 0.0
    assert S.block("w_self", "w_self")[0, 0] < 0.0
    # too small an attenuation level loses the saddle
    _, _, weights_bad = _scalar_setup(beta=3.0)
    weights_bad = GameWeights(mode=COOPERATIVE, Q=(np.eye(1),),
                              R_self=(np.eye(1),), T_self=(np.eye(1),),
                              R_cross={}, T_cross={}, attenuation=0.05)
    with pytest.raises(IllPosedSaddle):
        riccati_oracle_single_agent(model, weights_bad, 1)


def test_stationarity_of_oracle_policies():
    model, top, weights = _scalar_setup(beta=3.0)
    P = riccati_oracle_single_agent(model, weights, 1)
    S = qkernel_from_value(model, top, weights, 1, P, ())
    K, F = joint_stationary_policies_coop(S)
    delta = np.array([0.7])
    u_star = K @ delta
    w_star = F @ delta
    # each one-block improvement leaves the stationary pair fixed
    u_back = improve_control_coop(S, delta, {}, w_star, {})
    w_back = improve_disturbance_coop(S, delta, u_star, {}, {})
    assert np.allclose(u_back, u_star, atol=1e-10)
    assert np.allclose(w_back, w_star, atol=1e-10)
    # and the Bellman residual vanishes on the induced transition
    z = S.assemble_z(delta, u_star, {}, w_star, {})
    M = stacked_input_matrix(model, top, 1, ())
    delta_next = M @ z
    zn = S.assemble_z(delta_next, K @ delta_next, {}, F @ delta_next, {})
    assert bellman_residual(S, weights, z, zn) < 1e-10


def test_stationary_maps_match_gradient_conditions():
    model, top, weights = _scalar_setup(beta=3.0)
    P = riccati_oracle_single_agent(model, weights, 1)
    S = qkernel_from_value(model, top, weights, 1, P, ())
    maps = stationary_policy_maps_coop(S)
    delta = np.array([0.4])
    u, w = maps.targets(delta, np.zeros(0), np.zeros(0))
    z = S.assemble_z(delta, u, {}, w, {})
    grad = 2.0 * S.S @ z
    bm = S.block_map
    assert np.allclose(grad[bm["u_self"]], 0.0, atol=1e-10)
    assert np.allclose(grad[bm["w_self"]], 0.0, atol=1e-10)


def test_lyapunov_value_matches_summed_cost():
    model, top, weights = _scalar_setup(beta=3.0)
    K = np.array([[0.4]])
    F = np.array([[0.05]])
    P = lyapunov_policy_value_coop(model, top, weights, 1, K, F)
    # V(delta) equals the infinite-horizon stage-cost sum under (K, F)
    d = np.array([1.0])
    total = 0.0
    for _ in range(2000):
        u = K @ d
        w = F @ d
        total += stage_cost(weights, 1, d, u, {}, w, {})
        d = model.A @ d - top.coupling(1) * (model.B_of(1) @ u
                                             + model.E_of(1) @ w)
    assert P.value([1.0]) == pytest.approx(total, rel=1e-8)
    with pytest.raises(NotAdmissible):
        lyapunov_policy_value_coop(model, top, weights, 1,
                                   np.array([[-5.0]]), F)


def test_pi_coop_reaches_riccati_saddle():
    model, top, weights = _scalar_setup(beta=3.0)
    result = run_pi_coop(model, top, weights, [np.zeros((1, 1))])
    assert result.converged
    P_star = riccati_oracle_single_agent(model, weights, 1)
    S_star = qkernel_from_value(model, top, weights, 1, P_star, ())
    K_star, F_star = joint_stationary_policies_coop(S_star)
    K, F = result.gains[0]
    assert np.allclose(K, K_star, atol=1e-6)
    assert np.allclose(F, F_star, atol=1e-6)
    assert np.allclose(result.kernels[0].S, S_star.S, atol=1e-6)


def test_pi_coop_fleet_pin_only_matches_decoupled_oracles():
    model = bench_model()
    top = pin_only_topology()
    weights = coop_weights(attenuation=3.0)
    init = [decoupled_game_oracle(model, top, weights, i)[1]
            for i in range(1, 5)]
    result = run_pi_coop(model, top, weights, init)
    assert result.converged
    for i in range(1, 5):
        _, K_star, F_star = decoupled_game_oracle(model, top, weights, i)
        K, F = result.gains[i - 1]
        assert np.allclose(K, K_star, atol=1e-5)
        assert np.allclose(F, F_star, atol=1e-5)


def test_pi_coop_rejects_inadmissible_start():
    model, top, weights = _scalar_setup(beta=3.0)
    with pytest.raises(NotAdmissible):
        run_pi_coop(model, top, weights, [np.array([[-20.0]])])


def test_pi_noncoop_scalar_matches_coop_when_isolated():
    """With no neighbors the two games coincide on each agent."""
    model, top, weights_c = _scalar_setup(beta=3.0)
    weights_n = GameWeights(mode="noncooperative", Q=(np.eye(1),),
                            R_self=(np.eye(1),), T_self=(np.eye(1),),
                            R_cross={}, T_cross={}, attenuation=3.0)
    rc = run_pi_coop(model, top, weights_c, [np.zeros((1, 1))])
    rn = run_pi_noncoop(model, top, weights_n, [np.zeros((1, 1))])
    assert rn.converged
    assert np.allclose(rn.gains[0][0], rc.gains[0][0], atol=1e-6)
    assert np.allclose(rn.gains[0][1], rc.gains[0][1], atol=1e-6)
    G = joint_stationary_policies_noncoop(rn.kernels[0])
    K, U_adv, F, W_adv = split_noncoop_gain(rn.kernels[0], G)
    assert np.allclose(K, rn.gains[0][0], atol=1e-6)
    assert U_adv == {} and W_adv == {}


def test_data_driven_evaluation_matches_model_based():
    model, top, weights = _scalar_setup(beta=3.0)
    _, K, F = decoupled_game_oracle(model, top, weights, 1)
    spec = DataDrivenEval(count=120,
                          probe_u=ProbeSpec(amplitude=0.1, decay=0.001, seed=0),
                          probe_w=ProbeSpec(amplitude=0.1, decay=0.001,
                                            seed=1000))
    datasets = collect_evaluation_data_coop(model, top, weights,
                                            [(K, F)], spec)
    S_hat = policy_eval_lsq(datasets[0], COOPERATIVE)
    P = lyapunov_policy_value_coop(model, top, weights, 1, K, F)
    S_ref = qkernel_from_value(model, top, weights, 1, P, ())
    rel = np.linalg.norm(S_hat.S - S_ref.S) / np.linalg.norm(S_ref.S)
    assert rel < 1e-8
