"""Q-kernel representations and the two policy-iteration algorithms.

The stacked per-agent vector is z_i = col(delta_i, u_i, u_-i, w_i, w_-i)
with neighbor blocks in a fixed order.  Kernels are symmetric matrices S
with Q_i(z) = z'Sz.  Policy evaluation is available model-based (per-policy
Lyapunov solve, the test oracle) and data-driven (batch least squares on
(z, r, z') tuples with probing noise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import FleetModel, ProbeSpec, simulate, stacked_input_matrix
from .errors import (
    DimensionMismatch,
    IllPosedSaddle,
    MaxIterations,
    MissingNeighborInput,
    NoConvergence,
    NotAdmissible,
    RankDeficient,
    ResidualTooLarge,
    SingularBlockMatrix,
    WrongCurvature,
)
from .game import (
    COOPERATIVE,
    NONCOOPERATIVE,
    GameWeights,
    ValueKernel,
    closed_loop_error_matrix,
    stage_cost,
    stage_cost_kernel,
)
from .graph import GraphTopology, neighborhood_error

_SYM_TOL = 1e-12
_COND_LIMIT = 1e12


def kernel_dim(n: int, p: int, q: int, n_neighbors: int) -> int:
    return n + p * (1 + n_neighbors) + q * (1 + n_neighbors)


def block_slices(n: int, p: int, q: int, neighbor_order):
    """Named index ranges partitioning [0, m)."""
    order = list(neighbor_order)
    L = len(order)
    slices = {"delta": slice(0, n), "u_self": slice(n, n + p)}
    pos = n + p
    for j in order:
        slices[("u", j)] = slice(pos, pos + p)
        pos += p
    slices["u_others"] = slice(n + p, pos)
    slices["w_self"] = slice(pos, pos + q)
    pos += q
    w_start = pos
    for j in order:
        slices[("w", j)] = slice(pos, pos + q)
        pos += q
    slices["w_others"] = slice(w_start, pos)
    assert pos == kernel_dim(n, p, q, L)
    return slices


@dataclass(frozen=True)
class QKernel:
    """Symmetric action-value kernel over the stacked per-agent vector."""

    agent: int
    S: np.ndarray
    mode: str
    n: int
    p: int
    q: int
    neighbor_order: tuple
    residual_rms: float | None = None
    block_map: dict = field(init=False)

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        m = kernel_dim(self.n, self.p, self.q, len(self.neighbor_order))
        if S.shape != (m, m):
            raise DimensionMismatch(
                f"kernel must be {m}x{m} for this neighbor structure")
        if not np.allclose(S, S.T, atol=_SYM_TOL * max(1.0, np.abs(S).max())):
            raise DimensionMismatch("kernel must be symmetric")
        object.__setattr__(self, "S", 0.5 * (S + S.T))
        object.__setattr__(self, "block_map",
                           block_slices(self.n, self.p, self.q,
                                        self.neighbor_order))

    @property
    def m(self) -> int:
        return self.S.shape[0]

    def block(self, a, b) -> np.ndarray:
        return self.S[self.block_map[a], self.block_map[b]]

    def value(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(z @ self.S @ z)

    def assemble_z(self, delta, u_i, u_neighbors, w_i, w_neighbors) -> np.ndarray:
        expected = set(self.neighbor_order)
        if set(u_neighbors) != expected or set(w_neighbors) != expected:
            raise MissingNeighborInput(
                f"neighbor inputs must be keyed by {sorted(expected)}")
        parts = [np.atleast_1d(np.asarray(delta, dtype=float)),
                 np.atleast_1d(np.asarray(u_i, dtype=float))]
        parts += [np.atleast_1d(np.asarray(u_neighbors[j], dtype=float))
                  for j in self.neighbor_order]
        parts.append(np.atleast_1d(np.asarray(w_i, dtype=float)))
        parts += [np.atleast_1d(np.asarray(w_neighbors[j], dtype=float))
                  for j in self.neighbor_order]
        return np.concatenate(parts)


def qkernel_from_value(model: FleetModel, topology: GraphTopology,
                       weights: GameWeights, i: int, P: ValueKernel,
                       neighbor_order) -> QKernel:
    """S = Lambda_i + M_i' P M_i, the exact kernel for a quadratic value."""
    order = tuple(neighbor_order)
    lam = stage_cost_kernel(weights, i, order)
    M = stacked_input_matrix(model, topology, i, order)
    S = lam + M.T @ P.P @ M
    return QKernel(agent=i, S=S, mode=weights.mode, n=model.n, p=model.p,
                   q=model.q, neighbor_order=order)


@dataclass
class EvaluationDataset:
    """(z, r, z') tuples collected under fixed policies with probing noise."""

    agent: int
    Z: np.ndarray        # (count, m)
    R: np.ndarray        # (count,)
    Z_next: np.ndarray   # (count, m)
    n: int
    p: int
    q: int
    neighbor_order: tuple

    @property
    def count(self) -> int:
        return self.Z.shape[0]

    @property
    def m(self) -> int:
        return self.Z.shape[1]


def _sym_regressor(Z):
    """Rows vech(z z') with doubled off-diagonal entries."""
    m = Z.shape[1]
    iu, ju = np.triu_indices(m)
    factors = np.where(iu == ju, 1.0, 2.0)
    return (Z[:, iu] * Z[:, ju]) * factors[None, :]


def _unvech(theta, m):
    S = np.zeros((m, m))
    iu, ju = np.triu_indices(m)
    S[iu, ju] = theta
    S = S + S.T - np.diag(np.diag(S))
    return S


def policy_eval_lsq(dataset: EvaluationDataset, mode: str,
                    residual_threshold: float | None = None) -> QKernel:
    """Least-squares solve of z'Sz - z''Sz' = r over symmetric kernels."""
    m = dataset.m
    dim = m * (m + 1) // 2
    if dataset.count < dim:
        raise RankDeficient(
            f"{dataset.count} transitions < {dim} kernel parameters")
    Phi = _sym_regressor(dataset.Z) - _sym_regressor(dataset.Z_next)
    rank = np.linalg.matrix_rank(Phi)
    if rank < dim:
        raise RankDeficient(
            f"regression matrix rank {rank} < {dim}; excitation insufficient")
    theta, _, _, _ = np.linalg.lstsq(Phi, dataset.R, rcond=None)
    residual_rms = float(np.sqrt(np.mean((Phi @ theta - dataset.R) ** 2)))
    if residual_threshold is not None and residual_rms > residual_threshold:
        raise ResidualTooLarge(
            f"evaluation residual RMS {residual_rms:.3e} exceeds "
            f"{residual_threshold:.3e}")
    S = _unvech(theta, m)
    return QKernel(agent=dataset.agent, S=S, mode=mode, n=dataset.n,
                   p=dataset.p, q=dataset.q,
                   neighbor_order=dataset.neighbor_order,
                   residual_rms=residual_rms)


def _solve_block(M, rhs, name):
    if np.linalg.cond(M) > _COND_LIMIT:
        raise SingularBlockMatrix(f"{name} block is numerically singular")
    return np.linalg.solve(M, rhs)


def _require_curvature(M, name, negative):
    eigs = np.linalg.eigvalsh(0.5 * (M + M.T))
    if negative and eigs[-1] >= 0.0:
        raise WrongCurvature(f"{name} must be negative definite")
    if not negative and eigs[0] <= 0.0:
        raise WrongCurvature(f"{name} must be positive definite")


def improve_disturbance_coop(S: QKernel, delta, u_i, u_neighbors,
                             w_neighbors) -> np.ndarray:
    """argmax of z'Sz over w_i with the remaining blocks fixed."""
    Sww = S.block("w_self", "w_self")
    _require_curvature(Sww, "S_ww", negative=True)
    z = S.assemble_z(delta, u_i, u_neighbors, np.zeros(S.q), w_neighbors)
    rhs = S.S[S.block_map["w_self"], :] @ z
    return -_solve_block(Sww, rhs, "S_ww")


def improve_control_coop(S: QKernel, delta, u_neighbors, w_i,
                         w_neighbors) -> np.ndarray:
    """argmin of z'Sz over u_i with the remaining blocks fixed."""
    Suu = S.block("u_self", "u_self")
    _require_curvature(Suu, "S_uu", negative=False)
    z = S.assemble_z(delta, np.zeros(S.p), u_neighbors, w_i, w_neighbors)
    rhs = S.S[S.block_map["u_self"], :] @ z
    return -_solve_block(Suu, rhs, "S_uu")


@dataclass(frozen=True)
class StationaryPolicyMaps:
    """Linear maps (delta, u_-i, w_-i) -> (u_i*, w_i*) from a coop kernel."""

    u_from_delta: np.ndarray
    u_from_u_others: np.ndarray
    u_from_w_others: np.ndarray
    w_from_delta: np.ndarray
    w_from_u_others: np.ndarray
    w_from_w_others: np.ndarray

    def targets(self, delta, u_others, w_others):
        u = (self.u_from_delta @ delta + self.u_from_u_others @ u_others
             + self.u_from_w_others @ w_others)
        w = (self.w_from_delta @ delta + self.w_from_u_others @ u_others
             + self.w_from_w_others @ w_others)
        return u, w


def stationary_policy_maps_coop(S: QKernel) -> StationaryPolicyMaps:
    """Simultaneous stationarity solve over (u_i, w_i) in closed form."""
    Suu = S.block("u_self", "u_self")
    Sww = S.block("w_self", "w_self")
    Suw = S.block("u_self", "w_self")
    Swu = S.block("w_self", "u_self")
    WiW = _solve_block(Sww, np.hstack([
        S.block("w_self", "delta"), S.block("w_self", "u_others"),
        S.block("w_self", "w_others"), Swu]), "S_ww")
    q_cols = S.q
    # u-side Schur complement
    schur_u = Suu - Suw @ WiW[:, -S.p:]
    rhs_u = np.hstack([S.block("u_self", "delta"),
                       S.block("u_self", "u_others"),
                       S.block("u_self", "w_others")]) \
        - Suw @ WiW[:, :-S.p]
    Gu = -_solve_block(schur_u, rhs_u, "u Schur complement")
    UiU = _solve_block(Suu, np.hstack([
        S.block("u_self", "delta"), S.block("u_self", "u_others"),
        S.block("u_self", "w_others"), Suw]), "S_uu")
    schur_w = Sww - Swu @ UiU[:, -q_cols:]
    rhs_w = np.hstack([S.block("w_self", "delta"),
                       S.block("w_self", "u_others"),
                       S.block("w_self", "w_others")]) \
        - Swu @ UiU[:, :-q_cols]
    Gw = -_solve_block(schur_w, rhs_w, "w Schur complement")
    n = S.n
    Lu = S.block_map["u_others"].stop - S.block_map["u_others"].start
    return StationaryPolicyMaps(
        u_from_delta=Gu[:, :n],
        u_from_u_others=Gu[:, n:n + Lu],
        u_from_w_others=Gu[:, n + Lu:],
        w_from_delta=Gw[:, :n],
        w_from_u_others=Gw[:, n:n + Lu],
        w_from_w_others=Gw[:, n + Lu:],
    )


def joint_stationary_policies_coop(S: QKernel):
    """State-feedback gains (K_u, K_w) with neighbor blocks at zero."""
    maps = stationary_policy_maps_coop(S)
    return maps.u_from_delta, maps.w_from_delta


def joint_stationary_policies_noncoop(S: QKernel) -> np.ndarray:
    """Stacked gain on delta for (u_i, u_-i, w_i, w_-i), non-cooperative."""
    if S.mode != NONCOOPERATIVE:
        raise DimensionMismatch("kernel is not in non-cooperative mode")
    n = S.n
    body = S.S[n:, n:]
    rhs = S.S[n:, :n]
    return -_solve_block(body, rhs, "stacked stationarity")


def split_noncoop_gain(S: QKernel, G: np.ndarray):
    """Split the stacked delta-gain into (K, U_adv, F, W_adv)."""
    off = S.n
    sl = {k: slice(v.start - off, v.stop - off)
          for k, v in S.block_map.items() if k != "delta"}
    K = G[sl["u_self"]]
    F = G[sl["w_self"]]
    U_adv = {j: G[sl[("u", j)]] for j in S.neighbor_order}
    W_adv = {j: G[sl[("w", j)]] for j in S.neighbor_order}
    return K, U_adv, F, W_adv


def riccati_oracle_single_agent(model: FleetModel, weights: GameWeights,
                                i: int, tol: float = 1e-8) -> ValueKernel:
    """Saddle-point Riccati solution for an isolated pinned agent.

    Solves the game Riccati equation with stacked inputs [B, E] and the
    indefinite cost blkdiag(R, -beta^2 T), then validates curvature, sign
    and the fixed-point residual.
    """
    A, B, E = model.A, model.B_of(i), model.E_of(i)
    R = weights.R_self[i - 1]
    T = weights.T_self[i - 1]
    Q = weights.Q[i - 1]
    b2 = weights.attenuation ** 2
    p = model.p
    stacked = np.hstack([B, E])
    cost = scipy.linalg.block_diag(R, -b2 * T)

    def evaluate(L):
        A_cl = A - stacked @ L
        if np.max(np.abs(np.linalg.eigvals(A_cl))) >= 1.0 - 1e-12:
            return None
        P = scipy.linalg.solve_discrete_lyapunov(A_cl.T, Q + L.T @ cost @ L)
        return 0.5 * (P + P.T)

    # damped Newton on the joint gain, started from the disturbance-free LQR
    P_lqr = scipy.linalg.solve_discrete_are(A, B, Q, R)
    L = np.vstack([np.linalg.solve(R + B.T @ P_lqr @ B, B.T @ P_lqr @ A),
                   np.zeros((model.q, model.n))])
    P = evaluate(L)
    if P is None:
        raise IllPosedSaddle(f"agent {i}: LQR start is not stabilizing")
    for _ in range(500):
        W = cost + stacked.T @ P @ stacked
        if np.linalg.eigvalsh(W[:p, :p])[0] <= 0.0 \
                or np.linalg.eigvalsh(W[p:, p:])[-1] >= 0.0:
            raise IllPosedSaddle(
                f"agent {i}: saddle curvature lost; attenuation level too "
                "small for this disturbance channel")
        L_star = np.linalg.solve(W, stacked.T @ P @ A)
        step = 1.0
        while step > 1e-8:
            L_try = L + step * (L_star - L)
            P_try = evaluate(L_try)
            if P_try is not None:
                break
            step *= 0.5
        else:
            raise IllPosedSaddle(
                f"agent {i}: no stabilizing step toward the saddle gain")
        if np.linalg.norm(L_try - L) < 1e-13:
            L, P = L_try, P_try
            break
        L, P = L_try, P_try
    else:
        raise NoConvergence(f"agent {i}: Riccati Newton iteration stalled")
    eigs = np.linalg.eigvalsh(P)
    if eigs[0] <= 0.0:
        raise IllPosedSaddle(f"agent {i}: game value is not positive definite")
    W = cost + stacked.T @ P @ stacked
    cross = stacked.T @ P @ A
    residual = Q + A.T @ P @ A - cross.T @ np.linalg.solve(W, cross) - P
    if np.linalg.norm(residual) > tol * max(1.0, np.linalg.norm(P)):
        raise NoConvergence(
            f"agent {i}: Riccati fixed-point residual "
            f"{np.linalg.norm(residual):.3e} above tolerance")
    return ValueKernel(agent=i, P=P)


def decoupled_game_oracle(model: FleetModel, topology: GraphTopology,
                          weights: GameWeights, i: int, tol: float = 1e-12):
    """Saddle solution of agent i's decoupled loop (neighbors at rest).

    Solves the zero-sum game for (A, c_i B_i, c_i E_i) with agent i's own
    weights and returns (ValueKernel, K, F) with u = K delta, w = F delta.
    """
    from .graph import build_topology

    c = topology.coupling(i)
    sub_model = FleetModel(A=model.A, B=(c * model.B_of(i),),
                           E=(c * model.E_of(i),))
    sub_weights = GameWeights(
        mode=COOPERATIVE, Q=(weights.Q[i - 1],),
        R_self=(weights.R_self[i - 1],), T_self=(weights.T_self[i - 1],),
        R_cross={}, T_cross={}, attenuation=weights.attenuation)
    sub_top = build_topology([], [1], 1)
    P = riccati_oracle_single_agent(sub_model, sub_weights, 1, tol=tol)
    S = qkernel_from_value(sub_model, sub_top, sub_weights, 1, P, ())
    K, F = joint_stationary_policies_coop(S)
    return ValueKernel(agent=i, P=P.P), K, F


# ---------------------------------------------------------------------------
# policy evaluation backends
# ---------------------------------------------------------------------------

def lyapunov_policy_value_coop(model, topology, weights, i, K, F) -> ValueKernel:
    """Per-policy value on the synchronized closed loop (neighbors at rest)."""
    c = topology.coupling(i)
    K = np.atleast_2d(K)
    F = np.atleast_2d(F)
    A_cl = model.A - c * (model.B_of(i) @ K + model.E_of(i) @ F)
    if np.max(np.abs(np.linalg.eigvals(A_cl))) >= 1.0:
        raise NotAdmissible(
            f"agent {i}: policy pair is not stabilizing on the synchronized loop")
    b2 = weights.attenuation ** 2
    lam = (weights.Q[i - 1] + K.T @ weights.R_self[i - 1] @ K
           - b2 * (F.T @ weights.T_self[i - 1] @ F))
    P = scipy.linalg.solve_discrete_lyapunov(A_cl.T, lam)
    return ValueKernel(agent=i, P=0.5 * (P + P.T))


def lyapunov_policy_value_noncoop(model, topology, weights, i, K, U_adv, F,
                                  W_adv) -> ValueKernel:
    """Per-policy value with adversary estimates fed back on delta_i."""
    c = topology.coupling(i)
    K = np.atleast_2d(K)
    F = np.atleast_2d(F)
    A_cl = model.A - c * (model.B_of(i) @ K + model.E_of(i) @ F)
    b2 = weights.attenuation ** 2
    lam = (weights.Q[i - 1] + K.T @ weights.R_self[i - 1] @ K
           - b2 * (F.T @ weights.T_self[i - 1] @ F))
    for j in weights.neighbor_weights(i):
        a = topology.adjacency[i - 1, j - 1]
        Uj = np.atleast_2d(U_adv[j])
        Wj = np.atleast_2d(W_adv[j])
        A_cl = A_cl + a * (model.B_of(j) @ Uj + model.E_of(j) @ Wj)
        lam = lam - b2 * (Uj.T @ weights.R_cross[(i, j)] @ Uj)
        lam = lam - b2 * (Wj.T @ weights.T_cross[(i, j)] @ Wj)
    if np.max(np.abs(np.linalg.eigvals(A_cl))) >= 1.0:
        raise NotAdmissible(
            f"agent {i}: adversarial closed loop is not stable")
    P = scipy.linalg.solve_discrete_lyapunov(A_cl.T, lam)
    return ValueKernel(agent=i, P=0.5 * (P + P.T))


@dataclass
class DataDrivenEval:
    """Configuration for least-squares policy evaluation on rollout data."""

    count: int = 400
    probe_u: ProbeSpec = ProbeSpec(amplitude=0.1, decay=0.001, seed=0)
    probe_w: ProbeSpec = ProbeSpec(amplitude=0.1, decay=0.001, seed=1000)
    x_init: tuple | None = None       # follower initial states
    x0_init: np.ndarray | None = None
    residual_threshold: float | None = None


class _GainPolicy:
    def __init__(self, K, F):
        self.K = np.atleast_2d(K)
        self.F = np.atleast_2d(F)

    def control(self, delta, k=0):
        return self.K @ delta

    def disturbance(self, delta, k=0):
        return self.F @ delta


def collect_evaluation_data_coop(model, topology, weights, gains,
                                 spec: DataDrivenEval):
    """Roll the fleet under fixed gains + probing and build per-agent tuples.

    z_k uses the actually applied (probed) inputs; z_{k+1} uses the noise-free
    policy actions, matching the Bellman identity of policy evaluation.
    """
    N = model.n_agents
    horizon = spec.count
    x_init = spec.x_init
    if x_init is None:
        rng = np.random.default_rng(12345)
        x_init = [rng.uniform(-1.0, 1.0, size=model.n) for _ in range(N)]
    x0_init = spec.x0_init if spec.x0_init is not None else np.zeros(model.n)
    policies = [_GainPolicy(K, F) for K, F in gains]
    probes_w = [spec.probe_w.signal(horizon, model.q, agent_offset=i)
                for i in range(N)]

    # run the loop manually so that disturbance probing can be injected
    log_x = [list(np.asarray(x, dtype=float) for x in x_init)]
    x0 = np.asarray(x0_init, dtype=float)
    deltas, us, ws = [], [], []
    probes_u = [spec.probe_u.signal(horizon, model.p, agent_offset=i)
                for i in range(N)]
    x0s = [x0]
    for k in range(horizon):
        states = log_x[-1]
        d_k = [neighborhood_error(topology, states, x0s[-1], i)
               for i in range(1, N + 1)]
        u_k = [policies[i].control(d_k[i], k) + probes_u[i][k] for i in range(N)]
        w_k = [policies[i].disturbance(d_k[i], k) + probes_w[i][k]
               for i in range(N)]
        deltas.append(d_k)
        us.append(u_k)
        ws.append(w_k)
        x0s.append(model.A @ x0s[-1])
        log_x.append([model.A @ states[i] + model.B_of(i + 1) @ u_k[i]
                      + model.E_of(i + 1) @ w_k[i] for i in range(N)])
    states = log_x[-1]
    d_last = [neighborhood_error(topology, states, x0s[-1], i)
              for i in range(1, N + 1)]
    deltas.append(d_last)

    datasets = []
    for i in range(1, N + 1):
        order = tuple(topology.neighbors(i))
        m = kernel_dim(model.n, model.p, model.q, len(order))
        Z = np.zeros((horizon, m))
        Zn = np.zeros((horizon, m))
        Rv = np.zeros(horizon)
        for k in range(horizon):
            z_parts = [deltas[k][i - 1], us[k][i - 1]]
            z_parts += [us[k][j - 1] for j in order]
            z_parts.append(ws[k][i - 1])
            z_parts += [ws[k][j - 1] for j in order]
            Z[k] = np.concatenate(z_parts)
            # noise-free on-policy actions at the next state
            zn_parts = [deltas[k + 1][i - 1],
                        policies[i - 1].control(deltas[k + 1][i - 1])]
            zn_parts += [policies[j - 1].control(deltas[k + 1][j - 1])
                         for j in order]
            zn_parts.append(policies[i - 1].disturbance(deltas[k + 1][i - 1]))
            zn_parts += [policies[j - 1].disturbance(deltas[k + 1][j - 1])
                         for j in order]
            Zn[k] = np.concatenate(zn_parts)
            Rv[k] = stage_cost(
                weights, i, deltas[k][i - 1], us[k][i - 1],
                {j: us[k][j - 1] for j in order}, ws[k][i - 1],
                {j: ws[k][j - 1] for j in order})
        datasets.append(EvaluationDataset(agent=i, Z=Z, R=Rv, Z_next=Zn,
                                          n=model.n, p=model.p, q=model.q,
                                          neighbor_order=order))
    return datasets


def collect_evaluation_data_noncoop(model, topology, weights, i, K, U_adv, F,
                                    W_adv, spec: DataDrivenEval):
    """Per-agent virtual rollout of the error recursion with adversary gains."""
    order = tuple(topology.neighbors(i))
    M = stacked_input_matrix(model, topology, i, order)
    m = kernel_dim(model.n, model.p, model.q, len(order))
    horizon = spec.count
    rng = np.random.default_rng(54321 + i)
    delta = rng.uniform(-1.0, 1.0, size=model.n)
    probe_u = spec.probe_u.signal(horizon, model.p * (1 + len(order)),
                                  agent_offset=i)
    probe_w = spec.probe_w.signal(horizon, model.q * (1 + len(order)),
                                  agent_offset=i)
    K = np.atleast_2d(K)
    F = np.atleast_2d(F)
    U_adv = {j: np.atleast_2d(U_adv[j]) for j in order}
    W_adv = {j: np.atleast_2d(W_adv[j]) for j in order}

    def policy_inputs(d):
        u_parts = [K @ d] + [U_adv[j] @ d for j in order]
        w_parts = [F @ d] + [W_adv[j] @ d for j in order]
        return np.concatenate(u_parts), np.concatenate(w_parts)

    Z = np.zeros((horizon, m))
    Zn = np.zeros((horizon, m))
    Rv = np.zeros(horizon)
    for k in range(horizon):
        u_all, w_all = policy_inputs(delta)
        u_all = u_all + probe_u[k]
        w_all = w_all + probe_w[k]
        z = np.concatenate([delta, u_all, w_all])
        Z[k] = z
        u_nb = {j: u_all[model.p * (1 + idx):model.p * (2 + idx)]
                for idx, j in enumerate(order)}
        w_nb = {j: w_all[model.q * (1 + idx):model.q * (2 + idx)]
                for idx, j in enumerate(order)}
        Rv[k] = stage_cost(weights, i, delta, u_all[:model.p], u_nb,
                           w_all[:model.q], w_nb)
        delta_next = M @ z
        un, wn = policy_inputs(delta_next)
        Zn[k] = np.concatenate([delta_next, un, wn])
        delta = delta_next
    return EvaluationDataset(agent=i, Z=Z, R=Rv, Z_next=Zn, n=model.n,
                             p=model.p, q=model.q, neighbor_order=order)


# ---------------------------------------------------------------------------
# policy iteration drivers
# ---------------------------------------------------------------------------

@dataclass
class PIRecord:
    iter_outer: int
    iter_inner: int
    inner_norm: float
    outer_norm: float | None
    probe_values: list      # per-agent list of kernel values at probe states


@dataclass
class PIResult:
    kernels: list           # per-agent QKernel at convergence
    gains: list             # per-agent (K, F) state-feedback gains
    adversary_gains: list   # per-agent ({j: U_ij}, {j: W_ij}); empty for coop
    history: list           # PIRecord per inner iteration
    converged: bool
    outer_iterations: int


def _probe_states(model, topology, count=20, seed=7):
    rng = np.random.default_rng(seed)
    probes = []
    for i in range(1, model.n_agents + 1):
        m = kernel_dim(model.n, model.p, model.q,
                       len(topology.neighbors(i)))
        probes.append(rng.standard_normal((count, m)))
    return probes


def _check_admissible(model, topology, gains_K):
    gcl = closed_loop_error_matrix(
        model, topology, [(K, None) for K in gains_K])
    rho = np.max(np.abs(np.linalg.eigvals(gcl)))
    if rho >= 1.0:
        raise NotAdmissible(
            f"initial policies give closed-loop spectral radius {rho:.4f} >= 1")


def run_pi_coop(model: FleetModel, topology: GraphTopology,
                weights: GameWeights, init_policies, evaluation="model_based",
                eps1: float = 1e-6, eps2: float = 1e-6, max_outer: int = 200,
                max_inner: int = 200, probe_seed: int = 7) -> PIResult:
    """Nested policy iteration for the cooperative game, all agents at once.

    init_policies: per-agent control gains K_i (p x n).  The inner loop
    improves the disturbance gains, the outer loop the control gains.
    """
    if weights.mode != COOPERATIVE:
        raise DimensionMismatch("run_pi_coop requires cooperative weights")
    N = model.n_agents
    K = [np.atleast_2d(np.asarray(k, dtype=float)) for k in init_policies]
    F = [np.zeros((model.q, model.n)) for _ in range(N)]
    _check_admissible(model, topology, K)
    probes = _probe_states(model, topology, seed=probe_seed)
    orders = [tuple(topology.neighbors(i)) for i in range(1, N + 1)]
    kernels = [None] * N
    history = []
    converged = False
    outer = 0

    def evaluate():
        if evaluation == "model_based":
            out = []
            for i in range(1, N + 1):
                P = lyapunov_policy_value_coop(model, topology, weights, i,
                                               K[i - 1], F[i - 1])
                out.append(qkernel_from_value(model, topology, weights, i, P,
                                              orders[i - 1]))
            return out
        datasets = collect_evaluation_data_coop(
            model, topology, weights, list(zip(K, F)), evaluation)
        return [policy_eval_lsq(ds, COOPERATIVE,
                                evaluation.residual_threshold)
                for ds in datasets]

    for outer in range(1, max_outer + 1):
        inner_converged = False
        for inner in range(1, max_inner + 1):
            kernels = evaluate()
            F_new = []
            for i in range(1, N + 1):
                S = kernels[i - 1]
                _require_curvature(S.block("w_self", "w_self"), "S_ww",
                                   negative=True)
                Fn = -_solve_block(
                    S.block("w_self", "w_self"),
                    S.block("w_self", "delta")
                    + S.block("w_self", "u_self") @ K[i - 1], "S_ww")
                F_new.append(Fn)
            inner_norm = max(np.linalg.norm(F_new[i] - F[i]) for i in range(N))
            history.append(PIRecord(
                iter_outer=outer, iter_inner=inner, inner_norm=inner_norm,
                outer_norm=None,
                probe_values=[[kernels[i].value(z) for z in probes[i]]
                              for i in range(N)]))
            F = F_new
            if inner_norm <= eps1:
                inner_converged = True
                break
        if not inner_converged:
            raise MaxIterations(f"inner loop hit max_inner={max_inner}")
        kernels = evaluate()
        K_new = []
        for i in range(1, N + 1):
            S = kernels[i - 1]
            _require_curvature(S.block("u_self", "u_self"), "S_uu",
                               negative=False)
            Kn = -_solve_block(
                S.block("u_self", "u_self"),
                S.block("u_self", "delta")
                + S.block("u_self", "w_self") @ F[i - 1], "S_uu")
            K_new.append(Kn)
        outer_norm = max(np.linalg.norm(K_new[i] - K[i]) for i in range(N))
        history[-1].outer_norm = outer_norm
        K = K_new
        if outer_norm <= eps2:
            converged = True
            break
    if not converged:
        raise MaxIterations(f"outer loop hit max_outer={max_outer}")
    kernels = evaluate()
    return PIResult(kernels=kernels, gains=list(zip(K, F)),
                    adversary_gains=[({}, {}) for _ in range(N)],
                    history=history, converged=converged,
                    outer_iterations=outer)


def run_pi_noncoop(model: FleetModel, topology: GraphTopology,
                   weights: GameWeights, init_policies,
                   evaluation="model_based", eps1: float = 1e-6,
                   eps2: float = 1e-6, max_outer: int = 200,
                   max_inner: int = 200, probe_seed: int = 7) -> PIResult:
    """Nested policy iteration for the non-cooperative game.

    The inner loop maximizes jointly over (u_-i, w_i, w_-i) treated as
    adversarial feedback on the local error; the outer loop updates u_i.
    """
    if weights.mode != NONCOOPERATIVE:
        raise DimensionMismatch("run_pi_noncoop requires non-cooperative weights")
    N = model.n_agents
    K = [np.atleast_2d(np.asarray(k, dtype=float)) for k in init_policies]
    F = [np.zeros((model.q, model.n)) for _ in range(N)]
    orders = [tuple(topology.neighbors(i)) for i in range(1, N + 1)]
    U_adv = [{j: np.zeros((model.p, model.n)) for j in orders[i]}
             for i in range(N)]
    W_adv = [{j: np.zeros((model.q, model.n)) for j in orders[i]}
             for i in range(N)]
    _check_admissible(model, topology, K)
    probes = _probe_states(model, topology, seed=probe_seed)
    history = []
    converged = False
    outer = 0
    kernels = [None] * N

    def evaluate():
        out = []
        for i in range(1, N + 1):
            if evaluation == "model_based":
                P = lyapunov_policy_value_noncoop(
                    model, topology, weights, i, K[i - 1], U_adv[i - 1],
                    F[i - 1], W_adv[i - 1])
                out.append(qkernel_from_value(model, topology, weights, i, P,
                                              orders[i - 1]))
            else:
                ds = collect_evaluation_data_noncoop(
                    model, topology, weights, i, K[i - 1], U_adv[i - 1],
                    F[i - 1], W_adv[i - 1], evaluation)
                out.append(policy_eval_lsq(ds, NONCOOPERATIVE,
                                           evaluation.residual_threshold))
        return out

    def adversary_update(S, i):
        """argmax over each adversarial block from the current iterate."""
        bm = S.block_map
        d_sl = bm["delta"]
        # current feedback of every block on delta
        current = {"u_self": K[i - 1], "w_self": F[i - 1]}
        for j in orders[i - 1]:
            current[("u", j)] = U_adv[i - 1][j]
            current[("w", j)] = W_adv[i - 1][j]

        def z_gain_excluding(block):
            rows = np.zeros((S.m, S.n))
            rows[d_sl] = np.eye(S.n)
            for name, G in current.items():
                if name == block:
                    continue
                rows[bm[name]] = G
            return rows

        new_F = None
        new_U = {}
        new_W = {}
        for block in [("u", j) for j in orders[i - 1]] + ["w_self"] \
                + [("w", j) for j in orders[i - 1]]:
            Sbb = S.block(block, block)
            _require_curvature(Sbb, f"S[{block}]", negative=True)
            rhs = S.S[bm[block], :] @ z_gain_excluding(block)
            G = -_solve_block(Sbb, rhs, f"S[{block}]")
            if block == "w_self":
                new_F = G
            elif block[0] == "u":
                new_U[block[1]] = G
            else:
                new_W[block[1]] = G
        return new_U, new_F, new_W

    for outer in range(1, max_outer + 1):
        inner_converged = False
        for inner in range(1, max_inner + 1):
            kernels = evaluate()
            inner_norm = 0.0
            updates = []
            for i in range(1, N + 1):
                new_U, new_F, new_W = adversary_update(kernels[i - 1], i)
                delta_norm = np.linalg.norm(new_F - F[i - 1])
                for j in orders[i - 1]:
                    delta_norm = max(delta_norm,
                                     np.linalg.norm(new_U[j] - U_adv[i - 1][j]),
                                     np.linalg.norm(new_W[j] - W_adv[i - 1][j]))
                inner_norm = max(inner_norm, delta_norm)
                updates.append((new_U, new_F, new_W))
            history.append(PIRecord(
                iter_outer=outer, iter_inner=inner, inner_norm=inner_norm,
                outer_norm=None,
                probe_values=[[kernels[i].value(z) for z in probes[i]]
                              for i in range(N)]))
            for i in range(N):
                U_adv[i], F[i], W_adv[i] = updates[i]
            if inner_norm <= eps1:
                inner_converged = True
                break
        if not inner_converged:
            raise MaxIterations(f"inner loop hit max_inner={max_inner}")
        kernels = evaluate()
        K_new = []
        for i in range(1, N + 1):
            S = kernels[i - 1]
            _require_curvature(S.block("u_self", "u_self"), "S_uu",
                               negative=False)
            bm = S.block_map
            rows = np.zeros((S.m, S.n))
            rows[bm["delta"]] = np.eye(S.n)
            rows[bm["w_self"]] = F[i - 1]
            for j in orders[i - 1]:
                rows[bm[("u", j)]] = U_adv[i - 1][j]
                rows[bm[("w", j)]] = W_adv[i - 1][j]
            rhs = S.S[bm["u_self"], :] @ rows
            K_new.append(-_solve_block(S.block("u_self", "u_self"), rhs,
                                       "S_uu"))
        outer_norm = max(np.linalg.norm(K_new[i] - K[i]) for i in range(N))
        history[-1].outer_norm = outer_norm
        K = K_new
        if outer_norm <= eps2:
            converged = True
            break
    if not converged:
        raise MaxIterations(f"outer loop hit max_outer={max_outer}")
    kernels = evaluate()
    return PIResult(kernels=kernels, gains=list(zip(K, F)),
                    adversary_gains=list(zip(U_adv, W_adv)),
                    history=history, converged=converged,
                    outer_iterations=outer)


def bellman_residual(S: QKernel, weights: GameWeights, z, z_next) -> float:
    """|z'Sz - r(z) - z''Sz'| for on-policy transition checking."""
    bm = S.block_map
    u_nb = {j: z[bm[("u", j)]] for j in S.neighbor_order}
    w_nb = {j: z[bm[("w", j)]] for j in S.neighbor_order}
    r = stage_cost(weights, S.agent, z[bm["delta"]], z[bm["u_self"]], u_nb,
                   z[bm["w_self"]], w_nb)
    return abs(S.value(z) - r - S.value(z_next))
