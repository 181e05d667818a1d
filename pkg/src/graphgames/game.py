"""Stage costs, value kernels, disturbance-attenuation and saddle checks.

Two game modes share one weight container:

cooperative      r_i = d'Qd + u_i'R_ii u_i + sum_j u_j'R_ij u_j
                       - b^2 w_i'T_ii w_i - b^2 sum_j w_j'T_ij w_j
non-cooperative  r_i = d'Qd + u_i'R_ii u_i - b^2 sum_j u_j'R_ij u_j
                       - b^2 w_i'T_ii w_i - b^2 sum_j w_j'T_ij w_j

with b the disturbance-attenuation level for the active mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dynamics import FleetModel, TrajectoryLog
from .errors import (
    MissingNeighborInput,
    SingularWeight,
    TailTooLarge,
    WrongMode,
)
from .graph import GraphTopology

COOPERATIVE = "cooperative"
NONCOOPERATIVE = "noncooperative"

_SYM_TOL = 1e-10


def _as_sym_matrix(M, name, positive_definite, allow_semidefinite=False):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=_SYM_TOL):
        raise ValueError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(M)
    if positive_definite and eigs[0] <= 0.0:
        raise ValueError(f"{name} must be positive definite")
    if allow_semidefinite and eigs[0] < -_SYM_TOL:
        raise ValueError(f"{name} must be positive semidefinite")
    return M


@dataclass(frozen=True)
class GameWeights:
    """Per-agent and per-neighbor-pair cost weights plus attenuation level."""

    mode: str
    Q: tuple                 # per-agent (n, n), positive definite
    R_self: tuple            # per-agent (p, p), positive definite
    T_self: tuple            # per-agent (q, q), positive definite
    R_cross: dict            # (i, j) -> (p, p), j in N_i
    T_cross: dict            # (i, j) -> (q, q), j in N_i
    attenuation: float

    def __post_init__(self):
        if self.mode not in (COOPERATIVE, NONCOOPERATIVE):
            raise ValueError(f"unknown game mode {self.mode!r}")
        if self.attenuation <= 0.0:
            raise ValueError("attenuation level must be positive")
        cross_pd = self.mode == NONCOOPERATIVE
        object.__setattr__(self, "Q", tuple(
            _as_sym_matrix(m, f"Q_{i+1}{i+1}", True)
            for i, m in enumerate(self.Q)))
        object.__setattr__(self, "R_self", tuple(
            _as_sym_matrix(m, f"R_{i+1}{i+1}", True)
            for i, m in enumerate(self.R_self)))
        object.__setattr__(self, "T_self", tuple(
            _as_sym_matrix(m, f"T_{i+1}{i+1}", True)
            for i, m in enumerate(self.T_self)))
        object.__setattr__(self, "R_cross", {
            k: _as_sym_matrix(m, f"R_{k[0]}{k[1]}", cross_pd,
                              allow_semidefinite=not cross_pd)
            for k, m in self.R_cross.items()})
        object.__setattr__(self, "T_cross", {
            k: _as_sym_matrix(m, f"T_{k[0]}{k[1]}", cross_pd,
                              allow_semidefinite=not cross_pd)
            for k, m in self.T_cross.items()})

    def neighbor_weights(self, i: int):
        """Sorted neighbor ids that carry cross weights for agent i."""
        return sorted(j for (a, j) in self.R_cross if a == i)


@dataclass(frozen=True)
class ValueKernel:
    """Quadratic value V_i(delta) = delta' P delta."""

    agent: int
    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if not np.allclose(P, P.T, atol=_SYM_TOL):
            raise ValueError("value kernel must be symmetric")
        object.__setattr__(self, "P", 0.5 * (P + P.T))

    def value(self, delta) -> float:
        delta = np.asarray(delta, dtype=float)
        return float(delta @ self.P @ delta)

    def gradient(self, delta) -> np.ndarray:
        return 2.0 * (self.P @ np.asarray(delta, dtype=float))


def _check_neighbor_keys(weights, i, u_neighbors, w_neighbors):
    expected = set(weights.neighbor_weights(i))
    if set(u_neighbors) != expected or set(w_neighbors) != expected:
        raise MissingNeighborInput(
            f"neighbor inputs for agent {i} must be keyed by {sorted(expected)}")


def stage_cost_coop(weights: GameWeights, i: int, delta_i, u_i, u_neighbors,
                    w_i, w_neighbors) -> float:
    if weights.mode != COOPERATIVE:
        raise WrongMode("cooperative stage cost requested on non-cooperative weights")
    _check_neighbor_keys(weights, i, u_neighbors, w_neighbors)
    d = np.asarray(delta_i, dtype=float)
    u = np.atleast_1d(np.asarray(u_i, dtype=float))
    w = np.atleast_1d(np.asarray(w_i, dtype=float))
    b2 = weights.attenuation ** 2
    cost = d @ weights.Q[i - 1] @ d + u @ weights.R_self[i - 1] @ u
    cost -= b2 * (w @ weights.T_self[i - 1] @ w)
    for j in weights.neighbor_weights(i):
        uj = np.atleast_1d(np.asarray(u_neighbors[j], dtype=float))
        wj = np.atleast_1d(np.asarray(w_neighbors[j], dtype=float))
        cost += uj @ weights.R_cross[(i, j)] @ uj
        cost -= b2 * (wj @ weights.T_cross[(i, j)] @ wj)
    return float(cost)


def stage_cost_noncoop(weights: GameWeights, i: int, delta_i, u_i, u_neighbors,
                       w_i, w_neighbors) -> float:
    if weights.mode != NONCOOPERATIVE:
        raise WrongMode("non-cooperative stage cost requested on cooperative weights")
    _check_neighbor_keys(weights, i, u_neighbors, w_neighbors)
    d = np.asarray(delta_i, dtype=float)
    u = np.atleast_1d(np.asarray(u_i, dtype=float))
    w = np.atleast_1d(np.asarray(w_i, dtype=float))
    b2 = weights.attenuation ** 2
    cost = d @ weights.Q[i - 1] @ d + u @ weights.R_self[i - 1] @ u
    cost -= b2 * (w @ weights.T_self[i - 1] @ w)
    for j in weights.neighbor_weights(i):
        uj = np.atleast_1d(np.asarray(u_neighbors[j], dtype=float))
        wj = np.atleast_1d(np.asarray(w_neighbors[j], dtype=float))
        cost -= b2 * (uj @ weights.R_cross[(i, j)] @ uj)
        cost -= b2 * (wj @ weights.T_cross[(i, j)] @ wj)
    return float(cost)


def stage_cost(weights: GameWeights, i: int, delta_i, u_i, u_neighbors,
               w_i, w_neighbors) -> float:
    """Dispatch on the active game mode."""
    fn = stage_cost_coop if weights.mode == COOPERATIVE else stage_cost_noncoop
    return fn(weights, i, delta_i, u_i, u_neighbors, w_i, w_neighbors)


def stage_cost_kernel(weights: GameWeights, i: int, neighbor_order) -> np.ndarray:
    """Block-diagonal kernel L_i with r_i(z) = z' L_i z on the stacked vector."""
    b2 = weights.attenuation ** 2
    blocks = [weights.Q[i - 1], weights.R_self[i - 1]]
    sign_u = 1.0 if weights.mode == COOPERATIVE else -b2
    blocks += [sign_u * weights.R_cross[(i, j)] for j in neighbor_order]
    blocks.append(-b2 * weights.T_self[i - 1])
    blocks += [-b2 * weights.T_cross[(i, j)] for j in neighbor_order]
    return scipy.linalg.block_diag(*blocks)


@dataclass(frozen=True)
class CostToGo:
    total: float
    tail: float      # last-quarter partial sum, truncation estimate


def cost_to_go(log: TrajectoryLog, weights: GameWeights, i: int) -> CostToGo:
    """Recompute the summed stage cost of agent i from a trajectory log."""
    neighbors = weights.neighbor_weights(i)
    costs = np.empty(log.horizon)
    for k in range(log.horizon):
        costs[k] = stage_cost(
            weights, i, log.delta[k, i - 1], log.u[k, i - 1],
            {j: log.u[k, j - 1] for j in neighbors},
            log.w[k, i - 1],
            {j: log.w[k, j - 1] for j in neighbors})
    tail_start = 3 * log.horizon // 4
    return CostToGo(total=float(costs.sum()),
                    tail=float(costs[tail_start:].sum()))


def _solve_spd(M, rhs, name):
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularWeight(f"{name} is singular") from exc


def policies_from_value_coop(model: FleetModel, topology: GraphTopology,
                             weights: GameWeights, i: int, P: ValueKernel,
                             delta_next):
    """Stationary (u_i, w_i) with the value gradient taken at delta_{k+1}."""
    if weights.mode != COOPERATIVE:
        raise WrongMode("cooperative policies requested on non-cooperative weights")
    grad = P.gradient(delta_next)
    c = topology.coupling(i)
    b2 = weights.attenuation ** 2
    u = 0.5 * c * _solve_spd(weights.R_self[i - 1], model.B_of(i).T @ grad,
                             f"R_{i}{i}")
    w = -0.5 * (c / b2) * _solve_spd(weights.T_self[i - 1],
                                     model.E_of(i).T @ grad, f"T_{i}{i}")
    return u, w


def policies_from_value_noncoop(model: FleetModel, topology: GraphTopology,
                                weights: GameWeights, i: int, P: ValueKernel,
                                delta_next):
    """Own minmax pair plus the worst-case neighbor policies."""
    if weights.mode != NONCOOPERATIVE:
        raise WrongMode("non-cooperative policies requested on cooperative weights")
    grad = P.gradient(delta_next)
    c = topology.coupling(i)
    b2 = weights.attenuation ** 2
    u = 0.5 * c * _solve_spd(weights.R_self[i - 1], model.B_of(i).T @ grad,
                             f"R_{i}{i}")
    w = -0.5 * (c / b2) * _solve_spd(weights.T_self[i - 1],
                                     model.E_of(i).T @ grad, f"T_{i}{i}")
    u_adv, w_adv = {}, {}
    for j in weights.neighbor_weights(i):
        a = topology.adjacency[i - 1, j - 1]
        u_adv[j] = 0.5 * (a / b2) * _solve_spd(
            weights.R_cross[(i, j)], model.B_of(j).T @ grad, f"R_{i}{j}")
        w_adv[j] = 0.5 * (a / b2) * _solve_spd(
            weights.T_cross[(i, j)], model.E_of(j).T @ grad, f"T_{i}{j}")
    return u, u_adv, w, w_adv


def stationary_policies_fixed_point(model: FleetModel, topology: GraphTopology,
                                    weights: GameWeights, i: int,
                                    P: ValueKernel, delta_i):
    """Resolve the implicit stationary policies for an isolated agent.

    Solves (u, w) simultaneously with delta_next = A d - c B u - c E w.
    Only valid when agent i has no neighbors.
    """
    if topology.neighbors(i):
        raise WrongMode("fixed-point solve only defined for isolated agents")
    delta_i = np.asarray(delta_i, dtype=float)
    c = topology.coupling(i)
    b2 = weights.attenuation ** 2
    B, E = model.B_of(i), model.E_of(i)
    R, T = weights.R_self[i - 1], weights.T_self[i - 1]
    Pm = P.P
    RiB = _solve_spd(R, B.T, f"R_{i}{i}")      # R^-1 B'
    TiE = _solve_spd(T, E.T, f"T_{i}{i}")      # T^-1 E'
    p, q = model.p, model.q
    top = np.hstack([np.eye(p) + c * c * RiB @ Pm @ B,
                     c * c * RiB @ Pm @ E])
    bot = np.hstack([-(c * c / b2) * TiE @ Pm @ B,
                     np.eye(q) - (c * c / b2) * TiE @ Pm @ E])
    rhs = np.concatenate([c * RiB @ Pm @ model.A @ delta_i,
                          -(c / b2) * TiE @ Pm @ model.A @ delta_i])
    sol = np.linalg.solve(np.vstack([top, bot]), rhs)
    u, w = sol[:p], sol[p:]
    delta_next = model.A @ delta_i - c * (B @ u) - c * (E @ w)
    return u, w, delta_next


@dataclass(frozen=True)
class AttenuationReport:
    agent: int
    condition: str
    margin: float
    passed: bool


def _weighted_gram(C, W, name):
    """W^{-1/2} (C'C) W^{-1/2}, the input-channel energy weighted by W."""
    gram = C.T @ C
    vals, vecs = np.linalg.eigh(W)
    if vals[0] <= 0.0:
        raise SingularWeight(f"{name} is not positive definite")
    W_inv_sqrt = vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T
    return W_inv_sqrt @ gram @ W_inv_sqrt


def check_attenuation_coop(model: FleetModel, topology: GraphTopology,
                           weights: GameWeights):
    """Pairwise channel-energy condition for the cooperative stability lemma.

    Requires the weighted control energy of each agent to dominate its
    weighted disturbance energy scaled by 1/beta^2, for every cost pair.
    Control and disturbance dimensions must agree for the comparison.
    """
    if weights.mode != COOPERATIVE:
        raise WrongMode("cooperative attenuation check on non-cooperative weights")
    if model.p != model.q:
        raise WrongMode("attenuation comparison requires p == q")
    b2 = weights.attenuation ** 2
    reports = []
    for l in range(1, model.n_agents + 1):
        B, E = model.B_of(l), model.E_of(l)
        for j in weights.neighbor_weights(l) + [l]:
            R = weights.R_self[l - 1] if j == l else weights.R_cross[(l, j)]
            T = weights.T_self[l - 1] if j == l else weights.T_cross[(l, j)]
            diff = _weighted_gram(B, R, f"R_{l}{j}") \
                - (1.0 / b2) * _weighted_gram(E, T, f"T_{l}{j}")
            margin = float(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0])
            reports.append(AttenuationReport(
                agent=l, condition=f"l={l},j={j}", margin=margin,
                passed=margin >= 0.0))
    return reports


def check_attenuation_noncoop(model: FleetModel, topology: GraphTopology,
                              weights: GameWeights):
    """Per-agent channel-energy condition for the non-cooperative lemma.

    The agent's own weighted control energy must dominate the adversarial
    channels: its own disturbance plus all neighbor control and disturbance
    channels, each scaled by 1/beta^2.
    """
    if weights.mode != NONCOOPERATIVE:
        raise WrongMode("non-cooperative attenuation check on cooperative weights")
    if model.p != model.q:
        raise WrongMode("attenuation comparison requires p == q")
    b2 = weights.attenuation ** 2
    reports = []
    for i in range(1, model.n_agents + 1):
        c = topology.coupling(i)
        B, E = model.B_of(i), model.E_of(i)
        lhs = c * c * _weighted_gram(B, weights.R_self[i - 1], f"R_{i}{i}")
        rhs = (c * c / b2) * _weighted_gram(E, weights.T_self[i - 1],
                                            f"T_{i}{i}")
        for j in weights.neighbor_weights(i):
            a = topology.adjacency[i - 1, j - 1]
            rhs = rhs + (a * a / b2) * (
                _weighted_gram(model.B_of(j), weights.R_cross[(i, j)],
                               f"R_{i}{j}")
                + _weighted_gram(model.E_of(j), weights.T_cross[(i, j)],
                                 f"T_{i}{j}"))
        diff = lhs - rhs
        margin = float(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0])
        reports.append(AttenuationReport(
            agent=i, condition=f"i={i}", margin=margin, passed=margin >= 0.0))
    return reports


def closed_loop_error_matrix(model: FleetModel, topology: GraphTopology,
                             gains) -> np.ndarray:
    """Global matrix over the stacked tracking errors under linear policies.

    gains: per-agent (K_i, F_i) with u_i = K_i d_i, w_i = F_i d_i (F may be None).
    """
    N, n = model.n_agents, model.n
    Acl = np.zeros((N * n, N * n))
    feed = []
    for i in range(1, N + 1):
        K, F = gains[i - 1]
        fb = model.B_of(i) @ np.atleast_2d(K)
        if F is not None:
            fb = fb + model.E_of(i) @ np.atleast_2d(F)
        feed.append(fb)
    for i in range(1, N + 1):
        c = topology.coupling(i)
        Acl[(i - 1) * n:i * n, (i - 1) * n:i * n] = model.A - c * feed[i - 1]
        for j in topology.neighbors(i):
            a = topology.adjacency[i - 1, j - 1]
            Acl[(i - 1) * n:i * n, (j - 1) * n:j * n] += a * feed[j - 1]
    return Acl


def rollout_error_dynamics(model: FleetModel, topology: GraphTopology, gains,
                           delta0, horizon: int):
    """Iterate the stacked error recursion under linear policies.

    Returns (delta, u, w) arrays of shapes (K+1, N, n), (K, N, p), (K, N, q).
    """
    N, n, p, q = model.n_agents, model.n, model.p, model.q
    Acl = closed_loop_error_matrix(model, topology, gains)
    delta = np.zeros((horizon + 1, N, n))
    u = np.zeros((horizon, N, p))
    w = np.zeros((horizon, N, q))
    vec = np.concatenate([np.asarray(d, dtype=float) for d in delta0])
    delta[0] = vec.reshape(N, n)
    for k in range(horizon):
        for i in range(N):
            K, F = gains[i]
            u[k, i] = np.atleast_2d(K) @ delta[k, i]
            if F is not None:
                w[k, i] = np.atleast_2d(F) @ delta[k, i]
        vec = Acl @ vec
        delta[k + 1] = vec.reshape(N, n)
    return delta, u, w


def _trajectory_cost(weights, i, delta, u, w):
    neighbors = weights.neighbor_weights(i)
    total = 0.0
    for k in range(u.shape[0]):
        total += stage_cost(weights, i, delta[k, i - 1], u[k, i - 1],
                            {j: u[k, j - 1] for j in neighbors},
                            w[k, i - 1],
                            {j: w[k, j - 1] for j in neighbors})
    return total


@dataclass(frozen=True)
class SaddleGap:
    agent: int
    gap_u: float   # min over control perturbations of J_pert - J_opt (>= -tol)
    gap_w: float   # max over disturbance perturbations of the same (<= +tol)


def saddle_gap(model: FleetModel, topology: GraphTopology,
               weights: GameWeights, gains, perturbation_scale: float,
               samples: int, horizon: int, seed: int, delta0):
    """Sampled saddle-point verification at converged cooperative policies."""
    if weights.mode != COOPERATIVE:
        raise WrongMode("saddle gap is defined for the cooperative game")
    rng = np.random.default_rng(seed)
    delta, u, w = rollout_error_dynamics(model, topology, gains, delta0, horizon)
    base = [_trajectory_cost(weights, i, delta, u, w)
            for i in range(1, model.n_agents + 1)]
    out = []
    for i in range(1, model.n_agents + 1):
        K_i, F_i = gains[i - 1]
        gap_u = np.inf if perturbation_scale > 0.0 else 0.0
        gap_w = -np.inf if perturbation_scale > 0.0 else 0.0
        for _ in range(samples):
            if perturbation_scale == 0.0:
                break
            dK = perturbation_scale * rng.standard_normal(np.atleast_2d(K_i).shape)
            pert = list(gains)
            pert[i - 1] = (np.atleast_2d(K_i) + dK, F_i)
            d2, u2, w2 = rollout_error_dynamics(model, topology, pert, delta0,
                                                horizon)
            gap_u = min(gap_u, _trajectory_cost(weights, i, d2, u2, w2) - base[i - 1])
            dF = perturbation_scale * rng.standard_normal(np.atleast_2d(F_i).shape)
            pert = list(gains)
            pert[i - 1] = (K_i, np.atleast_2d(F_i) + dF)
            d2, u2, w2 = rollout_error_dynamics(model, topology, pert, delta0,
                                                horizon)
            gap_w = max(gap_w, _trajectory_cost(weights, i, d2, u2, w2) - base[i - 1])
        out.append(SaddleGap(agent=i, gap_u=float(gap_u), gap_w=float(gap_w)))
    return out


@dataclass(frozen=True)
class L2Report:
    agent: int
    passed: bool
    slack: float
    lhs: float
    rhs: float
    tail_fraction: float


def l2_gain_check(log: TrajectoryLog, weights: GameWeights, V0,
                  max_tail_fraction: float = 0.01):
    """Disturbance-to-performance gain inequality along a logged trajectory."""
    b2 = weights.attenuation ** 2
    reports = []
    for i in range(1, log.n_agents + 1):
        neighbors = weights.neighbor_weights(i)
        lhs_terms = np.zeros(log.horizon)
        rhs_terms = np.zeros(log.horizon)
        for k in range(log.horizon):
            d = log.delta[k, i - 1]
            u = log.u[k, i - 1]
            wi = log.w[k, i - 1]
            lhs = d @ weights.Q[i - 1] @ d + u @ weights.R_self[i - 1] @ u
            rhs = b2 * (wi @ weights.T_self[i - 1] @ wi)
            for j in neighbors:
                uj, wj = log.u[k, j - 1], log.w[k, j - 1]
                if weights.mode == COOPERATIVE:
                    lhs += uj @ weights.R_cross[(i, j)] @ uj
                else:
                    rhs += b2 * (uj @ weights.R_cross[(i, j)] @ uj)
                rhs += b2 * (wj @ weights.T_cross[(i, j)] @ wj)
            lhs_terms[k] = lhs
            rhs_terms[k] = rhs
        tail_start = 3 * log.horizon // 4
        total_abs = np.abs(lhs_terms).sum() + np.abs(rhs_terms).sum()
        tail_abs = (np.abs(lhs_terms[tail_start:]).sum()
                    + np.abs(rhs_terms[tail_start:]).sum())
        tail_fraction = tail_abs / total_abs if total_abs > 0.0 else 0.0
        if tail_fraction > max_tail_fraction:
            raise TailTooLarge(
                f"agent {i}: tail fraction {tail_fraction:.3f} exceeds "
                f"{max_tail_fraction}; horizon too short")
        lhs_total = float(lhs_terms.sum())
        rhs_total = float(V0[i - 1] + rhs_terms.sum())
        slack = rhs_total - lhs_total
        reports.append(L2Report(agent=i, passed=slack >= 0.0, slack=slack,
                                lhs=lhs_total, rhs=rhs_total,
                                tail_fraction=float(tail_fraction)))
    return reports
