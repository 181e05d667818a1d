"""Online actor-disturber-critic learning on the synchronization errors.

The critic holds a symmetric kernel W_c over the stacked vector z (same
layout as in pi_solver).  Actor and disturber are linear in the identity
basis phi(delta) = delta: u_hat = W_a' delta, w_hat = W_d' delta.  The
non-cooperative learner adds per-neighbor adversary networks that estimate
worst-case neighbor actions from the local error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import FleetModel, step_follower, step_leader
from .errors import (
    DimensionMismatch,
    MissingReference,
    NonFiniteWeights,
    NumericalDivergence,
    SingularSchurComplement,
    WrongCurvature,
)
from .game import COOPERATIVE, NONCOOPERATIVE, GameWeights, stage_cost, \
    stage_cost_kernel
from .graph import GraphTopology, neighborhood_error
from .pi_solver import (
    QKernel,
    SingularBlockMatrix,
    joint_stationary_policies_noncoop,
    kernel_dim,
    split_noncoop_gain,
    stationary_policy_maps_coop,
)

_DIVERGENCE_LIMIT = 1e8


@dataclass
class LearnerState:
    """Per-agent network weights and learning rates."""

    agent: int
    mode: str
    n: int
    p: int
    q: int
    neighbor_order: tuple
    W_c: np.ndarray                  # (m, m), symmetric
    W_a: np.ndarray                  # (n, p)
    W_d: np.ndarray                  # (n, q)
    W_a_adv: dict = field(default_factory=dict)   # j -> (n, p)
    W_d_adv: dict = field(default_factory=dict)   # j -> (n, q)
    alpha_c: float = 0.1
    alpha_a: float = 0.1
    alpha_d: float = 0.1
    alpha_a_adv: float = 0.05
    alpha_d_adv: float = 0.05
    skipped_policy_updates: int = 0

    def __post_init__(self):
        m = kernel_dim(self.n, self.p, self.q, len(self.neighbor_order))
        self.W_c = np.asarray(self.W_c, dtype=float)
        if self.W_c.shape != (m, m):
            raise DimensionMismatch(f"critic weights must be {m}x{m}")
        self.W_c = 0.5 * (self.W_c + self.W_c.T)
        self.W_a = np.asarray(self.W_a, dtype=float).reshape(self.n, self.p)
        self.W_d = np.asarray(self.W_d, dtype=float).reshape(self.n, self.q)
        if self.mode == NONCOOPERATIVE:
            for j in self.neighbor_order:
                self.W_a_adv.setdefault(j, np.zeros((self.n, self.p)))
                self.W_d_adv.setdefault(j, np.zeros((self.n, self.q)))
        for rate in (self.alpha_c, self.alpha_a, self.alpha_d,
                     self.alpha_a_adv, self.alpha_d_adv):
            if rate < 0.0:
                raise ValueError("learning rates must be nonnegative")
        self._check_finite()

    def _check_finite(self):
        arrays = [self.W_c, self.W_a, self.W_d]
        arrays += list(self.W_a_adv.values()) + list(self.W_d_adv.values())
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise NonFiniteWeights(f"agent {self.agent}: non-finite weights")

    @property
    def m(self) -> int:
        return self.W_c.shape[0]

    def control(self, delta) -> np.ndarray:
        return self.W_a.T @ np.asarray(delta, dtype=float)

    def disturbance(self, delta) -> np.ndarray:
        return self.W_d.T @ np.asarray(delta, dtype=float)

    def neighbor_control_estimate(self, j, delta) -> np.ndarray:
        return self.W_a_adv[j].T @ np.asarray(delta, dtype=float)

    def neighbor_disturbance_estimate(self, j, delta) -> np.ndarray:
        return self.W_d_adv[j].T @ np.asarray(delta, dtype=float)

    def critic_kernel(self) -> QKernel:
        return QKernel(agent=self.agent, S=self.W_c, mode=self.mode, n=self.n,
                       p=self.p, q=self.q, neighbor_order=self.neighbor_order)

    def max_norm(self) -> float:
        norms = [np.linalg.norm(self.W_c), np.linalg.norm(self.W_a),
                 np.linalg.norm(self.W_d)]
        norms += [np.linalg.norm(v) for v in self.W_a_adv.values()]
        norms += [np.linalg.norm(v) for v in self.W_d_adv.values()]
        return float(max(norms))


def initial_learner_state(weights: GameWeights, topology: GraphTopology,
                          model: FleetModel, i: int, alpha_c=0.1, alpha_a=0.1,
                          alpha_d=0.1, alpha_a_adv=0.05, alpha_d_adv=0.05,
                          critic_prior_safety: float = 0.9) -> LearnerState:
    """Critic initialized at the stage-cost kernel plus a value prior.

    The prior is zeta * P_lqr from the agent's decoupled disturbance-free
    regulator, with zeta capped so the disturbance curvature block stays
    negative definite (the S_uu / S_ww blocks must be nonsingular with the
    right signs from the first step).  critic_prior_safety scales the cap;
    0 disables the prior entirely.
    """
    import scipy.linalg

    from .dynamics import stacked_input_matrix

    order = tuple(topology.neighbors(i))
    W_c = stage_cost_kernel(weights, i, order)
    if critic_prior_safety > 0.0:
        c = topology.coupling(i)
        B = c * model.B_of(i)
        E = c * model.E_of(i)
        Q = weights.Q[i - 1]
        R = weights.R_self[i - 1]
        P_lqr = scipy.linalg.solve_discrete_are(model.A, B, Q, R)
        b2 = weights.attenuation ** 2
        # largest prior weight that keeps -b2 T + zeta E'PE negative definite
        gain = np.linalg.eigvalsh(
            np.linalg.solve(weights.T_self[i - 1], E.T @ P_lqr @ E))[-1]
        zeta = min(1.0, critic_prior_safety * b2 / gain) if gain > 0 else 1.0
        M = stacked_input_matrix(model, topology, i, order)
        W_c = W_c + M.T @ (zeta * P_lqr) @ M
    return LearnerState(
        agent=i, mode=weights.mode, n=model.n, p=model.p, q=model.q,
        neighbor_order=order, W_c=W_c,
        W_a=np.zeros((model.n, model.p)), W_d=np.zeros((model.n, model.q)),
        alpha_c=alpha_c, alpha_a=alpha_a, alpha_d=alpha_d,
        alpha_a_adv=alpha_a_adv, alpha_d_adv=alpha_d_adv)


def td_error(state: LearnerState, z_k, r_k, z_next) -> float:
    """e_c = r + z'next W_c z_next - z_k' W_c z_k."""
    z_k = np.asarray(z_k, dtype=float)
    z_next = np.asarray(z_next, dtype=float)
    if z_k.shape != (state.m,) or z_next.shape != (state.m,):
        raise DimensionMismatch("stacked vectors must have the kernel dimension")
    return float(r_k + z_next @ state.W_c @ z_next - z_k @ state.W_c @ z_k)


def critic_update(state: LearnerState, z_k, z_next, e_c) -> LearnerState:
    """Gradient step on the squared TD error, then symmetrize."""
    z_k = np.asarray(z_k, dtype=float)
    z_next = np.asarray(z_next, dtype=float)
    grad = np.outer(z_next, z_next) - np.outer(z_k, z_k)
    W = state.W_c - state.alpha_c * e_c * grad
    state.W_c = 0.5 * (W + W.T)
    state._check_finite()
    return state


def _policy_maps(state: LearnerState):
    """Stationarity maps of the current critic; failure pauses policy updates."""
    try:
        S = state.critic_kernel()
        if state.mode == COOPERATIVE:
            return stationary_policy_maps_coop(S)
        return joint_stationary_policies_noncoop(S)
    except (SingularBlockMatrix, WrongCurvature, np.linalg.LinAlgError) as exc:
        raise SingularSchurComplement(
            f"agent {state.agent}: critic kernel not invertible for policy "
            f"extraction ({exc})") from exc


def actor_target(state: LearnerState, delta, u_others, w_others) -> np.ndarray:
    """u^Q from the current critic (cooperative stationarity formula)."""
    maps = _policy_maps(state)
    u, _ = maps.targets(np.asarray(delta, dtype=float),
                        np.asarray(u_others, dtype=float),
                        np.asarray(w_others, dtype=float))
    return u


def disturber_target(state: LearnerState, delta, u_others, w_others) -> np.ndarray:
    """w^Q from the current critic (cooperative stationarity formula)."""
    maps = _policy_maps(state)
    _, w = maps.targets(np.asarray(delta, dtype=float),
                        np.asarray(u_others, dtype=float),
                        np.asarray(w_others, dtype=float))
    return w


def adversary_targets(state: LearnerState, delta):
    """(u, {u_ij}, w, {w_ij}) targets from the non-cooperative critic."""
    G = _policy_maps(state)
    S = state.critic_kernel()
    K, U_adv, F, W_adv = split_noncoop_gain(S, G)
    d = np.asarray(delta, dtype=float)
    return (K @ d, {j: U_adv[j] @ d for j in state.neighbor_order},
            F @ d, {j: W_adv[j] @ d for j in state.neighbor_order})


def _gradient_step(W, alpha, phi, target):
    out = np.atleast_1d(W.T @ phi)
    return W - alpha * np.outer(phi, out - np.atleast_1d(target))


def actor_update(state: LearnerState, delta, target) -> LearnerState:
    phi = np.asarray(delta, dtype=float)
    state.W_a = _gradient_step(state.W_a, state.alpha_a, phi, target)
    state._check_finite()
    return state


def disturber_update(state: LearnerState, delta, target) -> LearnerState:
    phi = np.asarray(delta, dtype=float)
    state.W_d = _gradient_step(state.W_d, state.alpha_d, phi, target)
    state._check_finite()
    return state


def adversary_update(state: LearnerState, delta, u_targets, w_targets) -> LearnerState:
    phi = np.asarray(delta, dtype=float)
    for j in state.neighbor_order:
        state.W_a_adv[j] = _gradient_step(state.W_a_adv[j], state.alpha_a_adv,
                                          phi, u_targets[j])
        state.W_d_adv[j] = _gradient_step(state.W_d_adv[j], state.alpha_d_adv,
                                          phi, w_targets[j])
    state._check_finite()
    return state


@dataclass
class OnlineResult:
    states: list                 # final per-agent LearnerState
    log: "object"                # TrajectoryLog of the learning rollout
    weight_history: list         # rows (step, agent, net, frobenius_norm)
    weight_snapshots: list       # per-agent dict net -> list of arrays per step
    td_errors: np.ndarray        # (K, N)
    regressor_bounds: list       # per-agent dict {eta_max, phi_max}
    skipped_policy_updates: list


def write_weight_history_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "agent", "net", "frobenius_norm"])
        for step, agent, net, norm in rows:
            writer.writerow([step, agent, net, repr(float(norm))])


def _record_weights(snapshots, history, step, states):
    for i, st in enumerate(states, start=1):
        nets = {"critic": st.W_c, "actor": st.W_a, "disturber": st.W_d}
        for j in st.neighbor_order:
            if st.mode == NONCOOPERATIVE:
                nets[f"adversary_u{j}"] = st.W_a_adv[j]
                nets[f"adversary_w{j}"] = st.W_d_adv[j]
        for net, W in nets.items():
            history.append((step, i, net, float(np.linalg.norm(W))))
            snapshots[i - 1].setdefault(net, []).append(W.copy())


def run_online(model: FleetModel, topology: GraphTopology,
               weights: GameWeights, mode: str, init, horizon: int,
               disturbance=None, probe=None, seed: int = 0,
               x_init=None, x0_init=None,
               actuate_learned_disturbance: bool = True) -> OnlineResult:
    """Synchronous online learning rollout on the real fleet.

    Per step every agent measures its error and the applied inputs, updates
    its critic, then its policy networks, and actuates the refreshed actor
    plus probing noise.  In non-cooperative mode the learning vector uses the
    adversary-network estimates of neighbor actions instead of measurements.
    """
    from .dynamics import TrajectoryLog

    if mode not in (COOPERATIVE, NONCOOPERATIVE) or mode != weights.mode:
        raise DimensionMismatch("mode must match the weight container")
    N, n, p, q = model.n_agents, model.n, model.p, model.q
    states = list(init)
    if len(states) != N:
        raise DimensionMismatch("need one learner state per agent")
    rng = np.random.default_rng(seed)
    if x_init is None:
        x_init = [rng.uniform(-1.0, 1.0, size=n) for _ in range(N)]
    if x0_init is None:
        x0_init = np.zeros(n)

    log = TrajectoryLog(
        horizon=horizon,
        x=np.zeros((horizon + 1, N, n)),
        x0=np.zeros((horizon + 1, n)),
        delta=np.zeros((horizon + 1, N, n)),
        u=np.zeros((horizon, N, p)),
        w=np.zeros((horizon, N, q)),
        stage_cost=np.zeros((horizon, N)),
    )
    log.x0[0] = np.asarray(x0_init, dtype=float)
    for i in range(N):
        log.x[0, i] = np.asarray(x_init[i], dtype=float)

    probes = [probe.signal(horizon, p, agent_offset=i) if probe is not None
              else np.zeros((horizon, p)) for i in range(N)]
    external = [np.zeros((horizon, q)) for _ in range(N)]
    if disturbance is not None:
        for i in range(N):
            if disturbance[i] is not None:
                external[i] = disturbance[i].signal(horizon)

    history = []
    snapshots = [dict() for _ in range(N)]
    td = np.zeros((horizon, N))
    bounds = [{"eta_max": 0.0, "phi_max": 0.0} for _ in range(N)]
    orders = [tuple(topology.neighbors(i)) for i in range(1, N + 1)]
    _record_weights(snapshots, history, 0, states)

    for k in range(horizon):
        fleet = list(log.x[k])
        for i in range(1, N + 1):
            log.delta[k, i - 1] = neighborhood_error(topology, fleet,
                                                     log.x0[k], i)
        # actuate current networks plus probing; learned w is the training
        # disturbance unless disabled
        for i in range(N):
            d = log.delta[k, i]
            log.u[k, i] = states[i].control(d) + probes[i][k]
            w = external[i][k].copy()
            if actuate_learned_disturbance:
                w = w + states[i].disturbance(d)
            log.w[k, i] = w
        for i in range(1, N + 1):
            nbrs = orders[i - 1]
            log.stage_cost[k, i - 1] = stage_cost(
                weights, i, log.delta[k, i - 1], log.u[k, i - 1],
                {j: log.u[k, j - 1] for j in nbrs}, log.w[k, i - 1],
                {j: log.w[k, j - 1] for j in nbrs})
        log.x0[k + 1] = step_leader(model, log.x0[k])
        for i in range(1, N + 1):
            log.x[k + 1, i - 1] = step_follower(
                model, i, log.x[k, i - 1], log.u[k, i - 1], log.w[k, i - 1])
        if not np.all(np.isfinite(log.x[k + 1])):
            raise NumericalDivergence(f"non-finite state at step {k + 1}",
                                      step=k + 1)
        fleet_next = list(log.x[k + 1])
        for i in range(1, N + 1):
            log.delta[k + 1, i - 1] = neighborhood_error(
                topology, fleet_next, log.x0[k + 1], i)

        # synchronous learning pass, measurements frozen at this step
        for i in range(1, N + 1):
            st = states[i - 1]
            nbrs = orders[i - 1]
            d_k = log.delta[k, i - 1]
            d_n = log.delta[k + 1, i - 1]
            if mode == COOPERATIVE:
                z_k = _stack(d_k, log.u[k, i - 1],
                             [log.u[k, j - 1] for j in nbrs],
                             log.w[k, i - 1],
                             [log.w[k, j - 1] for j in nbrs])
                z_n = _stack(d_n, st.control(d_n),
                             [states[j - 1].control(log.delta[k + 1, j - 1])
                              for j in nbrs],
                             st.disturbance(d_n),
                             [states[j - 1].disturbance(log.delta[k + 1, j - 1])
                              for j in nbrs])
                r_k = log.stage_cost[k, i - 1]
            else:
                u_est = {j: st.neighbor_control_estimate(j, d_k) for j in nbrs}
                w_est = {j: st.neighbor_disturbance_estimate(j, d_k)
                         for j in nbrs}
                z_k = _stack(d_k, log.u[k, i - 1], [u_est[j] for j in nbrs],
                             log.w[k, i - 1], [w_est[j] for j in nbrs])
                z_n = _stack(d_n, st.control(d_n),
                             [st.neighbor_control_estimate(j, d_n)
                              for j in nbrs],
                             st.disturbance(d_n),
                             [st.neighbor_disturbance_estimate(j, d_n)
                              for j in nbrs])
                r_k = stage_cost(weights, i, d_k, log.u[k, i - 1], u_est,
                                 log.w[k, i - 1], w_est)
            e_c = td_error(st, z_k, r_k, z_n)
            td[k, i - 1] = e_c
            critic_update(st, z_k, z_n, e_c)
            eta = float(np.linalg.norm(np.outer(z_n, z_n) - np.outer(z_k, z_k)))
            bounds[i - 1]["eta_max"] = max(bounds[i - 1]["eta_max"], eta)
            bounds[i - 1]["phi_max"] = max(bounds[i - 1]["phi_max"],
                                           float(np.linalg.norm(d_k)))
            try:
                if mode == COOPERATIVE:
                    u_others = np.concatenate(
                        [log.u[k, j - 1] for j in nbrs]) if nbrs else np.zeros(0)
                    w_others = np.concatenate(
                        [log.w[k, j - 1] for j in nbrs]) if nbrs else np.zeros(0)
                    maps = _policy_maps(st)
                    u_t, w_t = maps.targets(d_k, u_others, w_others)
                    actor_update(st, d_k, u_t)
                    disturber_update(st, d_k, w_t)
                else:
                    u_t, u_adv_t, w_t, w_adv_t = adversary_targets(st, d_k)
                    actor_update(st, d_k, u_t)
                    disturber_update(st, d_k, w_t)
                    adversary_update(st, d_k, u_adv_t, w_adv_t)
            except SingularSchurComplement:
                st.skipped_policy_updates += 1
            if st.max_norm() > _DIVERGENCE_LIMIT:
                raise NumericalDivergence(
                    f"agent {i}: weight norm exceeded {_DIVERGENCE_LIMIT:.0e} "
                    f"at step {k + 1}", step=k + 1)
        _record_weights(snapshots, history, k + 1, states)

    return OnlineResult(states=states, log=log, weight_history=history,
                        weight_snapshots=snapshots, td_errors=td,
                        regressor_bounds=bounds,
                        skipped_policy_updates=[st.skipped_policy_updates
                                                for st in states])


def _stack(delta, u_self, u_nbrs, w_self, w_nbrs):
    parts = [np.atleast_1d(np.asarray(delta, dtype=float)),
             np.atleast_1d(np.asarray(u_self, dtype=float))]
    parts += [np.atleast_1d(np.asarray(u, dtype=float)) for u in u_nbrs]
    parts.append(np.atleast_1d(np.asarray(w_self, dtype=float)))
    parts += [np.atleast_1d(np.asarray(w, dtype=float)) for w in w_nbrs]
    return np.concatenate(parts)


@dataclass
class LyapunovReport:
    agent: int
    series: np.ndarray       # L^k per recorded step
    eventually_bounded: bool
    tail_sup: float
    rate_conditions: dict    # name -> bool


def lyapunov_diagnostic(result: OnlineResult, reference, r_a: float = 1.0,
                        r_d: float = 1.0):
    """Weight-error Lyapunov series against a converged reference.

    reference: per-agent dict with keys "critic", "actor", "disturber".
    The rate conditions compare the configured learning rates against the
    empirical activation bounds recorded during the run.
    """
    if reference is None:
        raise MissingReference("reference weights are required")
    if r_a <= 0.0 or r_d <= 0.0:
        raise ValueError("weighting factors must be positive")
    reports = []
    for i, st in enumerate(result.states, start=1):
        ref = reference[i - 1]
        snaps = result.weight_snapshots[i - 1]
        steps = len(snaps["critic"])
        series = np.zeros(steps)
        for k in range(steps):
            series[k] = (
                np.linalg.norm(snaps["critic"][k] - ref["critic"]) ** 2
                / st.alpha_c
                + np.linalg.norm(snaps["actor"][k] - ref["actor"]) ** 2
                / (st.alpha_a * r_a)
                + np.linalg.norm(snaps["disturber"][k] - ref["disturber"]) ** 2
                / (st.alpha_d * r_d))
        tail = series[int(0.8 * steps):]
        tail_sup = float(tail.max()) if tail.size else float("nan")
        bounded = np.isfinite(tail_sup) and tail_sup <= max(1.0, series[0])
        eta = result.regressor_bounds[i - 1]["eta_max"]
        phi = result.regressor_bounds[i - 1]["phi_max"]
        conditions = {
            "critic_rate": eta > 0.0 and st.alpha_c <= 1.0 / eta ** 2,
            "actor_rate": phi > 0.0 and st.alpha_a <= 1.0 / (2.0 * phi ** 2),
            "disturber_rate": phi > 0.0 and st.alpha_d <= 1.0 / (2.0 * phi ** 2),
        }
        reports.append(LyapunovReport(agent=i, series=series,
                                      eventually_bounded=bool(bounded),
                                      tail_sup=tail_sup,
                                      rate_conditions=conditions))
    return reports
