"""Leader/follower dynamics, disturbances, rollouts and trajectory logging."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadNeighborOrder,
    DimensionMismatch,
    MissingNeighborInput,
    NumericalDivergence,
    UnknownAgent,
)
from .graph import GraphTopology, neighborhood_error


@dataclass(frozen=True)
class FleetModel:
    """Common drift A with per-agent input and disturbance channels."""

    A: np.ndarray                # (n, n)
    B: tuple                     # per-agent (n, p)
    E: tuple                     # per-agent (n, q)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = tuple(np.asarray(b, dtype=float) for b in self.B)
        E = tuple(np.asarray(e, dtype=float) for e in self.E)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatch("A must be square")
        if len(B) != len(E):
            raise DimensionMismatch("need one B_i and one E_i per agent")
        p = B[0].shape[1]
        q = E[0].shape[1]
        for b in B:
            if b.shape != (n, p):
                raise DimensionMismatch("all B_i must share the shape (n, p)")
        for e in E:
            if e.shape != (n, q):
                raise DimensionMismatch("all E_i must share the shape (n, q)")
        for i, b in enumerate(B, start=1):
            ctrb = np.hstack([np.linalg.matrix_power(A, k) @ b for k in range(n)])
            if np.linalg.matrix_rank(ctrb) < n:
                raise DimensionMismatch(f"(A, B_{i}) is not reachable")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "E", E)

    @property
    def n_agents(self) -> int:
        return len(self.B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.B[0].shape[1]

    @property
    def q(self) -> int:
        return self.E[0].shape[1]

    def B_of(self, i: int) -> np.ndarray:
        self._check_agent(i)
        return self.B[i - 1]

    def E_of(self, i: int) -> np.ndarray:
        self._check_agent(i)
        return self.E[i - 1]

    def _check_agent(self, i):
        if not (1 <= i <= self.n_agents):
            raise UnknownAgent(f"agent id {i} outside 1..{self.n_agents}")


@dataclass(frozen=True)
class DisturbanceModel:
    """Square-summable disturbance generator.

    decaying_sinusoid: w_k = amplitude * exp(-decay*k) * sin(frequency*k)
    seeded_decaying_noise: w_k = amplitude * exp(-decay*k) * xi_k, xi_k ~ U(-1, 1)
    """

    kind: str = "zero"
    amplitude: tuple = (0.0,)
    decay: float = 0.05
    frequency: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zero", "decaying_sinusoid", "seeded_decaying_noise"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.kind != "zero" and self.decay <= 0.0:
            raise ValueError("decay must be positive for non-zero disturbances")

    def signal(self, horizon: int) -> np.ndarray:
        """Full (horizon, q) disturbance sequence."""
        amp = np.asarray(self.amplitude, dtype=float)
        out = np.zeros((horizon, amp.shape[0]))
        if self.kind == "zero":
            return out
        k = np.arange(horizon)
        envelope = np.exp(-self.decay * k)
        if self.kind == "decaying_sinusoid":
            out = np.outer(envelope * np.sin(self.frequency * k), amp)
        else:
            rng = np.random.default_rng(self.seed)
            xi = rng.uniform(-1.0, 1.0, size=(horizon, amp.shape[0]))
            out = envelope[:, None] * xi * amp[None, :]
        return out


@dataclass(frozen=True)
class ProbeSpec:
    """Decaying uniform probing noise added to control inputs (PE proxy)."""

    amplitude: float = 0.1
    decay: float = 0.001
    seed: int = 0

    def signal(self, horizon: int, p: int, agent_offset: int = 0) -> np.ndarray:
        rng = np.random.default_rng(self.seed + agent_offset)
        xi = rng.uniform(-1.0, 1.0, size=(horizon, p))
        envelope = np.exp(-self.decay * np.arange(horizon))
        return self.amplitude * envelope[:, None] * xi


@dataclass
class LinearPolicy:
    """State-feedback pair u = K delta, w = F delta (F optional)."""

    K: np.ndarray
    F: np.ndarray | None = None

    def control(self, delta, k=0):
        return np.asarray(self.K) @ delta

    def disturbance(self, delta, k=0):
        if self.F is None:
            return None
        return np.asarray(self.F) @ delta


@dataclass
class TrajectoryLog:
    """Closed-loop rollout record: K+1 states, K inputs per agent."""

    horizon: int
    x: np.ndarray          # (K+1, N, n)
    x0: np.ndarray         # (K+1, n)
    delta: np.ndarray      # (K+1, N, n)
    u: np.ndarray          # (K, N, p)
    w: np.ndarray          # (K, N, q)
    stage_cost: np.ndarray  # (K, N)

    @property
    def n_agents(self) -> int:
        return self.x.shape[1]

    def write_csv(self, path):
        n, p, q = self.x.shape[2], self.u.shape[2], self.w.shape[2]
        header = (["step", "agent"]
                  + [f"x{d+1}" for d in range(n)]
                  + [f"delta{d+1}" for d in range(n)]
                  + [f"u{d+1}" for d in range(p)]
                  + [f"w{d+1}" for d in range(q)]
                  + ["stage_cost"])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(self.horizon + 1):
                writer.writerow([k, 0] + [repr(float(v)) for v in self.x0[k]]
                                + [""] * n + [""] * p + [""] * q + [""])
                for i in range(self.n_agents):
                    row = [k, i + 1]
                    row += [repr(float(v)) for v in self.x[k, i]]
                    row += [repr(float(v)) for v in self.delta[k, i]]
                    if k < self.horizon:
                        row += [repr(float(v)) for v in self.u[k, i]]
                        row += [repr(float(v)) for v in self.w[k, i]]
                        row += [repr(float(self.stage_cost[k, i]))]
                    else:
                        row += [""] * (p + q + 1)
                    writer.writerow(row)

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            n = sum(1 for h in header if h.startswith("x"))
            p = sum(1 for h in header if h.startswith("u"))
            q = sum(1 for h in header if h.startswith("w"))
            rows = list(reader)
        steps = max(int(r[0]) for r in rows)
        agents = max(int(r[1]) for r in rows)
        log = cls(
            horizon=steps,
            x=np.zeros((steps + 1, agents, n)),
            x0=np.zeros((steps + 1, n)),
            delta=np.zeros((steps + 1, agents, n)),
            u=np.zeros((steps, agents, p)),
            w=np.zeros((steps, agents, q)),
            stage_cost=np.zeros((steps, agents)),
        )
        for r in rows:
            k, agent = int(r[0]), int(r[1])
            vals = r[2:]
            if agent == 0:
                log.x0[k] = [float(v) for v in vals[:n]]
                continue
            i = agent - 1
            log.x[k, i] = [float(v) for v in vals[:n]]
            log.delta[k, i] = [float(v) for v in vals[n:2 * n]]
            if k < steps:
                log.u[k, i] = [float(v) for v in vals[2 * n:2 * n + p]]
                log.w[k, i] = [float(v) for v in vals[2 * n + p:2 * n + p + q]]
                log.stage_cost[k, i] = float(vals[2 * n + p + q])
        return log


def step_leader(model: FleetModel, x0) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n,):
        raise DimensionMismatch(f"leader state must have dimension {model.n}")
    return model.A @ x0


def step_follower(model: FleetModel, i: int, x, u, w) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape != (model.n,) or u.shape != (model.p,) or w.shape != (model.q,):
        raise DimensionMismatch("state/input/disturbance dimension mismatch")
    return model.A @ x + model.B_of(i) @ u + model.E_of(i) @ w


def step_error_dynamics(model: FleetModel, topology: GraphTopology, i: int,
                        delta_i, u_i, u_neighbors, w_i, w_neighbors) -> np.ndarray:
    """One step of the local tracking-error recursion."""
    neighbors = topology.neighbors(i)
    for source, inputs in (("control", u_neighbors), ("disturbance", w_neighbors)):
        if set(inputs) != set(neighbors):
            raise MissingNeighborInput(
                f"{source} inputs keyed {sorted(inputs)}, expected {neighbors}")
    delta_i = np.asarray(delta_i, dtype=float)
    if delta_i.shape != (model.n,):
        raise DimensionMismatch("delta dimension mismatch")
    c = topology.coupling(i)
    out = model.A @ delta_i - c * (model.B_of(i) @ np.asarray(u_i, dtype=float))
    out -= c * (model.E_of(i) @ np.asarray(w_i, dtype=float))
    for j in neighbors:
        a = topology.adjacency[i - 1, j - 1]
        out += a * (model.B_of(j) @ np.asarray(u_neighbors[j], dtype=float))
        out += a * (model.E_of(j) @ np.asarray(w_neighbors[j], dtype=float))
    return out


def stacked_input_matrix(model: FleetModel, topology: GraphTopology, i: int,
                         neighbor_order) -> np.ndarray:
    """M_i with delta_{k+1} = M_i z_k, z = col(delta, u_i, u_-i, w_i, w_-i)."""
    neighbors = topology.neighbors(i)
    order = list(neighbor_order)
    if sorted(order) != neighbors:
        raise BadNeighborOrder(
            f"neighbor order {order} is not a permutation of {neighbors}")
    c = topology.coupling(i)
    blocks = [model.A, -c * model.B_of(i)]
    blocks += [topology.adjacency[i - 1, j - 1] * model.B_of(j) for j in order]
    blocks.append(-c * model.E_of(i))
    blocks += [topology.adjacency[i - 1, j - 1] * model.E_of(j) for j in order]
    return np.hstack(blocks)


def _resolve_disturbance(disturbances, i, horizon, q):
    if disturbances is None:
        return np.zeros((horizon, q))
    d = disturbances[i - 1]
    if d is None:
        return np.zeros((horizon, q))
    sig = d.signal(horizon)
    if sig.shape[1] != q:
        raise DimensionMismatch(f"disturbance amplitude dimension != q={q}")
    return sig


def simulate(model: FleetModel, topology: GraphTopology, policies,
             disturbances, x_init, x0_init, horizon: int, probe=None,
             weights=None) -> TrajectoryLog:
    """Closed-loop rollout; delta recomputed from fleet states each step.

    policies: per-agent objects with control(delta, k) and disturbance(delta, k)
    (the latter may return None).  External DisturbanceModel signals add to the
    policy-generated disturbance.  Stage costs are logged when weights is given.
    """
    from .game import stage_cost  # local import to avoid a cycle

    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    N, n, p, q = model.n_agents, model.n, model.p, model.q
    if len(policies) != N or len(x_init) != N:
        raise DimensionMismatch("need one policy and one initial state per agent")
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
    external = [_resolve_disturbance(disturbances, i, horizon, q)
                for i in range(1, N + 1)]
    probes = [probe.signal(horizon, p, agent_offset=i) if probe is not None
              else np.zeros((horizon, p)) for i in range(N)]

    for k in range(horizon):
        states = list(log.x[k])
        for i in range(1, N + 1):
            log.delta[k, i - 1] = neighborhood_error(topology, states, log.x0[k], i)
        for i in range(1, N + 1):
            delta_i = log.delta[k, i - 1]
            u = np.atleast_1d(np.asarray(policies[i - 1].control(delta_i, k),
                                         dtype=float))
            u = u + probes[i - 1][k]
            w_pol = policies[i - 1].disturbance(delta_i, k)
            w = np.zeros(q) if w_pol is None else np.atleast_1d(
                np.asarray(w_pol, dtype=float))
            w = w + external[i - 1][k]
            log.u[k, i - 1] = u
            log.w[k, i - 1] = w
        if weights is not None:
            for i in range(1, N + 1):
                neighbors = topology.neighbors(i)
                log.stage_cost[k, i - 1] = stage_cost(
                    weights, i, log.delta[k, i - 1], log.u[k, i - 1],
                    {j: log.u[k, j - 1] for j in neighbors},
                    log.w[k, i - 1],
                    {j: log.w[k, j - 1] for j in neighbors})
        log.x0[k + 1] = step_leader(model, log.x0[k])
        for i in range(1, N + 1):
            log.x[k + 1, i - 1] = step_follower(
                model, i, log.x[k, i - 1], log.u[k, i - 1], log.w[k, i - 1])
        if not np.all(np.isfinite(log.x[k + 1])):
            raise NumericalDivergence(f"non-finite state at step {k + 1}",
                                      step=k + 1)
    states = list(log.x[horizon])
    for i in range(1, N + 1):
        log.delta[horizon, i - 1] = neighborhood_error(
            topology, states, log.x0[horizon], i)
    return log
