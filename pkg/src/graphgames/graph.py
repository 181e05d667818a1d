"""Communication digraph with leader pinning.

Edge weight ``a[i, j]`` is the weight agent ``i`` places on information
received from agent ``j`` (information flows j -> i).  Agent ids are 1-based
in the public API; the leader is a virtual node outside the adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    NonPositiveWeight,
    NoSpanningTree,
    SelfLoop,
    SingularPinnedLaplacian,
    UnknownAgent,
)

_SIGMA_MIN_THRESHOLD = 1e-12


@dataclass(frozen=True)
class GraphTopology:
    """Weighted digraph over N follower agents plus leader pinning gains."""

    n_agents: int
    adjacency: np.ndarray      # (N, N), a[i, j] >= 0, zero diagonal
    pinning: np.ndarray        # (N,), entries in {0, 1}
    in_degrees: np.ndarray = field(init=False)
    laplacian: np.ndarray = field(init=False)

    def __post_init__(self):
        d = self.adjacency.sum(axis=1)
        lap = np.diag(d) - self.adjacency
        for name, arr in (("in_degrees", d), ("laplacian", lap)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.adjacency.setflags(write=False)
        self.pinning.setflags(write=False)

    def neighbors(self, i: int) -> list[int]:
        """1-based ids j with a_ij > 0, in ascending order."""
        row = self.adjacency[i - 1]
        return [j + 1 for j in np.nonzero(row > 0.0)[0]]

    def coupling(self, i: int) -> float:
        """d_i + g_i, the local coupling scalar."""
        return float(self.in_degrees[i - 1] + self.pinning[i - 1])

    def pinned_laplacian(self) -> np.ndarray:
        """L + G."""
        return self.laplacian + np.diag(self.pinning)


def _check_agent(i, n_agents):
    if not (1 <= i <= n_agents):
        raise UnknownAgent(f"agent id {i} outside 1..{n_agents}")


def build_topology(edge_list, pins, n_agents: int) -> GraphTopology:
    """Build and validate a pinned digraph from (from, to, weight) triples.

    Raises NoSpanningTree unless every follower is reachable from a virtual
    leader node through pinning edges and information-flow edges.
    """
    adjacency = np.zeros((n_agents, n_agents))
    for src, dst, weight in edge_list:
        _check_agent(src, n_agents)
        _check_agent(dst, n_agents)
        if src == dst:
            raise SelfLoop(f"self-edge on agent {src}")
        if weight <= 0.0:
            raise NonPositiveWeight(f"edge ({src}->{dst}) has weight {weight}")
        adjacency[dst - 1, src - 1] = weight
    pinning = np.zeros(n_agents)
    for i in pins:
        _check_agent(i, n_agents)
        pinning[i - 1] = 1.0

    # Reachability from the virtual leader over leader->pinned and j->i edges.
    reached = set(i for i in range(n_agents) if pinning[i] > 0.0)
    frontier = list(reached)
    while frontier:
        j = frontier.pop()
        for i in np.nonzero(adjacency[:, j] > 0.0)[0]:
            if i not in reached:
                reached.add(int(i))
                frontier.append(int(i))
    if len(reached) < n_agents:
        missing = sorted(set(range(1, n_agents + 1)) - {i + 1 for i in reached})
        raise NoSpanningTree(
            f"agents {missing} unreachable from the leader; pinned-graph "
            "spanning tree condition violated"
        )
    return GraphTopology(n_agents=n_agents, adjacency=adjacency, pinning=pinning)


def neighborhood_error(topology: GraphTopology, follower_states, leader_state,
                       i: int) -> np.ndarray:
    """delta_i = sum_j a_ij (x_j - x_i) + g_i (x_0 - x_i)."""
    _check_agent(i, topology.n_agents)
    x = [np.asarray(s, dtype=float) for s in follower_states]
    x0 = np.asarray(leader_state, dtype=float)
    n = x0.shape[0]
    if any(s.shape != (n,) for s in x) or len(x) != topology.n_agents:
        raise DimensionMismatch("follower states inconsistent with leader state")
    xi = x[i - 1]
    delta = topology.pinning[i - 1] * (x0 - xi)
    for j in topology.neighbors(i):
        delta = delta + topology.adjacency[i - 1, j - 1] * (x[j - 1] - xi)
    return delta


def pinned_laplacian_sigma_min(topology: GraphTopology) -> float:
    """Smallest singular value of L + G (same as of (L+G) kron I_n)."""
    sigma = np.linalg.svd(topology.pinned_laplacian(), compute_uv=False)
    return float(sigma[-1])


def disagreement_bound(topology: GraphTopology, delta_norm: float,
                       n: int) -> float:
    """Upper bound on the global disagreement norm given ||delta||."""
    if delta_norm < 0.0:
        raise ValueError("delta_norm must be nonnegative")
    sigma_min = pinned_laplacian_sigma_min(topology)
    if sigma_min < _SIGMA_MIN_THRESHOLD:
        raise SingularPinnedLaplacian(
            f"sigma_min(L+G) = {sigma_min:.3e} below threshold; pinned "
            "spanning tree condition violated"
        )
    return delta_norm / sigma_min


def stacked_neighborhood_error(topology: GraphTopology, follower_states,
                               leader_state) -> np.ndarray:
    """delta = -((L+G) kron I_n) (x - 1 kron x_0), stacked over agents."""
    x0 = np.asarray(leader_state, dtype=float)
    n = x0.shape[0]
    eps = np.concatenate([np.asarray(s, dtype=float) - x0 for s in follower_states])
    lg = np.kron(topology.pinned_laplacian(), np.eye(n))
    return -lg @ eps
