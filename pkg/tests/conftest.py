"""Shared fixtures: benchmark fleet builders and cached reproduction runs."""

import copy
import time

import numpy as np
import pytest

from graphgames.dynamics import FleetModel
from graphgames.experiment import preset_config, reproduce_paper
from graphgames.game import COOPERATIVE, GameWeights
from graphgames.graph import build_topology

BENCH_A = np.array([[0.995, 0.09983], [-0.09983, 0.995]])
BENCH_B = [np.array([[0.2047], [0.08984]]), np.array([[0.2147], [0.2895]]),
           np.array([[0.2097], [0.1897]]), np.array([[0.2], [0.1]])]
BENCH_E = [np.array([[0.21], [0.0984]]), np.array([[0.32], [0.084]]),
           np.array([[0.14], [0.072]]), np.array([[0.16], [0.024]])]
BENCH_EDGES = [(2, 1, 0.8), (4, 1, 0.7), (3, 2, 0.6), (1, 2, 0.6),
               (1, 3, 0.8), (1, 4, 0.4)]


def bench_model():
    return FleetModel(A=BENCH_A, B=tuple(BENCH_B), E=tuple(BENCH_E))


def bench_topology():
    return build_topology(BENCH_EDGES, [4], 4)


def pin_only_topology(n_agents=4):
    """Every agent pinned to the leader, no inter-agent edges."""
    return build_topology([], list(range(1, n_agents + 1)), n_agents)


def coop_weights(attenuation, cross=None, n_agents=4):
    """Cooperative unit weights; cross=None drops the neighbor terms."""
    if cross is None:
        R_cross, T_cross = {}, {}
    else:
        pairs = [(1, 2), (1, 4), (2, 1), (2, 3), (3, 1), (4, 1)]
        R_cross = {k: cross * np.eye(1) for k in pairs}
        T_cross = {k: cross * np.eye(1) for k in pairs}
    return GameWeights(mode=COOPERATIVE,
                       Q=tuple(np.eye(2) for _ in range(n_agents)),
                       R_self=tuple(np.eye(1) for _ in range(n_agents)),
                       T_self=tuple(np.eye(1) for _ in range(n_agents)),
                       R_cross=R_cross, T_cross=T_cross,
                       attenuation=attenuation)


def preset_with(case, **overrides):
    """Clone a preset raw config, apply overrides, revalidate."""
    from graphgames.experiment import validate_config

    cfg = preset_config(f"paper-sec5-{case}")
    raw = copy.deepcopy(cfg.raw)
    for key, value in overrides.items():
        raw[key] = value
    return validate_config(raw)


@pytest.fixture(scope="session")
def repro_coop(tmp_path_factory):
    out = tmp_path_factory.mktemp("repro_coop")
    start = time.perf_counter()
    summary = reproduce_paper("coop", out, seed=0)
    summary["_runtime"] = time.perf_counter() - start
    summary["_outdir"] = out
    return summary


@pytest.fixture(scope="session")
def repro_noncoop(tmp_path_factory):
    out = tmp_path_factory.mktemp("repro_noncoop")
    start = time.perf_counter()
    summary = reproduce_paper("noncoop", out, seed=0)
    summary["_runtime"] = time.perf_counter() - start
    summary["_outdir"] = out
    return summary
