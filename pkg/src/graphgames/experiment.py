"""Configuration ingestion, scenario presets, metrics and paper-style runs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    DisturbanceModel,
    FleetModel,
    LinearPolicy,
    ProbeSpec,
    TrajectoryLog,
    simulate,
)
from .errors import (
    ConfigParseError,
    ConfigValidationError,
    GraphGamesError,
)
from .game import (
    COOPERATIVE,
    NONCOOPERATIVE,
    GameWeights,
    check_attenuation_coop,
    check_attenuation_noncoop,
    closed_loop_error_matrix,
    cost_to_go,
    l2_gain_check,
    saddle_gap,
)
from .graph import GraphTopology, build_topology, disagreement_bound
from .online import initial_learner_state, run_online, write_weight_history_csv
from .pi_solver import (
    decoupled_game_oracle,
    run_pi_coop,
    run_pi_noncoop,
)

_ALGORITHMS = ("simulate", "pi_coop", "pi_noncoop", "learn_coop",
               "learn_noncoop", "verify")

_TOP_KEYS = {"mode", "topology", "dynamics", "weights", "algorithm", "horizon",
             "tolerances", "learning_rates", "disturbance", "probe", "seed",
             "sync_threshold", "x_init", "x0_init", "critic_prior_safety",
             "actuate_learned_disturbance", "gains"}


def _require_keys(section, allowed, name):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigValidationError(
            f"unknown keys {sorted(unknown)} in section {name!r}")


@dataclass
class ExperimentConfig:
    """Validated experiment description; raw holds the echoed JSON form."""

    mode: str
    algorithm: str
    horizon: int
    seed: int
    sync_threshold: float
    critic_prior_safety: float
    actuate_learned_disturbance: bool
    raw: dict = field(repr=False)
    tolerances: dict = field(default_factory=dict)
    learning_rates: dict = field(default_factory=dict)

    def build_topology(self) -> GraphTopology:
        t = self.raw["topology"]
        return build_topology([tuple(e) for e in t["edges"]], t["pins"],
                              t["n_agents"])

    def build_model(self) -> FleetModel:
        d = self.raw["dynamics"]
        return FleetModel(A=np.asarray(d["A"], dtype=float),
                          B=tuple(np.asarray(b, dtype=float) for b in d["B"]),
                          E=tuple(np.asarray(e, dtype=float) for e in d["E"]))

    def build_weights(self) -> GameWeights:
        w = self.raw["weights"]

        def per_agent(entry):
            return tuple(np.atleast_2d(np.asarray(m, dtype=float))
                         for m in entry)

        def cross(entry):
            out = {}
            for key, m in entry.items():
                i, j = (int(s) for s in key.split(","))
                out[(i, j)] = np.atleast_2d(np.asarray(m, dtype=float))
            return out

        try:
            return GameWeights(
                mode=self.mode,
                Q=per_agent(w["Q"]),
                R_self=per_agent(w["R_self"]),
                T_self=per_agent(w["T_self"]),
                R_cross=cross(w.get("R_cross", {})),
                T_cross=cross(w.get("T_cross", {})),
                attenuation=float(w["attenuation"]))
        except ValueError as exc:
            raise ConfigValidationError(f"weights: {exc}") from exc

    def build_disturbances(self, n_agents):
        spec = self.raw.get("disturbance")
        if spec is None:
            return None
        _require_keys(spec, {"kind", "amplitude", "decay", "frequency",
                             "seed"}, "disturbance")
        try:
            d = DisturbanceModel(
                kind=spec.get("kind", "decaying_sinusoid"),
                amplitude=tuple(spec.get("amplitude", (0.0,))),
                decay=float(spec.get("decay", 0.05)),
                frequency=float(spec.get("frequency", 0.5)),
                seed=int(spec.get("seed", 0)))
        except ValueError as exc:
            raise ConfigValidationError(f"disturbance: {exc}") from exc
        return [d] * n_agents

    def build_probe(self):
        spec = self.raw.get("probe")
        if spec is None:
            return None
        _require_keys(spec, {"amplitude", "decay", "seed"}, "probe")
        return ProbeSpec(amplitude=float(spec.get("amplitude", 0.1)),
                         decay=float(spec.get("decay", 0.001)),
                         seed=int(spec.get("seed", self.seed)))

    def initial_states(self, model):
        x_init = self.raw.get("x_init")
        x0_init = self.raw.get("x0_init")
        if x_init is not None:
            x_init = [np.asarray(x, dtype=float) for x in x_init]
        if x0_init is not None:
            x0_init = np.asarray(x0_init, dtype=float)
        return x_init, x0_init


def validate_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigValidationError("top-level config must be an object")
    _require_keys(data, _TOP_KEYS, "top-level")
    for key in ("mode", "topology", "dynamics", "weights", "algorithm"):
        if key not in data:
            raise ConfigValidationError(f"missing required field {key!r}")
    if data["mode"] not in (COOPERATIVE, NONCOOPERATIVE):
        raise ConfigValidationError(f"unknown mode {data['mode']!r}")
    if data["algorithm"] not in _ALGORITHMS:
        raise ConfigValidationError(f"unknown algorithm {data['algorithm']!r}")
    _require_keys(data["topology"], {"n_agents", "edges", "pins"}, "topology")
    _require_keys(data["dynamics"], {"A", "B", "E"}, "dynamics")
    _require_keys(data["weights"], {"Q", "R_self", "T_self", "R_cross",
                                    "T_cross", "attenuation"}, "weights")
    if "tolerances" in data:
        _require_keys(data["tolerances"], {"eps1", "eps2", "max_outer",
                                           "max_inner"}, "tolerances")
    if "learning_rates" in data:
        _require_keys(data["learning_rates"],
                      {"critic", "actor", "disturber", "adversary_u",
                       "adversary_w"}, "learning_rates")
    cfg = ExperimentConfig(
        mode=data["mode"],
        algorithm=data["algorithm"],
        horizon=int(data.get("horizon", 500)),
        seed=int(data.get("seed", 0)),
        sync_threshold=float(data.get("sync_threshold", 0.05)),
        critic_prior_safety=float(data.get("critic_prior_safety", 0.9)),
        actuate_learned_disturbance=bool(
            data.get("actuate_learned_disturbance", False)),
        raw=data,
        tolerances=dict(data.get("tolerances", {})),
        learning_rates=dict(data.get("learning_rates", {})),
    )
    if cfg.horizon < 1:
        raise ConfigValidationError("horizon must be >= 1")
    # eagerly build everything so precondition failures surface here
    try:
        topology = cfg.build_topology()
        model = cfg.build_model()
        weights = cfg.build_weights()
        cfg.build_disturbances(topology.n_agents)
        cfg.build_probe()
    except ConfigValidationError:
        raise
    except (GraphGamesError, ValueError, KeyError, TypeError) as exc:
        raise ConfigValidationError(str(exc)) from exc
    if model.n_agents != topology.n_agents:
        raise ConfigValidationError(
            "dynamics and topology disagree on the number of agents")
    for i in range(1, topology.n_agents + 1):
        if weights.neighbor_weights(i) != topology.neighbors(i):
            raise ConfigValidationError(
                f"cross weights for agent {i} do not match its neighbor set")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigParseError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigParseError(
            f"config is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    return validate_config(data)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_SEC5_EDGES = [[2, 1, 0.8], [4, 1, 0.7], [3, 2, 0.6], [1, 2, 0.6],
               [1, 3, 0.8], [1, 4, 0.4]]
_SEC5_CROSS = ["1,2", "1,4", "2,1", "2,3", "3,1", "4,1"]


def preset_config(name: str) -> ExperimentConfig:
    """Built-in scenarios for the four-follower benchmark fleet."""
    if name not in ("paper-sec5-coop", "paper-sec5-noncoop"):
        raise ConfigValidationError(f"unknown preset {name!r}")
    coop = name.endswith("-coop")
    data = {
        "mode": COOPERATIVE if coop else NONCOOPERATIVE,
        "algorithm": "learn_coop" if coop else "learn_noncoop",
        "topology": {"n_agents": 4, "edges": _SEC5_EDGES, "pins": [4]},
        "dynamics": {
            "A": [[0.995, 0.09983], [-0.09983, 0.995]],
            "B": [[[0.2047], [0.08984]], [[0.2147], [0.2895]],
                  [[0.2097], [0.1897]], [[0.2], [0.1]]],
            "E": [[[0.21], [0.0984]], [[0.32], [0.084]],
                  [[0.14], [0.072]], [[0.16], [0.024]]],
        },
        "weights": {
            "Q": [[[1.0, 0.0], [0.0, 1.0]]] * 4,
            "R_self": [[[1.0]]] * 4,
            "T_self": [[[1.0]]] * 4,
            "R_cross": {k: [[1.0]] for k in _SEC5_CROSS},
            "T_cross": {k: [[1.0]] for k in _SEC5_CROSS},
            "attenuation": 1.0,
        },
        "horizon": 500,
        "seed": 0,
        "sync_threshold": 0.05,
        "learning_rates": {"critic": 0.1, "actor": 0.1, "disturber": 0.1,
                           "adversary_u": 0.05, "adversary_w": 0.05},
        "probe": {"amplitude": 0.1, "decay": 0.005, "seed": 0},
        "x_init": [[0.8, 1.1], [0.9, 0.3], [1.2, 0.8], [0.9, 0.5]],
        "x0_init": [0.4, 0.5],
    }
    return validate_config(data)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def metrics(log: TrajectoryLog, weights: GameWeights, mode: str,
            sync_threshold: float = 0.05) -> dict:
    """Per-agent error/cost summary plus fleet synchronization time."""
    N = log.n_agents
    per_agent = []
    err = np.linalg.norm(log.x - log.x0[:, None, :], axis=2)  # (K+1, N)
    for i in range(1, N + 1):
        ctg = cost_to_go(log, weights, i)
        per_agent.append({
            "agent": i,
            "final_error": float(err[-1, i - 1]),
            "max_error": float(err[:, i - 1].max()),
            "cost_to_go": ctg.total,
            "cost_tail": ctg.tail,
        })
    delta_norm = np.linalg.norm(log.delta, axis=2)   # (K+1, N)
    in_sync = np.all(delta_norm < sync_threshold, axis=1)
    sync_time = None
    if in_sync[-1]:
        k = len(in_sync) - 1
        while k > 0 and in_sync[k - 1]:
            k -= 1
        sync_time = int(k)
    return {"per_agent": per_agent, "sync_time": sync_time,
            "sync_threshold": sync_threshold,
            "synchronized": bool(in_sync[-1])}


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_json_ready(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_sync_series(path, log):
    err = np.linalg.norm(log.x - log.x0[:, None, :], axis=2)
    dn = np.linalg.norm(log.delta, axis=2)
    with open(path, "w") as fh:
        heads = ["step"]
        heads += [f"sync_error_{i}" for i in range(1, log.n_agents + 1)]
        heads += [f"delta_norm_{i}" for i in range(1, log.n_agents + 1)]
        fh.write(",".join(heads) + "\n")
        for k in range(log.horizon + 1):
            row = [str(k)]
            row += [repr(float(v)) for v in err[k]]
            row += [repr(float(v)) for v in dn[k]]
            fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def _learner_states(cfg, model, topology, weights):
    lr = cfg.learning_rates
    return [initial_learner_state(
        weights, topology, model, i,
        alpha_c=float(lr.get("critic", 0.1)),
        alpha_a=float(lr.get("actor", 0.1)),
        alpha_d=float(lr.get("disturber", 0.1)),
        alpha_a_adv=float(lr.get("adversary_u", 0.05)),
        alpha_d_adv=float(lr.get("adversary_w", 0.05)),
        critic_prior_safety=cfg.critic_prior_safety)
        for i in range(1, topology.n_agents + 1)]


def _learned_gains(states):
    return [(st.W_a.T.copy(), st.W_d.T.copy()) for st in states]


def _evaluation_rollout(cfg, model, topology, weights, gains, horizon=500):
    """Zero-initial-state disturbed run at the learned control gains.

    Only the control channel is actuated and every agent starts synchronized
    with the leader, so the logged performance is purely disturbance driven
    and the gain inequality can be checked with a zero value offset.
    """
    policies = [LinearPolicy(K=K, F=None) for K, _ in gains]
    amp = [0.1] * model.q
    disturbances = [DisturbanceModel(kind="decaying_sinusoid",
                                     amplitude=tuple(amp))
                    for _ in range(model.n_agents)]
    x_init = [np.zeros(model.n) for _ in range(model.n_agents)]
    x0_init = np.zeros(model.n)
    return simulate(model, topology, policies, disturbances, x_init, x0_init,
                    horizon, probe=None, weights=weights)


def _verification_summary(cfg, model, topology, weights, states, log):
    mode = weights.mode
    gains = _learned_gains(states)
    summary = {}
    err = np.linalg.norm(log.x - log.x0[:, None, :], axis=2)
    summary["final_sync_error_per_agent"] = [float(v) for v in err[-1]]
    if mode == COOPERATIVE:
        reports = check_attenuation_coop(model, topology, weights)
    else:
        reports = check_attenuation_noncoop(model, topology, weights)
    summary["attenuation_margins"] = [
        {"condition": r.condition, "margin": r.margin, "passed": r.passed}
        for r in reports]
    # zero initial error makes the value offset vanish, so the check reduces
    # to comparing disturbance-driven performance against the gain budget
    try:
        eval_log = _evaluation_rollout(cfg, model, topology, weights, gains)
        V0 = [0.0] * model.n_agents
        l2 = l2_gain_check(eval_log, weights, V0)
        summary["l2_slack"] = [r.slack for r in l2]
        summary["l2_passed"] = all(r.passed for r in l2)
    except GraphGamesError as exc:
        summary["l2_slack"] = None
        summary["l2_error"] = str(exc)
    summary["saddle_gaps"] = []
    if mode == COOPERATIVE:
        # the saddle comparison only makes sense when the joint loop with
        # both learned channels actuated is stable
        Acl = closed_loop_error_matrix(model, topology, gains)
        rho = float(np.abs(np.linalg.eigvals(Acl)).max())
        summary["joint_loop_spectral_radius"] = rho
        if rho < 1.0:
            delta0 = [log.delta[0, i] for i in range(model.n_agents)]
            gaps = saddle_gap(model, topology, weights, gains,
                              perturbation_scale=0.01, samples=200,
                              horizon=200, seed=cfg.seed + 17, delta0=delta0)
            summary["saddle_gaps"] = [
                {"agent": g.agent, "gap_u": g.gap_u, "gap_w": g.gap_w}
                for g in gaps]
    # spanning-tree disagreement bound as a sanity diagnostic
    dn = float(np.linalg.norm(log.delta[-1]))
    summary["disagreement_bound_final"] = disagreement_bound(topology, dn,
                                                             model.n)
    return summary


def _weights_settled(result, tail_fraction=0.1, tol=0.01):
    """Relative change of every weight norm over the final stretch."""
    by_key = {}
    for step, agent, net, norm in result.weight_history:
        by_key.setdefault((agent, net), []).append(norm)
    settled = True
    for series in by_key.values():
        arr = np.asarray(series)
        tail = arr[int((1.0 - tail_fraction) * len(arr)):]
        base = max(np.abs(tail).max(), 1e-9)
        if (tail.max() - tail.min()) / base > tol:
            settled = False
    return settled


def run_learning_experiment(cfg: ExperimentConfig, outdir,
                            seed: int | None = None) -> dict:
    topology = cfg.build_topology()
    model = cfg.build_model()
    weights = cfg.build_weights()
    states = _learner_states(cfg, model, topology, weights)
    probe = cfg.build_probe()
    x_init, x0_init = cfg.initial_states(model)
    result = run_online(model, topology, weights, weights.mode, states,
                        cfg.horizon,
                        disturbance=cfg.build_disturbances(topology.n_agents),
                        probe=probe,
                        seed=cfg.seed if seed is None else seed,
                        x_init=x_init, x0_init=x0_init,
                        actuate_learned_disturbance=cfg.actuate_learned_disturbance)
    os.makedirs(outdir, exist_ok=True)
    result.log.write_csv(os.path.join(outdir, "trajectory.csv"))
    write_weight_history_csv(result.weight_history,
                             os.path.join(outdir, "weights.csv"))
    _write_sync_series(os.path.join(outdir, "sync_errors.csv"), result.log)
    _write_json(os.path.join(outdir, "config.json"), cfg.raw)
    summary = _verification_summary(cfg, model, topology, weights,
                                    result.states, result.log)
    summary["metrics"] = metrics(result.log, weights, weights.mode,
                                 cfg.sync_threshold)
    summary["weights_settled"] = _weights_settled(result)
    summary["skipped_policy_updates"] = result.skipped_policy_updates
    summary["converged"] = bool(summary["metrics"]["synchronized"]
                                and summary["weights_settled"])
    _write_json(os.path.join(outdir, "summary.json"), summary)
    summary["_result"] = result
    return summary


def reproduce_paper(case: str, outdir, seed: int = 0) -> dict:
    """End-to-end benchmark reproduction for 'coop' or 'noncoop'."""
    if case not in ("coop", "noncoop"):
        raise ConfigValidationError(f"unknown reproduction case {case!r}")
    cfg = preset_config(f"paper-sec5-{case}")
    return run_learning_experiment(cfg, outdir, seed=seed)


def run_pi_experiment(cfg: ExperimentConfig, outdir) -> dict:
    topology = cfg.build_topology()
    model = cfg.build_model()
    weights = cfg.build_weights()
    tol = cfg.tolerances
    gains_spec = cfg.raw.get("gains")
    if gains_spec is not None:
        init = [np.asarray(g["K"], dtype=float) for g in gains_spec]
    else:
        # an admissible starting policy from the per-agent decoupled game
        init = [decoupled_game_oracle(model, topology, weights, i)[1]
                for i in range(1, model.n_agents + 1)]
    runner = run_pi_coop if weights.mode == COOPERATIVE else run_pi_noncoop
    result = runner(model, topology, weights, init,
                    eps1=float(tol.get("eps1", 1e-6)),
                    eps2=float(tol.get("eps2", 1e-6)),
                    max_outer=int(tol.get("max_outer", 200)),
                    max_inner=int(tol.get("max_inner", 200)))
    os.makedirs(outdir, exist_ok=True)
    payload = {
        "converged": result.converged,
        "outer_iterations": result.outer_iterations,
        "gains": [{"K": K, "F": F} for K, F in result.gains],
        "kernels": [k.S for k in result.kernels],
    }
    _write_json(os.path.join(outdir, "pi_result.json"), payload)
    with open(os.path.join(outdir, "pi_history.csv"), "w") as fh:
        fh.write("outer,inner,inner_norm,outer_norm\n")
        for rec in result.history:
            outer_norm = "" if rec.outer_norm is None else repr(rec.outer_norm)
            fh.write(f"{rec.iter_outer},{rec.iter_inner},"
                     f"{rec.inner_norm!r},{outer_norm}\n")
    _write_json(os.path.join(outdir, "config.json"), cfg.raw)
    payload["_result"] = result
    return payload


def run_simulation_experiment(cfg: ExperimentConfig, outdir) -> dict:
    topology = cfg.build_topology()
    model = cfg.build_model()
    weights = cfg.build_weights()
    gains_spec = cfg.raw.get("gains")
    policies = []
    for i in range(model.n_agents):
        if gains_spec is None:
            K = np.zeros((model.p, model.n))
            F = None
        else:
            K = np.asarray(gains_spec[i]["K"], dtype=float)
            F = (np.asarray(gains_spec[i]["F"], dtype=float)
                 if gains_spec[i].get("F") is not None else None)
        policies.append(LinearPolicy(K=K, F=F))
    disturbances = cfg.build_disturbances(model.n_agents)
    x_init, x0_init = cfg.initial_states(model)
    if x_init is None:
        x_init = [np.zeros(model.n) for _ in range(model.n_agents)]
    if x0_init is None:
        x0_init = np.zeros(model.n)
    log = simulate(model, topology, policies, disturbances, x_init, x0_init,
                   cfg.horizon, probe=cfg.build_probe(), weights=weights)
    os.makedirs(outdir, exist_ok=True)
    log.write_csv(os.path.join(outdir, "trajectory.csv"))
    _write_sync_series(os.path.join(outdir, "sync_errors.csv"), log)
    _write_json(os.path.join(outdir, "config.json"), cfg.raw)
    summary = {"metrics": metrics(log, weights, weights.mode,
                                  cfg.sync_threshold)}
    _write_json(os.path.join(outdir, "summary.json"), summary)
    return summary


def run_verify_experiment(cfg: ExperimentConfig, outdir) -> dict:
    topology = cfg.build_topology()
    model = cfg.build_model()
    weights = cfg.build_weights()
    if weights.mode == COOPERATIVE:
        reports = check_attenuation_coop(model, topology, weights)
    else:
        reports = check_attenuation_noncoop(model, topology, weights)
    summary = {
        "attenuation_margins": [
            {"condition": r.condition, "margin": r.margin, "passed": r.passed}
            for r in reports],
        "all_passed": all(r.passed for r in reports),
    }
    os.makedirs(outdir, exist_ok=True)
    _write_json(os.path.join(outdir, "summary.json"), summary)
    _write_json(os.path.join(outdir, "config.json"), cfg.raw)
    return summary


def run_experiment(cfg: ExperimentConfig, outdir, seed: int | None = None) -> dict:
    if seed is not None:
        cfg.seed = int(seed)
        cfg.raw["seed"] = int(seed)
    if cfg.algorithm == "simulate":
        return run_simulation_experiment(cfg, outdir)
    if cfg.algorithm in ("pi_coop", "pi_noncoop"):
        return run_pi_experiment(cfg, outdir)
    if cfg.algorithm in ("learn_coop", "learn_noncoop"):
        return run_learning_experiment(cfg, outdir)
    if cfg.algorithm == "verify":
        return run_verify_experiment(cfg, outdir)
    raise ConfigValidationError(f"unknown algorithm {cfg.algorithm!r}")
