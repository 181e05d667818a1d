"""Command-line entry points.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical
divergence, 4 convergence failure.
"""

from __future__ import annotations

import sys

import click

from .errors import (
    ConfigParseError,
    ConfigValidationError,
    GraphGamesError,
    MaxIterations,
    NoConvergence,
    NumericalDivergence,
)
from .experiment import load_config, preset_config, reproduce_paper, \
    run_experiment

EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_NO_CONVERGENCE = 4


def _load(config, preset):
    if preset is not None:
        return preset_config(preset)
    if config is None:
        raise ConfigValidationError("either --config or --preset is required")
    return load_config(config)


def _run(algorithm, config, preset, out, seed):
    try:
        cfg = _load(config, preset)
        cfg.algorithm = algorithm
        cfg.raw["algorithm"] = algorithm
        summary = run_experiment(cfg, out, seed=seed)
    except (ConfigParseError, ConfigValidationError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    except NumericalDivergence as exc:
        click.echo(f"numerical divergence: {exc}", err=True)
        sys.exit(EXIT_DIVERGENCE)
    except (MaxIterations, NoConvergence) as exc:
        click.echo(f"convergence failure: {exc}", err=True)
        sys.exit(EXIT_NO_CONVERGENCE)
    except GraphGamesError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    converged = summary.get("converged")
    if converged is None:
        click.echo(f"done; outputs in {out}")
    else:
        click.echo(f"done; converged={converged}; outputs in {out}")


_config_opt = click.option("--config", type=click.Path(), default=None,
                           help="JSON experiment configuration.")
_preset_opt = click.option("--preset",
                           type=click.Choice(["paper-sec5-coop",
                                              "paper-sec5-noncoop"]),
                           default=None, help="Built-in scenario.")
_out_opt = click.option("--out", required=True, type=click.Path(),
                        help="Output directory.")
_seed_opt = click.option("--seed", type=int, default=None,
                         help="Override the configured RNG seed.")


@click.group()
def main():
    """Policy iteration and online learning for graphical games on fleets."""


def _subcommand(name, algorithm, help_text):
    @main.command(name=name, help=help_text)
    @_config_opt
    @_preset_opt
    @_out_opt
    @_seed_opt
    def cmd(config, preset, out, seed):
        _run(algorithm, config, preset, out, seed)
    cmd.__name__ = name.replace("-", "_")
    return cmd


simulate = _subcommand(
    "simulate", "simulate",
    "Roll out the fleet under fixed linear policies.")
pi_coop = _subcommand(
    "pi-coop", "pi_coop",
    "Nested policy iteration for the cooperative game.")
pi_noncoop = _subcommand(
    "pi-noncoop", "pi_noncoop",
    "Nested policy iteration for the non-cooperative game.")
learn_coop = _subcommand(
    "learn-coop", "learn_coop",
    "Online actor-disturber-critic learning, cooperative mode.")
learn_noncoop = _subcommand(
    "learn-noncoop", "learn_noncoop",
    "Online learning with adversary networks, non-cooperative mode.")
verify = _subcommand(
    "verify", "verify",
    "Check the disturbance-attenuation preconditions of a configuration.")


@main.command(name="reproduce-paper")
@click.argument("case", type=click.Choice(["coop", "noncoop"]))
@_out_opt
@_seed_opt
def reproduce(case, out, seed):
    """Run the four-follower benchmark scenario end to end."""
    try:
        summary = reproduce_paper(case, out, seed=0 if seed is None else seed)
    except (ConfigParseError, ConfigValidationError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    except NumericalDivergence as exc:
        click.echo(f"numerical divergence: {exc}", err=True)
        sys.exit(EXIT_DIVERGENCE)
    except (MaxIterations, NoConvergence) as exc:
        click.echo(f"convergence failure: {exc}", err=True)
        sys.exit(EXIT_NO_CONVERGENCE)
    click.echo(f"done; converged={summary['converged']}; outputs in {out}")


if __name__ == "__main__":
    main()
