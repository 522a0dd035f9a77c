"""Command line entry point: ``python -m sdde.main <command> --config <file.json>``.

Exit status: 0 on success, 1 for usage errors, missing files and invalid
model or data input, 2 for stationarity and numerical failures.
"""

import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Optional, Sequence

import click
import numpy as np
import pandas as pd
import typer
from pydantic import ValidationError

from data.data import FLOAT_FORMAT, SeriesHelper
from data.simulator import SimConfig, sample_observations, simulate_path
from sdde.autocov import autocov_grid
from sdde.config import (
    AutocovConfig,
    EstimateConfig,
    LossConfig,
    SimulateConfig,
    StudyConfig,
    load_config,
)
from sdde.estimator_service import EstimatorService
from sdde.exceptions import (
    DataError,
    ModelSpecError,
    NonStationaryModelError,
    NumericalError,
)
from sdde.logging_utils import configure_logging
from sdde.study_service import StudyService

logger = logging.getLogger(__name__)

app = typer.Typer(
    add_completion=False,
    no_args_is_help=True,
    help="Simulate, fit and study affine stochastic delay differential equations.",
)

ConfigOption = Annotated[
    Optional[Path], typer.Option("--config", "-c", help="JSON configuration document.")
]
OutOption = Annotated[
    Optional[Path], typer.Option("--out", "-o", help="CSV output path (stdout when omitted).")
]
SeedOption = Annotated[
    Optional[int], typer.Option("--seed", min=0, max=2**64 - 1, help="Master seed; overrides the config.")
]
ThreadsOption = Annotated[
    Optional[int], typer.Option("--threads", min=1, help="Parallel workers; overrides the config.")
]


@dataclass(frozen=True)
class GlobalOptions:
    """Flags given before the command; a command's own flag wins."""

    config: Optional[Path] = None
    seed: Optional[int] = None
    threads: Optional[int] = None
    out: Optional[Path] = None


def _option(ctx: typer.Context, name: str, value):
    if value is not None:
        return value
    return getattr(ctx.obj, name, None) if isinstance(ctx.obj, GlobalOptions) else None


def _config_path(ctx: typer.Context, value: Optional[Path]) -> Path:
    path = _option(ctx, "config", value)
    if path is None:
        raise click.UsageError("missing option '--config'")
    return path


def _emit(frame: pd.DataFrame, out: Optional[Path]) -> None:
    if out is None:
        typer.echo(frame.to_csv(index=False, float_format=FLOAT_FORMAT), nl=False)
        return
    SeriesHelper.write_table(frame, out, verbose=True)


def _override(config, **fields):
    update = {name: value for name, value in fields.items() if value is not None}
    return config.model_copy(update=update) if update else config


@app.callback()
def _root(
    ctx: typer.Context,
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging.")] = False,
    config: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    out: OutOption = None,
):
    configure_logging(verbose)
    ctx.obj = GlobalOptions(config=config, seed=seed, threads=threads, out=out)


@app.command()
def simulate(
    ctx: typer.Context,
    config: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    path_out: Annotated[
        Optional[Path], typer.Option("--path-out", help="Also write the full Euler path (index,time,value).")
    ] = None,
):
    """Simulate one path; writes observations (i,t,x) when delta and n are configured, else the path."""
    cfg = _override(load_config(_config_path(ctx, config), SimulateConfig), seed=_option(ctx, "seed", seed))
    out = _option(ctx, "out", out)
    try:
        sim = SimConfig(model=cfg.model, step=cfg.step, horizon=cfg.span, warmup=cfg.warmup, seed=cfg.seed)
    except ValidationError as e:
        raise ModelSpecError(f"cannot simulate this configuration: {e}") from e
    path = simulate_path(sim)
    if path_out is not None:
        SeriesHelper.write_path(path, path_out, verbose=True)
    if cfg.delta is None:
        _emit(path.to_frame(), out)
        return
    series = sample_observations(path, cfg.delta, cfg.n)
    _emit(SeriesHelper.observations_frame(series), out)


@app.command()
def autocov(ctx: typer.Context, config: ConfigOption = None, out: OutOption = None):
    """Autocovariances K(j delta), j = 0..m, with gradients for the free parameters."""
    cfg = load_config(_config_path(ctx, config), AutocovConfig)
    grid = autocov_grid(cfg.model, cfg.delta, cfg.m, cfg.params, cfg.method)
    frame = pd.DataFrame({"lag": np.arange(grid.m + 1), "t": grid.lags, "K": grid.values})
    if grid.grads is not None:
        for name, row in zip(grid.param_names, grid.grads):
            frame[f"dK_d{name}"] = row
    _emit(frame, _option(ctx, "out", out))


@app.command()
def estimate(
    ctx: typer.Context,
    config: ConfigOption = None,
    data: Annotated[Optional[Path], typer.Option("--data", help="Observation CSV with columns i,t,x.")] = None,
    seed: SeedOption = None,
    out: OutOption = None,
):
    """Fit the free parameters to one observed series."""
    cfg = load_config(_config_path(ctx, config), EstimateConfig)
    source = data if data is not None else cfg.data
    if source is None:
        raise click.UsageError("give --data or set 'data' in the configuration")
    series = SeriesHelper.read_observations(source, cfg.delta)
    seed = _option(ctx, "seed", seed)
    seed = seed if seed is not None else cfg.seed
    settings = _override(cfg.solver, restart_seed=seed)
    result = EstimatorService(settings).estimate(series, cfg.model, cfg.params, cfg.k, cfg.method, init=cfg.init)
    if not result.converged:
        logger.warning("estimate did not converge (|score|/n = %.3g)", result.score_norm)
    _emit(result.to_frame(seed), _option(ctx, "out", out))


@app.command()
def study(
    ctx: typer.Context,
    config: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    out: OutOption = None,
):
    """Replicated simulate-and-estimate study over (delta, n) cells and depths k."""
    out = _option(ctx, "out", out)
    cfg = _override(
        load_config(_config_path(ctx, config), StudyConfig),
        seed=_option(ctx, "seed", seed),
        threads=_option(ctx, "threads", threads),
        out=str(out) if out is not None else None,
    )
    result = StudyService(show_progress=True).run_study(cfg)
    if cfg.out is None:
        _emit(result.summary, None)


@app.command()
def loss(
    ctx: typer.Context,
    config: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    out: OutOption = None,
):
    """Efficiency loss of pseudo-ML against the optimal prediction-based estimator."""
    out = _option(ctx, "out", out)
    seed = _option(ctx, "seed", seed)
    cfg = _override(
        load_config(_config_path(ctx, config), LossConfig),
        threads=_option(ctx, "threads", threads),
        out=str(out) if out is not None else None,
    )
    if seed is not None and cfg.monte_carlo is not None:
        cfg = cfg.model_copy(update={"monte_carlo": cfg.monte_carlo.model_copy(update={"seed": seed})})
    table = StudyService().run_loss(cfg)
    if cfg.out is None:
        _emit(table, None)


def _fail(message: str, status: int) -> int:
    typer.echo(f"Error: {message}", err=True)
    return status


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    command = typer.main.get_command(app)
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        status = command.main(args=args, prog_name="sdde", standalone_mode=False)
    except click.exceptions.Abort:
        return _fail("aborted", 1)
    except click.ClickException as e:
        e.show()
        return 1
    except FileNotFoundError as e:
        name = e.filename if e.filename is not None else e
        message = str(name) if str(name).startswith("file not found") else f"file not found: {name}"
        return _fail(message, 1)
    except (ModelSpecError, DataError) as e:
        return _fail(str(e), 1)
    except NonStationaryModelError as e:
        return _fail(f"outside the stationarity region: {e}", 2)
    except NumericalError as e:
        return _fail(f"{type(e).__name__}: {e}", 2)
    return status if isinstance(status, int) else 0


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
