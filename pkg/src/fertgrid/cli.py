"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 infeasible allocation.  ``FERTGRID_WORKERS`` bounds the worker pools.
"""
from __future__ import annotations

import logging
import sys
import time

import click

from . import pipeline as P
from .downscale import InfeasibleError
from .grassland import RuleError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INFEASIBLE = 0, 2, 3, 4


def _setup_logging(quiet: bool) -> None:
    root = logging.getLogger("fertgrid")
    root.handlers.clear()
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(h)
    root.setLevel(logging.WARNING if quiet else logging.INFO)
    root.propagate = False


def _run(stages, config, seed, out):
    t0 = time.perf_counter()
    try:
        cfg = P.load_config(config, seed=seed, out=out)
        for stage in stages:
            P.RUNNERS[stage](cfg)
    except P.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except InfeasibleError as exc:
        click.echo(f"infeasible: {exc}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    except (P.DataError, RuleError, ValueError, KeyError, FileNotFoundError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    P.record("cli", "+".join(stages), "seconds", time.perf_counter() - t0)


_common = [
    click.option("-c", "--config", "config", required=True, type=click.Path(dir_okay=False),
                 help="Pipeline configuration (YAML)."),
    click.option("--seed", type=int, default=None, help="Override the configured seed."),
    click.option("--out", type=str, default=None, help="Override the output directory."),
]


def _with_common(f):
    for opt in reversed(_common):
        f = opt(f)
    return f


@click.group()
@click.option("-q", "--quiet", is_flag=True, help="Only warnings and errors.")
def main(quiet):
    """Crop fertilizer rates: train, explain, reconcile and grid them."""
    _setup_logging(quiet)


def _stage_command(name, doc):
    @_with_common
    def cmd(config, seed, out):
        _run([name], config, seed, out)
    cmd.__doc__ = doc
    main.command(name)(cmd)


for _name, _doc in [
    ("ingest", "Clean rate records and assemble the feature table."),
    ("train", "Nested CV over the grid, metrics table, refit per nutrient."),
    ("explain", "TreeSHAP matrix, grouped by feature, plus the top-10 ranking."),
    ("shares", "Grassland and fodder shares from the country rule file."),
    ("adjust", "Scale predicted rates to the net national budgets."),
    ("downscale", "Harvested-area and fertilizer rasters with a checksum manifest."),
    ("validate", "MAE and MAPE against reference series."),
]:
    _stage_command(_name, _doc)


@main.command("pipeline")
@_with_common
def pipeline_cmd(config, seed, out):
    """Run every stage in order."""
    _run(list(P.STAGES), config, seed, out)


@main.command("toy")
@click.argument("directory", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
def toy_cmd(directory, seed):
    """Write the bundled synthetic fixture (and its config) to DIRECTORY."""
    from .toy import ToyWorld

    path = ToyWorld(seed).write(directory)
    click.echo(str(path))


if __name__ == "__main__":
    main()
