"""Command-line entry point: ``spark-dfl run|sweep|resume|report|defaults``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The output directory comes from ``--out``, else ``$SPARK_OUT``, else
``output.dir`` in the configuration.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor

import click

from . import __version__
from .config import RunConfig, load_config, resolve_key, to_toml
from .errors import ConfigurationError, SparkError
from .simulator import Simulation, read_metrics_csv, write_metrics_csv

log = logging.getLogger("spark_dfl")

EXIT_RUNTIME = 1
EXIT_USAGE = 2
SPARK = "▁▂▃▄▅▆▇█"


class UsageFailure(click.ClickException):
    exit_code = EXIT_USAGE


class RuntimeFailure(click.ClickException):
    exit_code = EXIT_RUNTIME


def _load(config_path: str | None, overrides) -> RunConfig:
    try:
        if config_path is None:
            cfg = RunConfig()
        elif config_path.endswith(".json"):
            with open(config_path) as fh:
                cfg = RunConfig.from_dict(json.load(fh)["config"])
        else:
            cfg = load_config(config_path)
        return cfg.with_overrides(overrides).validate()
    except ConfigurationError as exc:
        raise UsageFailure(str(exc)) from None
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise UsageFailure(f"cannot read configuration {config_path}: {exc}") from None


def _out_root(cfg: RunConfig, out: str | None) -> str:
    return out or os.environ.get("SPARK_OUT") or cfg.output.dir


def _prepare_dir(path: str, overwrite: bool) -> None:
    if os.path.exists(os.path.join(path, "metrics.csv")) and not overwrite:
        raise UsageFailure(f"{path} already holds a run; set output.overwrite=true or pick another directory")
    os.makedirs(path, exist_ok=True)


def _seeds(cfg: RunConfig, seeds) -> list[int]:
    return list(seeds) if seeds else list(cfg.experiment.seeds)


def execute(cfg: RunConfig, seed: int, run_dir: str, sim: Simulation | None = None) -> Simulation:
    """Run one seed into ``run_dir``: manifest first, then metrics and checkpoints."""
    try:
        sim = sim or Simulation(cfg, seed)
        with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
            json.dump(sim.manifest(), fh, indent=2)
        every = cfg.output.checkpoint_every

        def on_round(s, m):
            log.info("seed %d round %d: agg_acc=%.4f client_acc=%.4f bytes=%d",
                     seed, m.round, m.agg_acc, m.client_acc, m.bytes)
            if every and m.round % every == 0:
                s.save_checkpoint(os.path.join(run_dir, f"round-{m.round:04d}.spkc"))

        sim.run(on_round=on_round)
        write_metrics_csv(os.path.join(run_dir, "metrics.csv"), sim.metrics)
        sim.save_checkpoint(os.path.join(run_dir, "final.spkc"))
        return sim
    except ConfigurationError as exc:
        raise UsageFailure(str(exc)) from None
    except (SparkError, FloatingPointError, OSError) as exc:
        raise RuntimeFailure(f"seed {seed}: {exc}") from None


def rounds_to_threshold(rows: list[dict], threshold: float) -> int | None:
    for row in rows:
        if float(row["agg_acc"]) >= threshold:
            return int(row["round"])
    return None


def total_gib(rows: list[dict]) -> float:
    return sum(int(row["bytes"]) for row in rows) / 2 ** 30


def sparkline(values) -> str:
    values = [float(v) for v in values]
    if not values:
        return ""
    lo, hi = min(values), max(values)
    span = hi - lo or 1.0
    return "".join(SPARK[min(int((v - lo) / span * len(SPARK)), len(SPARK) - 1)] for v in values)


def summarize(run_dir: str, threshold: float) -> dict:
    rows = read_metrics_csv(os.path.join(run_dir, "metrics.csv"))
    hit = rounds_to_threshold(rows, threshold)
    return {
        "rounds": len(rows),
        "final_agg_acc": float(rows[-1]["agg_acc"]) if rows else math.nan,
        "final_client_acc": float(rows[-1]["client_acc"]) if rows else math.nan,
        "rounds_to_threshold": hit,
        "total_gib": total_gib(rows),
        "curve": [float(r["agg_acc"]) for r in rows],
    }


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log every round.")
def main(verbose):
    """Decentralized training with sketched Jacobian exchange."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", required=False, type=click.Path(dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key.")
@click.option("--seed", "seeds", multiple=True, type=int, help="Seed to run; repeatable.")
@click.option("--out", type=click.Path(file_okay=False), help="Output root directory.")
def run(config, overrides, seeds, out):
    """Run every seed of CONFIG (TOML file or a saved manifest.json)."""
    cfg = _load(config, overrides)
    root = os.path.join(_out_root(cfg, out), cfg.experiment.name)
    for seed in _seeds(cfg, seeds):
        run_dir = os.path.join(root, f"seed-{seed}")
        _prepare_dir(run_dir, cfg.output.overwrite)
        sim = execute(cfg, seed, run_dir)
        last = sim.metrics[-1] if sim.metrics else None
        tail = f"final agg_acc {last.agg_acc:.4f}" if last else "no rounds"
        click.echo(f"{run_dir}: {tail}")


def _sweep_one(args):
    cfg_dict, seed, run_dir = args
    cfg = RunConfig.from_dict(cfg_dict)
    execute(cfg, seed, run_dir)
    return run_dir


@main.command()
@click.argument("config", required=False, type=click.Path(dir_okay=False))
@click.option("--axis", required=True, help="Config key to vary, e.g. projection.k.")
@click.option("--values", "values", required=True, help="Comma-separated values.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--seed", "seeds", multiple=True, type=int)
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--threshold", default=0.85, show_default=True, type=float)
@click.option("--parallel", default=1, show_default=True, type=int, help="Concurrent runs (separate processes).")
def sweep(config, axis, values, overrides, seeds, out, threshold, parallel):
    """One run per value of AXIS, plus a summary.csv."""
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise UsageFailure("--values is empty")
    try:
        axis = resolve_key(axis)
    except ConfigurationError as exc:
        raise UsageFailure(str(exc)) from None
    base = _load(config, overrides)
    root = os.path.join(_out_root(base, out), base.experiment.name)
    jobs = []
    for value in items:
        cfg = _load(config, [*overrides, f"{axis}={value}"])
        for seed in _seeds(cfg, seeds):
            run_dir = os.path.join(root, f"{axis}={value}", f"seed-{seed}")
            _prepare_dir(run_dir, cfg.output.overwrite)
            jobs.append((value, seed, cfg, run_dir))
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as pool:
            list(pool.map(_sweep_one, [(c.to_dict(), s, d) for _, s, c, d in jobs]))
    else:
        for _, seed, cfg, run_dir in jobs:
            execute(cfg, seed, run_dir)
    header = "axis,value,seed,rounds,final_agg_acc,final_client_acc,rounds_to_threshold,total_gib"
    lines = [header]
    for value, seed, _, run_dir in jobs:
        s = summarize(run_dir, threshold)
        hit = "" if s["rounds_to_threshold"] is None else s["rounds_to_threshold"]
        lines.append(f"{axis},{value},{seed},{s['rounds']},{s['final_agg_acc']:.6f},"
                     f"{s['final_client_acc']:.6f},{hit},{s['total_gib']:.9f}")
    with open(os.path.join(root, "summary.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    click.echo("\n".join(lines))


@main.command()
@click.argument("checkpoint", type=click.Path(dir_okay=False, exists=True))
@click.option("--rounds", type=int, help="New horizon (total rounds); defaults to the stored one.")
@click.option("--out", type=click.Path(file_okay=False), help="Directory for the resumed run.")
def resume(checkpoint, rounds, out):
    """Continue a run from a checkpoint written by ``run``."""
    try:
        sim = Simulation.restore(checkpoint)
        if rounds is not None:
            cfg = sim.cfg.with_overrides([f"train.rounds={rounds}"])
            sim = Simulation.restore(checkpoint, cfg=cfg)
    except ConfigurationError as exc:
        raise UsageFailure(str(exc)) from None
    except SparkError as exc:
        raise RuntimeFailure(str(exc)) from None
    run_dir = out or os.path.dirname(os.path.abspath(checkpoint))
    os.makedirs(run_dir, exist_ok=True)
    execute(sim.cfg, sim.seed, run_dir, sim)
    click.echo(f"{run_dir}: resumed at round {sim.metrics[0].round if sim.metrics else 0}, "
               f"now at round {sim.round}")


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--threshold", default=0.85, show_default=True, type=float)
@click.option("--spark/--no-spark", "show_spark", default=True, help="Plain-text accuracy curve.")
def report(run_dir, threshold, show_spark):
    """Rounds to THRESHOLD, final accuracy and traffic for one run."""
    for name in ("metrics.csv", "manifest.json"):
        if not os.path.exists(os.path.join(run_dir, name)):
            raise UsageFailure(f"{run_dir}: missing {name}")
    s = summarize(run_dir, threshold)
    hit = s["rounds_to_threshold"]
    reached = str(hit) if hit is not None else f"not reached ({s['rounds']} rounds)"
    click.echo(f"rounds to {threshold:.0%}: {reached}")
    click.echo(f"final aggregated accuracy: {s['final_agg_acc']:.4f}")
    click.echo(f"final mean client accuracy: {s['final_client_acc']:.4f}")
    click.echo(f"total communicated: {s['total_gib']:.6f} GiB")
    if show_spark and s["curve"]:
        click.echo(f"accuracy: {sparkline(s['curve'])}")


@main.command()
def defaults():
    """Print every configuration key with its default value."""
    click.echo(to_toml(RunConfig()), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
