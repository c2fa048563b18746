"""``padgrpo`` command line: train, ablate, report.

Errors are printed to stderr as a single JSON line, e.g.
``{"error": "config", "violations": ["stages[0].pad.rho: rho ∈ (0,1]"]}``.
Exit status: 0 when every artifact was written, 1 on a runtime failure,
2 on usage or configuration errors. Set ``PADGRPO_LOG`` (e.g. ``DEBUG``) to
change log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, to_dict
from .envs import generate_dataset, save_dataset
from .pad import STRATEGIES
from .trainer import (
    SUMMARY_COLUMNS,
    SchemaError,
    TrainingDiverged,
    read_metrics_csv,
    run_ablation,
    run_curriculum,
    stage_artifact_stem,
    write_curves_csv,
    drift_stats,
)

log = logging.getLogger("padgrpo")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _fail(kind: str, message: str | None = None, **extra) -> dict:
    out = {"error": kind}
    if message:
        out["message"] = message
    out.update(extra)
    return out


def _write_manifest(out: Path, manifest: dict) -> Path:
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _run_id(cfg: RunConfig, given: str | None) -> str:
    return given or f"{cfg.config_hash()[:8]}-s{cfg.seed}"


# --- train ----------------------------------------------------------------


def cmd_train(config_path: str, out_dir: str, overrides: list[str] | None = None,
              run_id: str | None = None) -> int:
    cfg = load_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    datasets = []
    for i, st in enumerate(cfg.stages):
        path = out / f"{stage_artifact_stem(i, st.name)}_dataset.jsonl"
        save_dataset(generate_dataset(st.env), path)
        datasets.append(path.name)
    outcomes = run_curriculum(cfg.stages, cfg.seed, cfg.initial_params(), out)
    manifest = {
        "run_id": _run_id(cfg, run_id),
        "kind": "train",
        "software_version": __version__,
        "config": to_dict(cfg),
        "config_hash": cfg.config_hash(),
        "seeds": {"root": cfg.seed},
        "started": started,
        "finished": _now(),
        "artifacts": {
            "metrics": [oc.metrics_path.name for oc in outcomes],
            "checkpoints": [oc.checkpoint_path.name for oc in outcomes],
            "datasets": datasets,
        },
        "stages": [{"index": oc.index, "name": oc.name, "config_hash": oc.config_hash} for oc in outcomes],
    }
    _write_manifest(out, manifest)
    return 0


# --- ablate ---------------------------------------------------------------


def _parse_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def format_summary_table(rows) -> str:
    header = list(SUMMARY_COLUMNS)
    body = [[r.strategy, str(r.n_seeds)] + [f"{getattr(r, c):.4f}" for c in SUMMARY_COLUMNS[2:]] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(b, widths))) for b in body]
    return "\n".join(lines) + "\n"


def cmd_ablate(config_path: str, strategies: list[str], seeds: list[int], out_dir: str,
               overrides: list[str] | None = None, workers: int = 1) -> int:
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise UsageError(f"unknown strategy {unknown[0]!r}; valid: {', '.join(STRATEGIES)}")
    if len(strategies) < 2:
        raise UsageError("ablate needs at least two strategies")
    if not seeds:
        raise UsageError("ablate needs at least one seed")
    cfg = load_config(config_path, overrides)
    if len(cfg.stages) > 1:
        log.warning("ablate uses only the first of %d stages", len(cfg.stages))
    base = cfg.stages[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    result = run_ablation(base, strategies, seeds, cfg.initial_params(), workers=workers)

    curve_files = []
    for s in strategies:
        path = out / f"curves_{s}.csv"
        write_curves_csv(((seed, m) for seed in seeds for m in result.curves[s][seed]), path)
        curve_files.append(path.name)

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in result.summary:
            w.writerow([r.strategy, r.n_seeds] + [repr(getattr(r, c)) for c in SUMMARY_COLUMNS[2:]])
    table = format_summary_table(result.summary)
    (out / "summary.txt").write_text(table)

    from .plotting import plot_ablation

    plot_ablation({s: [[m.reward_accuracy for m in result.curves[s][seed]] for seed in seeds]
                   for s in strategies}, out / "ablation_accuracy.svg")
    _write_manifest(out, {
        "run_id": _run_id(cfg, None) + "-ablation",
        "kind": "ablate",
        "software_version": __version__,
        "config": to_dict(cfg),
        "config_hash": cfg.config_hash(),
        "seeds": {"ablation": list(seeds)},
        "strategies": list(strategies),
        "started": started,
        "finished": _now(),
        "artifacts": {"curves": curve_files, "summary": ["summary.csv", "summary.txt"],
                      "figures": ["ablation_accuracy.svg"]},
    })
    sys.stdout.write(table)
    return 0


# --- report ---------------------------------------------------------------


def load_run(run_dir: str | Path):
    """Manifest and concatenated metrics of a train run directory."""
    d = Path(run_dir)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"{d}: no {MANIFEST}")
    manifest = json.loads(mpath.read_text())
    files = manifest.get("artifacts", {}).get("metrics", [])
    if not files:
        raise FileNotFoundError(f"{d}: manifest lists no metrics files")
    metrics = []
    for name in files:
        p = d / name
        if not p.is_file():
            raise FileNotFoundError(f"{d}: missing metrics file {name}")
        metrics.extend(read_metrics_csv(p))
    return manifest, metrics


REPORT_COLUMNS = ("run_id", "steps", "final_reward_accuracy", "length_first_10pct",
                  "length_last_10pct", "length_drift", "final_entropy", "final_clip_fraction")


def cmd_report(run_dirs: list[str], out_dir: str) -> int:
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    runs = {}
    for d in run_dirs:
        manifest, metrics = load_run(d)
        rid = manifest.get("run_id", Path(d).name)
        if rid in runs:
            rid = f"{rid} ({Path(d).name})"
        runs[rid] = metrics
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .plotting import plot_dynamics

    plot_dynamics(runs, out / "dynamics.svg")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rid, metrics in runs.items():
            s = drift_stats(metrics)
            w.writerow([rid] + [repr(s[c]) if isinstance(s[c], float) else s[c] for c in REPORT_COLUMNS[1:]])
    return 0


# --- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="padgrpo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"padgrpo {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a staged curriculum")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--run-id")

    a = sub.add_parser("ablate", help="compare distillation strategies over seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--strategies", required=True, help=f"comma-separated subset of {','.join(STRATEGIES)}")
    a.add_argument("--seeds", required=True, help="comma-separated integers")
    a.add_argument("--out", required=True)
    a.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--workers", type=int, default=1)

    r = sub.add_parser("report", help="four-panel training dynamics over train runs")
    r.add_argument("--runs", required=True, help="comma-separated run directories")
    r.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("PADGRPO_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.overrides, args.run_id)
        if args.command == "ablate":
            try:
                seeds = [int(s) for s in _parse_list(args.seeds)]
            except ValueError:
                raise UsageError(f"seeds must be integers: {args.seeds!r}") from None
            return cmd_ablate(args.config, _parse_list(args.strategies), seeds, args.out,
                              args.overrides, args.workers)
        return cmd_report(_parse_list(args.runs), args.out)
    except ConfigError as exc:
        err, code = _fail("config", violations=exc.violations), 2
    except UsageError as exc:
        err, code = _fail("usage", str(exc)), 2
    except FileNotFoundError as exc:
        err, code = _fail("not_found", str(exc)), 2
    except SchemaError as exc:
        err, code = _fail("schema", str(exc)), 2
    except TrainingDiverged as exc:
        err, code = _fail("diverged", str(exc),
                          checkpoint=str(exc.checkpoint) if exc.checkpoint else None), 1
    sys.stderr.write(json.dumps(err, ensure_ascii=False) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
