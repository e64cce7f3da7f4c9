"""embedlab command line: generate, train, report.

Exit codes: 0 success, 2 validation failure, 3 data integrity failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from embedlab import ConfigError, DataIntegrityError, plotting
from embedlab.checkpoint import load_checkpoint, save_checkpoint
from embedlab.config import ExperimentConfig
from embedlab.metrics import freq_report, gain_report
from embedlab.synthgen import (SyntheticDataset, dataset_hash, generate_dataset, parse_schema,
                               read_days, write_dataset)
from embedlab.trainer import (epoch_boundary_delta, read_series_csv, read_trace_csv, run_arm,
                              write_series_csv, write_trace_csv)

log = logging.getLogger("embedlab")

EXIT_OK, EXIT_INVALID, EXIT_INTEGRITY = 0, 2, 3


def _nonempty(path: Path) -> bool:
    return path.exists() and any(path.iterdir())


def _prepare_out(path: Path, force: bool) -> None:
    if _nonempty(path):
        if not force:
            raise ConfigError(f"output directory {path} is not empty (use --force to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# -- generate ---------------------------------------------------------------

def cmd_generate(config_path, out=None, force=False, seed_override=None, jobs=1) -> str:
    cfg = ExperimentConfig.load(config_path)
    if seed_override is not None:
        cfg = cfg.with_seed(seed_override, dataset=True)
    out_dir = Path(out) if out else cfg.path("dataset_dir")
    _prepare_out(out_dir, force)
    ds_cfg = cfg.dataset
    ds = generate_dataset(cfg.spaces(), cfg.tasks(), ds_cfg["days"], ds_cfg["examples_per_day"],
                          ds_cfg["seed"], cfg.signal(), jobs=jobs)
    digest = write_dataset(ds, out_dir, {"config_hash": cfg.dataset_hash()})
    (out_dir / "config.ini").write_text(cfg.serialize())
    log.info("wrote %d days to %s (dataset hash %s)", ds.num_days, out_dir, digest)
    return digest


def verify_dataset(cfg: ExperimentConfig, data_dir: Path) -> str:
    """Recompute the dataset hash and check it against the sidecar and the config."""
    stamp = data_dir / "dataset.sha256"
    if not stamp.exists():
        raise DataIntegrityError(f"{data_dir} has no dataset.sha256; run `embedlab generate` first")
    digest = dataset_hash(data_dir)
    if digest != stamp.read_text().strip():
        raise DataIntegrityError(f"dataset files in {data_dir} do not match their recorded hash")
    schema = parse_schema((data_dir / "schema.txt").read_text())
    if schema.get("config_hash") != cfg.dataset_hash():
        raise DataIntegrityError(f"dataset in {data_dir} was generated from a different [dataset] config")
    return digest


def load_dataset(cfg: ExperimentConfig, data_dir: Path) -> SyntheticDataset:
    days = read_days(data_dir, range(cfg.dataset["days"]))
    return SyntheticDataset(tuple(cfg.spaces()), tuple(cfg.tasks()), tuple(days[d] for d in sorted(days)),
                            cfg.dataset["seed"], cfg.signal())


# -- train ----------------------------------------------------------------

def train_arm(cfg_text: str, base_dir: str, arm_name: str, data_dir: str, arm_dir: str) -> dict:
    t0 = time.perf_counter()
    cfg = ExperimentConfig.parse(cfg_text, base_dir)
    plan = cfg.plan()
    arm = next(a for a in plan.arms if a.name == arm_name)
    ds = load_dataset(cfg, Path(data_dir))
    arm_dir = Path(arm_dir)
    arm_dir.mkdir(parents=True, exist_ok=True)

    def after_batch(model, trace):
        save_checkpoint(model, arm_dir / "checkpoints" / "batch")
        write_trace_csv(trace, arm_dir / "loss_trace.csv")

    res = run_arm(plan, ds, cfg.model_config(), arm, after_batch=after_batch, **cfg.optimizer_kwargs())
    save_checkpoint(res.model, arm_dir / "checkpoints" / "continual")
    write_series_csv(res.series, arm_dir / "day_series.csv")
    trace, opt, model = res.trace, res.optimizer, res.model
    return {"arm": arm_name, "wall_seconds": round(time.perf_counter() - t0, 3),
            "skipped_batches": trace.skipped, "rejected_batches": opt.rejected,
            "meda_reinits": trace.meda_fired,
            "saturated_counters": sum(t.saturated for t in model.tables)}


def cmd_train(config_path, out=None, force=False, seed_override=None, jobs=1, data=None) -> Path:
    t0 = time.perf_counter()
    cfg = ExperimentConfig.load(config_path)
    if seed_override is not None:
        cfg = cfg.with_seed(seed_override, dataset=False)
    plan = cfg.plan()
    data_dir = Path(data) if data else cfg.path("dataset_dir")
    digest = verify_dataset(cfg, data_dir)
    run_dir = Path(out) if out else cfg.path("run_dir")
    _prepare_out(run_dir, force)
    (run_dir / "config.ini").write_text(cfg.serialize())
    text = cfg.serialize()
    args = [(text, str(cfg.base_dir), a.name, str(data_dir), str(run_dir / a.name)) for a in plan.arms]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(min(jobs, len(args))) as ex:
            results = list(ex.map(train_arm, *zip(*args)))
    else:
        results = [train_arm(*a) for a in args]
    manifest = {
        "config_hash": cfg.config_hash(),
        "dataset_hash": digest,
        "dataset_config_hash": cfg.dataset_hash(),
        "seeds": {"dataset": cfg.dataset["seed"], "model": cfg.sections["model"]["seed"],
                  "shuffle": cfg.sections["plan"]["shuffle_seed"]},
        "arms": [a.name for a in plan.arms],
        "tasks": [t.name for t in cfg.tasks()],
        "tables": [s.feature_name for s in cfg.hash_specs()],
        "arm_stats": results,
        "wall_seconds": round(time.perf_counter() - t0, 3),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    log.info("trained %d arm(s) into %s", len(plan.arms), run_dir)
    return run_dir


# -- report -----------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_report(run_dirs, control: str, treatments, out, force=False, plots=True) -> Path:
    arms: dict[str, Path] = {}
    digests = set()
    tasks = None
    tables: list[str] = []
    for rd in map(Path, run_dirs):
        mp = rd / "manifest.json"
        if not mp.exists():
            raise DataIntegrityError(f"{rd} is not a completed run (no manifest.json)")
        man = json.loads(mp.read_text())
        digests.add(man["dataset_hash"])
        if tasks is None:
            tasks, tables = man["tasks"], man["tables"]
        elif man["tasks"] != tasks:
            raise DataIntegrityError("runs disagree on the task list")
        for a in man["arms"]:
            if a in arms:
                raise ConfigError(f"arm {a!r} appears in more than one run directory")
            arms[a] = rd / a
    if len(digests) > 1:
        raise DataIntegrityError("runs were trained on different datasets: " + ", ".join(sorted(digests)))
    for a in [control, *treatments]:
        if a not in arms:
            raise ConfigError(f"unknown arm {a!r}; available: {', '.join(arms)}")
    out = Path(out)
    _prepare_out(out, force)

    series = {a: read_series_csv(p / "day_series.csv") for a, p in arms.items()}
    traces = {a: read_trace_csv(p / "loss_trace.csv") for a, p in arms.items()}

    reports, gain_rows, day_rows = [], [], []
    ctrl = series[control].auc_series(control)
    for tr in treatments:
        trs = series[tr].auc_series(tr)
        for task in tasks:
            r = gain_report(trs, ctrl, task)
            reports.append(r)
            gain_rows.append((tr, control, task, _fmt(r.cumulative_gain), len(trs.days) - len(r.skipped_days),
                              " ".join(map(str, r.skipped_days))))
            for d, g in zip(trs.days, r.per_day):
                day_rows.append((tr, control, task, d, _fmt(g)))
    _write_csv(out / "gains.csv", ("treatment", "control", "task", "cumulative_auc_gain_pct", "days",
                                   "skipped_days"), gain_rows)
    _write_csv(out / "gains_per_day.csv", ("treatment", "control", "task", "eval_day", "auc_gain_pct"), day_rows)

    boundary_rows = []
    for a, trace in traces.items():
        for task in tasks:
            if trace.boundaries:
                d = epoch_boundary_delta(trace, task)
                boundary_rows.append((a, task, _fmt(d.relative), _fmt(d.absolute), _fmt(d.before), _fmt(d.after)))
            else:
                boundary_rows.append((a, task, "", "", "", ""))
    _write_csv(out / "epoch_boundary.csv", ("arm", "task", "relative_delta", "absolute_delta",
                                            "loss_before", "loss_after"), boundary_rows)

    freq_rows, freq_reports = [], {}
    for a, p in arms.items():
        tbls, _ = load_checkpoint(p / "checkpoints" / "continual")
        freq_reports[a] = []
        rank_rows = []
        for name in tables:
            try:
                fr = freq_report(tbls[name])
            except ValueError:
                continue
            freq_reports[a].append(fr)
            for m, c in sorted(fr.coverage.items()):
                freq_rows.append((a, name, repr(m), _fmt(c), _fmt(fr.never_seen), fr.total))
            rank_rows += [(name, int(r), int(c)) for r, c in zip(fr.ranks, fr.counts)]
        _write_csv(out / f"rank_frequency_{a}.csv", ("table", "rank", "count"), rank_rows)
    _write_csv(out / "freq_summary.csv", ("arm", "table", "mass", "coverage_fraction", "never_seen_fraction",
                                          "lookups"), freq_rows)

    lines = [f"control arm: {control}", f"dataset hash: {digests.pop()}", "", "cumulative AUC gain (%)"]
    for r in reports:
        lines.append(f"  {r.treatment:>16} {r.task:>16} {r.cumulative_gain:+.4f}"
                     + (f"  (skipped days {r.skipped_days})" if r.skipped_days else ""))
    lines += ["", "epoch-boundary test-loss jump"]
    for row in boundary_rows:
        rel = f"{float(row[2]) * 100:+.3f}%" if row[2] else "n/a (single epoch)"
        lines.append(f"  {row[0]:>16} {row[1]:>16} {rel}")
    lines += ["", "row coverage (fraction of rows holding mass)"]
    for row in freq_rows:
        lines.append(f"  {row[0]:>16} {row[1]:>16} mass {row[2]:>5}: {float(row[3]):.4%}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")

    if plots:
        if plotting.available():
            plotting.loss_curves(traces, tasks, out / "loss_curves.png")
            if reports:
                plotting.auc_gains(reports, out / "auc_gain.png")
            for a, frs in freq_reports.items():
                if frs:
                    plotting.rank_frequency(frs, out / f"rank_frequency_{a}.png")
        else:
            log.warning("matplotlib is not installed; skipping figures")
    return out


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="embedlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "train"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out")
        s.add_argument("--force", action="store_true")
        s.add_argument("--seed-override", type=int)
        s.add_argument("--jobs", type=int, default=1)
        if name == "train":
            s.add_argument("--data", help="dataset directory (default: output.dataset_dir)")
    r = sub.add_parser("report")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--control", required=True)
    r.add_argument("--treatments", nargs="*", default=[])
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.add_argument("--no-plots", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "generate":
            digest = cmd_generate(args.config, args.out, args.force, args.seed_override, args.jobs)
            print(digest)
        elif args.command == "train":
            print(cmd_train(args.config, args.out, args.force, args.seed_override, args.jobs, args.data))
        else:
            print(cmd_report(args.runs, args.control, args.treatments, args.out, args.force,
                             not args.no_plots))
    except ConfigError as e:
        print(f"embedlab: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (DataIntegrityError, KeyError) as e:
        print(f"embedlab: data integrity failure: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
