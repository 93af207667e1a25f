"""Command line: pretrain, train, eval, sweep, bench, report.

Outputs land under ``--out`` (default ``$PEFTCL_OUT``, then ``run.out``)::

    pretrain/seed<N>/checkpoint/           frozen backbone
    train/<method>-<variant>/seed<N>/      metrics.csv, loss_curve.csv, checkpoint/
    sweep.csv  bench.csv  report.csv  loss_curves.csv
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import runner
from .bench import bench_rows, throughput_bench
from .checkpoint import CheckpointError
from .config import ExperimentConfig, parse_config, serialize_config
from .vit import ConfigError

SWEEP_AXES = {"rank": ("peft", "rank"), "prompt_length": ("peft", "prompt_length"),
              "k": ("sx", "k"), "pool_size": ("l2x", "pool_size")}


class CommandError(RuntimeError):
    pass


def out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or os.environ.get("PEFTCL_OUT") or cfg.run.out)


def load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else parse_config(text="")
    if getattr(args, "method", None):
        cfg = cfg.with_values(method={"name": args.method})
    return cfg


def seeds_of(args, cfg: ExperimentConfig) -> list[int]:
    return list(args.seed) if args.seed else list(cfg.run.seeds)


def run_dir(root: Path, cfg: ExperimentConfig, seed: int) -> Path:
    return root / "train" / f"{cfg.method.name}-{runner.variant_name(cfg)}" / f"seed{seed}"


def backbone_for(root: Path, seed: int):
    path = root / "pretrain" / f"seed{seed}" / "checkpoint"
    try:
        return runner.load_backbone(path)
    except CheckpointError as err:
        raise CommandError(f"missing pretrain checkpoint for seed {seed}: {err}") from None


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------- commands

def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    root = out_dir(args, cfg)
    for seed in seeds_of(args, cfg):
        params, log = runner.pretrain_backbone(cfg, seed)
        d = root / "pretrain" / f"seed{seed}"
        runner.save_backbone(d / "checkpoint", params, cfg.vit_config())
        write_text(d / "loss_curve.csv", runner.loss_csv((s.step, "train", s.loss, s.accuracy) for s in log))
        print(f"pretrain seed={seed} final_loss={log[-1].loss:.6g}" if log else f"pretrain seed={seed}")
    return 0


def train_one(cfg: ExperimentConfig, root: Path, seed: int):
    base = backbone_for(root, seed)
    tasks = runner.prepare(cfg, seed)
    name = cfg.method.name
    if name.startswith("joint_"):
        record, state = runner.joint_train(cfg, tasks, name[len("joint_"):], base, seed)
    else:
        record, state = runner.run_scenario(cfg, tasks, base, seed)
    d = run_dir(root, cfg, seed)
    runner.write_run(d, record, state)
    write_text(d / "config.txt", serialize_config(cfg))
    return record


def cmd_train(args) -> int:
    cfg = load_config(args)
    root = out_dir(args, cfg)
    for seed in seeds_of(args, cfg):
        record = train_one(cfg, root, seed)
        print(f"train {record.method} {record.variant} seed={seed} "
              f"avg_accuracy={record.final_average_accuracy():.6g}")
    return 0


def evaluate(cfg: ExperimentConfig, root: Path, seed: int) -> list[tuple]:
    """Final-row metrics recomputed from a stored checkpoint."""
    base = backbone_for(root, seed)
    d = run_dir(root, cfg, seed)
    try:
        state = runner.load_state(d / "checkpoint", base, cfg.vit_config())
    except CheckpointError as err:
        raise CommandError(f"missing train checkpoint {d}: {err}") from None
    tasks = runner.prepare(cfg, seed)
    forced = cfg.method.forced_routing and isinstance(state, runner.ExpertRegistry)
    preds = []
    for j, task in enumerate(tasks):
        if isinstance(state, runner.JointModel):
            preds.append(state.logits(task.test_x).data.argmax(axis=1))
        else:
            experts = np.full(task.n_test, j) if forced else None
            preds.append(runner.predict(state, task.test_x, cfg, experts))
    correct = sum(int((p == t.test_y).sum()) for p, t in zip(preds, tasks))
    total = sum(t.n_test for t in tasks)
    rows = [(cfg.method.name, runner.variant_name(cfg), seed, len(tasks) - 1, "avg_accuracy", correct / total)]
    if isinstance(state, runner.ExpertRegistry):
        hits = sum(int((runner.select_expert(t.test_x, state) == j).sum()) for j, t in enumerate(tasks))
        rows.append((cfg.method.name, runner.variant_name(cfg), seed, len(tasks) - 1,
                     "expert_selection_accuracy", hits / total))
    return rows


def cmd_eval(args) -> int:
    cfg = load_config(args)
    root = out_dir(args, cfg)
    for seed in seeds_of(args, cfg):
        rows = evaluate(cfg, root, seed)
        write_text(run_dir(root, cfg, seed) / "eval_metrics.csv", runner.metrics_csv(rows))
        print(f"eval {cfg.method.name} seed={seed} avg_accuracy={rows[0][5]:.6g}")
    return 0


def sweep_cells(cfg: ExperimentConfig, seeds: list[int]) -> list[tuple[str, dict, int]]:
    """(method, {axis: value}, seed) for every point of the declared grid."""
    axes = [(name, getattr(cfg.sweep, name)) for name in SWEEP_AXES if getattr(cfg.sweep, name)]
    methods = cfg.sweep.methods or (cfg.method.name,)
    grid = list(itertools.product(*[vals for _, vals in axes])) if axes else [()]
    cells = []
    for method in methods:
        for point in grid:
            for seed in seeds:
                cells.append((method, dict(zip([a for a, _ in axes], point)), seed))
    return cells


def cell_label(point: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in point.items()) or "base"


def run_cell(cfg: ExperimentConfig, root: str, method: str, point: dict, seed: int) -> tuple:
    updates: dict[str, dict] = {"method": {"name": method}}
    for axis, value in point.items():
        section, key = SWEEP_AXES[axis]
        updates.setdefault(section, {})[key] = value
    cell_cfg = cfg.with_values(**updates)
    base = backbone_for(Path(root), seed)
    tasks = runner.prepare(cell_cfg, seed)
    if method.startswith("joint_"):
        record, _ = runner.joint_train(cell_cfg, tasks, method[len("joint_"):], base, seed)
    else:
        record, _ = runner.run_scenario(cell_cfg, tasks, base, seed)
    return (method, cell_label(point), seed, len(tasks) - 1, "avg_accuracy", record.final_average_accuracy())


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    root = out_dir(args, cfg)
    cells = sweep_cells(cfg, seeds_of(args, cfg))
    results: list[tuple | None] = [None] * len(cells)
    failed = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(run_cell, cfg, str(root), *cell) for cell in cells]
            for i, fut in enumerate(futures):
                try:
                    results[i] = fut.result()
                except Exception as err:  # noqa: BLE001 - report and keep going
                    failed.append((cells[i], err))
    else:
        for i, cell in enumerate(cells):
            try:
                results[i] = run_cell(cfg, str(root), *cell)
            except Exception as err:  # noqa: BLE001
                failed.append((cell, err))
    write_text(root / "sweep.csv", runner.metrics_csv([r for r in results if r is not None]))
    for (method, point, seed), err in failed:
        print(f"sweep cell failed: method={method} {cell_label(point)} seed={seed}: {err}", file=sys.stderr)
    print(f"sweep: {len(cells) - len(failed)}/{len(cells)} cells")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    cfg = load_config(args)
    root = out_dir(args, cfg)
    b = cfg.bench
    rows = []
    for seed in seeds_of(args, cfg):
        base = backbone_for(root, seed)
        d = run_dir(root, cfg, seed)
        try:
            state = runner.load_state(d / "checkpoint", base, cfg.vit_config())
        except CheckpointError as err:
            raise CommandError(f"missing train checkpoint {d}: {err}") from None
        tasks = runner.prepare(cfg, seed)
        regimes = [args.regime] if args.regime else ["best", "average"]
        if cfg.method.name in runner.L2X_METHODS:
            regimes = regimes[:1]
        for regime in regimes:
            res = throughput_bench(cfg.method.name, state, tasks, regime, b.batch_size, b.batches,
                                   b.trials, b.warmup, seed)
            rows.extend(bench_rows(res, seed, len(tasks) - 1))
            print(f"bench {res.method} {res.regime} seed={seed} images/sec={res.images_per_sec:.6g}")
    write_text(root / "bench.csv", runner.metrics_csv(rows))
    return 0


def aggregate(rows: list[dict]) -> list[tuple]:
    """(method, variant, task_index, metric, n, mean, sample std) per group."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["method"], r["variant"], int(r["task_index"]), r["metric"])
        groups.setdefault(key, []).append(float(r["value"]))
    out = []
    for key in sorted(groups):
        vals = groups[key]
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append(key + (len(vals), statistics.fmean(vals), std))
    return out


def cmd_report(args) -> int:
    cfg = ExperimentConfig() if not args.config else parse_config(args.config)
    root = out_dir(args, cfg)
    metric_files = sorted((root / "train").glob("*/seed*/metrics.csv"))
    if not metric_files:
        raise CommandError(f"no metrics.csv under {root / 'train'}")
    rows = []
    for path in metric_files:
        rows.extend(runner.read_metrics_csv(path))
    if args.method:
        rows = [r for r in rows if r["method"] == args.method]
    table = aggregate(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "variant", "task_index", "metric", "n", "mean", "std"))
    for method, variant, ti, metric, n, mean, std in table:
        w.writerow((method, variant, ti, metric, n, runner.format_value(mean), runner.format_value(std)))
    write_text(root / "report.csv", buf.getvalue())

    curves = io.StringIO()
    cw = csv.writer(curves, lineterminator="\n")
    cw.writerow(("method", "variant", "seed") + runner.LOSS_HEADER)
    for path in sorted((root / "train").glob("*/seed*/loss_curve.csv")):
        run_name, seed = path.parent.parent.name, path.parent.name[len("seed"):]
        method, _, variant = run_name.partition("-")
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                cw.writerow((method, variant, seed, r["step"], r["split"], r["loss"], r["accuracy"]))
    write_text(root / "loss_curves.csv", curves.getvalue())

    final = [t for t in table if t[3] in ("avg_accuracy", "forgetting", "backward_transfer")]
    last = {}
    for t in final:
        key = (t[0], t[1], t[3])
        if key not in last or t[2] > last[key][2]:
            last[key] = t
    print(f"{'method':<14}{'variant':<22}{'metric':<20}{'mean ± std':>22}  n")
    for (method, variant, metric), t in sorted(last.items()):
        print(f"{method:<14}{variant:<22}{metric:<20}{t[5] * 100:>12.2f} ± {t[6] * 100:<7.2f}  {t[4]}")
    return 0


# ------------------------------------------------------------------ parser

COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "bench": cmd_bench, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peftcl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, action="append", metavar="N")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--method", metavar="NAME")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, metavar="N")
        if name == "bench":
            p.add_argument("--regime", choices=("best", "average"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CommandError, ConfigError, OSError) as err:
        print(f"peftcl {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
