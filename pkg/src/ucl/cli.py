"""Command line entry point: ``ucl train|eval|analyze|plot``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import load_config, parse_overrides
from .models import load_checkpoint
from .plots import PLOT_KINDS, emit_plots
from .runner import load_record, probe_set, run_experiment, run_fewshot_sweep, run_ood_eval

log = logging.getLogger("ucl")


def _trial_checkpoint(record: dict, trial_index: int, task: int):
    trial = record["trials"][trial_index]
    if trial["status"] != "ok":
        raise FileNotFoundError(f"seed {trial['seed']} was aborted")
    ckpts = trial["checkpoints"]
    wanted = [c for c in ckpts if Path(c).name == f"task_{task}.ckpt"] if task >= 0 else ckpts[-1:]
    if not wanted or not Path(wanted[0]).exists():
        raise FileNotFoundError(f"no checkpoint for task {task} of seed {trial['seed']}")
    return load_checkpoint(wanted[0])[0]


def _trial_pairs(a: dict, b: dict, across_seeds: bool) -> list[tuple[int, int]]:
    """Trial index pairs: matching seeds across two records, or consecutive
    seeds (independent models) within a single record."""
    if across_seeds:
        n = len(a["trials"])
        if n < 2:
            raise ValueError("comparing independent models of one record needs at least 2 trials")
        return [(k, k + 1) for k in range(n - 1)]
    return [(k, k) for k in range(min(len(a["trials"]), len(b["trials"])))]


def cmd_train(args) -> int:
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides.update(base_seed=str(args.seed), trials="1")
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides)
    if args.caps:
        records = run_fewshot_sweep(cfg, [int(c) for c in args.caps])
    else:
        records = [run_experiment(cfg, resume=not args.no_resume)]
    aborted = 0
    for rec in records:
        s = rec["summary"]
        aborted += sum(t["status"] == "aborted" for t in rec["trials"])
        print(json.dumps({"cap": rec.get("cap"), **s}))
    return 1 if aborted else 0


def cmd_eval(args) -> int:
    record = load_record(args.record)
    if not args.ood:
        print(json.dumps(record["summary"], indent=2))
        return 0 if all(t["status"] == "ok" for t in record["trials"]) else 1
    rows = run_ood_eval(record, args.ood, data_root=args.data_root, out_dir=Path(args.record) / "ood")
    for r in rows:
        print(f"{r['dataset']}: {100 * r['mean']:.2f} +- {100 * r['std']:.2f}")
    return 0


def cmd_analyze(args) -> int:
    a = load_record(args.records[0])
    b = load_record(args.records[1]) if len(args.records) > 1 else a
    out = Path(args.out or Path(args.records[0]) / "figures")
    out.mkdir(parents=True, exist_ok=True)
    pairs = _trial_pairs(a, b, len(args.records) == 1 and args.task_a == args.task_b)
    if args.kind == "l2":
        rows = []
        for i, j in pairs:
            # backbones only, so supervised and unsupervised runs are comparable
            d = analysis.l2_param_distance(_trial_checkpoint(a, i, args.task_a).backbone,
                                           _trial_checkpoint(b, j, args.task_b).backbone)
            rows.append({"seed_a": a["trials"][i]["seed"], "seed_b": b["trials"][j]["seed"], "l2": d})
        (out / "l2.json").write_text(json.dumps(rows, indent=2))
        print(json.dumps(rows))
    elif args.kind == "cka":
        reports = []
        for i, j in pairs:
            probe, _, _ = probe_set(a, i, limit=args.probe_size)
            rep = analysis.cka_report(_trial_checkpoint(a, i, args.task_a), _trial_checkpoint(b, j, args.task_b),
                                      probe).to_dict()
            rep["label"] = f"seed{a['trials'][i]['seed']}_vs_seed{b['trials'][j]['seed']}"
            reports.append(rep)
        (out / "cka.json").write_text(json.dumps(reports, indent=2))
        emit_plots(reports, "cka", out)
        print(json.dumps([r["scores"] for r in reports]))
    elif args.kind == "landscape":
        grids = []
        for name, rec, task in (("a", a, args.task_a), ("b", b, args.task_b))[: len(args.records)]:
            bundle = _trial_checkpoint(rec, 0, task)
            images, labels, stream = probe_set(rec, 0, limit=args.probe_size)
            num_classes = stream.num_tasks * stream.classes_per_task
            feat_dim = bundle.features(images[:2]).shape[1]
            loss = analysis.random_probe_loss(feat_dim, num_classes, seed=args.direction_seed)
            rng = np.random.default_rng(args.direction_seed)
            d1 = analysis.filter_normalized_direction(bundle.backbone, rng)
            d2 = analysis.filter_normalized_direction(bundle.backbone, rng)
            grid = analysis.loss_landscape_grid(bundle.backbone, loss, (images, labels), d1, d2,
                                                args.extent, args.resolution)
            grid.label = f"{name}_{rec['config']['paradigm']}_{rec['config']['strategy']}"
            grids.append(grid)
        emit_plots(grids, "landscape", out)
        print(json.dumps({g.label: g.center_loss for g in grids}))
    elif args.kind == "features":
        for name, rec, task in (("a", a, args.task_a), ("b", b, args.task_b))[: len(args.records)]:
            images, _, _ = probe_set(rec, 0, limit=1)
            grid = analysis.feature_map_export(_trial_checkpoint(rec, 0, task), images[0], args.block,
                                               args.n_channels, args.direction_seed if args.random_channels else None)
            analysis.save_png(grid.image, out / f"features_{name}_block{args.block}.png", cmap="gray")
        print(f"wrote feature maps to {out}")
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out or "figures")
    if args.kind in ("fewshot", "accuracy"):
        items = [load_record(p) for p in args.records]
    elif args.kind == "cka":
        items = [rep for p in args.records for rep in json.loads(Path(p).read_text())]
    else:
        items = []
        for p in args.records:
            grid = analysis.LandscapeGrid.from_csv(Path(p).read_text())
            grid.label = Path(p).stem.removeprefix("landscape_")
            items.append(grid)
    for path in emit_plots(items, args.kind, out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ucl", description="Unsupervised and supervised continual learning runs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run every trial of a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="run a single trial with this seed")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--caps", nargs="+", help="few-shot sweep over per-task instance caps")
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="summarize a record or probe it on OOD datasets")
    p.add_argument("--record", required=True)
    p.add_argument("--ood", nargs="*")
    p.add_argument("--data-root")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="representation analysis between checkpoints")
    p.add_argument("--records", nargs="+", required=True, metavar="DIR")
    p.add_argument("--kind", choices=("cka", "l2", "landscape", "features"), required=True)
    p.add_argument("--task-a", type=int, default=-1, help="task checkpoint of the first record (-1: final)")
    p.add_argument("--task-b", type=int, default=-1)
    p.add_argument("--probe-size", type=int)
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--direction-seed", type=int, default=0)
    p.add_argument("--block", type=int, default=1)
    p.add_argument("--n-channels", type=int, default=20)
    p.add_argument("--random-channels", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", help="render figures from records or saved analysis outputs")
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--kind", choices=PLOT_KINDS, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "analyze" and len(args.records) > 2:
        print("analyze takes one or two record directories", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
