"""End-to-end experiment orchestration and persisted run records."""

from __future__ import annotations

import dataclasses
import json
import logging
import platform
import time
import traceback
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch

from .augment import normalize
from .config import RunConfig
from .data import (NORMALIZATION, ImageSource, TaskStream, build_split_stream, load_ood_eval_set, load_source,
                   task_eval_sets)
from .knn import AccuracyMatrix, KnnConfig, average_accuracy, average_forgetting, evaluate_task
from .losses import make_ssl_loss
from .models import build_encoder_bundle, load_checkpoint, save_checkpoint
from .strategies import Learner, multitask_train, train_task

log = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1

_matrix_schema = {"type": "array", "items": {"type": "array", "items": {"type": ["number", "null"]}}}

RECORD_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "config", "trials", "summary", "environment", "wall_clock_seconds"],
    "properties": {
        "schema_version": {"const": RECORD_SCHEMA_VERSION},
        "config": {"type": "object"},
        "cap": {"type": ["integer", "null"]},
        "trials": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["seed", "status", "accuracy_matrix", "average_accuracy", "final_accuracy",
                             "forgetting", "checkpoints", "manifest"],
                "properties": {
                    "seed": {"type": "integer"},
                    "status": {"enum": ["ok", "aborted"]},
                    "error": {"type": ["string", "null"]},
                    "accuracy_matrix": _matrix_schema,
                    "average_accuracy": {"type": "array", "items": {"type": ["number", "null"]}},
                    "final_accuracy": {"type": ["number", "null"]},
                    "forgetting": {"type": ["number", "null"], "minimum": 0},
                    "checkpoints": {"type": "array", "items": {"type": "string"}},
                    "manifest": {"type": ["string", "null"]},
                    "loss_history": {"type": "array"},
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["accuracy_mean", "accuracy_std", "forgetting_mean", "forgetting_std", "n_ok"],
            "properties": {
                "accuracy_mean": {"type": ["number", "null"]},
                "accuracy_std": {"type": ["number", "null"]},
                "forgetting_mean": {"type": ["number", "null"]},
                "forgetting_std": {"type": ["number", "null"]},
                "n_ok": {"type": "integer"},
            },
        },
        "environment": {"type": "object"},
        "wall_clock_seconds": {"type": "number", "minimum": 0},
    },
}


def validate_record(record: dict) -> None:
    jsonschema.validate(record, RECORD_SCHEMA)


def environment_stamp() -> dict:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
        "torch_threads": torch.get_num_threads(),
    }


def _mean_std(values: list[float]) -> tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def load_stream_source(cfg: RunConfig) -> ImageSource:
    synthetic = cfg.synthetic_config() if cfg.dataset == "synthetic" else None
    return load_source(cfg.dataset, cfg.data_root, download=cfg.download, synthetic=synthetic)


class TrialInterrupted(RuntimeError):
    """Raised when a trial is stopped on purpose after a given task."""


def _latest_checkpoint(ckpt_dir: Path, num_tasks: int) -> Optional[int]:
    for tau in reversed(range(num_tasks)):
        if (ckpt_dir / f"task_{tau}.ckpt").exists():
            return tau
    return None


def run_trial(cfg: RunConfig, seed: int, out_dir: Path, source: Optional[ImageSource] = None,
              resume: bool = True, stop_after_task: Optional[int] = None) -> dict:
    """Train and evaluate one seed; returns the trial entry of the run record."""
    cfg = cfg.resolved()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    source = source or load_stream_source(cfg)
    stream = build_split_stream(cfg.dataset, cfg.num_tasks, cfg.classes_per_task, seed, cfg.per_task_cap,
                                source=source)
    manifest = out_dir / "stream.json"
    stream.save(manifest)

    torch.manual_seed(seed)
    bundle = build_encoder_bundle(cfg.arch_config(), seed=seed)
    loss_fn = make_ssl_loss(cfg.objective, cfg.lambda_bt, cfg.bt_centered) if cfg.family == "ucl" else None
    aug = cfg.aug_config()
    learner = Learner(bundle, cfg.strategy_config(), loss_fn, aug, seed)
    knn_cfg = cfg.knn_config()
    norm = source.normalization
    T = stream.num_tasks
    matrix = AccuracyMatrix(T)
    history: list[list[float]] = []
    checkpoints: list[str] = []
    eval_sets = [task_eval_sets(source, t) for t in stream.tasks]

    start = 0
    if resume and cfg.strategy != "multitask":
        latest = _latest_checkpoint(ckpt_dir, T)
        if latest is not None:
            restored, extra = load_checkpoint(ckpt_dir / f"task_{latest}.ckpt")
            state = extra.get("trial_state")
            if state is not None and state.get("seed") == seed:
                bundle.load_state_dict(restored.state_dict())
                learner.load_state_dict(state["learner"])
                matrix = AccuracyMatrix.from_list(state["matrix"])
                history = state["history"]
                checkpoints = [str(p) for t in range(latest + 1) if (p := ckpt_dir / f"task_{t}.ckpt").exists()]
                start = latest + 1
                log.info("seed %d: resuming after task %d", seed, latest)

    def evaluate_row(tau: int) -> None:
        for i in range(tau + 1):
            train_set, test_set = eval_sets[i]
            matrix.set(tau, i, evaluate_task(bundle, train_set, test_set, knn_cfg, norm))

    def checkpoint(tau: int) -> None:
        path = ckpt_dir / f"task_{tau}.ckpt"
        state = {"seed": seed, "learner": learner.state_dict(), "matrix": matrix.to_list(), "history": history}
        if cfg.save_checkpoints or tau == T - 1:
            save_checkpoint(bundle, path, {"trial_state": state, "task": tau})
            checkpoints.append(str(path))

    if cfg.strategy == "multitask":
        multitask_train(learner, source, stream.tasks, cfg.epochs, cfg.batch_size, seed)
        evaluate_row(T - 1)
        checkpoint(T - 1)
    else:
        for tau in range(start, T):
            history.append(train_task(learner, source, stream.tasks[tau], cfg.epochs, cfg.batch_size, seed))
            evaluate_row(tau)
            checkpoint(tau)
            log.info("seed %d task %d: row %s", seed, tau, np.round(matrix[tau, : tau + 1], 4).tolist())
            if stop_after_task is not None and tau == stop_after_task and tau < T - 1:
                raise TrialInterrupted(f"stopped after task {tau}")

    (out_dir / "accuracy_matrix.csv").write_text(matrix.to_csv())
    per_task = [average_accuracy(matrix, t) if matrix.row_complete(t) else None for t in range(T)]
    forgetting = None
    if T >= 2 and cfg.strategy != "multitask":
        forgetting = average_forgetting(matrix)
    return {
        "seed": seed,
        "status": "ok",
        "error": None,
        "accuracy_matrix": matrix.to_list(),
        "average_accuracy": per_task,
        "final_accuracy": per_task[-1],
        "forgetting": forgetting,
        "checkpoints": checkpoints,
        "manifest": str(manifest),
        "loss_history": history,
    }


def _aborted_trial(seed: int, exc: BaseException) -> dict:
    return {
        "seed": seed, "status": "aborted", "error": "".join(traceback.format_exception(exc)),
        "accuracy_matrix": [], "average_accuracy": [], "final_accuracy": None, "forgetting": None,
        "checkpoints": [], "manifest": None, "loss_history": [],
    }


def summarize(trials: list[dict]) -> dict:
    ok = [t for t in trials if t["status"] == "ok"]
    acc_mean, acc_std = _mean_std([t["final_accuracy"] for t in ok if t["final_accuracy"] is not None])
    fgt_mean, fgt_std = _mean_std([t["forgetting"] for t in ok if t["forgetting"] is not None])
    return {"accuracy_mean": acc_mean, "accuracy_std": acc_std, "forgetting_mean": fgt_mean,
            "forgetting_std": fgt_std, "n_ok": len(ok)}


def run_experiment(cfg: RunConfig, resume: bool = True, source: Optional[ImageSource] = None) -> dict:
    """Run every trial seed, persist ``record.json`` and the mean accuracy matrix."""
    cfg = cfg.resolved()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    trials = []
    for seed in cfg.seeds:
        try:
            if source is None:
                source = load_stream_source(cfg)
            trials.append(run_trial(cfg, seed, out / f"seed_{seed}", source, resume=resume))
        except TrialInterrupted:
            raise
        except Exception as exc:  # any failure aborts only this trial
            log.error("seed %d aborted: %s", seed, exc)
            trials.append(_aborted_trial(seed, exc))
    record = {
        "schema_version": RECORD_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "cap": cfg.per_task_cap,
        "trials": trials,
        "summary": summarize(trials),
        "environment": environment_stamp(),
        "wall_clock_seconds": time.perf_counter() - started,
    }
    validate_record(record)
    ok = [t for t in trials if t["status"] == "ok"]
    if ok:
        stacked = np.stack([AccuracyMatrix.from_list(t["accuracy_matrix"]).values for t in ok])
        mean = AccuracyMatrix(stacked.shape[1])
        mean.values = stacked.mean(axis=0)  # NaN stays NaN for unmeasured cells
        (out / "accuracy_matrix.csv").write_text(mean.to_csv())
    (out / "record.json").write_text(json.dumps(record, indent=2))
    return record


def load_record(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "record.json"
    record = json.loads(path.read_text())
    validate_record(record)
    return record


def record_config(record: dict) -> RunConfig:
    return RunConfig.from_dict(record["config"])


def run_fewshot_sweep(cfg: RunConfig, caps: list[int]) -> list[dict]:
    if not caps:
        raise ValueError("caps must list at least one per-task instance count")
    records = []
    for cap in caps:
        sub = dataclasses.replace(cfg, per_task_cap=int(cap), out_dir=str(Path(cfg.out_dir) / f"cap_{cap}"))
        records.append(run_experiment(sub))
    return records


def final_checkpoints(record: dict) -> list[tuple[int, Path]]:
    out = []
    for trial in record["trials"]:
        if trial["status"] != "ok" or not trial["checkpoints"]:
            raise FileNotFoundError(f"seed {trial['seed']} has no final checkpoint")
        path = Path(trial["checkpoints"][-1])
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        out.append((trial["seed"], path))
    return out


def run_ood_eval(record: dict, ood_ids: list[str], data_root=None, knn_config: Optional[KnnConfig] = None,
                 out_dir=None) -> list[dict]:
    """KNN accuracy of each trial's final encoder on out-of-distribution sets.

    The bank is fit on the OOD training split and scored on its test split.
    """
    cfg = record_config(record)
    knn_cfg = knn_config or cfg.knn_config()
    ckpts = final_checkpoints(record)
    bundles = [(seed, load_checkpoint(path)[0]) for seed, path in ckpts]
    norm = NORMALIZATION[cfg.dataset]  # the statistics the encoder was trained with
    rows = []
    for ds in ood_ids:
        root = data_root if data_root is not None else cfg.data_root
        train = load_ood_eval_set(ds, root, split="train", image_size=cfg.image_size)
        test = load_ood_eval_set(ds, root, split="test", image_size=cfg.image_size)
        accs = {str(seed): evaluate_task(b, train, test, knn_cfg, norm) for seed, b in bundles}
        mean, std = _mean_std(list(accs.values()))
        rows.append({"dataset": ds, "accuracy": accs, "mean": mean, "std": std})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ood.json").write_text(json.dumps(rows, indent=2))
        lines = ["dataset,mean,std"] + [f"{r['dataset']},{r['mean']!r},{r['std']!r}" for r in rows]
        (out / "ood.csv").write_text("\n".join(lines) + "\n")
    return rows


def probe_set(record: dict, trial_index: int = 0, tasks: Optional[list[int]] = None,
              source: Optional[ImageSource] = None, limit: Optional[int] = None):
    """Normalized test images of a trial's stream with stream-order class labels.

    Defaults to the union over all tasks; ``tasks`` restricts it.
    """
    cfg = record_config(record)
    trial = record["trials"][trial_index]
    if trial["manifest"] is None:
        raise FileNotFoundError(f"seed {trial['seed']} has no stream manifest")
    stream = TaskStream.load(trial["manifest"])
    source = source or load_stream_source(cfg)
    chosen = range(stream.num_tasks) if tasks is None else tasks
    ids, labels = [], []
    for t in chosen:
        task = stream.tasks[t]
        ids.append(np.asarray(task.test_ids, dtype=np.int64))
        labels.append(task.local_label(source.test_labels[task.test_ids]) + t * stream.classes_per_task)
    ids, labels = np.concatenate(ids), np.concatenate(labels)
    if limit is not None:
        ids, labels = ids[:limit], labels[:limit]
    images = normalize(source.test_images[ids], *source.normalization)
    return images, torch.from_numpy(labels), stream
