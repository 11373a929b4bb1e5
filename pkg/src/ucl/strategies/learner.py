"""Strategy dispatch and the per-task training loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from ..augment import AugConfig, augment_pairs, augment_supervised_batch
from ..data import ImageSource, TaskSpec
from ..models import EncoderBundle
from .buffer import ReplayBuffer
from .si import SiState, flat_params, si_consolidate
from .steps import (
    MixingConfig,
    der_step_scl,
    der_step_ucl,
    finetune_step_scl,
    finetune_step_ucl,
    lump_step,
)

STRATEGIES = ("finetune", "si", "der", "lump", "multitask")


@dataclass
class StrategyConfig:
    name: str = "finetune"
    paradigm: str = "ucl"  # ucl | scl
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    der_alpha: float = 0.1
    der_target: str = "projector"
    si_c: float = 100.0
    si_xi: float = 1.0
    lump_alpha: float = 0.1
    lump_fixed_lambda: Optional[float] = None
    buffer_size: int = 200
    replay_batch_size: Optional[int] = None

    def validate(self) -> None:
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")
        if self.paradigm not in ("ucl", "scl"):
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.name == "lump" and self.paradigm == "scl":
            raise ValueError("lump is defined for unsupervised training only")
        if self.der_alpha < 0:
            raise ValueError("der_alpha must be non-negative")
        if self.buffer_size < 0:
            raise ValueError("buffer_size must be non-negative")
        MixingConfig(self.lump_alpha, self.lump_fixed_lambda)


def make_optimizer(bundle: EncoderBundle, cfg: StrategyConfig) -> torch.optim.SGD:
    params = [p for p in bundle.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


@dataclass
class Batch:
    raw: torch.Tensor  # uint8 images
    indices: np.ndarray
    task_id: int
    labels: Optional[torch.Tensor] = None  # task-local labels
    views: Optional[object] = None  # ViewPair (ucl)
    images: Optional[torch.Tensor] = None  # augmented single view (scl)


class Learner:
    """Holds the bundle, optimizer and strategy state across a task stream."""

    def __init__(self, bundle: EncoderBundle, cfg: StrategyConfig, loss_fn: Optional[Callable],
                 aug_cfg: AugConfig, seed: int = 0):
        cfg.validate()
        self.bundle = bundle
        self.cfg = cfg
        self.loss_fn = loss_fn
        self.aug_cfg = aug_cfg
        self.rng = np.random.default_rng([seed, 0xB0FF])
        self.buffer = ReplayBuffer(cfg.buffer_size)
        self.mixing = MixingConfig(cfg.lump_alpha, cfg.lump_fixed_lambda)
        self.si_state = SiState.init(flat_params(bundle), cfg.si_c, cfg.si_xi) if cfg.name == "si" else None
        self.optimizer: Optional[torch.optim.Optimizer] = None

    def begin_task(self, task_id: int) -> None:
        self.optimizer = make_optimizer(self.bundle, self.cfg)
        self.bundle.train()

    def end_task(self, task_id: int) -> None:
        if self.si_state is not None:
            si_consolidate(self.si_state, flat_params(self.bundle))

    def observe(self, batch: Batch) -> dict:
        cfg, b = self.cfg, self.bundle
        if cfg.paradigm == "ucl":
            if cfg.name == "der":
                return der_step_ucl(b, self.optimizer, batch.views, self.buffer, cfg.der_alpha, self.loss_fn,
                                    self.rng, batch.raw, self.aug_cfg, batch.task_id,
                                    cfg.replay_batch_size, cfg.der_target)
            if cfg.name == "lump":
                return lump_step(b, self.optimizer, batch.views, self.buffer, self.mixing, self.rng,
                                 self.loss_fn, batch.raw, self.aug_cfg, batch.task_id)
            return finetune_step_ucl(b, self.optimizer, batch.views, self.loss_fn, self.si_state)
        if cfg.name == "der":
            return der_step_scl(b, self.optimizer, batch.images, batch.labels, self.buffer, cfg.der_alpha,
                                batch.task_id, self.rng, batch.raw, self.aug_cfg, cfg.replay_batch_size)
        return finetune_step_scl(b, self.optimizer, batch.images, batch.labels, batch.task_id, self.si_state)

    def state_dict(self) -> dict:
        state = {"rng": self.rng.bit_generator.state, "buffer": self.buffer.state_dict()}
        if self.si_state is not None:
            state["si"] = self.si_state.state_dict()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.buffer = ReplayBuffer.from_state_dict(state["buffer"])
        if "si" in state:
            self.si_state = SiState(**state["si"])


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch smaller than 2 is dropped (batch norm)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def make_batch(source: ImageSource, ids: np.ndarray, task: TaskSpec, paradigm: str, aug_cfg: AugConfig,
               seed: int, epoch_key: int) -> Batch:
    raw = source.train_images[ids]
    batch = Batch(raw=raw, indices=ids, task_id=task.task_id)
    if paradigm == "ucl":
        batch.views = augment_pairs(raw, ids, aug_cfg, seed, epoch_key)
    else:
        batch.labels = torch.from_numpy(task.local_label(source.train_labels[ids]))
        batch.images = augment_supervised_batch(raw, ids, aug_cfg, seed, epoch_key)
    return batch


def train_task(learner: Learner, source: ImageSource, task: TaskSpec, epochs: int, batch_size: int,
               seed: int, log: Optional[Callable[[dict], None]] = None) -> list[float]:
    """Train one task; returns the mean loss per epoch."""
    learner.begin_task(task.task_id)
    train_ids = np.asarray(task.train_ids, dtype=np.int64)
    history = []
    for epoch in range(epochs):
        order_rng = np.random.default_rng([seed, task.task_id, epoch, 1])
        epoch_key = task.task_id * 100_003 + epoch
        losses = []
        for chunk in iterate_batches(len(train_ids), batch_size, order_rng):
            ids = train_ids[chunk]
            batch = make_batch(source, ids, task, learner.cfg.paradigm, learner.aug_cfg, seed, epoch_key)
            stats = learner.observe(batch)
            losses.append(stats["loss"])
        history.append(float(np.mean(losses)) if losses else float("nan"))
        if log is not None:
            log({"task": task.task_id, "epoch": epoch, "loss": history[-1]})
    learner.end_task(task.task_id)
    return history


def multitask_train(learner: Learner, source: ImageSource, tasks: list[TaskSpec], epochs: int,
                    batch_size: int, seed: int) -> EncoderBundle:
    """Joint training over the union of all tasks (upper-bound reference).

    Batches mix examples from every task; supervised batches are split by
    task so each example uses its own classifier slice.
    """
    learner.begin_task(0)
    ids = np.concatenate([np.asarray(t.train_ids, dtype=np.int64) for t in tasks])
    owner = np.concatenate([np.full(len(t.train_ids), i) for i, t in enumerate(tasks)])
    for epoch in range(epochs):
        order_rng = np.random.default_rng([seed, 0, epoch, 1])  # same stream as task 0
        for chunk in iterate_batches(len(ids), batch_size, order_rng):
            if learner.cfg.paradigm == "ucl":
                learner.observe(make_batch(source, ids[chunk], tasks[owner[chunk[0]]], "ucl",
                                           learner.aug_cfg, seed, epoch))
                continue
            for t in np.unique(owner[chunk]):
                sub = chunk[owner[chunk] == t]
                if len(sub) >= 2:
                    learner.observe(make_batch(source, ids[sub], tasks[t], "scl", learner.aug_cfg, seed, epoch))
    learner.end_task(0)
    return learner.bundle
