"""Single optimizer steps for each continual-learning strategy.

Every step takes an already augmented batch, performs exactly one SGD
update and returns a dict of scalar statistics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..augment import AugConfig, augment_pairs_rng, normalize
from ..data import ViewPair
from ..models import EncoderBundle, classify
from .buffer import ReplayBuffer, ReplayItem, reservoir_insert, stack_field, uniform_sample
from .si import SiState, flat_grads, flat_params, si_accumulate, si_penalty


@dataclass
class MixingConfig:
    """LUMP interpolation weight: Beta(alpha, alpha) draws, or a fixed value."""

    alpha: float = 0.1
    fixed_lambda: Optional[float] = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("mixup alpha must be positive")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ValueError("fixed_lambda must lie in [0, 1]")

    def draw(self, rng: np.random.Generator) -> float:
        if self.fixed_lambda is not None:
            return float(self.fixed_lambda)
        return float(rng.beta(self.alpha, self.alpha))


def _update(bundle: EncoderBundle, optimizer: torch.optim.Optimizer, objective: torch.Tensor,
            si_state: Optional[SiState] = None) -> dict:
    """Backprop ``objective`` (+ SI penalty) and take one optimizer step.

    SI path integrals use the gradient of ``objective`` alone.
    """
    optimizer.zero_grad(set_to_none=True)
    objective.backward()
    stats = {"loss": float(objective.detach())}
    if si_state is None:
        optimizer.step()
        return stats
    grads = flat_grads(bundle)
    before = flat_params(bundle).detach().clone()
    penalty = si_penalty(si_state, flat_params(bundle))
    if penalty.requires_grad:
        penalty.backward()
    optimizer.step()
    si_accumulate(si_state, grads, flat_params(bundle).detach() - before)
    stats["si_penalty"] = float(penalty.detach())
    stats["loss"] += stats["si_penalty"]
    return stats


def finetune_step_ucl(bundle: EncoderBundle, optimizer, views: ViewPair, loss_fn: Callable,
                      si_state: Optional[SiState] = None) -> dict:
    out = loss_fn(bundle, views.view1, views.view2)
    stats = _update(bundle, optimizer, out.loss, si_state)
    stats["ssl_loss"] = float(out.loss.detach())
    return stats


def _check_local_labels(labels: torch.Tensor, classes_per_task: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= classes_per_task):
        raise ValueError(f"labels must index the task slice [0, {classes_per_task})")


def finetune_step_scl(bundle: EncoderBundle, optimizer, images: torch.Tensor, labels: torch.Tensor,
                      task_id: int, si_state: Optional[SiState] = None) -> dict:
    """Cross-entropy on the task's classifier slice; ``labels`` are task-local."""
    _check_local_labels(labels, bundle.classes_per_task)
    ce = F.cross_entropy(classify(bundle, images, task_id), labels)
    stats = _update(bundle, optimizer, ce, si_state)
    stats["ce"] = float(ce.detach())
    return stats


# ---------------------------------------------------------------------------
# dark experience replay


def _replay_inputs(items: list[ReplayItem], aug_cfg: AugConfig) -> torch.Tensor:
    return normalize(stack_field(items, "image"), aug_cfg.mean, aug_cfg.std)


def der_outputs(bundle: EncoderBundle, x: torch.Tensor, target: str = "projector") -> torch.Tensor:
    if target == "projector":
        return bundle.project(x)
    if target == "backbone":
        return bundle.features(x)
    raise ValueError(f"unknown DER target {target!r}")


def der_distillation_ucl(bundle: EncoderBundle, items: list[ReplayItem], aug_cfg: AugConfig,
                         target: str = "projector") -> torch.Tensor:
    """Mean squared L2 distance between cached and current outputs on replayed inputs."""
    cached = stack_field(items, "features")
    current = der_outputs(bundle, _replay_inputs(items, aug_cfg), target)
    return (current - cached).pow(2).sum(dim=1).mean()


def der_step_ucl(bundle: EncoderBundle, optimizer, views: ViewPair, buffer: ReplayBuffer, alpha: float,
                 loss_fn: Callable, rng: np.random.Generator, raw_images: torch.Tensor,
                 aug_cfg: AugConfig, task_id: int = 0, replay_batch_size: Optional[int] = None,
                 target: str = "projector") -> dict:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    out = loss_fn(bundle, views.view1, views.view2)
    reg = torch.zeros(())
    if not buffer.is_empty():
        items = uniform_sample(buffer, replay_batch_size or len(raw_images), rng)
        reg = der_distillation_ucl(bundle, items, aug_cfg, target)
    with torch.no_grad():
        cache = der_outputs(bundle, normalize(raw_images, aug_cfg.mean, aug_cfg.std), target)
    stats = _update(bundle, optimizer, out.loss + alpha * reg)
    for img, feat in zip(raw_images, cache):
        reservoir_insert(buffer, ReplayItem(img, task_id=task_id, features=feat), rng)
    stats.update(ssl_loss=float(out.loss.detach()), der_reg=float(reg.detach()))
    return stats


def _softmax_in_task(logits: torch.Tensor, task_ids: torch.Tensor, classes_per_task: int) -> torch.Tensor:
    cols = task_ids[:, None] * classes_per_task + torch.arange(classes_per_task)[None, :]
    return F.softmax(logits.gather(1, cols), dim=1)


def der_distillation_scl(bundle: EncoderBundle, items: list[ReplayItem], aug_cfg: AugConfig) -> torch.Tensor:
    """Mean squared distance between softmaxed cached and current logits (item's task slice)."""
    if bundle.classifier is None:
        raise RuntimeError("bundle has no classifier")
    cached = stack_field(items, "logits")
    task_ids = stack_field(items, "task_id")
    current = bundle.classifier(bundle.backbone(_replay_inputs(items, aug_cfg)))
    k = bundle.classes_per_task
    diff = _softmax_in_task(cached, task_ids, k) - _softmax_in_task(current, task_ids, k)
    return diff.pow(2).sum(dim=1).mean()


def der_step_scl(bundle: EncoderBundle, optimizer, images: torch.Tensor, labels: torch.Tensor,
                 buffer: ReplayBuffer, alpha: float, task_id: int, rng: np.random.Generator,
                 raw_images: torch.Tensor, aug_cfg: AugConfig,
                 replay_batch_size: Optional[int] = None) -> dict:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    _check_local_labels(labels, bundle.classes_per_task)
    ce = F.cross_entropy(classify(bundle, images, task_id), labels)
    reg = torch.zeros(())
    if not buffer.is_empty():
        items = uniform_sample(buffer, replay_batch_size or len(raw_images), rng)
        reg = der_distillation_scl(bundle, items, aug_cfg)
    with torch.no_grad():
        cache = bundle.classifier(bundle.backbone(normalize(raw_images, aug_cfg.mean, aug_cfg.std)))
    stats = _update(bundle, optimizer, ce + alpha * reg)
    for img, y, logit in zip(raw_images, labels.tolist(), cache):
        reservoir_insert(buffer, ReplayItem(img, label=y, task_id=task_id, logits=logit), rng)
    stats.update(ce=float(ce.detach()), der_reg=float(reg.detach()))
    return stats


# ---------------------------------------------------------------------------
# lifelong unsupervised mixup


def lump_mix(current: torch.Tensor, replay: torch.Tensor, lam: float) -> torch.Tensor:
    if current.shape != replay.shape:
        raise ValueError(f"shape mismatch {tuple(current.shape)} vs {tuple(replay.shape)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return lam * current + (1 - lam) * replay


def lump_step(bundle: EncoderBundle, optimizer, views: ViewPair, buffer: ReplayBuffer, mixing: MixingConfig,
              rng: np.random.Generator, loss_fn: Callable, raw_images: torch.Tensor, aug_cfg: AugConfig,
              task_id: int = 0) -> dict:
    """SSL update on current views interpolated with freshly augmented buffer views.

    With an empty buffer this is a plain finetune step. Raw current images
    enter the buffer afterwards.
    """
    lam = 1.0
    if buffer.is_empty():
        v1, v2 = views.view1, views.view2
    else:
        items = uniform_sample(buffer, len(views.view1), rng)
        replay = augment_pairs_rng(stack_field(items, "image"), aug_cfg, rng)
        lam = mixing.draw(rng)
        v1 = lump_mix(views.view1, replay.view1, lam)
        v2 = lump_mix(views.view2, replay.view2, lam)
    out = loss_fn(bundle, v1, v2)
    stats = _update(bundle, optimizer, out.loss)
    for img in raw_images:
        reservoir_insert(buffer, ReplayItem(img, task_id=task_id), rng)
    stats.update(ssl_loss=float(out.loss.detach()), lam=lam)
    return stats
