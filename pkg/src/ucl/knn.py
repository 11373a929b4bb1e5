"""KNN probe on frozen features and continual-learning metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import torch

from .augment import normalize
from .data import EvalSet


@dataclass
class KnnConfig:
    k: int = 200
    temperature: float = 0.1
    feature_source: str = "backbone"  # backbone | projector
    batch_size: int = 256


@dataclass
class KnnBank:
    features: torch.Tensor  # (n, d) float64, unit rows
    labels: torch.Tensor  # (n,) long
    k: int
    temperature: float

    def __len__(self) -> int:
        return int(self.labels.numel())


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x).to(torch.float64)
    if not torch.isfinite(x).all():
        raise ValueError("features must be finite")
    return x / x.norm(dim=1, keepdim=True).clamp_min(1e-12)


def fit_knn_bank(features, labels, k: int = 200, temperature: float = 0.1) -> KnnBank:
    feats = torch.as_tensor(features)
    labs = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if feats.dim() != 2 or feats.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) feature matrix")
    if labs.numel() != feats.shape[0]:
        raise ValueError("one label per feature row required")
    if k < 1 or temperature <= 0:
        raise ValueError("k must be >= 1 and temperature > 0")
    return KnnBank(_unit_rows(feats), labs, k, temperature)


def knn_predict(bank: KnnBank, queries, chunk: int = 1024) -> torch.Tensor:
    """Temperature-weighted cosine vote over the top-k neighbours.

    Neighbour ties are broken by bank order, class-score ties by the lower
    class id.
    """
    q = torch.as_tensor(queries)
    if q.dim() == 1:
        q = q[None]
    if q.shape[1] != bank.features.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != bank dim {bank.features.shape[1]}")
    q = _unit_rows(q)
    classes, inverse = torch.unique(bank.labels, sorted=True, return_inverse=True)
    k = min(bank.k, len(bank))
    preds = []
    for start in range(0, q.shape[0], chunk):
        sim = q[start:start + chunk] @ bank.features.T
        top_sim, top_idx = torch.sort(sim, dim=1, descending=True, stable=True)
        top_sim, top_idx = top_sim[:, :k], top_idx[:, :k]
        weights = torch.exp(top_sim / bank.temperature)
        scores = torch.zeros(sim.shape[0], len(classes), dtype=torch.float64)
        scores.scatter_add_(1, inverse[top_idx], weights)
        preds.append(classes[scores.argmax(dim=1)])
    return torch.cat(preds)


@torch.no_grad()
def extract_features(bundle, images: torch.Tensor, normalization, source: str = "backbone",
                     batch_size: int = 256) -> torch.Tensor:
    """Features of un-augmented images in inference mode."""
    was_training = bundle.training
    bundle.eval()
    try:
        out = []
        for start in range(0, len(images), batch_size):
            x = normalize(images[start:start + batch_size], *normalization)
            out.append(bundle.project(x) if source == "projector" else bundle.features(x))
        return torch.cat(out)
    finally:
        bundle.train(was_training)


def evaluate_task(bundle, train_set: EvalSet, test_set: EvalSet, knn_config: KnnConfig | None = None,
                  normalization=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))) -> float:
    """Fit a bank on un-augmented training features, return test accuracy in [0, 1].

    ``normalization`` is the (mean, std) the encoder was trained with.
    """
    cfg = knn_config or KnnConfig()
    if cfg.feature_source not in ("backbone", "projector"):
        raise ValueError(f"unknown feature source {cfg.feature_source!r}")
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("train and test sets must be non-empty")
    train_feats = extract_features(bundle, train_set.images, normalization, cfg.feature_source, cfg.batch_size)
    test_feats = extract_features(bundle, test_set.images, normalization, cfg.feature_source, cfg.batch_size)
    bank = fit_knn_bank(train_feats, train_set.labels, cfg.k, cfg.temperature)
    pred = knn_predict(bank, test_feats).numpy()
    return float(np.mean(pred == np.asarray(test_set.labels)))


# ---------------------------------------------------------------------------
# metrics


class AccuracyMatrix:
    """a[tau][i]: accuracy on task i after training task tau (NaN = not measured)."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ValueError("num_tasks must be positive")
        self.values = np.full((num_tasks, num_tasks), np.nan)

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def set(self, tau: int, i: int, acc: float) -> None:
        if i > tau:
            raise IndexError("only the lower triangle (i <= tau) is defined")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.values[tau, i] = acc

    def __getitem__(self, idx):
        return self.values[idx]

    def row_complete(self, tau: int) -> bool:
        return bool(np.isfinite(self.values[tau, : tau + 1]).all())

    def to_list(self) -> list[list[float | None]]:
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.values]

    @classmethod
    def from_list(cls, rows) -> AccuracyMatrix:
        m = cls(len(rows))
        m.values = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=float)
        return m

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["tau"] + [f"task_{i}" for i in range(self.num_tasks)])
        for tau, row in enumerate(self.to_list()):
            writer.writerow([tau] + ["" if v is None else repr(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> AccuracyMatrix:
        rows = list(csv.reader(io.StringIO(text)))[1:]
        return cls.from_list([[None if v == "" else float(v) for v in r[1:]] for r in rows])


def _as_array(matrix) -> np.ndarray:
    return matrix.values if isinstance(matrix, AccuracyMatrix) else np.asarray(matrix, dtype=float)


def average_accuracy(matrix, tau: int) -> float:
    """Mean of a[tau][0..tau] (tasks 0-indexed)."""
    a = _as_array(matrix)
    row = a[tau, : tau + 1]
    if not np.isfinite(row).all():
        raise ValueError(f"row {tau} is not fully populated")
    return float(row.mean())


def average_forgetting(matrix) -> float:
    """Mean over tasks 0..T-2 of (best accuracy ever reached - final accuracy)."""
    a = _as_array(matrix)
    T = a.shape[0]
    if T < 2:
        raise ValueError("forgetting needs at least 2 tasks")
    drops = []
    for i in range(T - 1):
        col = a[i:, i]
        if not np.isfinite(col).all():
            raise ValueError(f"missing accuracy entries for task {i}")
        drops.append(col.max() - a[T - 1, i])
    return float(np.mean(drops))
