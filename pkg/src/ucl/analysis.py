"""Representation forensics: CKA, parameter distance, loss landscapes, feature maps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import ParamVector, extract_all_blocks, load_parameter_vector, parameter_vector


def linear_cka(X, Y) -> float:
    """Linear CKA with biased covariances; rows are examples."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError("expected (n, d1) and (n, d2) activations over the same n examples")
    if X.shape[0] < 3:
        raise ValueError("linear CKA needs at least 3 examples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    if X.shape[1] + Y.shape[1] > X.shape[0]:
        K, L = X @ X.T, Y @ Y.T  # n x n Gram form when features outnumber examples
        cross, norm_x, norm_y = np.sum(K * L), np.linalg.norm(K), np.linalg.norm(L)
    else:
        cross = np.linalg.norm(X.T @ Y) ** 2
        norm_x, norm_y = np.linalg.norm(X.T @ X), np.linalg.norm(Y.T @ Y)
    if norm_x == 0 or norm_y == 0:
        raise ValueError("degenerate activations with zero variance")
    return float(min(max(cross / (norm_x * norm_y), 0.0), 1.0))


@dataclass
class CkaReport:
    blocks: list[int]
    scores: list[float]
    pooling: str = "spatial_mean"
    n_probe: int = 0

    def to_dict(self) -> dict:
        return {"blocks": self.blocks, "scores": self.scores, "pooling": self.pooling, "n_probe": self.n_probe}


def pooled_block_activations(bundle, probe: torch.Tensor, blocks: Sequence[int],
                             batch_size: int = 256) -> list[np.ndarray]:
    chunks = {b: [] for b in blocks}
    for start in range(0, len(probe), batch_size):
        taps = extract_all_blocks(bundle, probe[start:start + batch_size])
        for b in blocks:
            if not 0 <= b < len(taps):
                raise IndexError(f"block {b} out of range [0, {len(taps) - 1}]")
            chunks[b].append(taps[b].mean(dim=(2, 3)).double().numpy())
    return [np.concatenate(chunks[b]) for b in blocks]


def cka_report(bundle_a, bundle_b, probe: torch.Tensor, blocks: Sequence[int] = (0, 1, 2, 3),
               batch_size: int = 256) -> CkaReport:
    """Per-block linear CKA over spatially averaged activations of a normalized probe batch."""
    blocks = list(blocks)
    acts_a = pooled_block_activations(bundle_a, probe, blocks, batch_size)
    acts_b = pooled_block_activations(bundle_b, probe, blocks, batch_size)
    scores = [linear_cka(a, b) for a, b in zip(acts_a, acts_b)]
    return CkaReport(blocks, scores, "spatial_mean", int(len(probe)))


def l2_param_distance(a: nn.Module, b: nn.Module) -> float:
    va, vb = parameter_vector(a), parameter_vector(b)
    if va.shapes != vb.shapes:
        raise ValueError("modules have different parameter shapes")
    return float((va.values.double() - vb.values.double()).norm())


def filter_normalized_direction(module: nn.Module, rng: np.random.Generator) -> ParamVector:
    """Gaussian direction rescaled so every filter matches the model filter's norm.

    A filter is a slice along the first axis of a weight with >= 2 dims;
    1-d parameters (biases, normalization affine terms) get zero.
    """
    base = parameter_vector(module)
    pieces = []
    offset = 0
    for shape in base.shapes:
        n = math.prod(shape)
        w = base.values[offset:offset + n].double().view(shape)
        offset += n
        if len(shape) <= 1:
            pieces.append(torch.zeros(n, dtype=torch.float64))
            continue
        d = torch.from_numpy(rng.standard_normal(shape))
        d_norm = d.reshape(shape[0], -1).norm(dim=1)
        w_norm = w.reshape(shape[0], -1).norm(dim=1)
        d = d * (w_norm / d_norm.clamp_min(1e-12)).view(-1, *([1] * (len(shape) - 1)))
        pieces.append(d.reshape(-1))
    values = torch.cat(pieces).to(base.values.dtype) if pieces else base.values.clone()
    return ParamVector(values, base.names, base.shapes)


@dataclass
class LandscapeGrid:
    coords: np.ndarray  # (resolution,) offsets along both directions
    losses: np.ndarray  # (resolution, resolution); [i, j] -> coords[i] * d1 + coords[j] * d2
    center_loss: float
    extent: float
    saturated: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))

    @property
    def resolution(self) -> int:
        return len(self.coords)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "beta", "loss"])
        for i, a in enumerate(self.coords):
            for j, b in enumerate(self.coords):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(self.losses[i, j]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> LandscapeGrid:
        rows = np.array([[float(v) for v in r] for r in list(csv.reader(io.StringIO(text)))[1:]])
        coords = np.unique(rows[:, 0])
        n = len(coords)
        if n * n != len(rows):
            raise ValueError("landscape CSV does not hold a full square grid")
        losses = rows[:, 2].reshape(n, n)
        return cls(coords, losses, float(losses[n // 2, n // 2]), float(coords[-1]))


def loss_landscape_grid(module: nn.Module, loss_fn: Callable, eval_batch, dir1: ParamVector, dir2: ParamVector,
                        extent: float = 1.0, resolution: int = 41, sentinel: float = 1e4) -> LandscapeGrid:
    """Evaluate ``loss_fn(module, eval_batch)`` on theta + a*dir1 + b*dir2 over a square grid.

    The module is left with its original weights and training flag.
    """
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError("resolution must be a positive odd integer")
    original = {k: v.detach().clone() for k, v in module.state_dict().items()}
    theta = parameter_vector(module)
    if dir1.length != theta.length or dir2.length != theta.length:
        raise ValueError("directions do not match the module's parameter count")
    mid = resolution // 2
    coords = np.array([(i - mid) * extent / mid if mid else 0.0 for i in range(resolution)])
    losses = np.empty((resolution, resolution))
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            center = float(loss_fn(module, eval_batch))
            for i, a in enumerate(coords):
                for j, b in enumerate(coords):
                    if i == mid and j == mid:
                        losses[i, j] = center
                        continue
                    load_parameter_vector(module, theta.values + a * dir1.values + b * dir2.values)
                    losses[i, j] = float(loss_fn(module, eval_batch))
    finally:
        module.load_state_dict(original)
        module.train(was_training)
    saturated = ~np.isfinite(losses)
    losses[saturated] = sentinel
    return LandscapeGrid(coords, losses, losses[mid, mid], extent, saturated)


def random_probe_loss(feature_dim: int, num_classes: int, seed: int = 0) -> Callable:
    """Cross-entropy of a frozen, seeded random linear classifier on backbone features.

    The returned callable takes ``(model, (images, labels))`` where
    ``model(images)`` yields features (a backbone or an EncoderBundle).
    """
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(feature_dim)
    weight = (torch.rand(num_classes, feature_dim, generator=gen) * 2 - 1) * bound
    bias = (torch.rand(num_classes, generator=gen) * 2 - 1) * bound

    def loss(model, batch) -> float:
        images, labels = batch
        return float(F.cross_entropy(F.linear(model(images), weight, bias), labels))

    return loss


@dataclass
class FeatureGrid:
    tiles: np.ndarray  # (n, h, w) in [0, 1]
    image: np.ndarray  # tiled (H, W)
    channels: list[int]


def _tile(tiles: np.ndarray, pad: int = 1) -> np.ndarray:
    n, h, w = tiles.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    out = np.ones((rows * (h + pad) - pad, cols * (w + pad) - pad))
    for k in range(n):
        r, c = divmod(k, cols)
        out[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = tiles[k]
    return out


def feature_map_export(bundle, image: torch.Tensor, block_index: int, n_channels: int = 20,
                       seed: int | None = None) -> FeatureGrid:
    """Min-max normalized channel activations of one block, tiled into one image.

    Takes the first ``n_channels`` channels, or a seeded random subset when
    ``seed`` is given. Constant channels render as mid gray.
    """
    x = image[None] if image.dim() == 3 else image[:1]
    taps = extract_all_blocks(bundle, x)
    if not 0 <= block_index < len(taps):
        raise IndexError(f"block_index {block_index} out of range [0, {len(taps) - 1}]")
    fmap = taps[block_index][0].double().numpy()
    if not 1 <= n_channels <= fmap.shape[0]:
        raise ValueError(f"n_channels must be in [1, {fmap.shape[0]}]")
    if seed is None:
        channels = list(range(n_channels))
    else:
        channels = sorted(np.random.default_rng(seed).choice(fmap.shape[0], n_channels, replace=False).tolist())
    tiles = []
    for c in channels:
        a = fmap[c]
        lo, hi = a.min(), a.max()
        tiles.append(np.full_like(a, 0.5) if hi - lo <= 1e-12 else (a - lo) / (hi - lo))
    tiles = np.stack(tiles)
    return FeatureGrid(tiles, _tile(tiles), channels)


def save_png(array: np.ndarray, path, cmap: str = "viridis") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(str(path), array, cmap=cmap, vmin=0.0, vmax=1.0)
