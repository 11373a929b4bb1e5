"""Image augmentation for self-supervised (two-view) and supervised training.

All randomness comes from an explicit ``numpy.random.Generator``. Batch
helpers derive one generator per example from (seed, epoch, example index)
so results never depend on batching or worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .data import NORMALIZATION, ViewPair


@dataclass
class AugConfig:
    size: int = 32
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    crop_padding: int = 4
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    mean: tuple[float, ...] = NORMALIZATION["cifar10"][0]
    std: tuple[float, ...] = NORMALIZATION["cifar10"][1]

    @classmethod
    def for_dataset(cls, dataset_id: str, size: int, **overrides) -> AugConfig:
        mean, std = NORMALIZATION[dataset_id]
        return cls(size=size, mean=mean, std=std, **overrides)

    @classmethod
    def identity(cls, size: int = 32, **overrides) -> AugConfig:
        """Configuration under which every augmentation is a no-op."""
        kw = dict(size=size, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), crop_padding=0,
                  flip_p=0.0, jitter_p=0.0, grayscale_p=0.0)
        kw.update(overrides)
        return cls(**kw)


def to_float(images: torch.Tensor) -> torch.Tensor:
    if images.dtype == torch.uint8:
        return images.float().div_(255.0)
    return images.float()


def normalize(images: torch.Tensor, mean, std) -> torch.Tensor:
    """uint8 or [0,1] float images -> channel-normalized float."""
    x = to_float(images)
    m = torch.tensor(mean, dtype=x.dtype).view(-1, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(-1, 1, 1)
    if x.shape[-3] != m.shape[0]:
        m, s = m[: x.shape[-3]], s[: x.shape[-3]]
    return (x - m) / s


def _resized_crop_params(h: int, w: int, scale, ratio, rng: np.random.Generator):
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            i = int(rng.integers(0, h - ch + 1))
            j = int(rng.integers(0, w - cw + 1))
            return i, j, ch, cw
    # fallback: central crop clamped to the ratio bounds
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _color_jitter(img: torch.Tensor, cfg: AugConfig, rng: np.random.Generator) -> torch.Tensor:
    factors = [
        rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness),
        rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast),
        rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation),
        rng.uniform(-cfg.hue, cfg.hue),
    ]
    for op in rng.permutation(4):
        if op == 0:
            img = TF.adjust_brightness(img, factors[0])
        elif op == 1:
            img = TF.adjust_contrast(img, factors[1])
        elif op == 2 and img.shape[0] == 3:
            img = TF.adjust_saturation(img, factors[2])
        elif op == 3 and img.shape[0] == 3:
            img = TF.adjust_hue(img, factors[3])
    return img


def _photometric(img: torch.Tensor, cfg: AugConfig, rng: np.random.Generator) -> torch.Tensor:
    if rng.random() < cfg.flip_p:
        img = TF.hflip(img)
    if rng.random() < cfg.jitter_p:
        img = _color_jitter(img, cfg, rng)
    if img.shape[0] == 3 and rng.random() < cfg.grayscale_p:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    return img


def _check_size(image: torch.Tensor, cfg: AugConfig) -> torch.Tensor:
    if image.shape[-1] != cfg.size or image.shape[-2] != cfg.size:
        raise ValueError(f"image is {tuple(image.shape[-2:])}, config expects {cfg.size}x{cfg.size}")
    return to_float(image)


def ssl_view(image: torch.Tensor, cfg: AugConfig, rng: np.random.Generator) -> torch.Tensor:
    """One random-resized-crop view, normalized."""
    img = _check_size(image, cfg)
    h, w = img.shape[-2:]
    i, j, ch, cw = _resized_crop_params(h, w, cfg.crop_scale, cfg.crop_ratio, rng)
    if (i, j, ch, cw) != (0, 0, h, w):
        img = TF.resized_crop(img, i, j, ch, cw, [cfg.size, cfg.size], antialias=True)
    img = _photometric(img, cfg, rng)
    return normalize(img.clamp(0, 1), cfg.mean, cfg.std)


def two_view_augment(image: torch.Tensor, cfg: AugConfig, rng: np.random.Generator,
                     source_index: int = -1) -> ViewPair:
    return ViewPair(ssl_view(image, cfg, rng), ssl_view(image, cfg, rng), source_index)


def supervised_augment(image: torch.Tensor, cfg: AugConfig, rng: np.random.Generator) -> torch.Tensor:
    """Padded random crop + photometric ops, normalized."""
    img = _check_size(image, cfg)
    pad = cfg.crop_padding
    if pad > 0:
        top, left = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
        if (top, left) != (pad, pad):
            padded = torch.nn.functional.pad(img, (pad, pad, pad, pad))
            img = padded[:, top:top + cfg.size, left:left + cfg.size]
    img = _photometric(img, cfg, rng)
    return normalize(img.clamp(0, 1), cfg.mean, cfg.std)


def example_rng(seed: int, epoch: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index, stream])


def augment_pairs(images: torch.Tensor, indices, cfg: AugConfig, seed: int, epoch: int) -> ViewPair:
    """Two-view batch; example k uses the generator of (seed, epoch, indices[k])."""
    v1, v2 = [], []
    for img, idx in zip(images, indices):
        pair = two_view_augment(img, cfg, example_rng(seed, epoch, int(idx)))
        v1.append(pair.view1)
        v2.append(pair.view2)
    return ViewPair(torch.stack(v1), torch.stack(v2), torch.as_tensor(np.asarray(indices)))


def augment_pairs_rng(images: torch.Tensor, cfg: AugConfig, rng: np.random.Generator) -> ViewPair:
    """Two-view batch drawn from a single shared generator (replay samples)."""
    v1, v2 = [], []
    for img in images:
        pair = two_view_augment(img, cfg, rng)
        v1.append(pair.view1)
        v2.append(pair.view2)
    return ViewPair(torch.stack(v1), torch.stack(v2), torch.full((len(images),), -1))


def augment_supervised_batch(images: torch.Tensor, indices, cfg: AugConfig, seed: int,
                             epoch: int) -> torch.Tensor:
    return torch.stack([
        supervised_augment(img, cfg, example_rng(seed, epoch, int(idx)))
        for img, idx in zip(images, indices)
    ])
