"""Encoder bundle: backbone, projection/prediction heads and task-sliced classifier."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass
class ArchConfig:
    backbone: str = "resnet18"  # resnet18 | tiny_conv
    input_size: int = 32
    in_channels: int = 3
    objective: str = "simsiam"  # simsiam | barlow
    proj_dim: int = 2048
    proj_hidden: int = 2048
    pred_hidden: int = 512
    supervised: bool = False
    num_tasks: int = 1
    classes_per_task: int = 2
    tiny_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])

    def validate(self) -> None:
        if self.backbone not in ("resnet18", "tiny_conv"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.objective not in ("simsiam", "barlow"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.backbone == "resnet18" and self.input_size not in (32, 64):
            raise ValueError(f"resnet18 expects 32 or 64 pixel inputs, got {self.input_size}")
        if self.backbone == "tiny_conv" and (self.input_size < 8 or self.input_size % 8):
            raise ValueError(f"tiny_conv expects a multiple of 8 pixels, got {self.input_size}")
        if len(self.tiny_widths) != 4:
            raise ValueError("tiny_widths must list 4 block widths")
        for name in ("proj_dim", "proj_hidden", "pred_hidden", "in_channels", "num_tasks", "classes_per_task"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """ResNet-18 with a CIFAR stem (3x3 conv, stride 1, no max-pool)."""

    def __init__(self, in_channels: int = 3, nf: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, nf, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(nf)
        widths = [nf, nf * 2, nf * 4, nf * 8]
        strides = [1, 2, 2, 2]
        layers, in_planes = [], nf
        for w, s in zip(widths, strides):
            layers.append(nn.Sequential(BasicBlock(in_planes, w, s), BasicBlock(w, w, 1)))
            in_planes = w
        self.blocks = nn.ModuleList(layers)
        self.out_dim = widths[-1]

    def forward_blocks(self, x) -> list[torch.Tensor]:
        out = F.relu(self.bn1(self.conv1(x)))
        taps = []
        for block in self.blocks:
            out = block(out)
            taps.append(out)
        return taps

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.forward_blocks(x)[-1], 1), 1)


class TinyConvNet(nn.Module):
    """Four conv-BN-ReLU blocks; desk-scale stand-in exposing the same taps."""

    def __init__(self, in_channels: int = 3, widths=(16, 32, 64, 128)):
        super().__init__()
        strides = [1, 2, 2, 2]
        blocks, prev = [], in_channels
        for w, s in zip(widths, strides):
            blocks.append(nn.Sequential(
                nn.Conv2d(prev, w, 3, s, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)
            ))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.out_dim = widths[-1]

    def forward_blocks(self, x) -> list[torch.Tensor]:
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return taps

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.forward_blocks(x)[-1], 1), 1)


def projection_mlp(in_dim: int, hidden: int, out_dim: int, objective: str) -> nn.Sequential:
    if objective == "simsiam":
        return nn.Sequential(
            nn.Linear(in_dim, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, out_dim, bias=False), nn.BatchNorm1d(out_dim),
        )
    return nn.Sequential(
        nn.Linear(in_dim, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim, bias=False),
    )


def prediction_mlp(dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dim, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, dim),
    )


class EncoderBundle(nn.Module):
    """Backbone f plus projector, optional predictor h and optional task-sliced classifier.

    Any modules with the right call signatures can be plugged in; the
    training code only relies on ``backbone``, ``projector``,
    ``predictor`` and ``classifier``.
    """

    def __init__(self, backbone: nn.Module, projector: nn.Module, predictor: Optional[nn.Module] = None,
                 classifier: Optional[nn.Linear] = None, classes_per_task: int = 2,
                 arch_config: Optional[ArchConfig] = None):
        super().__init__()
        self.backbone = backbone
        self.projector = projector
        self.predictor = predictor
        self.classifier = classifier
        self.classes_per_task = classes_per_task
        self.arch_config = arch_config

    def features(self, x):
        return self.backbone(x)

    def project(self, x):
        return self.projector(self.backbone(x))

    def forward(self, x):
        return self.backbone(x)

    @property
    def num_tasks(self) -> int:
        if self.classifier is None:
            return 0
        return self.classifier.out_features // self.classes_per_task


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_encoder_bundle(arch: ArchConfig | None = None, seed: int | None = None) -> EncoderBundle:
    arch = arch or ArchConfig()
    arch.validate()
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        if arch.backbone == "resnet18":
            backbone = ResNet18(arch.in_channels)
        else:
            backbone = TinyConvNet(arch.in_channels, arch.tiny_widths)
        d = backbone.out_dim
        projector = projection_mlp(d, arch.proj_hidden, arch.proj_dim, arch.objective)
        predictor = prediction_mlp(arch.proj_dim, arch.pred_hidden) if arch.objective == "simsiam" else None
        classifier = nn.Linear(d, arch.num_tasks * arch.classes_per_task) if arch.supervised else None
        bundle = EncoderBundle(backbone, projector, predictor, classifier, arch.classes_per_task, arch)
        _init_weights(bundle)
    return bundle


def extract_block_features(bundle: EncoderBundle, batch: torch.Tensor, block_index: int) -> torch.Tensor:
    """Activations after residual block ``block_index`` (0-3), in inference mode."""
    taps = extract_all_blocks(bundle, batch)
    if not 0 <= block_index < len(taps):
        raise IndexError(f"block_index {block_index} out of range [0, {len(taps) - 1}]")
    return taps[block_index]


def extract_all_blocks(bundle: EncoderBundle, batch: torch.Tensor) -> list[torch.Tensor]:
    backbone = bundle.backbone
    if not hasattr(backbone, "forward_blocks"):
        raise TypeError(f"{type(backbone).__name__} exposes no block taps")
    was_training = bundle.training
    bundle.eval()
    try:
        with torch.no_grad():
            return backbone.forward_blocks(batch)
    finally:
        bundle.train(was_training)


@dataclass
class ParamVector:
    values: torch.Tensor
    names: list[str]
    shapes: list[tuple[int, ...]]

    @property
    def length(self) -> int:
        return int(self.values.numel())

    def __len__(self) -> int:
        return self.length


def parameter_vector(module: nn.Module) -> ParamVector:
    """Flatten trainable parameters in ``named_parameters`` order."""
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if not named:
        return ParamVector(torch.zeros(0), [], [])
    values = torch.cat([p.detach().reshape(-1) for _, p in named]).clone()
    return ParamVector(values, [n for n, _ in named], [tuple(p.shape) for _, p in named])


def load_parameter_vector(module: nn.Module, vec: ParamVector | torch.Tensor) -> None:
    """Write a flat vector back into ``module`` (inverse of :func:`parameter_vector`)."""
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    values = vec.values if isinstance(vec, ParamVector) else vec
    total = sum(p.numel() for _, p in params)
    if values.numel() != total:
        raise ValueError(f"vector has {values.numel()} entries, module has {total} parameters")
    if isinstance(vec, ParamVector) and vec.names != [n for n, _ in params]:
        raise ValueError("parameter names do not match the module")
    offset = 0
    with torch.no_grad():
        for _, p in params:
            n = p.numel()
            p.copy_(values[offset:offset + n].view_as(p))
            offset += n


def classify(bundle: EncoderBundle, batch: torch.Tensor, task_id: int) -> torch.Tensor:
    """Logits of the classifier slice owned by ``task_id``."""
    if bundle.classifier is None:
        raise RuntimeError("bundle has no classifier (unsupervised mode)")
    if not 0 <= task_id < bundle.num_tasks:
        raise IndexError(f"task_id {task_id} out of range [0, {bundle.num_tasks - 1}]")
    return task_slice(bundle.classifier(bundle.backbone(batch)), task_id, bundle.classes_per_task)


def task_slice(logits: torch.Tensor, task_id: int, classes_per_task: int) -> torch.Tensor:
    start = task_id * classes_per_task
    return logits[..., start:start + classes_per_task]


def save_checkpoint(bundle: EncoderBundle, path: str | os.PathLike, extra: dict | None = None) -> None:
    if bundle.arch_config is None:
        raise ValueError("bundle was not built from an ArchConfig; cannot checkpoint")
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch_config": asdict(bundle.arch_config),
        "state_dict": {k: v.detach().clone() for k, v in bundle.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[EncoderBundle, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    bundle = build_encoder_bundle(ArchConfig(**payload["arch_config"]))
    expected = bundle.state_dict()
    state = payload["state_dict"]
    missing = set(expected) ^ set(state)
    if missing:
        raise ValueError(f"checkpoint keys do not match architecture: {sorted(missing)[:5]}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(expected[k].shape)}")
    bundle.load_state_dict(state)
    return bundle, payload.get("extra", {})
