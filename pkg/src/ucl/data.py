"""Split task streams, image sources and evaluation sets.

Images are kept as uint8 tensors of shape (N, C, H, W); conversion to
normalized float happens at batch time (see :mod:`ucl.augment`).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

STREAM_DATASETS = ("cifar10", "cifar100", "tiny_imagenet", "synthetic")
OOD_DATASETS = ("mnist", "fmnist", "svhn", "cifar10", "cifar100", "synthetic")

# global per-dataset channel statistics
NORMALIZATION = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2615)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "tiny_imagenet": ((0.4802, 0.4481, 0.3975), (0.2770, 0.2691, 0.2821)),
    "synthetic": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
}

NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "tiny_imagenet": 200}

DATA_ROOT_ENV = "UCL_DATA_ROOT"


def resolve_data_root(data_root: str | os.PathLike | None = None) -> Path:
    if data_root is not None:
        return Path(data_root)
    return Path(os.environ.get(DATA_ROOT_ENV, "./data"))


@dataclass
class SyntheticConfig:
    """Gaussian-blob image classes for desk-scale runs.

    Each class owns a fixed arrangement of three elongated blobs; instances
    shift it to a random position and paint it with a random color and
    intensity on a noisy background.
    """

    num_classes: int = 10
    image_size: int = 32
    train_per_class: int = 100
    test_per_class: int = 50
    noise: float = 0.1
    seed: int = 0


@dataclass
class ImageSource:
    dataset_id: str
    train_images: torch.Tensor  # uint8 (N, C, H, W)
    train_labels: np.ndarray
    test_images: torch.Tensor
    test_labels: np.ndarray
    num_classes: int

    @property
    def normalization(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        return NORMALIZATION[self.dataset_id]

    @property
    def image_size(self) -> int:
        return int(self.train_images.shape[-1])


@dataclass
class TaskSpec:
    task_id: int
    class_ids: list[int]
    train_ids: list[int]
    test_ids: list[int]
    per_task_cap: int | None = None

    def local_label(self, labels: np.ndarray) -> np.ndarray:
        """Map original class labels to positions within ``class_ids``."""
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(y)] for y in labels], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} is not a class of task {self.task_id}") from None


@dataclass
class TaskStream:
    dataset_id: str
    seed: int
    classes_per_task: int
    tasks: list[TaskSpec] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def to_manifest(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "seed": self.seed,
            "classes_per_task": self.classes_per_task,
            "tasks": [asdict(t) for t in self.tasks],
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> TaskStream:
        return cls(
            dataset_id=manifest["dataset_id"],
            seed=int(manifest["seed"]),
            classes_per_task=int(manifest["classes_per_task"]),
            tasks=[TaskSpec(**t) for t in manifest["tasks"]],
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_manifest()))

    @classmethod
    def load(cls, path: str | os.PathLike) -> TaskStream:
        return cls.from_manifest(json.loads(Path(path).read_text()))


@dataclass
class ViewPair:
    view1: torch.Tensor
    view2: torch.Tensor
    source_index: int | torch.Tensor


@dataclass
class EvalSet:
    dataset_id: str
    images: torch.Tensor  # uint8 (N, C, H, W)
    labels: np.ndarray
    role: str = "in_stream_test"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.role not in ("in_stream_train", "in_stream_test", "ood"):
            raise ValueError(f"unknown role {self.role!r}")

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# sources


def make_synthetic_source(cfg: SyntheticConfig | None = None) -> ImageSource:
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    s = cfg.image_size
    # class identity lives in the spatial layout of a few anisotropic blobs;
    # color is drawn per instance so that photometric augmentation keeps labels intact
    n_blobs = 3
    offsets = rng.uniform(-0.22, 0.22, size=(cfg.num_classes, n_blobs, 2)) * s
    angles = rng.uniform(0, np.pi, size=(cfg.num_classes, n_blobs))
    widths = rng.uniform(0.05, 0.13, size=(cfg.num_classes, n_blobs, 2)) * s
    inv_covs = np.empty((cfg.num_classes, n_blobs, 2, 2))
    for c in range(cfg.num_classes):
        for b in range(n_blobs):
            a = angles[c, b]
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            inv_covs[c, b] = rot @ np.diag(1.0 / widths[c, b] ** 2) @ rot.T

    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")

    def draw(n_per_class: int, rng: np.random.Generator):
        images, labels = [], []
        for c in range(cfg.num_classes):
            for _ in range(n_per_class):
                center = s / 2 + rng.uniform(-0.12, 0.12, size=2) * s
                shape = np.zeros((s, s))
                for b in range(n_blobs):
                    dy, dx = yy - (center[0] + offsets[c, b, 0]), xx - (center[1] + offsets[c, b, 1])
                    m = inv_covs[c, b]
                    shape += np.exp(-0.5 * (m[0, 0] * dy * dy + 2 * m[0, 1] * dy * dx + m[1, 1] * dx * dx))
                shape = np.clip(shape, 0, 1) * rng.uniform(0.6, 1.0)
                color = rng.uniform(0.3, 1.0, 3)
                img = 0.15 + 0.8 * shape[None] * color[:, None, None]
                img = img + rng.normal(0, cfg.noise, size=img.shape)
                images.append(np.clip(img, 0, 1))
                labels.append(c)
        arr = (np.stack(images) * 255).round().astype(np.uint8)
        return torch.from_numpy(arr), np.array(labels, dtype=np.int64)

    train_x, train_y = draw(cfg.train_per_class, np.random.default_rng([cfg.seed, 1]))
    test_x, test_y = draw(cfg.test_per_class, np.random.default_rng([cfg.seed, 2]))
    return ImageSource("synthetic", train_x, train_y, test_x, test_y, cfg.num_classes)


def _to_uint8_nchw(data) -> torch.Tensor:
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[:, None]
    elif arr.shape[-1] in (1, 3) and arr.shape[1] not in (1, 3):
        arr = arr.transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.uint8))


def _load_tiny_imagenet(root: Path) -> ImageSource:
    from PIL import Image

    base = root / "tiny-imagenet-200"
    if not base.is_dir():
        raise FileNotFoundError(f"Tiny-ImageNet not found under {base}")
    wnids = sorted((base / "wnids.txt").read_text().split())
    index = {w: i for i, w in enumerate(wnids)}

    def read(paths):
        return np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])

    train_paths, train_labels = [], []
    for w in wnids:
        for p in sorted((base / "train" / w / "images").glob("*.JPEG")):
            train_paths.append(p)
            train_labels.append(index[w])
    test_paths, test_labels = [], []
    for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
        parts = line.split("\t")
        test_paths.append(base / "val" / "images" / parts[0])
        test_labels.append(index[parts[1]])
    return ImageSource(
        "tiny_imagenet",
        _to_uint8_nchw(read(train_paths)), np.array(train_labels),
        _to_uint8_nchw(read(test_paths)), np.array(test_labels),
        len(wnids),
    )


def load_source(dataset_id: str, data_root=None, download: bool = False,
                synthetic: SyntheticConfig | None = None) -> ImageSource:
    if dataset_id not in STREAM_DATASETS:
        raise ValueError(f"unknown dataset_id {dataset_id!r}; expected one of {STREAM_DATASETS}")
    if dataset_id == "synthetic":
        return make_synthetic_source(synthetic)
    root = resolve_data_root(data_root)
    if dataset_id == "tiny_imagenet":
        return _load_tiny_imagenet(root)

    from torchvision import datasets

    cls = datasets.CIFAR10 if dataset_id == "cifar10" else datasets.CIFAR100
    try:
        train = cls(str(root), train=True, download=download)
        test = cls(str(root), train=False, download=download)
    except RuntimeError as exc:
        raise FileNotFoundError(f"{dataset_id} not available under {root}: {exc}") from exc
    return ImageSource(
        dataset_id,
        _to_uint8_nchw(train.data), np.array(train.targets, dtype=np.int64),
        _to_uint8_nchw(test.data), np.array(test.targets, dtype=np.int64),
        NUM_CLASSES[dataset_id],
    )


# ---------------------------------------------------------------------------
# streams


def build_split_stream(dataset_id: str, num_tasks: int, classes_per_task: int, seed: int,
                       per_task_cap: int | None = None, *, source: ImageSource | None = None,
                       data_root=None) -> TaskStream:
    """Partition a labeled corpus into ``num_tasks`` disjoint class splits.

    The class order is a permutation of the class universe drawn from
    ``seed`` and chunked in order. With ``per_task_cap`` each task keeps a
    seeded random subset of its training examples; the subset is a prefix
    of a fixed per-task permutation, so smaller caps nest inside larger ones.
    """
    if dataset_id not in STREAM_DATASETS:
        raise ValueError(f"unknown dataset_id {dataset_id!r}; expected one of {STREAM_DATASETS}")
    if source is None:
        source = load_source(dataset_id, data_root)
    elif source.dataset_id != dataset_id:
        raise ValueError(f"source is {source.dataset_id!r}, expected {dataset_id!r}")
    if num_tasks < 1 or classes_per_task < 1:
        raise ValueError("num_tasks and classes_per_task must be positive")
    if num_tasks * classes_per_task > source.num_classes:
        raise ValueError(
            f"{num_tasks} tasks x {classes_per_task} classes exceeds the "
            f"{source.num_classes} classes of {dataset_id}"
        )
    if per_task_cap is not None and per_task_cap < 1:
        raise ValueError("per_task_cap must be positive")

    order = np.random.default_rng(seed).permutation(source.num_classes)
    tasks = []
    for t in range(num_tasks):
        classes = [int(c) for c in order[t * classes_per_task:(t + 1) * classes_per_task]]
        train_ids = np.flatnonzero(np.isin(source.train_labels, classes))
        test_ids = np.flatnonzero(np.isin(source.test_labels, classes))
        if per_task_cap is not None:
            perm = np.random.default_rng([seed, t]).permutation(len(train_ids))
            train_ids = np.sort(train_ids[perm[:per_task_cap]])
        tasks.append(TaskSpec(t, classes, train_ids.tolist(), test_ids.tolist(), per_task_cap))
    return TaskStream(dataset_id, seed, classes_per_task, tasks)


def task_eval_sets(source: ImageSource, task: TaskSpec) -> tuple[EvalSet, EvalSet]:
    """Un-augmented train (memory bank) and test sets of one task."""
    tr = np.asarray(task.train_ids, dtype=np.int64)
    te = np.asarray(task.test_ids, dtype=np.int64)
    return (
        EvalSet(source.dataset_id, source.train_images[tr], source.train_labels[tr], "in_stream_train"),
        EvalSet(source.dataset_id, source.test_images[te], source.test_labels[te], "in_stream_test"),
    )


# ---------------------------------------------------------------------------
# out-of-distribution sets


def _fit_resolution(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[1] == 1:
        images = images.expand(-1, 3, -1, -1)
    if images.shape[-1] != size or images.shape[-2] != size:
        x = F.interpolate(images.float(), size=(size, size), mode="bilinear", align_corners=False)
        images = x.round().clamp(0, 255).to(torch.uint8)
    return images.contiguous()


def _load_svhn(root: Path, split: str, download: bool):
    """Read ``{split}_32x32.mat`` from ``root/svhn``; label 10 denotes digit 0."""
    path = root / "svhn" / f"{split}_32x32.mat"
    if not path.exists():
        if not download:
            raise FileNotFoundError(f"missing {path}")
        from torchvision import datasets

        datasets.SVHN(str(root / "svhn"), split=split, download=True)
    from scipy.io import loadmat

    mat = loadmat(str(path))
    images = np.transpose(mat["X"], (3, 2, 0, 1))  # (H, W, C, N) -> (N, C, H, W)
    labels = mat["y"].astype(np.int64).reshape(-1) % 10
    return images, labels


def load_ood_eval_set(dataset_id: str, data_root=None, *, split: str = "test", image_size: int = 32,
                      download: bool = False, synthetic: SyntheticConfig | None = None) -> EvalSet:
    """Load an out-of-distribution set at encoder resolution with 3 channels."""
    if dataset_id not in OOD_DATASETS:
        raise ValueError(f"unknown OOD dataset_id {dataset_id!r}; expected one of {OOD_DATASETS}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    train = split == "train"

    if dataset_id == "synthetic":
        cfg = synthetic or SyntheticConfig(seed=1234, image_size=image_size)
        src = make_synthetic_source(cfg)
        images, labels = (src.train_images, src.train_labels) if train else (src.test_images, src.test_labels)
        return EvalSet(dataset_id, _fit_resolution(images, image_size), labels, "ood")
    if dataset_id in ("cifar10", "cifar100"):
        src = load_source(dataset_id, data_root, download=download)
        images, labels = (src.train_images, src.train_labels) if train else (src.test_images, src.test_labels)
        return EvalSet(dataset_id, _fit_resolution(images, image_size), labels, "ood")

    from torchvision import datasets

    root = str(resolve_data_root(data_root))
    try:
        if dataset_id == "mnist":
            ds = datasets.MNIST(root, train=train, download=download)
            images, labels = ds.data.numpy(), ds.targets.numpy()
        elif dataset_id == "fmnist":
            ds = datasets.FashionMNIST(root, train=train, download=download)
            images, labels = ds.data.numpy(), ds.targets.numpy()
        else:
            images, labels = _load_svhn(Path(root), split, download)
    except RuntimeError as exc:
        raise FileNotFoundError(f"{dataset_id} not available under {root}: {exc}") from exc
    images = _fit_resolution(_to_uint8_nchw(images), image_size)
    return EvalSet(dataset_id, images, np.asarray(labels, dtype=np.int64), "ood")
