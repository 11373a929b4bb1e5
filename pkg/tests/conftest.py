import copy

import numpy as np
import pytest
import torch
import torch.nn as nn

from ucl.data import ImageSource, SyntheticConfig, make_synthetic_source
from ucl.models import ArchConfig, EncoderBundle, build_encoder_bundle


def toy_bundle(seed=0, in_dim=4, hidden=6, feat=5, proj=3, predictor=True, dtype=torch.float64):
    """Two-layer MLP encoder without normalization layers, for gradient oracles."""
    g = torch.Generator().manual_seed(seed)

    def linear(i, o):
        m = nn.Linear(i, o).to(dtype)
        with torch.no_grad():
            m.weight.copy_(torch.randn(o, i, generator=g, dtype=dtype) / i ** 0.5)
            m.bias.copy_(torch.randn(o, generator=g, dtype=dtype) * 0.1)
        return m

    backbone = nn.Sequential(linear(in_dim, hidden), nn.Tanh(), linear(hidden, feat))
    projector = nn.Sequential(linear(feat, proj))
    pred = nn.Sequential(linear(proj, proj), nn.Tanh(), linear(proj, proj)) if predictor else None
    return EncoderBundle(backbone, projector, pred)


def tiny_arch(**kw):
    base = dict(backbone="tiny_conv", input_size=8, proj_dim=16, proj_hidden=16, pred_hidden=8,
                tiny_widths=[4, 8, 8, 16])
    base.update(kw)
    return ArchConfig(**base)


@pytest.fixture
def tiny_bundle():
    return build_encoder_bundle(tiny_arch(), seed=0)


@pytest.fixture(scope="session")
def small_synthetic():
    return make_synthetic_source(SyntheticConfig(num_classes=4, image_size=8, train_per_class=12,
                                                 test_per_class=6, seed=0))


def fake_source(dataset_id, num_classes, train_per_class=3, test_per_class=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    ytr = np.repeat(np.arange(num_classes), train_per_class)
    yte = np.repeat(np.arange(num_classes), test_per_class)
    xtr = torch.from_numpy(rng.integers(0, 256, (len(ytr), 3, size, size), dtype=np.uint8))
    xte = torch.from_numpy(rng.integers(0, 256, (len(yte), 3, size, size), dtype=np.uint8))
    return ImageSource(dataset_id, xtr, ytr, xte, yte, num_classes)


def clone(module):
    return copy.deepcopy(module)
