"""Analytic gradients against central finite differences (float64, h=1e-4)."""

import numpy as np
import pytest
import torch

from conftest import toy_bundle
from oracles import (
    analytic_gradient,
    barlow_value,
    central_difference,
    module_fd_gradient,
    relative_error,
    simsiam_frozen_target,
)
from ucl.losses import barlow_twins_loss, simsiam_loss
from ucl.strategies import SiState, lump_mix, si_penalty

TOL = 1e-4


def views(seed, n=8, d=4):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, d, generator=g, dtype=torch.float64), torch.randn(n, d, generator=g, dtype=torch.float64)


@pytest.mark.parametrize("trial", range(5))
def test_simsiam_gradient(trial):
    b = toy_bundle(seed=trial)
    v1, v2 = views(100 + trial)
    simsiam_loss(b, v1, v2).loss.backward()
    fd = module_fd_gradient(b, simsiam_frozen_target(b, v1, v2))
    assert relative_error(analytic_gradient(b), fd) < TOL


@pytest.mark.parametrize("trial", range(5))
def test_barlow_gradient(trial):
    b = toy_bundle(seed=trial, predictor=False)
    v1, v2 = views(200 + trial)
    barlow_twins_loss(b, v1, v2, lambda_bt=0.05).loss.backward()
    fd = module_fd_gradient(b, barlow_value(b, v1, v2, 0.05))
    assert relative_error(analytic_gradient(b), fd) < TOL


@pytest.mark.parametrize("trial", range(5))
def test_si_penalty_gradient(trial):
    rng = np.random.default_rng(trial)
    n = 7
    state = SiState(torch.from_numpy(rng.uniform(0, 2, n)), torch.from_numpy(rng.normal(size=n)),
                    torch.zeros(n, dtype=torch.float64), c=0.7, xi=1.0)
    theta = torch.from_numpy(rng.normal(size=n)).requires_grad_(True)
    si_penalty(state, theta).backward()
    fd = central_difference(lambda x: float(si_penalty(state, torch.from_numpy(x))), theta.detach().numpy())
    assert relative_error(theta.grad.numpy(), fd) < TOL
    closed = 2 * state.c * state.omega * (theta.detach() - state.star_params)
    assert torch.allclose(theta.grad, closed, atol=1e-12)


def test_lump_input_gradient_chain_rule():
    # d loss / d current = lam * d loss / d mixed ; d loss / d replay = (1 - lam) * d loss / d mixed
    b = toy_bundle(seed=9, predictor=False)
    x, m = views(7)
    lam = 0.3
    x = x.clone().requires_grad_(True)
    m = m.clone().requires_grad_(True)
    mixed = lump_mix(x, m, lam)
    mixed.retain_grad()
    out = b.projector(b.backbone(mixed)).pow(2).sum()
    out.backward()
    assert torch.allclose(x.grad, lam * mixed.grad, atol=1e-12)
    assert torch.allclose(m.grad, (1 - lam) * mixed.grad, atol=1e-12)

    def f(flat):
        xx = torch.from_numpy(flat.reshape(x.shape))
        return float(b.projector(b.backbone(lump_mix(xx, m.detach(), lam))).pow(2).sum())

    fd = central_difference(f, x.detach().numpy().ravel()).reshape(x.shape)
    assert relative_error(x.grad.numpy(), fd) < TOL
