"""SimSiam and BarlowTwins objectives."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import torch

EPS = 1e-12


@dataclass
class SsLossOutput:
    loss: torch.Tensor
    diagnostics: dict = field(default_factory=dict)


def _row_norms(x: torch.Tensor, eps: float, strict: bool, name: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if strict and bool((norms == 0).any()):
        raise ValueError(f"zero-norm vector in {name}")
    return norms.clamp_min(eps)


def negative_cosine(p: torch.Tensor, z: torch.Tensor, eps: float = EPS, strict: bool = False) -> torch.Tensor:
    """Mean negative cosine similarity between rows of ``p`` and ``z``.

    ``z`` is used as given; callers apply the stop-gradient.
    """
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(z.shape)}")
    if p.dim() == 1:
        p, z = p[None], z[None]
    pn = p / _row_norms(p, eps, strict, "p")
    zn = z / _row_norms(z, eps, strict, "z")
    return -(pn * zn).sum(dim=-1).mean()


def simsiam_objective(p1, p2, z1, z2, eps: float = EPS, strict: bool = False) -> torch.Tensor:
    return 0.5 * negative_cosine(p1, z2.detach(), eps, strict) + 0.5 * negative_cosine(p2, z1.detach(), eps, strict)


def simsiam_loss(bundle, view1: torch.Tensor, view2: torch.Tensor, eps: float = EPS,
                 strict: bool = False) -> SsLossOutput:
    if view1.shape != view2.shape:
        raise ValueError("views must share a shape")
    if bundle.predictor is None:
        raise RuntimeError("SimSiam needs a prediction head")
    z1 = bundle.projector(bundle.backbone(view1))
    z2 = bundle.projector(bundle.backbone(view2))
    p1, p2 = bundle.predictor(z1), bundle.predictor(z2)
    loss = simsiam_objective(p1, p2, z1, z2, eps, strict)
    return SsLossOutput(loss, {"alignment": -float(loss.detach())})


def cross_correlation(z1: torch.Tensor, z2: torch.Tensor, centered: bool = True, eps: float = EPS,
                      strict: bool = False) -> torch.Tensor:
    """Batch cross-correlation matrix between embedding dimensions.

    With ``centered`` each column is standardized over the batch first;
    otherwise raw embeddings are normalized by their column norms only.
    """
    if z1.shape != z2.shape or z1.dim() != 2:
        raise ValueError("expected two (batch, dim) matrices of equal shape")
    if z1.shape[0] < 2:
        raise ValueError("cross-correlation needs a batch of at least 2")
    if centered:
        z1 = z1 - z1.mean(dim=0)
        z2 = z2 - z2.mean(dim=0)
        z1 = z1 / z1.std(dim=0).clamp_min(eps)
        z2 = z2 / z2.std(dim=0).clamp_min(eps)
    n1 = z1.pow(2).sum(dim=0).sqrt()
    n2 = z2.pow(2).sum(dim=0).sqrt()
    if strict and bool((n1 == 0).any() or (n2 == 0).any()):
        raise ValueError("zero-variance embedding column")
    return (z1.T @ z2) / (n1.clamp_min(eps)[:, None] * n2.clamp_min(eps)[None, :])


def barlow_twins_objective(c: torch.Tensor, lambda_bt: float = 0.005) -> torch.Tensor:
    diag = torch.diagonal(c)
    on_diag = (1 - diag).pow(2).sum()
    off_mask = ~torch.eye(c.shape[0], dtype=torch.bool, device=c.device)
    off_diag = c[off_mask].pow(2).sum()
    return on_diag + lambda_bt * off_diag


def barlow_twins_loss(bundle, view1: torch.Tensor, view2: torch.Tensor, lambda_bt: float = 0.005,
                      centered: bool = True, eps: float = EPS, strict: bool = False) -> SsLossOutput:
    if lambda_bt <= 0:
        raise ValueError("lambda_bt must be positive")
    if view1.shape != view2.shape:
        raise ValueError("views must share a shape")
    z1 = bundle.projector(bundle.backbone(view1))
    z2 = bundle.projector(bundle.backbone(view2))
    c = cross_correlation(z1, z2, centered, eps, strict)
    loss = barlow_twins_objective(c, lambda_bt)
    return SsLossOutput(loss, {"diag_mean": float(torch.diagonal(c).detach().mean())})


def make_ssl_loss(objective: str, lambda_bt: float = 0.005, centered: bool = True):
    """Return ``loss_fn(bundle, view1, view2) -> SsLossOutput`` for an objective name."""
    if objective == "simsiam":
        return simsiam_loss
    if objective == "barlow":
        return partial(barlow_twins_loss, lambda_bt=lambda_bt, centered=centered)
    raise ValueError(f"unknown objective {objective!r}")
