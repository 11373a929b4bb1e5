"""Synaptic Intelligence: path-integral importance over flattened parameters."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class SiState:
    omega: torch.Tensor
    star_params: torch.Tensor
    path_integral: torch.Tensor
    c: float = 100.0
    xi: float = 1.0

    @classmethod
    def init(cls, params: torch.Tensor, c: float = 100.0, xi: float = 1.0) -> SiState:
        if xi <= 0:
            raise ValueError("xi must be positive")
        p = params.detach().clone()
        return cls(torch.zeros_like(p), p, torch.zeros_like(p), c, xi)

    def state_dict(self) -> dict:
        return {"omega": self.omega, "star_params": self.star_params,
                "path_integral": self.path_integral, "c": self.c, "xi": self.xi}


def trainable(module: nn.Module) -> list[torch.nn.Parameter]:
    return [p for p in module.parameters() if p.requires_grad]


def flat_params(module: nn.Module) -> torch.Tensor:
    """Differentiable flat view of the trainable parameters."""
    return torch.cat([p.reshape(-1) for p in trainable(module)])


def flat_grads(module: nn.Module) -> torch.Tensor:
    return torch.cat([
        torch.zeros(p.numel(), dtype=p.dtype) if p.grad is None else p.grad.detach().reshape(-1)
        for p in trainable(module)
    ])


def si_accumulate(state: SiState, grads: torch.Tensor, param_delta: torch.Tensor) -> SiState:
    if grads.shape != state.path_integral.shape or param_delta.shape != state.path_integral.shape:
        raise ValueError("gradient / delta shapes do not match the SI state")
    state.path_integral += -grads * param_delta
    return state


def si_consolidate(state: SiState, current_params: torch.Tensor) -> SiState:
    current = current_params.detach()
    delta = current - state.star_params
    state.omega = (state.omega + state.path_integral / (delta.pow(2) + state.xi)).clamp_min(0)
    state.star_params = current.clone()
    state.path_integral = torch.zeros_like(state.path_integral)
    return state


def si_penalty(state: SiState, current_params: torch.Tensor) -> torch.Tensor:
    return state.c * (state.omega * (current_params - state.star_params).pow(2)).sum()
