"""Loss terms of the joint objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping

import torch


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"loss term '{term}' is not finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    global_: float = 1.0
    local: float = 0.5
    eikonal: float = 0.1
    reg: float = 0.1
    epsilon: float = 0.02

    def __post_init__(self):
        if min(self.global_, self.local, self.eikonal, self.reg) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def color_loss(rendered: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Per-ray L1 norm (sum of absolute channel differences), averaged over the batch."""
    truth = torch.as_tensor(truth, dtype=rendered.dtype)
    if rendered.shape != truth.shape:
        raise ValueError(f"batch mismatch: {tuple(rendered.shape)} vs {tuple(truth.shape)}")
    return (rendered - truth).abs().sum(-1).mean()


def near_prior_mask(udf_values: torch.Tensor, epsilon: float) -> torch.Tensor:
    # the prior's sign is arbitrary (the moving operation is invariant to f -> -f),
    # so the cut-off compares the magnitude
    return udf_values.detach().abs() <= epsilon


def global_loss_values(sdf_values: torch.Tensor, udf_values: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Mean |f| over all samples, counting only samples the prior places within epsilon of the surface."""
    mask = near_prior_mask(udf_values, epsilon).to(sdf_values.dtype)
    return (sdf_values.abs() * mask).sum() / max(sdf_values.numel(), 1)


def global_loss(sdf_field, udf_field, samples: torch.Tensor, epsilon: float) -> torch.Tensor:
    samples = torch.as_tensor(samples)
    with torch.no_grad():
        u = udf_field(samples)
    return global_loss_values(sdf_field.sdf(samples), u, epsilon)


def global_loss_paper_form(sdf_values: torch.Tensor, udf_values: torch.Tensor, epsilon: float) -> torch.Tensor:
    """The cut-off written as 1 - max(u - eps, 0) / (u - eps); undefined at u == eps."""
    u = udf_values.abs() - epsilon
    factor = 1.0 - torch.clamp(u, min=0.0) / u
    return (sdf_values.abs() * factor).mean()


def eikonal_loss(sdf_field, points: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    points = torch.as_tensor(points)
    if len(points) == 0:
        raise ValueError("eikonal_loss needs sample points")
    _, g = sdf_field.sdf_and_gradient(points.detach().requires_grad_(True), create_graph=create_graph)
    return ((g.norm(dim=-1) - 1.0) ** 2).mean()


def reg_loss(sdf_field, points: torch.Tensor) -> torch.Tensor:
    points = torch.as_tensor(points)
    if len(points) == 0:
        raise ValueError("reg_loss needs on-surface points")
    return sdf_field.sdf(points).abs().mean()


TERMS = ("color", "global", "local", "eikonal", "reg")


def total_loss(parts: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """color + w_global * global + w_local * local + w_eik * eikonal + w_reg * reg; missing terms count as 0."""
    scale = {"color": 1.0, "global": weights.global_, "local": weights.local,
             "eikonal": weights.eikonal, "reg": weights.reg}
    total = None
    for name, value in parts.items():
        if name not in scale:
            raise KeyError(f"unknown loss term {name}")
        value = torch.as_tensor(value)
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(name, float(value))
        term = scale[name] * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss terms given")
    return total


def as_floats(parts: Mapping[str, torch.Tensor]) -> Dict[str, float]:
    return {k: float(torch.as_tensor(v).detach()) for k, v in parts.items()}
