"""Numeric substrate: reverse-mode gradients, coordinate MLPs, Adam with schedules.

Gradients come from torch autograd; this module pins down the small surface the
rest of the package relies on (shape checks, named errors, nested gradients for
the Eikonal term, and an exact checkpoint format).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
from torch import nn


class ShapeError(ValueError):
    """Raised when a tensor does not fit the node it is fed to."""


class BackwardError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block '{block}'")
        self.block = block


_flush_depth = 0


@contextlib.contextmanager
def flush_denormals():
    """Treat subnormal floats as zero inside the block; softplus(beta=100) otherwise spends most of its time on them.

    The flag is process-wide CPU state, so it is switched off again when the outermost block exits.
    """
    global _flush_depth
    _flush_depth += 1
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        _flush_depth -= 1
        if _flush_depth == 0:
            torch.set_flush_denormal(False)


def positional_encode(x: torch.Tensor, octaves: int, include_input: bool = True) -> torch.Tensor:
    """Lift coordinates to [x, sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(L-1) pi x)]."""
    if octaves < 0:
        raise ValueError("octaves must be >= 0")
    parts = [x] if include_input else []
    for k in range(octaves):
        freq = (2.0 ** k) * math.pi
        parts.append(torch.sin(freq * x))
        parts.append(torch.cos(freq * x))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)


def encoded_width(d_in: int, octaves: int, include_input: bool = True) -> int:
    return d_in * (2 * octaves + (1 if include_input else 0))


class MLP(nn.Module):
    """Fully connected network with an optional sinusoidal input lift.

    ``activation`` is ``"softplus"`` (beta=100, smooth enough for nested
    gradients) or ``"relu"``. With ``sphere_init`` the output channel 0
    starts as roughly ``|x| - sphere_radius``.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        hidden: Sequence[int],
        octaves: int = 0,
        include_input: bool = True,
        activation: str = "softplus",
        sphere_init: bool = False,
        sphere_radius: float = 0.5,
    ):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.octaves = octaves
        self.include_input = include_input
        self.activation_name = activation
        dims = [encoded_width(d_in, octaves, include_input)] + list(hidden) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        if activation == "softplus":
            self.act = nn.Softplus(beta=100)
        elif activation == "relu":
            self.act = nn.ReLU()
        else:
            raise ValueError(f"unknown activation {activation!r}")
        if sphere_init:
            self._sphere_init(sphere_radius)

    def _sphere_init(self, radius: float):
        n = len(self.layers)
        for i, lin in enumerate(self.layers):
            fan_in, fan_out = lin.in_features, lin.out_features
            if i == n - 1:
                nn.init.normal_(lin.weight, mean=math.sqrt(math.pi) / math.sqrt(fan_in), std=1e-4)
                nn.init.constant_(lin.bias, -radius)
            else:
                nn.init.normal_(lin.weight, 0.0, math.sqrt(2.0) / math.sqrt(fan_out))
                nn.init.constant_(lin.bias, 0.0)
                if i == 0 and self.octaves > 0:
                    # only the raw coordinates drive the initial sphere
                    with torch.no_grad():
                        lin.weight[:, self.d_in:] = 0.0
                        if not self.include_input:
                            lin.weight.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"layer 0 expects {self.d_in} input features, got shape {tuple(x.shape)}")
        h = positional_encode(x, self.octaves, self.include_input)
        for i, lin in enumerate(self.layers):
            h = lin(h)
            if i < len(self.layers) - 1:
                h = self.act(h)
        return h


def forward(module: nn.Module, *inputs: torch.Tensor) -> torch.Tensor:
    """Evaluate a graph-building callable; raises ShapeError naming the failing node."""
    for i, x in enumerate(inputs):
        if x is None:
            raise ShapeError(f"input {i} is unbound")
    try:
        return module(*inputs)
    except RuntimeError as err:
        if "shape" in str(err) or "size" in str(err):
            raise ShapeError(f"{type(module).__name__}: {err}") from err
        raise


def backward(root, leaves: Iterable[torch.Tensor], create_graph: bool = False) -> List[torch.Tensor]:
    """Gradient of a scalar ``root`` with respect to each leaf.

    A root that does not depend on any leaf yields zeros.
    """
    leaves = list(leaves)
    if not isinstance(root, torch.Tensor):
        raise BackwardError("backward called before forward: root is not a computed tensor")
    if root.numel() != 1:
        raise BackwardError(f"root must be scalar, got shape {tuple(root.shape)}")
    if not root.requires_grad:
        return [torch.zeros_like(p) for p in leaves]
    grads = torch.autograd.grad(root.reshape(()), leaves, create_graph=create_graph, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]


def spatial_gradient(values: torch.Tensor, points: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """d(values)/d(points) for a field evaluated pointwise; keeps the graph for nested use."""
    (g,) = torch.autograd.grad(
        values,
        points,
        grad_outputs=torch.ones_like(values),
        create_graph=create_graph,
        retain_graph=True,
    )
    return g


@dataclass
class Schedule:
    """Linear warm-up followed by cosine decay to ``final_fraction`` of the base rate."""

    base_lr: float = 5e-4
    warmup_steps: int = 500
    total_steps: int = 20000
    final_fraction: float = 0.05
    decay: str = "cosine"

    def lr(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        if self.decay == "constant" or self.total_steps <= self.warmup_steps:
            return self.base_lr
        progress = min(1.0, (step - self.warmup_steps) / (self.total_steps - self.warmup_steps))
        a = self.final_fraction
        return self.base_lr * ((1 + math.cos(math.pi * progress)) * 0.5 * (1 - a) + a)


class Optimizer:
    """Adam over named parameter blocks with a step counter and lr schedule."""

    def __init__(self, blocks: Dict[str, Sequence[torch.nn.Parameter]], schedule: Optional[Schedule] = None,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.schedule = schedule or Schedule(warmup_steps=0, decay="constant")
        self.blocks = {name: list(ps) for name, ps in blocks.items()}
        groups = [{"params": ps, "name": name} for name, ps in self.blocks.items()]
        self.adam = torch.optim.Adam(groups, lr=self.schedule.lr(0), betas=betas, eps=eps)
        self.step_count = 0

    def zero_grad(self):
        self.adam.zero_grad(set_to_none=True)

    def check_finite(self):
        for name, ps in self.blocks.items():
            for p in ps:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NonFiniteGradientError(name)

    def step(self):
        self.check_finite()
        lr = self.schedule.lr(self.step_count)
        for group in self.adam.param_groups:
            group["lr"] = lr
        self.adam.step()
        self.step_count += 1
        return lr

    def moments(self, p: torch.nn.Parameter):
        st = self.adam.state.get(p, {})
        return st.get("exp_avg"), st.get("exp_avg_sq")

    def state_arrays(self, prefix: str = "opt") -> Dict[str, np.ndarray]:
        out = {f"{prefix}/step_count": np.array(self.step_count, dtype=np.int64)}
        for name, ps in self.blocks.items():
            for i, p in enumerate(ps):
                st = self.adam.state.get(p)
                if not st:
                    continue
                out[f"{prefix}/{name}/{i}/step"] = np.array(float(st["step"]))
                out[f"{prefix}/{name}/{i}/exp_avg"] = st["exp_avg"].detach().cpu().numpy()
                out[f"{prefix}/{name}/{i}/exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], prefix: str = "opt"):
        self.step_count = int(arrays[f"{prefix}/step_count"])
        for name, ps in self.blocks.items():
            for i, p in enumerate(ps):
                key = f"{prefix}/{name}/{i}"
                if f"{key}/exp_avg" not in arrays:
                    continue
                self.adam.state[p] = {
                    "step": torch.tensor(float(arrays[f"{key}/step"])),
                    "exp_avg": torch.as_tensor(arrays[f"{key}/exp_avg"], dtype=p.dtype).clone(),
                    "exp_avg_sq": torch.as_tensor(arrays[f"{key}/exp_avg_sq"], dtype=p.dtype).clone(),
                }


def optimizer_step(opt: Optimizer, params: Sequence[torch.nn.Parameter], grads: Sequence[torch.Tensor]) -> float:
    """Assign ``grads`` to ``params`` and take one Adam step; returns the lr used."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        p.grad = g.detach().clone()
    return opt.step()


# Checkpoints are numpy .npz archives: one array per key, shape and dtype stored
# in each member's header. Keys are "<module>/<parameter name>" for weights and
# "opt/..." for optimizer moments; loading is bit-exact.

def module_arrays(module: nn.Module, prefix: str) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: Dict[str, np.ndarray], prefix: str):
    state = {}
    for k, v in module.state_dict().items():
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise KeyError(f"checkpoint missing {key}")
        a = arrays[key]
        if tuple(a.shape) != tuple(v.shape):
            raise ShapeError(f"{key}: checkpoint shape {a.shape} != module shape {tuple(v.shape)}")
        state[k] = torch.as_tensor(a, dtype=v.dtype)
    module.load_state_dict(state)


def save_arrays(path, arrays: Dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_arrays(path) -> Dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}
