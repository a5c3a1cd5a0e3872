"""Distance fields: the trainable SDF/color pair and the frozen UDF prior."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .autodiff import MLP, Optimizer, Schedule, flush_denormals, positional_encode, spatial_gradient

log = logging.getLogger(__name__)


class SdfField(nn.Module):
    """Signed distance network; output channel 0 is f(x), the rest is a feature vector."""

    def __init__(self, hidden: Sequence[int] = (64, 64, 64, 64), octaves: int = 4, feature_dim: int = 32,
                 init_radius: float = 0.5, scene_radius: float = 1.0):
        super().__init__()
        self.feature_dim = feature_dim
        self.scene_radius = scene_radius
        self.init_radius = init_radius
        self.net = MLP(3, 1 + feature_dim, hidden, octaves=octaves, activation="softplus",
                       sphere_init=True, sphere_radius=init_radius)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out = self.net(x)
        return out[..., 0], out[..., 1:]

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)[..., 0]

    def sdf_and_gradient(self, x: torch.Tensor, create_graph: bool = True):
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        with torch.enable_grad():
            f = self.sdf(x)
            g = spatial_gradient(f, x, create_graph=create_graph)
        return f, g


class ColorField(nn.Module):
    """Radiance c(x, d, feature) in [0, 1]^3."""

    def __init__(self, feature_dim: int = 32, hidden: Sequence[int] = (64, 64, 64), octaves: int = 4,
                 use_view_dir: bool = True):
        super().__init__()
        self.octaves = octaves
        self.use_view_dir = use_view_dir
        d_in = 3 * (2 * octaves + 1) + feature_dim + (3 if use_view_dir else 0)
        self.net = MLP(d_in, 3, hidden, octaves=0, activation="relu")

    def forward(self, x: torch.Tensor, view_dir: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        parts = [positional_encode(x, self.octaves), feature]
        if self.use_view_dir:
            parts.append(view_dir)
        return torch.sigmoid(self.net(torch.cat(parts, dim=-1)))


class UdfField(nn.Module):
    """Unsigned distance prior f_theta. No output activation; callers clamp where needed."""

    def __init__(self, hidden: Sequence[int] = (64, 64, 64, 64), octaves: int = 0, init_radius: Optional[float] = 0.5):
        super().__init__()
        self.net = MLP(3, 1, hidden, octaves=octaves, activation="softplus",
                       sphere_init=init_radius is not None, sphere_radius=init_radius or 0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)[..., 0]


def sdf_eval(field_: SdfField, x) -> Tuple[np.ndarray, np.ndarray]:
    """Value and spatial gradient of the SDF at one or many points."""
    dtype = next(field_.parameters()).dtype
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype).detach().requires_grad_(True)
    f, g = field_.sdf_and_gradient(xt, create_graph=False)
    return f.detach().numpy(), g.detach().numpy()


@dataclass
class QuerySet:
    queries: np.ndarray  # (M, 3)
    sigma: np.ndarray  # (M,) jitter scale used for each query
    source: np.ndarray  # (M,) index of the on-surface point each query was drawn around


def neighbor_scale(points: np.ndarray, k: int = 25, scene_radius: float = 1.0) -> np.ndarray:
    """Distance to the k-th nearest neighbor (the point itself counts as the first)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < k:
        return np.full(len(points), 0.05 * scene_radius)
    dist, _ = cKDTree(points).query(points, k=k)
    return dist[:, -1]


def truncated_gaussian(rng: np.random.Generator, sigma: np.ndarray, max_sigmas: float = 3.0) -> np.ndarray:
    """Isotropic 3-D Gaussian offsets, redrawn until each norm is within max_sigmas * sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    out = rng.normal(size=(len(sigma), 3)) * sigma[:, None]
    bad = np.linalg.norm(out, axis=1) > max_sigmas * sigma
    while bad.any():
        out[bad] = rng.normal(size=(int(bad.sum()), 3)) * sigma[bad, None]
        bad = np.linalg.norm(out, axis=1) > max_sigmas * sigma
    return out


def sample_queries(P: np.ndarray, count: int, seed=0, scene_radius: float = 1.0, k: int = 25) -> QuerySet:
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("sample_queries needs at least one on-surface point")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sig = neighbor_scale(P, k, scene_radius)
    src = rng.integers(0, len(P), size=count)
    q = P[src] + truncated_gaussian(rng, sig[src])
    return QuerySet(queries=q, sigma=sig[src], source=src)


def move_queries(udf, q: torch.Tensor, create_graph: bool = True):
    """Pull queries along the normalized UDF gradient by the UDF value.

    Returns (moved points, valid mask, udf values). Queries whose gradient
    norm is below 1e-8 are reported invalid and left in place.
    """
    if not q.requires_grad:
        q = q.detach().requires_grad_(True)
    with torch.enable_grad():
        d = udf(q)
        g = spatial_gradient(d, q, create_graph=create_graph)
    norm = g.norm(dim=-1, keepdim=True)
    valid = norm[..., 0] > 1e-8
    direction = g / norm.clamp_min(1e-8)
    z = q - d[..., None] * direction
    z = torch.where(valid[..., None], z, q)
    return z, valid, d


def move_query(udf, q) -> np.ndarray:
    """Single-point moving operation; raises if the gradient vanishes."""
    first = next(udf.parameters(), None) if isinstance(udf, nn.Module) else None
    dtype = torch.float64 if first is None else first.dtype
    qt = torch.as_tensor(np.asarray(q, dtype=np.float64).reshape(1, 3), dtype=dtype)
    z, valid, _ = move_queries(udf, qt, create_graph=False)
    if not bool(valid[0]):
        raise ValueError("vanishing UDF gradient at query; point skipped")
    return z[0].detach().numpy()


def chamfer_squared(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d2 = torch.cdist(a, b).pow(2)
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def udf_loss(Z, Q) -> torch.Tensor:
    """Symmetric squared Chamfer distance between moved points and surface samples."""
    Z = torch.as_tensor(Z)
    Q = torch.as_tensor(Q, dtype=Z.dtype)
    if len(Z) == 0 or len(Q) == 0:
        raise ValueError("udf_loss needs two non-empty point sets")
    return chamfer_squared(Z, Q)


@dataclass
class UdfConfig:
    steps: int = 10000
    pool_size: int = 5000
    resample_every: int = 1000
    batch_size: int = 500
    target_size: int = 1000
    lr: float = 1e-3
    warmup_steps: int = 200
    hidden: Tuple[int, ...] = (64, 64, 64, 64)
    knn: int = 25
    scene_radius: float = 1.0
    seed: int = 0
    log_every: int = 1000


@dataclass
class UdfTrainResult:
    udf: UdfField
    losses: list = field(default_factory=list)
    skipped: int = 0


class DivergenceError(RuntimeError):
    pass


def train_udf(P: np.ndarray, config: Optional[UdfConfig] = None) -> UdfTrainResult:
    """Fit the UDF prior to an on-surface point set with the moving operation."""
    cfg = config or UdfConfig()
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    if len(P) < cfg.knn:
        raise ValueError(f"train_udf needs at least {cfg.knn} points, got {len(P)}")
    with flush_denormals():
        return _train_udf(P, cfg)


def _train_udf(P: np.ndarray, cfg: UdfConfig) -> UdfTrainResult:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    udf = UdfField(cfg.hidden)
    opt = Optimizer({"udf": list(udf.parameters())},
                    Schedule(cfg.lr, cfg.warmup_steps, cfg.steps, final_fraction=0.05))
    Pt = torch.as_tensor(P, dtype=torch.float32)
    result = UdfTrainResult(udf=udf)
    pool = None
    for step in range(cfg.steps):
        if step % cfg.resample_every == 0:
            pool = torch.as_tensor(sample_queries(P, cfg.pool_size, rng, cfg.scene_radius, cfg.knn).queries,
                                   dtype=torch.float32)
        idx = torch.randint(0, len(pool), (min(cfg.batch_size, len(pool)),), generator=gen)
        if len(Pt) > cfg.target_size:
            target = Pt[torch.randperm(len(Pt), generator=gen)[: cfg.target_size]]
        else:
            target = Pt
        z, valid, _ = move_queries(udf, pool[idx])
        result.skipped += int((~valid).sum())
        loss = udf_loss(z[valid], target)
        if not torch.isfinite(loss):
            raise DivergenceError(f"UDF loss became non-finite at step {step}; last finite "
                                  f"{result.losses[-1] if result.losses else 'n/a'}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.losses.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("udf step=%d loss=%.6g", step, result.losses[-1])
    udf.requires_grad_(False)
    return result
