"""Multi-view feature consistency of on-surface points (SfM and pseudo points)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import map_coordinates, uniform_filter
from scipy.spatial.transform import Rotation, Slerp

from .renderer import Camera

log = logging.getLogger(__name__)

WINDOW = 7
NORM_EPS = 0.05


@dataclass
class FeatureMap:
    data: torch.Tensor  # (C, H, W)
    source: str = "input-image"

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


def _descriptor(gray: np.ndarray) -> np.ndarray:
    mean = uniform_filter(gray, WINDOW, mode="reflect")
    var = np.maximum(uniform_filter(gray * gray, WINDOW, mode="reflect") - mean * mean, 0.0)
    norm = (gray - mean) / (np.sqrt(var) + NORM_EPS)
    # central differences, one-sided at the border
    gy, gx = np.gradient(gray)
    return np.stack([norm, gx, gy])


def build_feature_map(image: np.ndarray, source: str = "input-image") -> FeatureMap:
    """Six channels: locally normalized intensity and x/y gradients, at full and half resolution."""
    gray = grayscale(image)
    h, w = gray.shape
    full = _descriptor(gray)
    h2, w2 = max(h // 2, 1), max(w // 2, 1)
    half_img = gray[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3)) if h > 1 and w > 1 else gray
    half = _descriptor(half_img) * 0.5  # gradients per full-resolution pixel
    half[0] *= 2.0
    rr, cc = np.meshgrid((np.arange(h) - 0.5) / 2.0, (np.arange(w) - 0.5) / 2.0, indexing="ij")
    up = np.stack([map_coordinates(ch, [rr, cc], order=1, mode="nearest") for ch in half])
    data = np.concatenate([full, up]).astype(np.float32)
    return FeatureMap(torch.from_numpy(data), source)


def dump_feature_map(fm: FeatureMap, directory, prefix: str = "feature") -> List[Path]:
    """Debug dump: one grey PPM per channel, each min-max stretched to 0..255."""
    from .scene import write_ppm

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, plane in enumerate(fm.data.detach().double().numpy()):
        lo, hi = plane.min(), plane.max()
        scaled = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
        path = out / f"{prefix}_{c}.ppm"
        write_ppm(path, np.repeat(scaled[..., None], 3, axis=-1))
        paths.append(path)
    return paths


def sample_feature(fm: FeatureMap, uv: torch.Tensor):
    """Bilinear lookup at continuous pixel coords (..., 2); returns (features (..., C), in-bounds mask)."""
    uv = torch.as_tensor(uv)
    shape = uv.shape[:-1]
    flat = uv.reshape(-1, 2)
    W, H = fm.width, fm.height
    inside = (flat[:, 0] >= 0) & (flat[:, 0] <= W - 1) & (flat[:, 1] >= 0) & (flat[:, 1] <= H - 1)
    gx = 2.0 * flat[:, 0] / max(W - 1, 1) - 1.0
    gy = 2.0 * flat[:, 1] / max(H - 1, 1) - 1.0
    grid = torch.stack([gx, gy], -1)[None, :, None, :]
    data = fm.data.to(uv.dtype)[None]
    out = F.grid_sample(data, grid, mode="bilinear", padding_mode="border", align_corners=True)
    feats = out[0, :, :, 0].T
    return feats.reshape(*shape, -1), inside.reshape(shape)


@dataclass
class ProjectionMap:
    """Per-view 3x4 world-to-pixel matrices."""

    matrices: torch.Tensor  # (V, 3, 4)
    sizes: List[tuple]  # (width, height) per view
    centers: torch.Tensor  # (V, 3)

    @classmethod
    def from_cameras(cls, cams: Sequence[Camera], dtype=torch.float32) -> "ProjectionMap":
        mats = torch.as_tensor(np.stack([c.projection for c in cams]), dtype=dtype)
        centers = torch.as_tensor(np.stack([c.center for c in cams]), dtype=dtype)
        return cls(mats, [(c.width, c.height) for c in cams], centers)

    def __len__(self):
        return self.matrices.shape[0]


def project(pm: ProjectionMap, view: int, p: torch.Tensor, min_depth: float = 1e-6):
    """Pixel coordinates (..., 2), depth (...) and a validity mask for points in front of the camera."""
    p = torch.as_tensor(p)
    M = pm.matrices[view].to(p.dtype)
    h = p @ M[:, :3].T + M[:, 3]
    depth = h[..., 2]
    valid = depth > min_depth
    safe = torch.where(valid, depth, torch.ones_like(depth))
    uv = h[..., :2] / safe[..., None]
    return uv, depth, valid


@dataclass
class PointPool:
    fixed: torch.Tensor  # SfM points, never modified
    pseudo: torch.Tensor = None  # ray-surface intersections of the current iteration

    def __post_init__(self):
        self.fixed = self.fixed.detach()
        if self.pseudo is None:
            self.pseudo = self.fixed.new_zeros((0, 3))

    def refresh(self, pseudo: torch.Tensor) -> "PointPool":
        self.pseudo = pseudo
        return self

    def points(self) -> torch.Tensor:
        return torch.cat([self.fixed, self.pseudo.to(self.fixed.dtype)], 0)

    def __len__(self):
        return len(self.fixed) + len(self.pseudo)


def refresh_pseudo_points(pool: PointPool, origins: torch.Tensor, dirs: torch.Tensor, t_star: torch.Tensor,
                          hit: torch.Tensor) -> PointPool:
    """Replace the pseudo points with this batch's ray-surface intersections."""
    pseudo = origins[hit] + t_star[hit][:, None] * dirs[hit]
    return pool.refresh(pseudo)


@torch.no_grad()
def visibility(sdf_fn, pm: ProjectionMap, points: torch.Tensor, steps: int = 24, tol: float = 0.02) -> torch.Tensor:
    """(K, V) mask: marching the SDF from each camera toward a point meets no surface before (1 - tol) of the way."""
    pts = points.detach()
    K, V = len(pts), len(pm)
    if K == 0:
        return torch.ones(K, V, dtype=torch.bool)
    c = pm.centers.to(pts.dtype)[None].expand(K, V, 3).reshape(-1, 3)
    vec = pts[:, None].expand(K, V, 3).reshape(-1, 3) - c
    dist = vec.norm(dim=-1)
    d = vec / dist[:, None]
    t = (-(c * d).sum(-1) - 1.0).clamp_min(0.0)
    t = torch.minimum(t, dist)
    occluded = torch.zeros(K * V, dtype=torch.bool)
    for _ in range(steps):
        f = sdf_fn(c + t[:, None] * d)
        occluded |= (f < 1e-3) & (t < dist * (1 - tol))
        t = torch.minimum(t + 0.9 * f.clamp_min(1e-3), dist)
    return ~occluded.reshape(K, V)


def local_loss(points: torch.Tensor, maps: Sequence[FeatureMap], pm: ProjectionMap,
               visible: Optional[torch.Tensor] = None, stats: Optional[dict] = None) -> torch.Tensor:
    """Mean L2 distance between each point's features in every other view and its reference view.

    The reference is the view with the smallest projected depth. Points seen
    (in frame, in front, unoccluded) by fewer than two views are dropped.
    """
    points = torch.as_tensor(points)
    K, V = len(points), len(maps)
    zero = points.sum() * 0.0
    if K == 0 or V < 2:
        return zero
    feats, depths, valid = [], [], []
    for v in range(V):
        uv, depth, ok = project(pm, v, points)
        f, inside = sample_feature(maps[v], uv)
        feats.append(f)
        depths.append(depth)
        valid.append(ok & inside)
    feats = torch.stack(feats, 1)  # (K, V, C)
    depths = torch.stack(depths, 1).detach()
    valid = torch.stack(valid, 1)
    if visible is not None:
        valid = valid & visible
    keep = valid.sum(1) >= 2
    if stats is not None:
        stats["points"] = int(keep.sum())
    if not keep.any():
        if stats is not None:
            stats["empty"] = stats.get("empty", 0) + 1
        log.warning("local loss: no pooled point is visible in two views")
        return zero
    feats, depths, valid = feats[keep], depths[keep], valid[keep]
    ref = torch.where(valid, depths, torch.full_like(depths, float("inf"))).argmin(1)
    ref_feat = feats[torch.arange(len(feats)), ref]
    diff = (feats - ref_feat[:, None]).norm(dim=-1)
    pair = valid.clone()
    pair[torch.arange(len(feats)), ref] = False
    return (diff * pair).sum() / pair.sum().clamp_min(1)


def nearest_pair(cams: Sequence[Camera]):
    best, pair = None, (0, 1)
    for i in range(len(cams)):
        for j in range(i + 1, len(cams)):
            ang = np.linalg.norm(Rotation.from_matrix(cams[i].R.T @ cams[j].R).as_rotvec())
            if best is None or ang < best - 1e-12:
                best, pair = ang, (i, j)
    return pair


def synthesize_unseen_pose(cams: Sequence[Camera], blend: float, pair=None) -> Camera:
    """Camera between the two input cameras with the closest rotations (or an explicit ``pair``)."""
    if len(cams) < 2:
        raise ValueError("need at least two cameras")
    i, j = pair if pair is not None else nearest_pair(cams)
    a, b = cams[i], cams[j]
    if blend == 0.0:
        return replace(a)
    rots = Rotation.from_matrix(np.stack([a.R, b.R]))
    R = Slerp([0.0, 1.0], rots)([blend]).as_matrix()[0]
    # re-orthonormalize against round-off
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    center = (1 - blend) * a.center + blend * b.center
    return replace(a, R=R, t=-R @ center)
