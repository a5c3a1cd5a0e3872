"""Pinhole cameras, ray sampling and SDF-based volume rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class NonFiniteFieldError(FloatingPointError):
    pass


@dataclass
class Camera:
    """Pinhole camera. ``R``/``t`` map world to camera: x_cam = R @ x + t."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(self.R) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def projection(self) -> np.ndarray:
        return self.K @ np.concatenate([self.R, self.t[:, None]], axis=1)

    def project(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """World points (..., 3) to pixel coords (..., 2) and depth (...)."""
        Xc = np.asarray(X) @ self.R.T + self.t
        z = Xc[..., 2]
        uv = np.stack([self.fx * Xc[..., 0] / z + self.cx, self.fy * Xc[..., 1] / z + self.cy], axis=-1)
        return uv, z


def camera_to_array(cam: Camera) -> np.ndarray:
    """Flat 18-vector: fx fy cx cy width height R(row-major) t."""
    return np.concatenate([[cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height], cam.R.ravel(), cam.t])


def camera_from_array(a) -> Camera:
    a = np.asarray(a, dtype=np.float64)
    return Camera(a[0], a[1], a[2], a[3], a[6:15].reshape(3, 3), a[15:18], int(a[4]), int(a[5]))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def near_far(origins: torch.Tensor, dirs: torch.Tensor, min_near: float = 1e-3):
    """Bounds covering the unit ball along each ray (mid-point +- 1)."""
    mid = -(origins * dirs).sum(-1)
    near = (mid - 1.0).clamp_min(min_near)
    far = torch.maximum(mid + 1.0, near + 1e-2)
    return near, far


def pixel_directions(cam: Camera, uv: np.ndarray) -> np.ndarray:
    """World-frame unit directions through continuous pixel coordinates."""
    uv = np.asarray(uv, dtype=np.float64)
    d_cam = np.stack([(uv[..., 0] - cam.cx) / cam.fx, (uv[..., 1] - cam.cy) / cam.fy, np.ones(uv.shape[:-1])], -1)
    d = d_cam @ cam.R  # R^T d_cam, row-vector form
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(cam: Camera, pixel) -> Ray:
    d = pixel_directions(cam, np.asarray(pixel, dtype=np.float64))
    o = cam.center
    n, f = near_far(torch.as_tensor(o[None]), torch.as_tensor(d[None]))
    return Ray(o, d, float(n[0]), float(f[0]))


def generate_rays(cam: Camera, uv: np.ndarray, dtype=torch.float32):
    d = pixel_directions(cam, uv).reshape(-1, 3)
    o = np.broadcast_to(cam.center, d.shape).copy()
    o_t, d_t = torch.as_tensor(o, dtype=dtype), torch.as_tensor(d, dtype=dtype)
    near, far = near_far(o_t, d_t)
    return o_t, d_t, near, far


def phi_s(x, s):
    """Logistic CDF with sharpness s."""
    return torch.sigmoid(torch.as_tensor(x) * s)


def alpha_from_sdf(f: torch.Tensor, s) -> torch.Tensor:
    """Opacity of each interval [t_i, t_{i+1}] from consecutive SDF samples along the last axis."""
    prev = torch.sigmoid(f[..., :-1] * s)
    nxt = torch.sigmoid(f[..., 1:] * s)
    return ((prev - nxt) / prev.clamp_min(1e-12)).clamp(0.0, 1.0)


def alpha(f_i, f_next, s):
    f = torch.stack([torch.as_tensor(f_i, dtype=torch.float64), torch.as_tensor(f_next, dtype=torch.float64)], -1)
    return alpha_from_sdf(f, s)[..., 0]


def composite(alphas: torch.Tensor, colors: torch.Tensor):
    """Front-to-back compositing along axis -1 of ``alphas``.

    Returns (color, weights, transmittance) with T_1 = 1 and
    T_{i+1} = T_i (1 - alpha_i).
    """
    alphas = torch.as_tensor(alphas)
    colors = torch.as_tensor(colors, dtype=alphas.dtype)
    ones = torch.ones_like(alphas[..., :1])
    T = torch.cumprod(torch.cat([ones, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)
    w = T * alphas
    C = (w[..., None] * colors).sum(dim=-2)
    return C, w, T


def sample_pdf(bins: torch.Tensor, weights: torch.Tensor, n: int, gen: Optional[torch.Generator] = None,
               deterministic: bool = False) -> torch.Tensor:
    """Inverse-CDF sampling of ``n`` values per row from piecewise-constant weights over ``bins``."""
    weights = weights + 1e-5
    pdf = weights / weights.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, -1)], -1)
    if deterministic:
        u = torch.linspace(0.5 / n, 1 - 0.5 / n, n, dtype=bins.dtype).expand(*cdf.shape[:-1], n).contiguous()
    else:
        u = torch.rand(*cdf.shape[:-1], n, generator=gen, dtype=bins.dtype)
    idx = torch.searchsorted(cdf, u, right=True)
    below = (idx - 1).clamp(0, cdf.shape[-1] - 1)
    above = idx.clamp(0, cdf.shape[-1] - 1)
    c0, c1 = cdf.gather(-1, below), cdf.gather(-1, above)
    b0, b1 = bins.gather(-1, below), bins.gather(-1, above)
    denom = torch.where(c1 - c0 < 1e-5, torch.ones_like(c0), c1 - c0)
    return b0 + (u - c0) / denom * (b1 - b0)


def stratified(near: torch.Tensor, far: torch.Tensor, n: int, gen=None, deterministic: bool = False):
    edges = torch.linspace(0.0, 1.0, n + 1, dtype=near.dtype)
    lo, hi = edges[:-1], edges[1:]
    if deterministic:
        u = torch.full((near.shape[0], n), 0.5, dtype=near.dtype)
    else:
        u = torch.rand(near.shape[0], n, generator=gen, dtype=near.dtype)
    frac = lo + u * (hi - lo)
    return near[:, None] + frac * (far - near)[:, None]


@torch.no_grad()
def sample_along_rays(sdf_fn, origins, dirs, near, far, n_coarse: int = 64, n_importance: int = 32,
                      rounds: int = 2, gen=None, deterministic: bool = False, base_s: float = 64.0):
    """Stratified samples plus importance rounds concentrated near the first zero crossing.

    ``sdf_fn`` maps (K, 3) points to (K,) SDF values. Returns sorted t of shape
    (R, n_coarse + n_importance).
    """
    if n_coarse < 2:
        raise ValueError("need at least two coarse samples")
    t = stratified(near, far, n_coarse, gen, deterministic)
    if n_importance == 0:
        return t
    R = t.shape[0]
    f = sdf_fn((origins[:, None] + t[..., None] * dirs[:, None]).reshape(-1, 3)).reshape(R, -1)
    per_round = [n_importance // rounds + (1 if i < n_importance % rounds else 0) for i in range(rounds)]
    for k, n_new in enumerate(per_round):
        if n_new == 0:
            continue
        s = base_s * 2 ** k
        a = alpha_from_sdf(f, s)
        _, w, _ = composite(a, torch.zeros(*a.shape, 1, dtype=a.dtype))
        t_new = sample_pdf(t, w, n_new, gen, deterministic)
        f_new = sdf_fn((origins[:, None] + t_new[..., None] * dirs[:, None]).reshape(-1, 3)).reshape(R, -1)
        t, order = torch.sort(torch.cat([t, t_new], -1), -1)
        f = torch.cat([f, f_new], -1).gather(-1, order)
    return t


def sample_ray(ray: Ray, n_coarse: int, n_importance: int, seed=0, sdf_fn=None, deterministic=False) -> np.ndarray:
    """Sample parameters for a single ray; ``sdf_fn`` is required when n_importance > 0."""
    gen = torch.Generator().manual_seed(seed) if isinstance(seed, int) else seed
    o = torch.as_tensor(ray.origin, dtype=torch.float64)[None]
    d = torch.as_tensor(ray.direction, dtype=torch.float64)[None]
    near = torch.tensor([ray.near], dtype=torch.float64)
    far = torch.tensor([ray.far], dtype=torch.float64)
    if n_importance and sdf_fn is None:
        raise ValueError("importance sampling needs an SDF")
    return sample_along_rays(sdf_fn, o, d, near, far, n_coarse, n_importance, gen=gen,
                             deterministic=deterministic)[0].numpy()


class Sharpness(nn.Module):
    """Trainable inverse standard deviation s = exp(10 v)."""

    def __init__(self, init_s: float = 20.0):
        super().__init__()
        self.variance = nn.Parameter(torch.tensor(math.log(init_s) / 10.0))

    def forward(self) -> torch.Tensor:
        return torch.exp(10.0 * self.variance).clamp(1e-6, 1e6)


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_importance: int = 32
    rounds: int = 2
    deterministic: bool = False
    chunk: int = 2048


@dataclass
class RenderBatch:
    origins: torch.Tensor
    dirs: torch.Tensor
    t: torch.Tensor  # (R, N)
    points: torch.Tensor  # (R, N, 3)
    sdf: torch.Tensor  # (R, N)
    alpha: torch.Tensor  # (R, N-1)
    transmittance: torch.Tensor
    weights: torch.Tensor
    colors: torch.Tensor  # (R, N-1, 3)
    color: torch.Tensor  # (R, 3)
    s: torch.Tensor


def render_rays(sdf_field, color_field, s, origins, dirs, near, far, cfg: RenderConfig = RenderConfig(),
                gen=None, t: Optional[torch.Tensor] = None) -> RenderBatch:
    """Differentiable render of a ray batch; sample placement itself is not differentiated.

    Pass ``t`` to reuse fixed sample parameters instead of sampling.
    """
    s = s() if callable(s) else torch.as_tensor(s)
    if t is None:
        t = sample_along_rays(sdf_field.sdf, origins, dirs, near, far, cfg.n_coarse, cfg.n_importance,
                              cfg.rounds, gen, cfg.deterministic)
    pts = origins[:, None] + t[..., None] * dirs[:, None]
    R, N = t.shape
    f, feat = sdf_field(pts.reshape(-1, 3))
    f = f.reshape(R, N)
    if not torch.isfinite(f).all():
        raise NonFiniteFieldError("SDF produced non-finite values during rendering")
    a = alpha_from_sdf(f, s)
    x_c = pts[:, :-1].reshape(-1, 3)
    v = dirs[:, None].expand(R, N - 1, 3).reshape(-1, 3)
    c = color_field(x_c, v, feat.reshape(R, N, -1)[:, :-1].reshape(R * (N - 1), -1)).reshape(R, N - 1, 3)
    C, w, T = composite(a, c)
    return RenderBatch(origins, dirs, t, pts, f, a, T, w, c, C, s)


def render_pixel(sdf_field, color_field, s, cam: Camera, pixel, cfg: RenderConfig = RenderConfig(), gen=None):
    dtype = next(sdf_field.parameters()).dtype
    o, d, n, f = generate_rays(cam, np.asarray(pixel, dtype=np.float64)[None], dtype=dtype)
    batch = render_rays(sdf_field, color_field, s, o, d, n, f, cfg, gen)
    return batch.color[0], batch


def ray_surface_intersection(t: torch.Tensor, f: torch.Tensor):
    """First sign change of f along the last axis, refined by linear interpolation.

    Returns (t_star, hit_mask); t_star is differentiable in ``f``.
    """
    t = torch.as_tensor(t)
    f = torch.as_tensor(f)
    crossing = f[..., :-1] * f[..., 1:] < 0
    hit = crossing.any(-1)
    first = torch.argmax(crossing.to(torch.int8), dim=-1, keepdim=True)
    f0, f1 = f.gather(-1, first)[..., 0], f.gather(-1, first + 1)[..., 0]
    t0, t1 = t.gather(-1, first)[..., 0], t.gather(-1, first + 1)[..., 0]
    denom = torch.where(hit, f0 - f1, torch.ones_like(f0))
    t_star = (f0 * t1 - f1 * t0) / denom
    return torch.where(hit, t_star, torch.zeros_like(t_star)), hit


def ray_surface_point(ray: Ray, t_samples, f_values):
    """Single-ray convenience: (t*, p') or None."""
    t_star, hit = ray_surface_intersection(torch.as_tensor(np.asarray(t_samples, dtype=np.float64)),
                                           torch.as_tensor(np.asarray(f_values, dtype=np.float64)))
    if not bool(hit):
        return None
    ts = float(t_star)
    return ts, ray.origin + ts * ray.direction


def upsample_bilinear(coarse: np.ndarray, stride: int, height: int, width: int) -> np.ndarray:
    """Interpolate values known at every stride-th pixel to the full grid (edges clamp)."""
    from scipy.ndimage import map_coordinates

    rows = np.clip(np.arange(height) / stride, 0, coarse.shape[0] - 1)
    cols = np.clip(np.arange(width) / stride, 0, coarse.shape[1] - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    chans = [map_coordinates(coarse[..., k], [rr, cc], order=1, mode="nearest") for k in range(coarse.shape[-1])]
    return np.stack(chans, -1)


def render_image(sdf_field, color_field, s, cam: Camera, stride: int = 1, cfg: Optional[RenderConfig] = None,
                 normals: bool = False) -> np.ndarray:
    """Render every stride-th pixel, then bilinearly upsample to (H, W, 3).

    With ``normals`` the composited world-space normal is colorized as (n + 1) / 2.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    cfg = cfg or RenderConfig(deterministic=True)
    cols = np.arange(0, cam.width, stride)
    rows = np.arange(0, cam.height, stride)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    uv = np.stack([uu, vv], -1).reshape(-1, 2).astype(np.float64)
    dtype = next(sdf_field.parameters()).dtype
    o, d, n, f = generate_rays(cam, uv, dtype=dtype)
    out = []
    for i in range(0, len(o), cfg.chunk):
        sl = slice(i, i + cfg.chunk)
        if normals:
            batch = _render_normals(sdf_field, s, o[sl], d[sl], n[sl], f[sl], cfg)
        else:
            with torch.no_grad():
                batch = render_rays(sdf_field, color_field, s, o[sl], d[sl], n[sl], f[sl], cfg).color
        out.append(batch.detach())
    coarse = torch.cat(out).reshape(len(rows), len(cols), 3).double().numpy()
    if stride == 1:
        return coarse
    return upsample_bilinear(coarse, stride, cam.height, cam.width)


def _render_normals(sdf_field, s, o, d, n, f, cfg):
    s_val = s() if callable(s) else torch.as_tensor(s)
    t = sample_along_rays(sdf_field.sdf, o, d, n, f, cfg.n_coarse, cfg.n_importance, cfg.rounds,
                          deterministic=True)
    pts = (o[:, None] + t[..., None] * d[:, None]).reshape(-1, 3)
    val, grad = sdf_field.sdf_and_gradient(pts, create_graph=False)
    R, N = t.shape
    a = alpha_from_sdf(val.detach().reshape(R, N), s_val.detach())
    nrm = F.normalize(grad.detach().reshape(R, N, 3)[:, :-1], dim=-1)
    C, _, _ = composite(a, (nrm + 1) * 0.5)
    return C
