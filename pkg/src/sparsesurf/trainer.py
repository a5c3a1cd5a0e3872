"""Two-stage optimization: UDF prior, then joint SDF/color training."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import autodiff
from .autodiff import Optimizer, Schedule
from .features import (FeatureMap, PointPool, ProjectionMap, build_feature_map, local_loss,
                       refresh_pseudo_points, synthesize_unseen_pose, visibility)
from .fields import ColorField, DivergenceError, SdfField, UdfConfig, UdfField, train_udf
from .losses import (LossWeights, as_floats, color_loss, eikonal_loss, global_loss_values, reg_loss,
                     total_loss)
from .renderer import (Camera, RenderConfig, Sharpness, camera_from_array, camera_to_array, generate_rays,
                       ray_surface_intersection, render_image, render_rays)
from .scene import Normalization, SceneBundle

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 20000
    rays_per_batch: int = 128
    lr: float = 5e-4
    warmup: int = 500
    lr_final_fraction: float = 0.05
    n_coarse: int = 64
    n_importance: int = 32
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.1
    lambda4: float = 0.1
    epsilon: float = 0.02
    use_global: bool = True
    use_local: bool = True
    novel_view: bool = True
    novel_every: int = 500
    novel_stride: int = 4
    eikonal_points: int = 512
    eikonal_jitter: float = 0.02
    visibility_every: int = 100
    sdf_hidden: Tuple[int, ...] = (64, 64, 64, 64)
    sdf_octaves: int = 4
    feature_dim: int = 32
    color_hidden: Tuple[int, ...] = (64, 64, 64)
    color_octaves: int = 4
    init_s: float = 20.0
    init_radius: float = 0.5
    log_every: int = 100
    checkpoint_every: int = 0
    divergence_window: int = 1000
    udf_steps: int = 10000

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1 if self.use_global else 0.0, self.lambda2 if self.use_local else 0.0,
                           self.lambda3, self.lambda4, self.epsilon)

    @classmethod
    def preset(cls, name: str) -> "TrainConfig":
        if name in ("desk", "default"):
            return cls()
        if name == "paper-scale":
            return cls(rays_per_batch=512, iterations=300000)
        raise KeyError(f"unknown preset {name}")

    def update(self, values: Dict[str, object]) -> "TrainConfig":
        """Apply string or typed overrides, coercing to each field's type."""
        known = {f.name: f for f in dc_fields(self)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise KeyError(f"unknown config key {key}")
            current = getattr(self, key)
            setattr(self, key, _coerce(raw, current))
        return self


def _coerce(raw, current):
    if not isinstance(raw, str):
        return raw
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


@dataclass
class TrainState:
    iteration: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    pseudo_counts: List[int] = field(default_factory=list)
    initial_loss: Optional[float] = None
    above_count: int = 0


class Trainer:
    def __init__(self, scene: SceneBundle, config: Optional[TrainConfig] = None, udf: Optional[UdfField] = None,
                 log_path=None):
        self.cfg = cfg = config or TrainConfig()
        self.scene = scene
        torch.manual_seed(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.sdf = SdfField(cfg.sdf_hidden, cfg.sdf_octaves, cfg.feature_dim, cfg.init_radius)
        self.color = ColorField(cfg.feature_dim, cfg.color_hidden, cfg.color_octaves)
        self.sharp = Sharpness(cfg.init_s)
        if udf is None and cfg.use_global:
            udf = train_udf(scene.points, UdfConfig(steps=cfg.udf_steps, seed=cfg.seed)).udf
        self.udf = udf
        if self.udf is not None:
            self.udf.requires_grad_(False)
        sched = Schedule(cfg.lr, cfg.warmup, max(cfg.iterations, 1), cfg.lr_final_fraction)
        self.opt = Optimizer({"sdf": list(self.sdf.parameters()), "color": list(self.color.parameters()),
                              "s": list(self.sharp.parameters())}, sched)
        self.render_cfg = RenderConfig(cfg.n_coarse, cfg.n_importance)
        self.state = TrainState()
        self.log_path = Path(log_path) if log_path else None

        self.P = torch.as_tensor(scene.points, dtype=torch.float32)
        self.pool = PointPool(self.P)
        self.input_maps = [build_feature_map(im) for im in scene.images]
        self.pm_inputs = ProjectionMap.from_cameras(scene.cameras)
        self.novel: Optional[Tuple[Camera, FeatureMap]] = None
        self.fixed_vis: Optional[torch.Tensor] = None
        self.local_stats: Dict[str, int] = {}
        self._build_rays()

    def _build_rays(self):
        os_, ds, ns, fs, cs = [], [], [], [], []
        for cam, img in zip(self.scene.cameras, self.scene.images):
            vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
            uv = np.stack([uu, vv], -1).reshape(-1, 2).astype(np.float64)
            o, d, n, f = generate_rays(cam, uv)
            os_.append(o), ds.append(d), ns.append(n), fs.append(f)
            cs.append(torch.as_tensor(np.asarray(img).reshape(-1, 3), dtype=torch.float32))
        self.rays_o, self.rays_d = torch.cat(os_), torch.cat(ds)
        self.rays_near, self.rays_far = torch.cat(ns), torch.cat(fs)
        self.rays_rgb = torch.cat(cs)

    # -- per-iteration pieces ------------------------------------------------

    def _maps_and_projection(self):
        maps = list(self.input_maps)
        cams = list(self.scene.cameras)
        if self.novel is not None:
            cams.append(self.novel[0])
            maps.append(self.novel[1])
        return maps, ProjectionMap.from_cameras(cams)

    def _refresh_novel(self):
        it = self.state.iteration
        blend = 0.25 + 0.5 * torch.rand((), generator=self.gen).item()
        cam = synthesize_unseen_pose(self.scene.cameras, blend)
        img = render_image(self.sdf, self.color, self.sharp, cam, stride=self.cfg.novel_stride)
        self.novel = (cam, build_feature_map(img, source="rendered-novel-view"))
        log.debug("novel view refreshed at iteration %d (blend %.3f)", it, blend)

    def _eikonal_samples(self, batch_points: torch.Tensor) -> torch.Tensor:
        n = self.cfg.eikonal_points
        n_uniform = n // 2
        v = torch.randn(n_uniform, 3, generator=self.gen)
        r = torch.rand(n_uniform, 1, generator=self.gen) ** (1.0 / 3.0)
        uniform = v / v.norm(dim=-1, keepdim=True) * r
        flat = batch_points.reshape(-1, 3).detach()
        idx = torch.randint(0, len(flat), (n - n_uniform,), generator=self.gen)
        near = flat[idx] + self.cfg.eikonal_jitter * torch.randn(n - n_uniform, 3, generator=self.gen)
        return torch.cat([uniform, near])

    def compute_losses(self):
        cfg = self.cfg
        it = self.state.iteration
        idx = torch.randint(0, len(self.rays_o), (cfg.rays_per_batch,), generator=self.gen)
        o, d = self.rays_o[idx], self.rays_d[idx]
        batch = render_rays(self.sdf, self.color, self.sharp, o, d, self.rays_near[idx], self.rays_far[idx],
                            self.render_cfg, self.gen)
        parts = {"color": color_loss(batch.color, self.rays_rgb[idx])}

        if cfg.use_global and self.udf is not None:
            with torch.no_grad():
                u = self.udf(batch.points.reshape(-1, 3))
            parts["global"] = global_loss_values(batch.sdf.reshape(-1), u, cfg.epsilon)

        t_star, hit = ray_surface_intersection(batch.t, batch.sdf)
        refresh_pseudo_points(self.pool, o, d, t_star, hit)
        if cfg.use_local:
            if cfg.novel_view and (self.novel is None or it % cfg.novel_every == 0):
                self._refresh_novel()
            maps, pm = self._maps_and_projection()
            if self.fixed_vis is None or it % cfg.visibility_every == 0 or self.fixed_vis.shape[1] != len(pm):
                self.fixed_vis = visibility(self.sdf.sdf, pm, self.pool.fixed)
            vis = torch.cat([self.fixed_vis, visibility(self.sdf.sdf, pm, self.pool.pseudo)])
            parts["local"] = local_loss(self.pool.points(), maps, pm, vis, self.local_stats)

        parts["eikonal"] = eikonal_loss(self.sdf, self._eikonal_samples(batch.points))
        parts["reg"] = reg_loss(self.sdf, self.P)
        return parts, batch, int(hit.sum())

    def step(self) -> Dict[str, float]:
        parts, batch, n_pseudo = self.compute_losses()
        loss = total_loss(parts, self.cfg.weights)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        st = self.state
        values = as_floats(parts)
        values["total"] = float(loss.detach())
        values["s"] = float(self.sharp().detach())
        values["pseudo"] = n_pseudo
        st.history.append(values)
        st.pseudo_counts.append(n_pseudo)
        self._check_divergence(values["total"])
        st.iteration += 1
        if self.cfg.log_every and st.iteration % self.cfg.log_every == 0:
            self._log_line(values)
        return values

    def _check_divergence(self, value: float):
        st = self.state
        if st.initial_loss is None and len(st.history) >= 10:
            st.initial_loss = float(np.mean([h["total"] for h in st.history[:10]]))
        if st.initial_loss is None:
            return
        st.above_count = st.above_count + 1 if value > 10 * st.initial_loss else 0
        if st.above_count >= self.cfg.divergence_window:
            raise DivergenceError(f"loss above 10x its initial value ({st.initial_loss:.4g}) for "
                                  f"{st.above_count} iterations at iteration {st.iteration}; last {value:.4g}")

    def _log_line(self, values: Dict[str, float]):
        window = self.state.history[-self.cfg.log_every:]
        keys = ["color", "global", "local", "eikonal", "reg", "total"]
        items = [f"iter={self.state.iteration}"]
        for k in keys:
            if k in values:
                items.append(f"{k}={np.mean([h[k] for h in window]):.6g}")
        items.append(f"s={values['s']:.4g}")
        items.append(f"pseudo={values['pseudo']}")
        line = " ".join(items)
        log.info(line)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(line + "\n")

    def run(self, iterations: Optional[int] = None, checkpoint_dir=None, progress=None):
        n = self.cfg.iterations if iterations is None else iterations
        with autodiff.flush_denormals():
            for _ in range(n):
                self.step()
                if progress is not None:
                    progress(self)
                every = self.cfg.checkpoint_every
                if checkpoint_dir and every and self.state.iteration % every == 0:
                    self.save_checkpoint(Path(checkpoint_dir) / f"ckpt_{self.state.iteration:06d}.npz")
        return self.state

    # -- checkpoints -----------------------------------------------------------

    def checkpoint_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        arrays.update(autodiff.module_arrays(self.sdf, "sdf"))
        arrays.update(autodiff.module_arrays(self.color, "color"))
        arrays.update(autodiff.module_arrays(self.sharp, "sharp"))
        if self.udf is not None:
            arrays.update(autodiff.module_arrays(self.udf, "udf"))
        arrays.update(self.opt.state_arrays("opt"))
        arrays["state/iteration"] = np.array(self.state.iteration, dtype=np.int64)
        arrays["state/generator"] = self.gen.get_state().numpy()
        if self.state.initial_loss is not None:
            arrays["state/initial_loss"] = np.array(self.state.initial_loss)
        arrays["state/above_count"] = np.array(self.state.above_count, dtype=np.int64)
        if self.novel is not None:
            cam, fm = self.novel
            arrays["novel/map"] = fm.data.numpy()
            arrays["novel/camera"] = camera_to_array(cam)
        if self.fixed_vis is not None:
            arrays["state/fixed_visibility"] = self.fixed_vis.numpy()
        # enough to rebuild the fields and export in the input frame without the scene
        arrays["meta/config"] = np.array(json.dumps(asdict(self.cfg)))
        arrays["meta/center"] = np.asarray(self.scene.transform.center, dtype=np.float64)
        arrays["meta/scale"] = np.array(self.scene.transform.scale, dtype=np.float64)
        arrays["meta/cameras"] = np.stack([camera_to_array(c) for c in self.scene.cameras])
        return arrays

    def save_checkpoint(self, path):
        autodiff.save_arrays(path, self.checkpoint_arrays())

    def load_checkpoint(self, path):
        a = autodiff.load_arrays(path)
        autodiff.load_module_arrays(self.sdf, a, "sdf")
        autodiff.load_module_arrays(self.color, a, "color")
        autodiff.load_module_arrays(self.sharp, a, "sharp")
        if "udf/net.layers.0.weight" in a:
            if self.udf is None:
                self.udf = UdfField(UdfConfig().hidden)
            autodiff.load_module_arrays(self.udf, a, "udf")
            self.udf.requires_grad_(False)
        self.opt.load_state_arrays(a, "opt")
        self.state.iteration = int(a["state/iteration"])
        self.gen.set_state(torch.as_tensor(a["state/generator"]))
        self.state.initial_loss = float(a["state/initial_loss"]) if "state/initial_loss" in a else None
        self.state.above_count = int(a["state/above_count"])
        if "novel/map" in a:
            cam = camera_from_array(a["novel/camera"])
            self.novel = (cam, FeatureMap(torch.as_tensor(a["novel/map"]), "rendered-novel-view"))
        else:
            self.novel = None
        self.fixed_vis = torch.as_tensor(a["state/fixed_visibility"]) if "state/fixed_visibility" in a else None


def train(scene: SceneBundle, config: Optional[TrainConfig] = None, udf: Optional[UdfField] = None,
          log_path=None, checkpoint_dir=None) -> Trainer:
    """Run the joint optimization; returns the trainer holding fields and state."""
    trainer = Trainer(scene, config, udf, log_path)
    trainer.run(checkpoint_dir=checkpoint_dir)
    return trainer


@dataclass
class TrainedModel:
    """Fields restored from a checkpoint, with the frame they were trained in."""

    sdf: SdfField
    color: ColorField
    sharp: Sharpness
    config: TrainConfig
    transform: Normalization
    cameras: List[Camera]


def load_model(path) -> TrainedModel:
    a = autodiff.load_arrays(path)
    raw = json.loads(str(a["meta/config"]))
    cfg = TrainConfig()
    for k, v in raw.items():
        setattr(cfg, k, tuple(v) if isinstance(v, list) else v)
    sdf = SdfField(cfg.sdf_hidden, cfg.sdf_octaves, cfg.feature_dim, cfg.init_radius)
    color = ColorField(cfg.feature_dim, cfg.color_hidden, cfg.color_octaves)
    sharp = Sharpness(cfg.init_s)
    autodiff.load_module_arrays(sdf, a, "sdf")
    autodiff.load_module_arrays(color, a, "color")
    autodiff.load_module_arrays(sharp, a, "sharp")
    for m in (sdf, color, sharp):
        m.requires_grad_(False)
    tf = Normalization(a["meta/center"], float(a["meta/scale"]))
    cams = [camera_from_array(c) for c in a["meta/cameras"]]
    return TrainedModel(sdf, color, sharp, cfg, tf, cams)
