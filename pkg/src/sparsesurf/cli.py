"""Command-line entry point: synth, train-udf, train, extract, render, eval, ablate."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import autodiff
from .evaluate import (MetricsReport, chamfer_eval, config_hash, load_points, marching_cubes, read_ply, sample_mesh,
                       write_obj, write_ply)
from .fields import UdfConfig, UdfField, train_udf
from .renderer import RenderConfig, render_image
from .scene import (RigSpec, Shape, SyntheticScene, generate_synthetic_scene, load_scene, normalize_scene,
                    read_kv, read_xyz, save_scene, scene_normalization, scene_settings, write_image)
from .trainer import TrainConfig, Trainer, load_model

log = logging.getLogger("sparsesurf")

# flags that map onto TrainConfig fields
TRAIN_FLAGS = {"iterations": "iterations", "rays_per_batch": "rays_per_batch", "lambda1": "lambda1",
               "lambda2": "lambda2", "lambda3": "lambda3", "lambda4": "lambda4", "epsilon": "epsilon",
               "seed": "seed"}


def _views(text: Optional[str]) -> Optional[List[int]]:
    if text is None or text == "":
        return None
    return [int(v) for v in str(text).replace(",", " ").split()]


def _settings(args) -> Dict[str, str]:
    """Config file values overridden by any flag given on the command line."""
    values = dict(read_kv(args.config)) if getattr(args, "config", None) else {}
    for key, val in vars(args).items():
        if key in ("config", "command", "func") or val is None:
            continue
        if isinstance(val, bool):
            if val:
                values[key] = "true"
            continue
        values[key] = str(val)
    return values


def _train_config(values: Dict[str, str]) -> TrainConfig:
    cfg = TrainConfig.preset(values.get("preset", "desk"))
    known = {f for f in TrainConfig.__dataclass_fields__}
    overrides = {k.replace("-", "_"): v for k, v in values.items() if k.replace("-", "_") in known}
    cfg.update(overrides)
    if values.get("no_global") == "true":
        cfg.use_global = False
    if values.get("no_local") == "true":
        cfg.use_local = False
    return cfg


def _out(values, default: str) -> Path:
    out = Path(values.get("out", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_normalized(values):
    if "scene" not in values:
        raise SystemExit("error: --scene is required")
    bundle = load_scene(values["scene"], _views(values.get("views")), values.get("points"))
    return normalize_scene(bundle, **scene_normalization(scene_settings(values["scene"])))


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    v = _settings(args)
    shape = Shape(v.get("shape", "sphere"))
    size = int(v.get("image_size", 80))
    rig = RigSpec(v.get("rig", "little-overlap"), width=size, height=size, focal=90.0 * size / 80)
    spec = SyntheticScene(shape=shape, rig=rig, n_points=int(v.get("points", 300)))
    seed = int(v.get("seed", 0))
    bundle, gt = generate_synthetic_scene(spec, seed)
    out = _out(v, "scene")
    save_scene(out, bundle, gt, {"shape": shape.kind, "radius": gt.radius, "rig": rig.arrangement, "seed": seed},
               seed=seed + 1)
    print(f"scene={out}\nimages={len(bundle.images)}\npoints={len(bundle.points)}\nradius={gt.radius}")
    return 0


def cmd_train_udf(args) -> int:
    v = _settings(args)
    scene = _load_normalized(v)
    cfg = UdfConfig(steps=int(v.get("udf_steps", UdfConfig.steps)), seed=int(v.get("seed", 0)))
    start = time.perf_counter()
    res = train_udf(scene.points, cfg)
    out = _out(v, "run")
    autodiff.save_arrays(out / "udf.npz", autodiff.module_arrays(res.udf, "udf"))
    print(f"udf={out / 'udf.npz'}\nfinal_loss={res.losses[-1]}\nskipped={res.skipped}\n"
          f"runtime={time.perf_counter() - start:.3f}")
    return 0


def _load_udf(path) -> UdfField:
    udf = UdfField(UdfConfig().hidden)
    autodiff.load_module_arrays(udf, autodiff.load_arrays(path), "udf")
    return udf.requires_grad_(False)


def _train(v, out: Path) -> Trainer:
    scene = _load_normalized(v)
    cfg = _train_config(v)
    udf = _load_udf(v["udf"]) if v.get("udf") else None
    trainer = Trainer(scene, cfg, udf, log_path=out / "train.log")
    trainer.run(checkpoint_dir=out)
    trainer.save_checkpoint(out / "final.npz")
    return trainer


def cmd_train(args) -> int:
    v = _settings(args)
    out = _out(v, "run")
    start = time.perf_counter()
    trainer = _train(v, out)
    last = trainer.state.history[-1] if trainer.state.history else {}
    print(f"checkpoint={out / 'final.npz'}\niterations={trainer.state.iteration}")
    for k, val in last.items():
        print(f"{k}={val}")
    print(f"runtime={time.perf_counter() - start:.3f}")
    return 0


def _extract(checkpoint, resolution: int, out: Path, stem: str = "mesh"):
    model = load_model(checkpoint)
    mesh = marching_cubes(model.sdf, resolution).transformed(model.transform.invert)
    write_ply(out / f"{stem}.ply", mesh)
    write_obj(out / f"{stem}.obj", mesh)
    return mesh


def cmd_extract(args) -> int:
    v = _settings(args)
    out = _out(v, "run")
    mesh = _extract(v["checkpoint"], int(v.get("resolution", 128)), out)
    print(f"mesh={out / 'mesh.ply'}\nvertices={len(mesh.vertices)}\nfaces={len(mesh.faces)}")
    return 0 if len(mesh.faces) else 1


def cmd_render(args) -> int:
    v = _settings(args)
    model = load_model(v["checkpoint"])
    out = _out(v, "run")
    views = _views(v.get("views")) or list(range(len(model.cameras)))
    stride = int(v.get("stride", 1))
    for i in views:
        cam = model.cameras[i]
        img = render_image(model.sdf, model.color, model.sharp, cam, stride=stride)
        write_image(out / f"render_{i:03d}.ppm", img)
        if v.get("normals") == "true":
            nrm = render_image(model.sdf, model.color, model.sharp, cam, stride=stride, normals=True)
            write_image(out / f"normal_{i:03d}.ppm", nrm)
        print(f"render={out / f'render_{i:03d}.ppm'}")
    return 0


def _scene_radius(gt: np.ndarray, v) -> float:
    if v.get("radius"):
        return float(v["radius"])
    return float(np.linalg.norm(gt - gt.mean(0), axis=1).max())


def _evaluate(pred_path, gt_path, v, config=None):
    pts = load_points(pred_path)
    gt = read_xyz(gt_path) if Path(gt_path).suffix.lower() != ".ply" else load_points(gt_path)
    if Path(pred_path).suffix.lower() == ".ply":
        mesh = read_ply(pred_path)
        if len(mesh.faces):
            pts = sample_mesh(mesh, int(v.get("samples", 20000)), int(v.get("seed", 0)))
    thr = float(v["threshold"]) if v.get("threshold") else 0.1 * _scene_radius(gt, v)
    if len(pts) == 0:
        # nothing reconstructed: every capped distance saturates
        log.warning("%s is empty; reporting the distance cap", pred_path)
        return MetricsReport(thr, thr, thr, 0, len(gt), thr, 0.0, config_hash(config or {}))
    return chamfer_eval(pts, gt, thr, config)


def cmd_eval(args) -> int:
    v = _settings(args)
    rep = _evaluate(v["pred"], v["gt"], v, {k: v[k] for k in sorted(v) if k not in ("out",)})
    print(rep.to_kv())
    return 0


VARIANTS = {"full": {}, "no-local": {"no_local": "true"}, "no-global": {"no_global": "true"},
            "no-global-no-local": {"no_global": "true", "no_local": "true"}}


def cmd_ablate(args) -> int:
    v = _settings(args)
    out = _out(v, "ablate")
    seeds = _views(v.get("seeds", "0")) or [0]
    gt_path = Path(v["scene"]) / "gt_points.xyz"
    radius = None
    meta = Path(v["scene"]) / "scene.cfg"
    if "radius" not in v and meta.exists():
        radius = read_kv(meta).get("radius")
    if radius is not None:
        v["radius"] = radius
    means = {}
    for name, extra in VARIANTS.items():
        scores = []
        for seed in seeds:
            run = out / f"{name}_seed{seed}"
            run.mkdir(parents=True, exist_ok=True)
            vv = {**v, **extra, "seed": str(seed)}
            _train(vv, run)
            _extract(run / "final.npz", int(v.get("resolution", 128)), run)
            rep = _evaluate(run / "mesh.ply", gt_path, vv, {"variant": name, "seed": seed})
            scores.append(rep.mean)
            print(f"variant={name} seed={seed}")
            print(rep.to_kv())
        means[name] = float(np.mean(scores))
    for name, m in means.items():
        print(f"summary variant={name} mean={m}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsesurf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value file; flags override its entries")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)

    def training(sp):
        sp.add_argument("--scene", help="scene directory (images/ + sparse/)")
        sp.add_argument("--views", help="comma list of view indices to use")
        sp.add_argument("--points", help="XYZ file replacing the SfM points")
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--rays-per-batch", dest="rays_per_batch", type=int)
        for k in range(1, 5):
            sp.add_argument(f"--lambda{k}", type=float)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--no-global", dest="no_global", action="store_true", default=None)
        sp.add_argument("--no-local", dest="no_local", action="store_true", default=None)
        sp.add_argument("--udf", help="pretrained UDF checkpoint (train-udf output)")
        sp.add_argument("--udf-steps", dest="udf_steps", type=int)
        sp.add_argument("--preset", choices=["desk", "paper-scale"])

    s = sub.add_parser("synth", help="generate a synthetic scene with analytic ground truth")
    common(s)
    s.add_argument("--shape", choices=["sphere", "box", "torus"])
    s.add_argument("--rig", choices=["little-overlap", "large-overlap"])
    s.add_argument("--image-size", dest="image_size", type=int)
    s.add_argument("--points", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-udf", help="fit the unsigned distance prior to the scene points")
    common(s)
    s.add_argument("--scene")
    s.add_argument("--views")
    s.add_argument("--points")
    s.add_argument("--udf-steps", dest="udf_steps", type=int)
    s.set_defaults(func=cmd_train_udf)

    s = sub.add_parser("train", help="joint SDF / color optimization")
    common(s)
    training(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="marching-cubes mesh from a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--resolution", type=int)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("render", help="render training views from a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--views")
    s.add_argument("--stride", type=int)
    s.add_argument("--normals", action="store_true", default=None)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="capped Chamfer distance of a mesh or point set against ground truth")
    common(s)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--radius", type=float, help="scene radius; the default cap is 10%% of it")
    s.add_argument("--samples", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate the four loss-switch variants")
    common(s)
    training(s)
    s.add_argument("--seeds", help="comma list of seeds")
    s.add_argument("--resolution", type=int)
    s.add_argument("--radius", type=float)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
