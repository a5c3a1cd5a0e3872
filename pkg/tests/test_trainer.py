import numpy as np
import pytest
import torch

from sparsesurf.fields import DivergenceError, UdfConfig, train_udf
from sparsesurf.scene import RigSpec, Shape, SyntheticScene, generate_synthetic_scene, normalize_scene
from sparsesurf.trainer import TrainConfig, Trainer, train


def small_config(**kw):
    base = dict(rays_per_batch=32, n_coarse=16, n_importance=8, eikonal_points=64, sdf_hidden=(32, 32),
                color_hidden=(32,), feature_dim=8, novel_every=5, novel_stride=4, visibility_every=3,
                log_every=5, warmup=5, iterations=50)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def scene():
    spec = SyntheticScene(shape=Shape("sphere"), rig=RigSpec(width=24, height=24, focal=27.0), n_points=120)
    bundle, _ = generate_synthetic_scene(spec, seed=0)
    return normalize_scene(bundle)


@pytest.fixture(scope="module")
def udf(scene):
    return train_udf(scene.points, UdfConfig(steps=50, log_every=0)).udf


def params_of(trainer):
    return [p.detach().clone() for p in
            list(trainer.sdf.parameters()) + list(trainer.color.parameters()) + list(trainer.sharp.parameters())]


def test_config_update_and_presets():
    cfg = TrainConfig().update({"lambda1": "0.3", "use-global": "false", "sdf_hidden": "32,32", "iterations": 7})
    assert cfg.lambda1 == 0.3 and cfg.use_global is False and cfg.sdf_hidden == (32, 32) and cfg.iterations == 7
    assert cfg.weights.global_ == 0.0
    paper = TrainConfig.preset("paper-scale")
    assert paper.rays_per_batch == 512 and paper.iterations == 300000
    assert TrainConfig.preset("desk").rays_per_batch == 128
    with pytest.raises(KeyError):
        TrainConfig().update({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig().update({"use_local": "maybe"})


def test_zero_iterations_is_noop(scene, udf):
    tr = Trainer(scene, small_config(), udf=udf)
    before = params_of(tr)
    tr.run(0)
    assert tr.state.iteration == 0
    for a, b in zip(before, params_of(tr)):
        assert torch.equal(a, b)


def test_loss_trace_deterministic(scene, udf):
    cfg = small_config()
    a = Trainer(scene, cfg, udf=udf)
    a.run(100)
    b = Trainer(scene, cfg, udf=udf)
    b.run(100)
    assert [h["total"] for h in a.state.history] == [h["total"] for h in b.state.history]


def test_checkpoint_round_trip(scene, udf, tmp_path):
    cfg = small_config()
    tr = Trainer(scene, cfg, udf=udf)
    tr.run(12)
    path = tmp_path / "ckpt.npz"
    tr.save_checkpoint(path)
    tr.run(10)
    expected = [h["total"] for h in tr.state.history[-10:]]
    fresh = Trainer(scene, cfg, udf=udf)
    fresh.load_checkpoint(path)
    assert fresh.state.iteration == 12
    fresh.run(10)
    assert [h["total"] for h in fresh.state.history] == expected


def test_checkpoint_restores_udf(scene, udf, tmp_path):
    tr = Trainer(scene, small_config(), udf=udf)
    tr.save_checkpoint(tmp_path / "c.npz")
    other = Trainer(scene, small_config(use_global=False))
    assert other.udf is None
    other.load_checkpoint(tmp_path / "c.npz")
    x = torch.rand(5, 3)
    assert torch.equal(other.udf(x), udf(x))


def test_periodic_checkpoints_and_log(scene, udf, tmp_path):
    log = tmp_path / "train.log"
    cfg = small_config(iterations=10, checkpoint_every=5)
    train(scene, cfg, udf=udf, log_path=log, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.npz")) == ["ckpt_000005.npz", "ckpt_000010.npz"]
    lines = log.read_text().splitlines()
    assert len(lines) == 2
    kv = dict(item.split("=") for item in lines[0].split())
    assert set(kv) == {"iter", "color", "global", "local", "eikonal", "reg", "total", "s", "pseudo"}
    assert kv["iter"] == "5" and all(np.isfinite(float(v)) for v in kv.values())


def test_pseudo_points_and_parts(scene, udf):
    tr = Trainer(scene, small_config(), udf=udf)
    parts, batch, n_pseudo = tr.compute_losses()
    assert set(parts) == {"color", "global", "local", "eikonal", "reg"}
    assert len(tr.pool) == len(tr.P) + n_pseudo
    assert tr.novel is not None and tr.novel[1].source == "rendered-novel-view"


def test_ablation_switches(scene):
    tr = Trainer(scene, small_config(use_global=False, use_local=False))
    assert tr.udf is None
    parts, _, _ = tr.compute_losses()
    assert set(parts) == {"color", "eikonal", "reg"}


def test_divergence_detection(scene, udf):
    tr = Trainer(scene, small_config(divergence_window=3), udf=udf)
    tr.state.history = [{"total": 1.0}] * 10
    tr._check_divergence(1.0)
    for _ in range(2):
        tr._check_divergence(50.0)
    with pytest.raises(DivergenceError, match="10x"):
        tr._check_divergence(50.0)
