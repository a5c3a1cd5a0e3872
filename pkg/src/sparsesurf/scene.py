"""Scene ingestion: COLMAP text models, images, normalization, synthetic scenes."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .fields import truncated_gaussian
from .renderer import Camera, look_at, pixel_directions

log = logging.getLogger(__name__)


class SfmParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = str(path)
        self.lineno = lineno


# COLMAP text model -----------------------------------------------------------

CAMERA_MODELS = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4}


@dataclass
class SfmCamera:
    id: int
    model: str
    width: int
    height: int
    params: Tuple[float, ...]

    @property
    def intrinsics(self) -> Tuple[float, float, float, float]:
        if self.model == "SIMPLE_PINHOLE":
            f, cx, cy = self.params
            return f, f, cx, cy
        return tuple(self.params)


@dataclass
class SfmImage:
    id: int
    qvec: Tuple[float, float, float, float]  # w, x, y, z
    tvec: Tuple[float, float, float]
    camera_id: int
    name: str
    points2d: str = ""  # raw second line, kept verbatim

    @property
    def rotation(self) -> np.ndarray:
        w, x, y, z = self.qvec
        return Rotation.from_quat([x, y, z, w]).as_matrix()


@dataclass
class SfmPoint:
    id: int
    xyz: Tuple[float, float, float]
    rgb: Tuple[int, int, int]
    error: float
    track: Tuple[int, ...] = ()


@dataclass
class SfmModel:
    cameras: Dict[int, SfmCamera]
    images: Dict[int, SfmImage]
    points: Dict[int, SfmPoint]

    def render_cameras(self) -> List[Camera]:
        """Pinhole cameras in image-id order."""
        out = []
        for img in sorted(self.images.values(), key=lambda im: im.id):
            cam = self.cameras[img.camera_id]
            fx, fy, cx, cy = cam.intrinsics
            out.append(Camera(fx, fy, cx, cy, img.rotation, np.array(img.tvec), cam.width, cam.height))
        return out

    def xyz(self) -> np.ndarray:
        pts = sorted(self.points.values(), key=lambda p: p.id)
        return np.array([p.xyz for p in pts], dtype=np.float64).reshape(-1, 3)

    def rgb(self) -> np.ndarray:
        pts = sorted(self.points.values(), key=lambda p: p.id)
        return np.array([p.rgb for p in pts], dtype=np.float64).reshape(-1, 3) / 255.0


def _data_lines(path: Path, keep_blank: bool = False):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").strip()
            if line.startswith("#"):
                continue
            if not line and not keep_blank:
                continue
            yield lineno, line


def read_cameras_text(path) -> Dict[int, SfmCamera]:
    cams = {}
    for lineno, line in _data_lines(Path(path)):
        tok = line.split()
        if len(tok) < 4:
            raise SfmParseError(path, lineno, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]")
        model = tok[1]
        if model not in CAMERA_MODELS:
            raise SfmParseError(path, lineno, f"unsupported camera model {model}")
        try:
            cid, w, h = int(tok[0]), int(tok[2]), int(tok[3])
            params = tuple(float(v) for v in tok[4:])
        except ValueError as err:
            raise SfmParseError(path, lineno, str(err)) from None
        if len(params) != CAMERA_MODELS[model]:
            raise SfmParseError(path, lineno, f"{model} takes {CAMERA_MODELS[model]} params, got {len(params)}")
        cams[cid] = SfmCamera(cid, model, w, h, params)
    return cams


def read_images_text(path) -> Dict[int, SfmImage]:
    images = {}
    lines = list(_data_lines(Path(path), keep_blank=True))
    i = 0
    while i < len(lines):
        lineno, line = lines[i]
        if not line:
            i += 1
            continue
        tok = line.split()
        if len(tok) < 10:
            raise SfmParseError(path, lineno, "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        try:
            iid = int(tok[0])
            q = tuple(float(v) for v in tok[1:5])
            tv = tuple(float(v) for v in tok[5:8])
            cid = int(tok[8])
        except ValueError as err:
            raise SfmParseError(path, lineno, str(err)) from None
        name = " ".join(tok[9:])
        pts2d = lines[i + 1][1] if i + 1 < len(lines) else ""
        images[iid] = SfmImage(iid, q, tv, cid, name, pts2d)
        i += 2
    return images


def read_points3d_text(path) -> Dict[int, SfmPoint]:
    pts = {}
    for lineno, line in _data_lines(Path(path)):
        tok = line.split()
        if len(tok) < 8 or (len(tok) - 8) % 2:
            raise SfmParseError(path, lineno, "expected POINT3D_ID X Y Z R G B ERROR TRACK[]")
        try:
            pid = int(tok[0])
            xyz = tuple(float(v) for v in tok[1:4])
            rgb = tuple(int(v) for v in tok[4:7])
            err = float(tok[7])
            track = tuple(int(v) for v in tok[8:])
        except ValueError as err:
            raise SfmParseError(path, lineno, str(err)) from None
        pts[pid] = SfmPoint(pid, xyz, rgb, err, track)
    return pts


def parse_sfm_model(directory) -> SfmModel:
    d = Path(directory)
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (d / name).exists():
            raise FileNotFoundError(d / name)
    model = SfmModel(read_cameras_text(d / "cameras.txt"), read_images_text(d / "images.txt"),
                     read_points3d_text(d / "points3D.txt"))
    if not model.points:
        warnings.warn(f"{d / 'points3D.txt'} contains no points", RuntimeWarning)
    for img in model.images.values():
        if img.camera_id not in model.cameras:
            raise SfmParseError(d / "images.txt", 0, f"image {img.id} references unknown camera {img.camera_id}")
    log.info("parsed %d cameras, %d images, %d points", len(model.cameras), len(model.images), len(model.points))
    return model


def _num(v) -> str:
    return repr(float(v))


def write_sfm_model(model: SfmModel, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for c in sorted(model.cameras.values(), key=lambda c: c.id):
            fh.write(" ".join([str(c.id), c.model, str(c.width), str(c.height)] + [_num(p) for p in c.params]) + "\n")
    with open(d / "images.txt", "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for im in sorted(model.images.values(), key=lambda i: i.id):
            fh.write(" ".join([str(im.id)] + [_num(v) for v in im.qvec] + [_num(v) for v in im.tvec]
                              + [str(im.camera_id), im.name]) + "\n")
            fh.write(im.points2d + "\n")
    with open(d / "points3D.txt", "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for p in sorted(model.points.values(), key=lambda p: p.id):
            fh.write(" ".join([str(p.id)] + [_num(v) for v in p.xyz] + [str(v) for v in p.rgb]
                              + [_num(p.error)] + [str(v) for v in p.track]) + "\n")


def model_from_scene(cameras: Sequence[Camera], points: np.ndarray, colors: Optional[np.ndarray] = None,
                     names: Optional[Sequence[str]] = None) -> SfmModel:
    """Wrap cameras and points as a text-serializable model (PINHOLE, one camera per image)."""
    cams, imgs, pts = {}, {}, {}
    for i, c in enumerate(cameras, start=1):
        cams[i] = SfmCamera(i, "PINHOLE", c.width, c.height, (c.fx, c.fy, c.cx, c.cy))
        x, y, z, w = Rotation.from_matrix(c.R).as_quat()
        name = names[i - 1] if names else f"{i:03d}.ppm"
        imgs[i] = SfmImage(i, (w, x, y, z), tuple(c.t), i, name, "")
    if colors is None:
        colors = np.full((len(points), 3), 0.5)
    for j, (p, col) in enumerate(zip(points, colors), start=1):
        rgb = tuple(int(v) for v in np.clip(np.round(np.asarray(col) * 255), 0, 255))
        pts[j] = SfmPoint(j, tuple(float(v) for v in p), rgb, 0.0, ())
    return SfmModel(cams, imgs, pts)


def read_xyz(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 3)


def write_xyz(path, points: np.ndarray):
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.17g")


# Images ----------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as err:
        raise OSError(f"cannot read image {path}: {err}") from err
    return arr / 255.0


def load_images(paths, cameras: Optional[Sequence[Camera]] = None) -> List[np.ndarray]:
    images = [load_image(p) for p in paths]
    if cameras is not None:
        if len(cameras) != len(images):
            raise ValueError(f"{len(images)} images but {len(cameras)} cameras")
        for p, im, cam in zip(paths, images, cameras):
            if im.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"{p}: image is {im.shape[1]}x{im.shape[0]}, camera expects {cam.width}x{cam.height}")
    return images


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray):
    data = to_bytes(image)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.reshape(h, w, 3).tobytes())


def write_image(path, image: np.ndarray):
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, image)
    else:
        Image.fromarray(to_bytes(image)).save(path)


# Scenes ----------------------------------------------------------------------

@dataclass
class Normalization:
    """x_unit = (x_input - center) / scale."""

    center: np.ndarray
    scale: float

    def apply(self, X):
        return (np.asarray(X) - self.center) / self.scale

    def invert(self, X):
        return np.asarray(X) * self.scale + self.center

    def camera(self, cam: Camera) -> Camera:
        t = (cam.R @ self.center + cam.t) / self.scale
        return replace(cam, R=cam.R.copy(), t=t)


@dataclass
class SceneBundle:
    images: List[np.ndarray]
    cameras: List[Camera]
    points: np.ndarray
    point_colors: Optional[np.ndarray] = None
    transform: Normalization = field(default_factory=lambda: Normalization(np.zeros(3), 1.0))
    names: Optional[List[str]] = None

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise ValueError("image count must equal camera count")


def normalize_scene(bundle: SceneBundle, margin: float = 1.1, center=None, scale: Optional[float] = None) -> SceneBundle:
    """Map the bounding sphere of P (centroid, margin * max distance) to the unit ball.

    ``center`` and ``scale`` override the estimated sphere. The stored
    transform maps normalized coordinates back to the original frame.
    """
    P = np.asarray(bundle.points, dtype=np.float64)
    if len(P) == 0:
        raise ValueError("cannot normalize a scene without points")
    prev = bundle.transform
    P_in = prev.invert(P)
    center = P_in.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64).reshape(3)
    radius = margin * np.linalg.norm(P_in - center, axis=1).max() if scale is None else float(scale)
    if radius < 1e-12:
        raise ValueError("degenerate point set: all points coincide")
    tf = Normalization(center, float(radius))
    cams = [tf.camera(prev_inverse_camera(prev, c)) for c in bundle.cameras]
    return replace(bundle, cameras=cams, points=tf.apply(P_in), transform=tf)


def prev_inverse_camera(tf: Normalization, cam: Camera) -> Camera:
    """Camera expressed back in the input frame of ``tf``."""
    return replace(cam, t=cam.t * tf.scale - cam.R @ tf.center)


@dataclass
class Shape:
    """Analytic solid with an exact signed distance."""

    kind: str = "sphere"
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0  # sphere radius / torus major radius
    half_extents: Tuple[float, float, float] = (0.8, 0.6, 0.7)
    minor_radius: float = 0.35

    def sdf(self, X) -> np.ndarray:
        p = np.asarray(X, dtype=np.float64) - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.radius
        if self.kind == "box":
            q = np.abs(p) - np.asarray(self.half_extents)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(q.max(axis=-1), 0.0)
        if self.kind == "torus":
            ring = np.linalg.norm(p[..., [0, 2]], axis=-1) - self.radius
            return np.sqrt(ring ** 2 + p[..., 1] ** 2) - self.minor_radius
        raise ValueError(f"unknown shape {self.kind}")

    @property
    def circumradius(self) -> float:
        if self.kind == "sphere":
            return self.radius
        if self.kind == "box":
            return float(np.linalg.norm(self.half_extents))
        return self.radius + self.minor_radius

    @property
    def area(self) -> float:
        if self.kind == "sphere":
            return 4 * math.pi * self.radius ** 2
        if self.kind == "box":
            a, b, c = self.half_extents
            return 8 * (a * b + b * c + a * c)
        return 4 * math.pi ** 2 * self.radius * self.minor_radius

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform (area-weighted) samples on the surface."""
        c = np.asarray(self.center)
        if self.kind == "sphere":
            v = rng.normal(size=(n, 3))
            return c + self.radius * v / np.linalg.norm(v, axis=1, keepdims=True)
        if self.kind == "box":
            h = np.asarray(self.half_extents)
            face_area = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
            face = rng.choice(6, size=n, p=face_area / face_area.sum())
            p = rng.uniform(-1, 1, size=(n, 3)) * h
            axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
            p[np.arange(n), axis] = sign * h[axis]
            return c + p
        # torus: rejection on the tube angle for uniform area
        out = []
        R, r = self.radius, self.minor_radius
        while sum(len(o) for o in out) < n:
            u = rng.uniform(0, 2 * np.pi, n)
            v = rng.uniform(0, 2 * np.pi, n)
            keep = rng.uniform(0, 1, n) < (R + r * np.cos(v)) / (R + r)
            u, v = u[keep], v[keep]
            out.append(np.stack([(R + r * np.cos(v)) * np.cos(u), r * np.sin(v), (R + r * np.cos(v)) * np.sin(u)], 1))
        return c + np.concatenate(out)[:n]

    def normal(self, X, h: float = 1e-6) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        g = np.stack([(self.sdf(X + h * e) - self.sdf(X - h * e)) / (2 * h) for e in np.eye(3)], -1)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def procedural_texture(X) -> np.ndarray:
    """Smooth position-dependent albedo in [0.1, 0.9]."""
    x, y, z = np.moveaxis(np.asarray(X, dtype=np.float64), -1, 0)
    r = 0.5 + 0.4 * np.sin(5.0 * x + 0.5) * np.cos(4.0 * y)
    g = 0.5 + 0.4 * np.sin(4.0 * y + 1.0) * np.cos(5.0 * z)
    b = 0.5 + 0.4 * np.sin(5.0 * z + 2.0) * np.cos(4.0 * x + 1.0)
    return np.stack([r, g, b], -1)


def sphere_trace(sdf: Callable, origins: np.ndarray, dirs: np.ndarray, steps: int = 64, t0=0.0,
                 t_max: float = 100.0, eps: float = 1e-5) -> Tuple[np.ndarray, np.ndarray]:
    """March each ray by the SDF value; returns (t, hit)."""
    t = np.broadcast_to(np.asarray(t0, dtype=np.float64), origins.shape[:-1]).copy()
    for _ in range(steps):
        d = sdf(origins + t[..., None] * dirs)
        t = np.where(t < t_max, t + d, t)
    d = np.abs(sdf(origins + t[..., None] * dirs))
    hit = (d < 1e-3) & (t < t_max)
    return t, hit


@dataclass
class RigSpec:
    """Three cameras on a ring, ``spread_deg`` apart in azimuth."""

    arrangement: str = "little-overlap"
    distance: float = 3.2
    elevation_deg: float = 20.0
    width: int = 80
    height: int = 80
    focal: float = 90.0

    @property
    def spread_deg(self) -> float:
        return 60.0 if self.arrangement == "little-overlap" else 12.0

    def cameras(self, target=(0.0, 0.0, 0.0)) -> List[Camera]:
        if self.arrangement not in ("little-overlap", "large-overlap"):
            raise ValueError(f"unknown rig arrangement {self.arrangement}")
        cams = []
        # large-overlap staggers elevation so the three poses stay inside a 30 degree cone
        elev_offsets = [0.0, 0.0, 0.0] if self.arrangement == "little-overlap" else [-6.0, 6.0, -6.0]
        for k, az in enumerate((-self.spread_deg, 0.0, self.spread_deg)):
            a, e = math.radians(az), math.radians(self.elevation_deg + elev_offsets[k])
            eye = np.asarray(target) + self.distance * np.array([math.sin(a) * math.cos(e), math.sin(e),
                                                                 -math.cos(a) * math.cos(e)])
            R, t = look_at(eye, target)
            cams.append(Camera(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2, R, t,
                               self.width, self.height))
        return cams


@dataclass
class SyntheticScene:
    shape: Shape = field(default_factory=Shape)
    rig: RigSpec = field(default_factory=RigSpec)
    n_points: int = 300
    noise: float = 0.005
    texture: Callable = procedural_texture


@dataclass
class GroundTruth:
    shape: Shape

    def sample(self, n: int, seed=0) -> np.ndarray:
        return self.shape.sample_surface(n, np.random.default_rng(seed))

    @property
    def radius(self) -> float:
        return self.shape.circumradius


def render_analytic(shape: Shape, cam: Camera, texture: Callable = procedural_texture, steps: int = 64):
    """Sphere-traced RGB image (black background) and hit mask."""
    vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    uv = np.stack([uu, vv], -1).astype(np.float64)
    d = pixel_directions(cam, uv)
    o = np.broadcast_to(cam.center, d.shape)
    t, hit = sphere_trace(shape.sdf, o, d, steps=steps)
    X = o + t[..., None] * d
    img = np.where(hit[..., None], texture(X), 0.0)
    return img, hit


def visibility_counts(shape: Shape, cams: Sequence[Camera], X: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    """Number of cameras that see each surface point unoccluded and inside the frame."""
    counts = np.zeros(len(X), dtype=int)
    n = shape.normal(X)
    for cam in cams:
        uv, z = cam.project(X)
        inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1)
        v = X - cam.center
        dist = np.linalg.norm(v, axis=1)
        d = v / dist[:, None]
        facing = (n * d).sum(1) < 0
        t, _ = sphere_trace(shape.sdf, np.broadcast_to(cam.center, X.shape), d, steps=96)
        counts += (inside & facing & (t > dist - 1e-2)).astype(int)
    return counts


def generate_synthetic_scene(spec: SyntheticScene, seed: int = 0) -> Tuple[SceneBundle, GroundTruth]:
    """Ray-traced views of an analytic shape plus sparse, unevenly distributed surface points."""
    rng = np.random.default_rng(seed)
    cams = spec.rig.cameras(spec.shape.center)
    images = [render_analytic(spec.shape, c, spec.texture)[0] for c in cams]
    cand = spec.shape.sample_surface(max(20 * spec.n_points, 2000), rng)
    vis = visibility_counts(spec.shape, cams, cand)
    w = 0.05 + vis.astype(np.float64)
    pick = rng.choice(len(cand), size=spec.n_points, replace=False, p=w / w.sum())
    pts = cand[pick] + truncated_gaussian(rng, np.full(spec.n_points, spec.noise))
    bundle = SceneBundle(images, cams, pts, spec.texture(cand[pick]), names=[f"{i:03d}.ppm" for i in range(len(cams))])
    return bundle, GroundTruth(spec.shape)


def save_scene(directory, bundle: SceneBundle, gt: Optional[GroundTruth] = None, meta: Optional[dict] = None,
               gt_count: int = 20000, seed: int = 0):
    """Write images (PPM), a COLMAP text model and, for synthetic scenes, ground-truth surface samples."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    names = bundle.names or [f"{i:03d}.ppm" for i in range(len(bundle.images))]
    for name, img in zip(names, bundle.images):
        write_ppm(d / "images" / name, img)
    write_sfm_model(model_from_scene(bundle.cameras, bundle.points, bundle.point_colors, names), d / "sparse")
    if gt is not None:
        write_xyz(d / "gt_points.xyz", gt.sample(gt_count, seed))
    if meta:
        write_kv(d / "scene.cfg", meta)


def scene_settings(directory) -> Dict[str, str]:
    """Contents of ``scene.cfg`` in a scene directory, or an empty dict."""
    path = Path(directory) / "scene.cfg"
    return read_kv(path) if path.exists() else {}


def scene_normalization(settings: Dict[str, str]) -> dict:
    """normalize_scene keyword overrides from scene.cfg (``center = x y z``, ``scale``, ``margin``)."""
    out = {}
    if "center" in settings:
        out["center"] = [float(v) for v in settings["center"].replace(",", " ").split()]
    for key in ("scale", "margin"):
        if key in settings:
            out[key] = float(settings[key])
    return out


def load_scene(directory, views: Optional[Sequence[int]] = None, points_path=None) -> SceneBundle:
    """Scene directory with images and a COLMAP text model; ``views`` picks a subset.

    ``scene.cfg`` may name the folders with ``image_dir`` and ``model_dir``
    (defaults ``images`` and ``sparse``).
    """
    d = Path(directory)
    settings = scene_settings(d)
    image_dir = d / settings.get("image_dir", "images")
    model = parse_sfm_model(d / settings.get("model_dir", "sparse"))
    ordered = sorted(model.images.values(), key=lambda im: im.id)
    cams = model.render_cameras()
    if views is not None:
        ordered = [ordered[i] for i in views]
        cams = [cams[i] for i in views]
    names = [im.name for im in ordered]
    images = load_images([image_dir / n for n in names], cams)
    if points_path is not None:
        pts, cols = read_xyz(points_path), None
    else:
        pts, cols = model.xyz(), model.rgb()
    return SceneBundle(images, cams, pts, cols, names=names)


def read_kv(path) -> Dict[str, str]:
    """Flat ``key = value`` text; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_kv(path, values: dict):
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {v}\n")
