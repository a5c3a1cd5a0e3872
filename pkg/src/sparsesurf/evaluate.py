"""Zero-level-set extraction, mesh I/O, surface sampling and Chamfer evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage import measure

log = logging.getLogger(__name__)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh has non-finite vertices")

    def __len__(self):
        return len(self.faces)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum()) if len(self.faces) else 0.0

    def transformed(self, fn: Callable[[np.ndarray], np.ndarray]) -> "TriangleMesh":
        return TriangleMesh(fn(self.vertices), self.faces.copy(), self.normals)


def evaluate_grid(sdf_fn, bounds, resolution: int, chunk: int = 65536) -> np.ndarray:
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    axes = [np.linspace(lo[k], hi[k], resolution + 1) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    out = np.empty(len(grid))
    for i in range(0, len(grid), chunk):
        out[i:i + chunk] = sdf_fn(grid[i:i + chunk])
    return out.reshape((resolution + 1,) * 3)


def torch_sdf(field_) -> Callable[[np.ndarray], np.ndarray]:
    dtype = next(field_.parameters()).dtype

    @torch.no_grad()
    def fn(x: np.ndarray) -> np.ndarray:
        return field_.sdf(torch.as_tensor(x, dtype=dtype)).double().numpy()

    return fn


def marching_cubes(sdf, resolution: int = 128, bounds=((-1, -1, -1), (1, 1, 1))) -> TriangleMesh:
    """Triangulate {f = 0} on a resolution^3 cell grid; ``sdf`` is a torch field or a numpy callable."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    fn = sdf if not isinstance(sdf, torch.nn.Module) else torch_sdf(sdf)
    vol = evaluate_grid(fn, bounds, resolution)
    if not (vol.min() < 0 < vol.max()):
        warnings.warn("field has no zero crossing inside the bounds; mesh is empty", RuntimeWarning)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    spacing = tuple((hi - lo) / resolution)
    verts, faces, normals, _ = measure.marching_cubes(vol, level=0.0, spacing=spacing)
    return TriangleMesh(verts + lo, faces, normals)


def write_ply(path, mesh: TriangleMesh):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\nproperty double x\nproperty double y\nproperty double z\n")
        fh.write(f"element face {len(mesh.faces)}\nproperty list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices.tolist():
            fh.write(f"{v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path) -> TriangleMesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_v = n_f = 0
    i = 1
    while lines[i].strip() != "end_header":
        tok = lines[i].split()
        if tok[:1] == ["format"] and tok[1] != "ascii":
            raise ValueError(f"{path}: only ascii PLY is supported")
        if tok[:2] == ["element", "vertex"]:
            n_v = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            n_f = int(tok[2])
        i += 1
    body = lines[i + 1:]
    verts = np.array([[float(x) for x in ln.split()[:3]] for ln in body[:n_v]]).reshape(-1, 3)
    faces = []
    for ln in body[n_v:n_v + n_f]:
        tok = [int(x) for x in ln.split()]
        faces.extend([tok[1], tok[k], tok[k + 1]] for k in range(2, tok[0]))
    return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh):
    with open(path, "w") as fh:
        for v in mesh.vertices.tolist():
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def load_points(path) -> np.ndarray:
    """Point set from a PLY mesh (vertices) or an XYZ text file."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path).vertices
    return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 3)


def sample_mesh(mesh: TriangleMesh, count: int, seed=0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if len(mesh.faces) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    a, b, c = (mesh.vertices[mesh.faces[tri, k]] for k in range(3))
    return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c


@dataclass
class MetricsReport:
    accuracy: float
    completeness: float
    mean: float
    n_pred: int
    n_gt: int
    threshold: float
    runtime: float = 0.0
    config_hash: str = ""

    def to_kv(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.__dict__.items())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def chamfer_eval(pred: np.ndarray, gt: np.ndarray, threshold: float = float("inf"),
                 config: Optional[dict] = None) -> MetricsReport:
    """Unsquared symmetric Chamfer distance with each nearest-neighbor distance capped at ``threshold``."""
    start = time.perf_counter()
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("chamfer_eval needs two non-empty point sets")
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    acc = float(np.minimum(d_pred, threshold).mean())
    comp = float(np.minimum(d_gt, threshold).mean())
    return MetricsReport(acc, comp, (acc + comp) / 2, len(pred), len(gt), float(threshold),
                         time.perf_counter() - start, config_hash(config or {}))
