"""Synthetic ground truth: analytic SDF shapes, cameras, sphere-traced images.

Ground-truth images come from sphere tracing the exact SDF (never from the
Gaussian rasterizer), so evaluation is independent of the system under test.
Scenes fit inside [-0.8, 0.8]^3 and cameras sit on a radius-2.5 Fibonacci
spiral looking at the origin, which keeps scenes pre-normalized (identity
scene transform).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraView, make_camera
from .gaussians import GaussianSet
from .images import load_png, save_png
from .mesh import TriangleMesh, marching_cubes
from .sdf import SceneTransform, pull_points

LIGHT_DIR = np.array([0.4, 0.25, 0.85]) / np.linalg.norm([0.4, 0.25, 0.85])
AMBIENT = 0.2
DIFFUSE = 0.8
CAMERA_RADIUS = 2.5
SCENE_BOUNDS = (np.array([-0.98, -0.98, -0.98]), np.array([0.98, 0.98, 0.98]))


class DatasetError(ValueError):
    """Malformed dataset directory or manifest."""


@dataclass
class AnalyticShape:
    """Closed-form SDF with exact gradients and a Lambertian albedo."""

    kind: str
    params: dict
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.75, 0.55, 0.35]))

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "torus", "union"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)

    # -- signed distance -----------------------------------------------------

    def values(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if self.kind == "sphere":
            return np.linalg.norm(q - self.params["center"], axis=1) - self.params["radius"]
        if self.kind == "box":
            d = np.abs(q) - self.params["half_extents"]
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
            inside = np.minimum(np.max(d, axis=1), 0.0)
            return outside + inside
        if self.kind == "torus":
            ring = np.hypot(q[:, 0], q[:, 1]) - self.params["major_radius"]
            return np.hypot(ring, q[:, 2]) - self.params["minor_radius"]
        a = _sphere_dist(q, self.params["center_a"], self.params["radius_a"])
        b = _sphere_dist(q, self.params["center_b"], self.params["radius_b"])
        return np.minimum(a, b)

    def gradients(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if self.kind == "sphere":
            d = q - self.params["center"]
            return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        if self.kind == "box":
            d = np.abs(q) - self.params["half_extents"]
            sign = np.where(q >= 0, 1.0, -1.0)
            v = np.maximum(d, 0.0)
            out_norm = np.linalg.norm(v, axis=1, keepdims=True)
            outside = out_norm[:, 0] > 0
            grad = np.zeros_like(q)
            grad[outside] = (v[outside] / out_norm[outside]) * sign[outside]
            if np.any(~outside):
                axis = np.argmax(d[~outside], axis=1)
                rows = np.where(~outside)[0]
                grad[rows, axis] = sign[rows, axis]
            return grad
        if self.kind == "torus":
            l = np.maximum(np.hypot(q[:, 0], q[:, 1]), 1e-300)
            ring = l - self.params["major_radius"]
            denom = np.maximum(np.hypot(ring, q[:, 2]), 1e-300)
            gx = ring / denom * q[:, 0] / l
            gy = ring / denom * q[:, 1] / l
            gz = q[:, 2] / denom
            return np.stack([gx, gy, gz], axis=1)
        da = _sphere_dist(q, self.params["center_a"], self.params["radius_a"])
        db = _sphere_dist(q, self.params["center_b"], self.params["radius_b"])
        ga = _sphere_grad(q, self.params["center_a"])
        gb = _sphere_grad(q, self.params["center_b"])
        return np.where((da <= db)[:, None], ga, gb)


def _sphere_dist(q, center, radius):
    return np.linalg.norm(q - center, axis=1) - radius


def _sphere_grad(q, center):
    d = q - center
    return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)


def make_shape(kind: str, albedo=None) -> AnalyticShape:
    """Desk-scale shape presets, all inside [-0.8, 0.8]^3."""
    presets = {
        "sphere": {"center": np.zeros(3), "radius": 0.5},
        "box": {"half_extents": np.array([0.45, 0.45, 0.45])},
        "torus": {"major_radius": 0.45, "minor_radius": 0.18},
        "union": {"center_a": np.array([-0.25, 0.0, 0.0]), "radius_a": 0.35,
                  "center_b": np.array([0.25, 0.08, 0.05]), "radius_b": 0.35},
    }
    if kind not in presets:
        raise ValueError(f"unknown shape kind {kind!r}")
    kwargs = {} if albedo is None else {"albedo": albedo}
    return AnalyticShape(kind, presets[kind], **kwargs)


def analytic_sdf(shape: AnalyticShape, q: np.ndarray):
    """Exact signed distance of `shape` at one point or an (N,3) batch."""
    q = np.asarray(q, dtype=np.float64)
    vals = shape.values(q)
    return float(vals[0]) if q.ndim == 1 else vals


# ---------------------------------------------------------------------------
# sphere tracing
# ---------------------------------------------------------------------------

def sphere_trace(shape: AnalyticShape, origins, dirs, steps: int = 64,
                 hit_eps: float = 1e-4, max_dist: float = 8.0):
    """March rays by the current distance value; returns (hit mask, depth)."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = len(dirs)
    if len(origins) == 1:
        origins = np.broadcast_to(origins, (n, 3))
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(steps):
        if not np.any(active):
            break
        p = origins[active] + t[active, None] * dirs[active]
        d = shape.values(p)
        newly_hit = d < hit_eps
        idx = np.where(active)[0]
        hit[idx[newly_hit]] = True
        t[idx] += np.where(newly_hit, 0.0, d)
        active[idx[newly_hit]] = False
        active &= t < max_dist
    return hit, t


def shade(shape: AnalyticShape, points: np.ndarray) -> np.ndarray:
    """Lambertian shading with a fixed directional light plus ambient."""
    n = shape.gradients(points)
    n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    lam = np.maximum(n @ LIGHT_DIR, 0.0)
    return shape.albedo * (AMBIENT + DIFFUSE * lam)[:, None]


def render_view(shape: AnalyticShape, cam: CameraView,
                background=(0.0, 0.0, 0.0)) -> np.ndarray:
    dirs = cam.ray_directions().reshape(-1, 3)
    hit, t = sphere_trace(shape, cam.position[None, :], dirs)
    img = np.tile(np.asarray(background, dtype=np.float64), (len(dirs), 1))
    if np.any(hit):
        pts = cam.position + t[hit, None] * dirs[hit]
        img[hit] = shade(shape, pts)
    return img.reshape(cam.height, cam.width, 3)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    views: list
    transform: SceneTransform
    ref_mesh: TriangleMesh | None = None
    ref_samples: np.ndarray | None = None

    def train_views(self):
        return [v for v in self.views if v.split == "train"]

    def holdout_views(self):
        return [v for v in self.views if v.split == "holdout"]


def fibonacci_cameras(n_views: int, image_size: int, radius: float = CAMERA_RADIUS):
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    for i in range(n_views):
        z = 1.0 - 2.0 * (i + 0.5) / n_views
        rho = np.sqrt(max(1.0 - z * z, 0.0))
        az = golden * i
        eye = radius * np.array([rho * np.cos(az), rho * np.sin(az), z])
        cams.append(make_camera(eye, np.zeros(3), image_size, image_size,
                                focal=1.2 * image_size))
    return cams


def make_scene(shape: AnalyticShape, n_views: int, image_size: int, seed: int,
               background=(0.0, 0.0, 0.0), ref_mesh_resolution: int = 256,
               n_ref_samples: int = 100_000, with_reference: bool = True) -> Dataset:
    """Posed sphere-traced views with a 90/10 train/holdout split plus a
    reference mesh and surface samples for evaluation and initialization."""
    if not isinstance(shape, AnalyticShape):
        raise ValueError("make_scene expects an AnalyticShape")
    if n_views < 2:
        raise ValueError(f"need at least 2 views, got {n_views}")
    cams = fibonacci_cameras(n_views, image_size)
    views = []
    for i, cam in enumerate(cams):
        img = render_view(shape, cam, background)
        if not np.any(np.any(img != np.asarray(background), axis=2)):
            raise DatasetError(f"view {i} has an empty silhouette")
        cam.image = img
        cam.split = "holdout" if i % 10 == 9 else "train"
        views.append(cam)
    ref_mesh = None
    ref_samples = None
    if with_reference:
        ref_mesh = marching_cubes(shape.values, SCENE_BOUNDS, ref_mesh_resolution)
        ref_samples = surface_samples(shape, n_ref_samples, seed)
    return Dataset(views=views, transform=SceneTransform(), ref_mesh=ref_mesh,
                   ref_samples=ref_samples)


def surface_samples(shape: AnalyticShape, n: int, seed: int) -> np.ndarray:
    """On-surface samples by pulling random points and rejecting strays."""
    rng = np.random.default_rng(seed)
    out = []
    have = 0
    while have < n:
        cand = rng.uniform(-0.9, 0.9, size=(max(4 * (n - have), 1024), 3))
        pulled, _ = pull_points(shape, cand)
        ok = np.abs(shape.values(pulled)) < 1e-9
        ok &= np.all(np.abs(pulled) < 0.95, axis=1)
        keep = pulled[ok]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:n]


def init_gaussians(dataset: Dataset, n: int, noise_std: float = 0.05,
                   seed: int = 0) -> GaussianSet:
    """Noisy surface samples standing in for an SfM point cloud."""
    if n < 1:
        raise ValueError(f"need at least one Gaussian, got {n}")
    rng = np.random.default_rng(seed)
    if dataset.ref_samples is not None and len(dataset.ref_samples):
        picks = rng.integers(0, len(dataset.ref_samples), size=n)
        centers = dataset.ref_samples[picks] + rng.normal(0.0, noise_std, size=(n, 3))
    else:
        centers = rng.uniform(-0.8, 0.8, size=(n, 3))
    if n > 1:
        tree = cKDTree(centers)
        nn, _ = tree.query(centers, k=2)
        scale = float(np.mean(nn[:, 1]))
    else:
        scale = 0.1
    log_scales = np.full((n, 3), np.log(max(scale, 1e-4)))
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    logits = np.full(n, np.log(0.1 / 0.9))
    colors = np.full((n, 3), 0.5)
    return GaussianSet(centers, log_scales, quats, logits, colors)


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write manifest.json plus PNG images (and reference data when present)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    views = []
    for i, v in enumerate(dataset.views):
        name = f"images/view_{i:03d}.png"
        save_png(out / name, v.image)
        w2c = np.eye(4)
        w2c[:3, :3] = v.r_w2c
        w2c[:3, 3] = v.t_w2c
        views.append({
            "file": name, "split": v.split,
            "width": v.width, "height": v.height,
            "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
            "world_to_camera": w2c.tolist(),
        })
    manifest = {
        "normalization": {"scale": dataset.transform.scale,
                          "offset": dataset.transform.offset.tolist()},
        "views": views,
    }
    if dataset.ref_mesh is not None:
        from .mesh import export_mesh
        export_mesh(dataset.ref_mesh, out / "reference.ply", "ply")
        manifest["reference_mesh"] = "reference.ply"
    if dataset.ref_samples is not None:
        np.save(out / "reference_samples.npy", dataset.ref_samples)
        manifest["reference_samples"] = "reference_samples.npy"
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    root = manifest_path.parent
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid manifest at line {e.lineno}") from e
    except OSError as e:
        raise DatasetError(f"{manifest_path}: {e}") from e
    norm = manifest.get("normalization", {})
    transform = SceneTransform(scale=float(norm.get("scale", 1.0)),
                               offset=np.asarray(norm.get("offset", [0, 0, 0]),
                                                 dtype=np.float64))
    views = []
    for entry in manifest["views"]:
        img_path = Path(entry["file"])
        if not img_path.is_absolute():
            img_path = root / img_path
        if not img_path.exists():
            raise DatasetError(f"missing image file {img_path}")
        w2c = np.asarray(entry["world_to_camera"], dtype=np.float64)
        views.append(CameraView(
            fx=entry["fx"], fy=entry["fy"], cx=entry["cx"], cy=entry["cy"],
            width=entry["width"], height=entry["height"],
            r_w2c=w2c[:3, :3], t_w2c=w2c[:3, 3],
            image=load_png(img_path), split=entry.get("split", "train")))
    ref_mesh = None
    if "reference_mesh" in manifest:
        from .mesh import load_mesh
        ref_mesh = load_mesh(root / manifest["reference_mesh"])
    ref_samples = None
    if "reference_samples" in manifest:
        ref_samples = np.load(root / manifest["reference_samples"])
    return Dataset(views=views, transform=transform, ref_mesh=ref_mesh,
                   ref_samples=ref_samples)
