"""Procedural datasets with an exact geometric oracle, plus PNG ingestion.

The oracle renderer paints a pixel with the scene albedo wherever the pixel
ray hits the primitive (closed-form intersection, flat shading) and the
background elsewhere, giving the volume renderer an independent ground truth.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractError
from .render import CameraPose, make_camera_rays

DEFAULT_CAMERA_FOV = math.pi / 3.0
CAMERA_DEPTH_MARGIN = 1.7  # near/far = radius -/+ margin covers the scene bound

PRIMITIVES = ("sphere", "box", "two_spheres")
# Second sphere of the composite sits along +x at 1.1x the main radius with
# half the radius; fits the scene bound for size <= 0.6 at the origin.
TWO_SPHERE_OFFSET = 1.1
TWO_SPHERE_SCALE = 0.5


@dataclass
class SceneSpec:
    primitive: str = "sphere"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: float = 0.5
    albedo: tuple[float, float, float] = (0.8, 0.2, 0.2)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ContractError(f"unknown primitive {self.primitive!r}")
        if self.size < 0.0:
            raise ContractError(f"size must be >= 0, got {self.size}")
        c = np.asarray(self.center, dtype=np.float64)
        reach = self.size
        if self.primitive == "two_spheres":
            reach = self.size * (TWO_SPHERE_OFFSET + TWO_SPHERE_SCALE)
        if np.max(np.abs(c)) + reach > 1.0 + 1e-12:
            raise ContractError(
                f"primitive (center {self.center}, size {self.size}) exceeds [-1,1]^3")


@dataclass
class PoseDistribution:
    mode: str = "full_sphere_sector"
    radius: float = 2.0
    elevation_lo: float = math.radians(-30.0)
    elevation_hi: float = math.radians(30.0)
    axis_step: float = math.radians(5.0)

    def __post_init__(self):
        if self.mode not in ("full_sphere_sector", "single_axis"):
            raise ContractError(f"unknown pose mode {self.mode!r}")
        if self.radius <= 0.0:
            raise ContractError(f"radius must be > 0, got {self.radius}")
        if self.elevation_lo > self.elevation_hi:
            raise ContractError("elevation_lo must be <= elevation_hi")
        if self.mode == "single_axis" and self.axis_step <= 0.0:
            raise ContractError(f"axis_step must be > 0, got {self.axis_step}")

    def n_azimuth_steps(self) -> int:
        return int(round(2.0 * math.pi / self.axis_step))


@dataclass
class DatasetItem:
    image: np.ndarray  # (S, S, 3) in [0, 1]
    scene: SceneSpec | None = None


@dataclass
class Dataset:
    items: list[DatasetItem]
    image_size: int
    background: tuple[float, float, float]
    pose_dist: PoseDistribution
    provenance: str = "procedural"

    def __len__(self) -> int:
        return len(self.items)

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])


def pose_from_angles(azimuth: float, elevation: float,
                     pose_dist: PoseDistribution) -> CameraPose:
    """Camera on the viewing sphere looking at the origin, z-up."""
    r = pose_dist.radius
    pos = np.array([r * math.cos(elevation) * math.cos(azimuth),
                    r * math.cos(elevation) * math.sin(azimuth),
                    r * math.sin(elevation)])
    return CameraPose(position=pos, look_at=np.zeros(3), up=np.array([0.0, 0.0, 1.0]),
                      vertical_fov=DEFAULT_CAMERA_FOV,
                      t_near=max(r - CAMERA_DEPTH_MARGIN, 0.05),
                      t_far=r + CAMERA_DEPTH_MARGIN)


def sample_pose(pose_dist: PoseDistribution, rng: np.random.Generator) -> CameraPose:
    if pose_dist.mode == "single_axis":
        k = int(rng.integers(pose_dist.n_azimuth_steps()))
        return pose_from_angles(k * pose_dist.axis_step, 0.0, pose_dist)
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    elevation = rng.uniform(pose_dist.elevation_lo, pose_dist.elevation_hi)
    return pose_from_angles(azimuth, elevation, pose_dist)


# -- closed-form intersections -------------------------------------------------


def _hit_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = np.sum(oc * dirs, axis=1)
    disc = b * b - (np.sum(oc * oc, axis=1) - radius * radius)
    hit = disc >= 0.0
    root = np.sqrt(np.maximum(disc, 0.0))
    t_far_root = -b + root
    return hit & (t_far_root > 0.0)


def _hit_box(origins, dirs, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # Parallel rays: the slab constrains nothing when inside, everything outside.
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(np.isnan(tmin) | (dirs == 0.0), np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(np.isnan(tmax) | (dirs == 0.0), np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=1)
    exit_ = tmax.min(axis=1)
    return (enter <= exit_) & (exit_ > 0.0)


def scene_hit_mask(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    center = np.asarray(scene.center, dtype=np.float64)
    if scene.primitive == "sphere":
        return _hit_sphere(origins, dirs, center, scene.size)
    if scene.primitive == "box":
        return _hit_box(origins, dirs, center, scene.size)
    second = center + np.array([TWO_SPHERE_OFFSET * scene.size, 0.0, 0.0])
    return (_hit_sphere(origins, dirs, center, scene.size)
            | _hit_sphere(origins, dirs, second, TWO_SPHERE_SCALE * scene.size))


def scene_contains(scene: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Interior test for lattice points, used by mesh-extraction checks."""
    center = np.asarray(scene.center, dtype=np.float64)
    if scene.primitive == "sphere":
        return np.linalg.norm(points - center, axis=-1) < scene.size
    if scene.primitive == "box":
        return np.max(np.abs(points - center), axis=-1) < scene.size
    second = center + np.array([TWO_SPHERE_OFFSET * scene.size, 0.0, 0.0])
    return ((np.linalg.norm(points - center, axis=-1) < scene.size)
            | (np.linalg.norm(points - second, axis=-1) < TWO_SPHERE_SCALE * scene.size))


def oracle_render(scene: SceneSpec, pose: CameraPose, size: int) -> np.ndarray:
    """Exact silhouette render: albedo where the pixel ray hits, else background."""
    bundle = make_camera_rays(pose, size, size)
    mask = scene_hit_mask(scene, bundle.origins, bundle.directions)
    img = np.empty((size * size, 3))
    img[:] = np.asarray(scene.background, dtype=np.float64)
    img[mask] = np.asarray(scene.albedo, dtype=np.float64)
    return img.reshape(size, size, 3)


# -- dataset construction --------------------------------------------------------


def make_dataset(n: int, pose_dist: PoseDistribution, randomize=("color", "size"),
                 size: int = 32, seed: int = 0, primitive: str = "sphere",
                 background=(1.0, 1.0, 1.0)) -> Dataset:
    """n procedural scenes, one oracle view each, reproducible per seed."""
    if n < 1:
        raise ContractError(f"dataset needs n >= 1, got {n}")
    items = []
    for i in range(n):
        rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), i]))
        albedo = tuple(rng.uniform(0.2, 0.8, size=3)) if "color" in randomize \
            else (0.8, 0.2, 0.2)
        extent = float(rng.uniform(0.3, 0.6)) if "size" in randomize else 0.5
        scene = SceneSpec(primitive=primitive, center=(0.0, 0.0, 0.0), size=extent,
                          albedo=albedo, background=tuple(background))
        pose = sample_pose(pose_dist, rng)
        items.append(DatasetItem(image=oracle_render(scene, pose, size), scene=scene))
    return Dataset(items=items, image_size=size, background=tuple(background),
                   pose_dist=pose_dist, provenance="procedural")


# -- PNG and manifest I/O ----------------------------------------------------------


def save_png(image: np.ndarray, path: str) -> None:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"save_png expects HxWx3, got {arr.shape}")
    quant = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quant, mode="RGB").save(path)


def load_png(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise IOError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except Exception as exc:
        raise IOError(f"cannot decode PNG {path}: {exc}") from exc
    if arr.ndim == 2:  # grayscale replicated to three channels
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr.astype(np.float64) / 255.0


def pose_dist_to_json(pd: PoseDistribution) -> dict:
    return {"mode": pd.mode, "radius": pd.radius,
            "elevation_lo_deg": math.degrees(pd.elevation_lo),
            "elevation_hi_deg": math.degrees(pd.elevation_hi),
            "axis_step_deg": math.degrees(pd.axis_step)}


def pose_dist_from_json(doc: dict) -> PoseDistribution:
    return PoseDistribution(mode=doc["mode"], radius=doc["radius"],
                            elevation_lo=math.radians(doc["elevation_lo_deg"]),
                            elevation_hi=math.radians(doc["elevation_hi_deg"]),
                            axis_step=math.radians(doc["axis_step_deg"]))


def save_dataset(ds: Dataset, out_dir: str) -> str:
    """Write PNGs plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, item in enumerate(ds.items):
        name = f"{i:06d}.png"
        save_png(item.image, os.path.join(out_dir, name))
        names.append(name)
    manifest = {"images": names, "resolution": ds.image_size,
                "background": list(ds.background),
                "pose_distribution": pose_dist_to_json(ds.pose_dist)}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_dataset(manifest_path: str) -> Dataset:
    if not os.path.exists(manifest_path):
        raise IOError(f"no such manifest: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    base = os.path.dirname(manifest_path)
    items = []
    for name in doc["images"]:
        img = load_png(os.path.join(base, name))
        if img.shape[0] != doc["resolution"] or img.shape[1] != doc["resolution"]:
            raise IOError(f"{name}: resolution {img.shape[:2]} does not match manifest")
        items.append(DatasetItem(image=img))
    return Dataset(items=items, image_size=doc["resolution"],
                   background=tuple(doc["background"]),
                   pose_dist=pose_dist_from_json(doc["pose_distribution"]),
                   provenance="png_dir")
