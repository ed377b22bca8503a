"""Analytic toy scenes rendered by exact ray casting.

These stand in for captured datasets at desk scale: colors and depths are
known in closed form, so keypoint depths can be synthesized without an SfM
pipeline and checked against ray/surface intersections.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..imaging import Image
from ..rays import CameraModel, camera_rays, pixel_directions
from .data import DatasetBundle, View, bind_keypoints, save_synthetic_dataset, write_keypoint_depths


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    palette: int = 0

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = -b - sq
        hit &= t > 0
        return np.where(hit, t, np.inf)

    def shade(self, p):
        q = (p - np.asarray(self.center)) / self.radius
        if self.palette == 0:
            rgb = [0.55 + 0.3 * q[:, 0], 0.45 + 0.25 * q[:, 1], 0.35 + 0.2 * q[:, 2]]
        else:
            rgb = [0.25 + 0.1 * q[:, 2], 0.6 + 0.2 * q[:, 0], 0.7 - 0.15 * q[:, 1]]
        return np.clip(np.stack(rgb, axis=-1), 0.0, 1.0)


@dataclass(frozen=True)
class Plane:
    """The plane ``dot(normal, x) = offset`` with a smooth tint."""

    normal: tuple
    offset: float

    def intersect(self, o, d):
        n = np.asarray(self.normal, dtype=np.float64)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o @ n) / denom
        return np.where((np.abs(denom) > 1e-12) & (t > 0), t, np.inf)

    def shade(self, p):
        return np.clip(np.stack([0.5 + 0.2 * np.sin(2 * p[:, 0]),
                                 0.5 + 0.2 * np.cos(2 * p[:, 1]),
                                 np.full(len(p), 0.4)], axis=-1), 0.0, 1.0)


@dataclass(frozen=True)
class Scene:
    objects: tuple
    background: float = 1.0
    box: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def cast(self, o, d):
        """First-hit distance (``inf`` on miss) and RGB (background on miss)."""
        o = np.broadcast_to(o, d.shape)
        best = np.full(d.shape[0], np.inf)
        rgb = np.full((d.shape[0], 3), self.background)
        for obj in self.objects:
            t = obj.intersect(o, d)
            closer = t < best
            if closer.any():
                best = np.where(closer, t, best)
                p = o[closer] + t[closer, None] * d[closer]
                rgb[closer] = obj.shade(p)
        return best, rgb


SCENES = {
    "spheres": Scene((Sphere((0.0, 0.0, 0.0), 0.6, 0), Sphere((0.5, 0.35, 0.45), 0.3, 1))),
    "plane": Scene((Plane((0.0, 0.0, 1.0), 0.0),), box=((-3.0, -3.0, -0.5), (3.0, 3.0, 0.5))),
}


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix looking from ``eye`` toward ``target`` (-z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, -fwd, eye
    return m


def orbit_cameras(n: int, size: int, radius: float = 3.5, angle_x: float = 0.6911,
                  phase: float = 0.0, elevations=(25.0, 45.0)) -> list[CameraModel]:
    fx = 0.5 * size / math.tan(0.5 * angle_x)
    cams = []
    for i in range(n):
        az = 2 * math.pi * (i + phase) / n
        el = math.radians(elevations[i % len(elevations)])
        eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az),
                                 math.sin(el)])
        cams.append(CameraModel.from_matrix(look_at(eye), size, size, fx))
    return cams


def render_view(scene: Scene, cam: CameraModel) -> View:
    o, d = camera_rays(cam)
    t, rgb = scene.cast(cam.translation, d)
    depth = np.where(np.isfinite(t), t, 0.0).reshape(cam.height, cam.width)
    return View(cam, Image(rgb.reshape(cam.height, cam.width, 3)), depth=depth)


def make_bundle(scene: str = "spheres", n_train: int = 8, n_test: int = 2, n_val: int = 1,
                size: int = 64, radius: float = 3.5, angle_x: float = 0.6911) -> DatasetBundle:
    sc = SCENES[scene]
    splits = {}
    for split, n, phase in (("train", n_train, 0.0), ("test", n_test, 0.37), ("val", n_val, 0.71)):
        if n == 0:
            continue
        cams = orbit_cameras(n, size, radius, angle_x, phase)
        views = [render_view(sc, c) for c in cams]
        for i, v in enumerate(views):
            v.name = f"r_{i}"
        splits[split] = views
    return DatasetBundle(splits, sc.box, sc.background == 1.0, None, angle_x, 1)


def sample_keypoints(bundle: DatasetBundle, fraction: float = 0.0, count: int | None = None,
                     seed: int = 0):
    """Depth records on surface pixels of the train views.

    ``fraction`` is relative to all train pixels (capped at the surface
    pixels available); ``count`` overrides it. Returns ``(image_ids, pixels, depths)``.
    """
    rng = np.random.default_rng(seed)
    cand = []
    for i, v in enumerate(bundle.train):
        if v.depth is None:
            raise ValueError("keypoint sampling needs analytic depth maps")
        ys, xs = np.nonzero(v.depth > 0)
        cand.append(np.stack([np.full(len(xs), i), xs, ys], axis=1))
    cand = np.concatenate(cand)
    total = sum(v.camera.width * v.camera.height for v in bundle.train)
    k = count if count is not None else int(round(fraction * total))
    k = min(k, len(cand))
    pick = np.sort(rng.choice(len(cand), size=k, replace=False))
    chosen = cand[pick]
    depths = np.array([bundle.train[i].depth[y, x] for i, x, y in chosen])
    return chosen[:, 0], chosen[:, 1:].astype(np.float64), depths


def attach_keypoints(bundle: DatasetBundle, fraction: float = 0.0, count: int | None = None,
                     seed: int = 0) -> DatasetBundle:
    ids, pix, depths = sample_keypoints(bundle, fraction, count, seed)
    bundle.keypoints = bind_keypoints(ids, pix, depths, [v.camera for v in bundle.train],
                                      bundle.factor)
    return bundle


def make_fixture(out_dir, scene: str = "spheres", n_train: int = 8, n_test: int = 2,
                 n_val: int = 1, size: int = 64, keypoint_fraction: float = 0.0,
                 seed: int = 0) -> Path:
    """Render an analytic scene to disk in the synthetic-dataset layout.

    When ``keypoint_fraction > 0`` a ``keypoints_train.txt`` file is written too.
    """
    out = Path(out_dir)
    bundle = make_bundle(scene, n_train, n_test, n_val, size)
    save_synthetic_dataset(bundle, out)
    if keypoint_fraction > 0:
        ids, pix, depths = sample_keypoints(bundle, keypoint_fraction, seed=seed)
        write_keypoint_depths(out / "keypoints_train.txt", ids, pix, depths)
    return out


def plane_keypoints(cam: CameraModel, plane_depth: float, n: int, seed: int = 0):
    """Pixels and ray-cast depths on a plane ``plane_depth`` ahead of ``cam``, facing it."""
    rng = np.random.default_rng(seed)
    u = rng.integers(0, cam.width, n).astype(np.float64)
    v = rng.integers(0, cam.height, n).astype(np.float64)
    axis = -cam.rotation[:, 2]
    plane = Plane(tuple(axis), float(axis @ cam.translation + plane_depth))
    t, _ = Scene((plane,)).cast(cam.translation, pixel_directions(cam, u, v))
    return np.stack([u, v], axis=1), t
