"""Pinhole cameras, ray generation and stratified sampling along rays.

Camera convention: camera-to-world pose, -z forward, +y up, pixel centers at
half-integer offsets (u + 0.5, v + 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if self.width < 1 or self.height < 1:
            raise DomainError(f"camera size must be >= 1, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise DomainError("camera rotation is not orthonormal")

    @classmethod
    def from_matrix(cls, c2w, width, height, fx, fy=None, cx=None, cy=None) -> "CameraModel":
        """Build a camera from a 3x4 or 4x4 camera-to-world matrix."""
        m = np.asarray(c2w, dtype=np.float64)
        return cls(
            width=int(width),
            height=int(height),
            fx=float(fx),
            fy=float(fx if fy is None else fy),
            cx=float(width / 2 if cx is None else cx),
            cy=float(height / 2 if cy is None else cy),
            rotation=m[:3, :3],
            translation=m[:3, 3],
        )

    @property
    def c2w(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def scaled(self, factor: int) -> "CameraModel":
        """The same camera viewing an image downsampled by ``factor``."""
        if self.width % factor or self.height % factor:
            raise DomainError(f"factor {factor} does not divide {self.width}x{self.height}")
        return CameraModel(
            self.width // factor,
            self.height // factor,
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            self.rotation,
            self.translation,
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise DomainError("ray direction must be unit length")
        if not 0 <= self.t_near < self.t_far:
            raise DomainError(f"need 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def pixel_directions(cam: CameraModel, u, v) -> np.ndarray:
    """World-space unit directions through pixel coordinates ``(u, v)`` (arrays)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack(
        [(u + 0.5 - cam.cx) / cam.fx, -(v + 0.5 - cam.cy) / cam.fy, -np.ones_like(u)], axis=-1
    )
    d = d_cam @ cam.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(cam: CameraModel, px, t_near: float, t_far: float) -> Ray:
    u, v = px
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise DomainError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    return Ray(cam.translation.copy(), pixel_directions(cam, u, v), t_near, t_far)


def camera_rays(cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Origins and directions for every pixel, row-major, each ``(H*W, 3)``."""
    v, u = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    dirs = pixel_directions(cam, u.ravel(), v.ravel())
    origins = np.broadcast_to(cam.translation, dirs.shape).copy()
    return origins, dirs


def stratified_samples(ray: Ray, n: int, jitter: np.random.Generator | None = None) -> np.ndarray:
    """Place one sample in each of ``n`` equal bins of ``[t_near, t_far)``.

    Without a generator every sample sits at its bin midpoint.
    """
    if n < 1:
        raise DomainError("need at least one sample per ray")
    return stratified_t(np.array([ray.t_near]), np.array([ray.t_far]), n, jitter)[0]


def stratified_t(t_near, t_far, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Vectorized stratified sampling: returns ``(R, n)`` t-values for ``R`` intervals.

    Zero-length intervals are allowed here (rays that miss the scene box); they
    yield repeated t-values and zero deltas.
    """
    if n < 1:
        raise DomainError("need at least one sample per ray")
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if rng is None:
        u = np.full((t_near.shape[0], n), 0.5)
    else:
        u = rng.random((t_near.shape[0], n))
        # keep samples strictly inside their bin
        u = np.minimum(u, 1.0 - 1e-9)
    span = (t_far - t_near)[:, None]
    return t_near[:, None] + (np.arange(n)[None, :] + u) / n * span


def ray_box_intersect(origins, dirs, box_min, box_max):
    """Slab test. Returns ``(t_enter, t_exit, hit)``; misses get ``t_enter == t_exit``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (np.asarray(box_min) - origins) * inv
        t1 = (np.asarray(box_max) - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_enter = np.maximum(lo.max(axis=-1), 0.0)
    t_exit = hi.min(axis=-1)
    hit = t_exit > t_enter
    t_exit = np.where(hit, t_exit, t_enter)
    return t_enter, t_exit, hit
