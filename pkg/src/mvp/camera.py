"""Pinhole cameras, Plücker ray maps, and deterministic synthetic scenes.

Conventions
-----------
* ``rotation`` maps camera axes to world axes (world-from-camera). Camera
  axes follow the x-right, y-down, z-forward layout.
* ``translation`` is the camera centre in world units, not ``-R^T t``.
* Pixel ``(u, v)`` has its centre at continuous image coordinate
  ``(u + 0.5, v + 0.5)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DimensionError

SCENE_MAGIC = b"MVPS"
SCENE_VERSION = 1
COV_FLOOR = 0.3  # px^2 added to every screen covariance


class BehindCamera(ValueError):
    """Raised when a point has non-positive camera-space depth."""


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, focal: float | None = None,
                up=(0.0, 1.0, 0.0)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        f = float(focal if focal is not None else width)
        return cls(R, eye, f, f, width / 2.0, height / 2.0, width, height)

    def transformed(self, rot: np.ndarray, shift: np.ndarray) -> "Camera":
        """Camera after the world moves by x -> rot @ x + shift."""
        return Camera(rot @ self.rotation, rot @ self.translation + shift, self.fx, self.fy,
                      self.cx, self.cy, self.width, self.height)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["rotation"]), np.array(d["translation"]), d["fx"], d["fy"],
                   d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def pixel_directions(cam: Camera) -> np.ndarray:
    """Unit world-space ray directions through every pixel centre, [H, W, 3]."""
    u = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    v = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    d = np.stack(np.broadcast_arrays(u[None, :], v[:, None], np.ones((1, 1))), axis=-1)
    d = d @ cam.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def plucker_map(cam: Camera) -> np.ndarray:
    """[H, W, 9] ray map: origin, unit direction, origin x direction."""
    d = pixel_directions(cam)
    o = np.broadcast_to(cam.translation, d.shape)
    return np.concatenate([o, d, np.cross(o, d)], axis=-1)


def make_posed_image(image: np.ndarray, rays: np.ndarray) -> np.ndarray:
    """Channels 0-2 RGB, 3-11 the ray map, in that order."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != rays.shape[:2] or image.shape[-1] != 3 or rays.shape[-1] != 9:
        raise DimensionError(f"image {image.shape} and ray map {rays.shape} do not match")
    return np.concatenate([image, rays], axis=-1)


def split_posed_image(posed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return posed[..., :3], posed[..., 3:]


def project_point(cam: Camera, p) -> tuple[float, float, float]:
    pc = cam.rotation.T @ (np.asarray(p, dtype=np.float64) - cam.translation)
    if pc[2] <= 0:
        raise BehindCamera(f"point at camera depth {pc[2]:.4g}")
    return (cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy, float(pc[2]))


# ------------------------------------------------------------ synthetic data


@dataclass
class Blobs:
    """Isotropic coloured Gaussian primitives in world space."""

    positions: np.ndarray  # [P, 3]
    scales: np.ndarray  # [P] standard deviation, world units
    colors: np.ndarray  # [P, 3] in (0, 1)
    opacities: np.ndarray  # [P] in (0, 1)

    def __len__(self):
        return len(self.scales)

    def transformed(self, rot: np.ndarray, shift: np.ndarray) -> "Blobs":
        return Blobs(self.positions @ rot.T + shift, self.scales.copy(), self.colors.copy(),
                     self.opacities.copy())


@dataclass
class SyntheticScene:
    cameras: list[Camera]
    images: list[np.ndarray]
    seed: int
    blobs: Blobs
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def posed_images(self, views=None) -> np.ndarray:
        views = range(self.n_views) if views is None else views
        return np.stack([make_posed_image(self.images[i], plucker_map(self.cameras[i]))
                         for i in views])


def splat_blobs(cam: Camera, blobs: Blobs, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Dense reference compositor for isotropic blobs, evaluated at every pixel.

    Uses the same EWA screen covariance (plus the 0.3 px^2 floor) as the
    differentiable renderer but no screen-space truncation.
    """
    H, W = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)
    img = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    if len(blobs) == 0:
        return img + bg
    pc = (blobs.positions - cam.translation) @ cam.rotation
    order = np.lexsort((np.arange(len(blobs)), pc[:, 2]))
    ys, xs = np.mgrid[0:H, 0:W] + 0.5
    for i in order:
        x, y, z = pc[i]
        if z <= 1e-2:
            continue
        # J J^T for isotropic sigma^2 I, since the camera rotation cancels
        s2 = blobs.scales[i] ** 2
        j = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2],
                      [0.0, cam.fy / z, -cam.fy * y / z**2]])
        cov = s2 * (j @ j.T) + COV_FLOOR * np.eye(2)
        inv = np.linalg.inv(cov)
        dx = xs - (cam.fx * x / z + cam.cx)
        dy = ys - (cam.fy * y / z + cam.cy)
        power = -0.5 * (inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy)
        a = blobs.opacities[i] * np.exp(power)
        img += (a * trans)[..., None] * blobs.colors[i]
        trans *= 1.0 - a
    return img + trans[..., None] * bg


def arc_cameras(n_views: int, H: int, W: int, radius: float = 3.5, arc_deg: float = 60.0,
                elevation: float = 0.6) -> list[Camera]:
    if n_views == 1:
        angles = np.zeros(1)
    else:
        angles = np.deg2rad(np.linspace(-arc_deg / 2, arc_deg / 2, n_views))
    cams = []
    for a in angles:
        eye = np.array([radius * np.sin(a), elevation, -radius * np.cos(a)])
        cams.append(Camera.look_at(eye, np.zeros(3), W, H, focal=1.1 * W))
    return cams


def synth_scene(seed: int, n_views: int, H: int, W: int, n_prims: int,
                divisor: int = 1, background=(0.0, 0.0, 0.0)) -> SyntheticScene:
    """Colored blobs around the origin seen from an arc of cameras.

    ``divisor`` is the model's total patch stride; H and W must be multiples.
    """
    if n_views < 1 or H < 1 or W < 1 or n_prims < 0:
        raise DimensionError(f"invalid scene extents views={n_views} H={H} W={W} prims={n_prims}")
    if H % divisor or W % divisor:
        raise DimensionError(f"scene size {H}x{W} must be divisible by {divisor}")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(n_prims, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    radius = rng.uniform(0.0, 1.0, size=(n_prims, 1)) ** (1 / 3)
    blobs = Blobs(
        positions=direction * radius * np.array([1.0, 0.7, 1.0]),
        scales=rng.uniform(0.15, 0.35, size=n_prims),
        colors=rng.uniform(0.05, 0.95, size=(n_prims, 3)),
        opacities=rng.uniform(0.6, 0.95, size=n_prims),
    )
    cams = arc_cameras(n_views, H, W)
    bg = np.asarray(background, dtype=np.float64)
    images = [splat_blobs(c, blobs, bg) for c in cams]
    return SyntheticScene(cams, images, seed, blobs, bg)


# ---------------------------------------------------------------- file I/O
#
# Binary container, all little-endian:
#   header  : 4s magic "MVPS", u32 version, u32 n_views, u32 H, u32 W,
#             u64 seed, u32 n_prims, 3 x f64 background
#   cameras : n_views x (9 f64 rotation row-major, 3 f64 centre,
#             4 f64 fx fy cx cy, 2 u32 width height)
#   blobs   : n_prims x (3 f64 position, f64 scale, 3 f64 colour, f64 opacity)
#   images  : n_views x H x W x 3 f64, row-major
_HEADER = struct.Struct("<4sIIIIQI3d")
_CAMERA = struct.Struct("<9d3d4d2I")
_BLOB = struct.Struct("<3dd3dd")


def save_scene(scene: SyntheticScene, path) -> None:
    path = Path(path)
    H, W = scene.images[0].shape[:2]
    parts = [_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, scene.n_views, H, W, scene.seed,
                          len(scene.blobs), *scene.background.tolist())]
    for c in scene.cameras:
        parts.append(_CAMERA.pack(*c.rotation.reshape(-1), *c.translation, c.fx, c.fy, c.cx,
                                  c.cy, c.width, c.height))
    b = scene.blobs
    for i in range(len(b)):
        parts.append(_BLOB.pack(*b.positions[i], b.scales[i], *b.colors[i], b.opacities[i]))
    for img in scene.images:
        parts.append(np.ascontiguousarray(img, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    sidecar = {"schema": 1, "seed": scene.seed, "height": H, "width": W,
               "background": scene.background.tolist(),
               "cameras": [c.to_dict() for c in scene.cameras]}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_scene(path) -> SyntheticScene:
    buf = Path(path).read_bytes()
    magic, version, n_views, H, W, seed, n_prims, *bg = _HEADER.unpack_from(buf, 0)
    if magic != SCENE_MAGIC or version != SCENE_VERSION:
        raise ValueError(f"{path}: not an MVP scene container")
    off = _HEADER.size
    cams = []
    for _ in range(n_views):
        vals = _CAMERA.unpack_from(buf, off)
        off += _CAMERA.size
        cams.append(Camera(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:12]), *vals[12:16],
                           int(vals[16]), int(vals[17])))
    rows = [_BLOB.unpack_from(buf, off + i * _BLOB.size) for i in range(n_prims)]
    off += n_prims * _BLOB.size
    arr = np.array(rows, dtype=np.float64).reshape(n_prims, 8)
    blobs = Blobs(arr[:, 0:3].copy(), arr[:, 3].copy(), arr[:, 4:7].copy(), arr[:, 7].copy())
    n = H * W * 3
    images = []
    for _ in range(n_views):
        images.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(H, W, 3).copy())
        off += 8 * n
    return SyntheticScene(cams, images, int(seed), blobs, np.array(bg))
