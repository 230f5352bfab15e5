"""Pinhole camera: projection, depth unprojection and depth regulation.

Pixel convention: column ``u`` and row ``v`` address the pixel whose center
sits at integer coordinates ``(u, v)``.

Depth map files: 16-byte header ``b"TGDM"``, ``width``, ``height`` and a
flag (0 relative, 1 absolute) as little-endian uint32, followed by
``height * width`` little-endian float32 values in row-major order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore.tensor import Value, as_value, where
from .errors import BehindCameraError, DimensionError, DomainError, EmptyCloudError, SchemaError

Z_MIN = 1e-4
_MAGIC = b"TGDM"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        fx, fy, cx, cy, w, h = (float(a) for a in arr)
        return cls(fx, fy, cx, cy, int(w), int(h))


@dataclass(frozen=True)
class CameraPose:
    """Base-to-camera transform: ``x_cam = R @ x_base + T``."""

    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.R, dtype=np.float64)
        if r.shape != (3, 3) or np.asarray(self.T).shape != (3,):
            raise DimensionError("camera pose needs R (3,3) and T (3,)")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("R must be a proper rotation")


@dataclass
class DepthMap:
    """H x W grid of nonnegative depths, relative (scale-free) or absolute (meters)."""

    values: np.ndarray
    relative: bool

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DimensionError("depth map must be 2-D")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("depth values must be finite and nonnegative")


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera pose at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraPose(R, -R @ eye)


def regulate_depth(D, scale):
    """Absolute depth ``scale * D``; ``scale`` is a positive scalar per map."""
    if isinstance(D, DepthMap):
        lam = float(scale.data if isinstance(scale, Value) else scale)
        if not lam > 0:
            raise DomainError(f"depth regulator must be positive, got {lam}")
        return DepthMap(D.values * lam, relative=False)
    lam = as_value(scale)
    if not (lam.data > 0).all():
        raise DomainError("depth regulator must be positive")
    D = as_value(D)
    return D * lam.reshape(*lam.shape, *([1] * (D.ndim - lam.ndim)))


def project(points, K, strict=True):
    """Pixel coordinates ``(u, v)`` of camera-frame ``points`` (shape ``(..., 3)``).

    With ``strict`` a point at or behind the near plane raises
    :class:`BehindCameraError`; otherwise its depth is clamped to ``Z_MIN``
    (used for raw network outputs, where the clamp only limits the damage).
    """
    numeric = not isinstance(points, Value)
    pts = as_value(points)
    if pts.shape[-1] != 3:
        raise DimensionError(f"points must have a trailing dimension of 3, got {pts.shape}")
    z = pts[..., 2:3]
    bad = z.data[..., 0] <= Z_MIN
    if bad.any():
        if strict:
            raise BehindCameraError(np.flatnonzero(bad.reshape(-1)), Z_MIN)
        z = where(z.data > Z_MIN, z, Z_MIN)
    uv = pts[..., 0:2] / z * np.array([K.fx, K.fy]) + np.array([K.cx, K.cy])
    return uv.data if numeric else uv


def pixel_rays(K, rows, cols):
    """Camera-frame rays ``((u-cx)/fx, (v-cy)/fy, 1)`` for pixel indices."""
    rows, cols = np.asarray(rows), np.asarray(cols)
    return np.stack([(cols - K.cx) / K.fx, (rows - K.cy) / K.fy, np.ones(rows.shape)], axis=-1)


def unproject(depth, K, mask):
    """Camera-frame points for the masked pixels of an absolute depth map.

    ``depth`` is an (H, W) :class:`DepthMap`, array or Value; points come out
    in row-major pixel order, shape ``(k, 3)``.
    """
    if isinstance(depth, DepthMap):
        depth = depth.values.astype(np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(depth.shape):
        raise DimensionError(f"mask shape {mask.shape} does not match depth {depth.shape}")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyCloudError("mask selects no pixels")
    numeric = not isinstance(depth, Value)
    d = as_value(depth)[rows, cols]
    pts = d.reshape(-1, 1) * pixel_rays(K, rows, cols)
    return pts.data if numeric else pts


def unproject_pixels(depth, K, rows, cols):
    """Batched unprojection at given pixels.

    ``depth`` has shape ``(B, H, W)``; ``rows``/``cols`` are integer arrays of
    shape ``(B, P)``.  Returns ``(B, P, 3)``.
    """
    depth = as_value(depth)
    b = np.arange(depth.shape[0])[:, None]
    d = depth[b, rows, cols]
    return d.reshape(*d.shape, 1) * pixel_rays(K, rows, cols)


def write_depth_map(path, dmap):
    h, w = dmap.values.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", w, h, 0 if dmap.relative else 1))
        fh.write(np.ascontiguousarray(dmap.values, dtype="<f4").tobytes())


def read_depth_map(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise SchemaError("not a depth map file (bad magic)", path=str(path))
    w, h, flag = struct.unpack("<III", raw[4:16])
    if flag not in (0, 1):
        raise SchemaError(f"bad relative/absolute flag {flag}", path=str(path))
    body = raw[16:]
    if len(body) != 4 * w * h:
        raise SchemaError(f"expected {4 * w * h} bytes of depth data, found {len(body)}", path=str(path))
    values = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
    return DepthMap(values, relative=(flag == 0))


__all__ = [
    "Z_MIN", "Intrinsics", "CameraPose", "DepthMap", "look_at", "regulate_depth", "project",
    "pixel_rays", "unproject", "unproject_pixels", "write_depth_map", "read_depth_map",
]
