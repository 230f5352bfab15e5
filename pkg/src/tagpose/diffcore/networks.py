"""Toy networks standing in for the pretrained backbones and prediction heads.

Both backbones read a four-channel :class:`SceneImage` (relative depth,
silhouette, x and y pixel coordinates).  Per-pixel encoders only run on the
silhouette pixels gathered into a :class:`PixelSet`; global features come
from masked mean pooling plus spatial soft-argmax pooling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import Intrinsics, pixel_rays, unproject_pixels
from ..errors import DimensionError
from ..kinematics import keypoints_from_config
from .nn import MLP, Linear, Module
from .tensor import as_value, concat, nearest_rotation, pad

N_CHANNELS = 4


@dataclass
class SceneImage:
    """Channel grid ``(C, H, W)``: relative depth, mask, x in [-1, 1], y in [-1, 1]."""

    channels: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[0] != N_CHANNELS:
            raise DimensionError(f"scene image must be ({N_CHANNELS}, H, W), got {self.channels.shape}")
        if not np.isfinite(self.channels).all():
            raise ValueError("scene image values must be finite")
        if np.abs(self.channels[2:]).max() > 1.0:
            raise ValueError("coordinate channels must lie in [-1, 1]")

    @property
    def mask(self):
        return self.channels[1] > 0.5


@dataclass
class PixelSet:
    """Silhouette pixels of a batch, padded to a common length.

    ``weight`` is 1 for real pixels and 0 for padding; ``count`` is the full
    silhouette size before any subsampling.
    """

    rows: np.ndarray
    cols: np.ndarray
    weight: np.ndarray
    count: np.ndarray

    @classmethod
    def from_masks(cls, masks, max_points=256):
        masks = np.asarray(masks, dtype=bool)
        picks, counts = [], []
        for m in masks:
            r, c = np.nonzero(m)
            counts.append(len(r))
            if max_points is not None and len(r) > max_points:
                sel = np.linspace(0, len(r) - 1, max_points).round().astype(np.int64)
                r, c = r[sel], c[sel]
            picks.append((r, c))
        width = max(1, max(len(r) for r, _ in picks))
        rows = np.zeros((len(masks), width), dtype=np.int64)
        cols = np.zeros_like(rows)
        weight = np.zeros(rows.shape)
        for i, (r, c) in enumerate(picks):
            rows[i, :len(r)] = r
            cols[i, :len(c)] = c
            weight[i, :len(r)] = 1.0
        return cls(rows, cols, weight, np.asarray(counts, dtype=np.float64))

    def gather(self, grid):
        """``grid[b, :, rows, cols]`` for a ``(B, C, H, W)`` array -> ``(B, P, C)``."""
        b = np.arange(grid.shape[0])[:, None]
        return grid[b, :, self.rows, self.cols]


def as_batch(images):
    if isinstance(images, SceneImage):
        images = images.channels[None]
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return images


def _masked_mean(h, weight):
    w = weight[..., None]
    return (h * w).sum(axis=1) / np.maximum(w.sum(axis=1), 1.0)


def _soft_argmax(scores, coords, weight):
    """Softmax over valid points of ``scores`` (B,P,J); expectation of ``coords`` (B,P,C)."""
    neg = np.where(weight > 0, 0.0, -1e9)[..., None]
    shifted = scores + neg
    shifted = shifted - shifted.data.max(axis=1, keepdims=True)
    e = shifted.exp() * weight[..., None]
    attn = e / e.sum(axis=1, keepdims=True)
    # (B,J,P) @ (B,P,C) -> (B,J,C)
    return attn.swapaxes(1, 2) @ coords


class PointPool(Module):
    """Shared per-point MLP followed by max, mean and soft-argmax pooling."""

    def __init__(self, n_in, width, n_attn, n_coords, rng):
        super().__init__()
        self.encoder = MLP([n_in, width, 2 * width], rng)
        self.attn = Linear(2 * width, n_attn, rng)
        self.out_dim = 4 * width + n_coords * n_attn

    def __call__(self, feats, coords, weight):
        h = self.encoder(feats).relu() * weight[..., None]
        pooled = concat([h.max(axis=1), _masked_mean(h, weight)], axis=-1)
        located = _soft_argmax(self.attn(h), coords, weight)
        return concat([pooled, located.reshape(located.shape[0], -1)], axis=-1)


def scale_free_points(images, pixels, K):
    """Relative-depth points ``q = d * ray`` with their centroid and spread.

    ``q`` equals the camera-frame cloud divided by the median depth, so it
    is known from the image alone; the depth regulator supplies the scale.
    Returns ``(q, centroid, log_spread)``.
    """
    d = pixels.gather(images[:, :1])[..., 0]
    q = d[..., None] * pixel_rays(K, pixels.rows, pixels.cols)
    w = pixels.weight[..., None]
    total = np.maximum(w.sum(axis=1), 1.0)
    c = (q * w).sum(axis=1) / total
    spread = np.sqrt((((q - c[:, None]) ** 2).sum(-1, keepdims=True) * w).sum(axis=1) / total)
    return q, c, np.log(np.maximum(spread, 1e-6))


class Backbone2D(Module):
    """Image -> global feature vector ``f``.

    The last four entries of ``f`` are the scale-free centroid and log
    spread of the silhouette points; the heads use them as anchors.
    """

    ANCHOR = 4

    def __init__(self, rng, feature_dim=128, width=64, n_attn=16):
        super().__init__()
        self.pool = PointPool(6, width, n_attn, 5, rng)
        self.proj = Linear(self.pool.out_dim + 4, feature_dim, rng)
        self.feature_dim = feature_dim
        self.out_dim = feature_dim + self.ANCHOR

    def __call__(self, images, pixels=None, K=None):
        images = as_batch(images)
        if images.shape[1] != N_CHANNELS:
            raise DimensionError(f"expected {N_CHANNELS} channels, got {images.shape[1]}")
        if pixels is None:
            pixels = PixelSet.from_masks(images[:, 1] > 0.5)
        if K is None:
            h, w = images.shape[2:]
            K = Intrinsics(fx=w, fy=h, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h)
        q, c, log_s = scale_free_points(images, pixels, K)
        local = (q - c[:, None]) / np.exp(log_s)[:, None]
        grid = pixels.gather(images)
        feats = np.concatenate([local, grid[..., [0, 2, 3]]], axis=-1)
        coords = np.concatenate([local, grid[..., [2, 3]]], axis=-1)
        pooled = self.pool(as_value(feats), coords, pixels.weight)
        g = self.proj(concat([pooled, c, log_s], axis=-1)).relu()
        return concat([g, c, log_s], axis=-1)


class Backbone3D(Module):
    """Image -> relative depth map (softplus output, median 1 over the silhouette)."""

    def __init__(self, rng, hidden=8):
        super().__init__()
        self.param("kernel", rng.standard_normal((3, 3, N_CHANNELS, hidden)) * np.sqrt(2.0 / (9 * N_CHANNELS)))
        self.param("bias", np.zeros(hidden))
        self.out = Linear(hidden, 1, rng)
        # start near the identity on the relative-depth channel
        self.kernel.data[1, 1, 0, :] += 1.0
        self.out.weight.data[:] = 1.0 / hidden
        self.out.bias.data[:] = 0.0

    def raw(self, images):
        images = as_batch(images)
        if images.shape[1] != N_CHANNELS:
            raise DimensionError(f"expected {N_CHANNELS} channels, got {images.shape[1]}")
        x = as_value(np.transpose(images, (0, 2, 3, 1)))
        _, h, w, _ = x.shape
        xp = pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        acc = None
        for dy in range(3):
            for dx in range(3):
                term = xp[:, dy:dy + h, dx:dx + w, :] @ self.kernel[dy, dx]
                acc = term if acc is None else acc + term
        hidden = (acc + self.bias).relu()
        return self.out(hidden).softplus().reshape(x.shape[0], h, w)

    def __call__(self, images):
        images = as_batch(images)
        raw = self.raw(images)
        masks = images[:, 1] > 0.5
        idx_b, idx_r, idx_c = [], [], []
        for b, m in enumerate(masks):
            if not m.any():
                m = np.ones_like(m)
            r, c = np.nonzero(m)
            order = np.argsort(raw.data[b][r, c], kind="stable")
            k = len(order)
            mids = order[[(k - 1) // 2, k // 2]]
            idx_b.append([b, b])
            idx_r.append(r[mids])
            idx_c.append(c[mids])
        med = raw[np.array(idx_b), np.array(idx_r), np.array(idx_c)].mean(axis=1)
        return raw / med.reshape(-1, 1, 1)


class _Head(Module):
    def __init__(self, n_in, n_out, rng, hidden):
        super().__init__()
        self.mlp = MLP([n_in, hidden, n_out], rng, final_gain=0.1)
        self.buffer("offset", np.zeros(n_out))
        self.buffer("scale", np.ones(n_out))

    def __call__(self, x):
        return self.mlp(x) * self.scale + self.offset

    def fit_stats(self, targets):
        flat = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
        self.set_buffer("offset", flat.mean(0))
        self.set_buffer("scale", flat.std(0) + 1e-3)


class Heads2D(Module):
    """``f`` -> ``{p, R, T, kp2, kp3, lam}`` for the 2D branch.

    ``lam`` is a softplus output (the metric spread of the silhouette points)
    divided by their scale-free spread, so it is strictly positive and the
    head never has to extrapolate in camera distance.  ``T`` and ``kp3`` are
    ``lam * (centroid + offset)``: the heads predict scale-free offsets from
    the silhouette centroid carried in ``f``.
    """

    def __init__(self, n_joints, n_keypoints, rng, feature_dim=128, hidden=256):
        super().__init__()
        self.n, self.m = n_joints, n_keypoints
        n_in = feature_dim + Backbone2D.ANCHOR
        self.p = _Head(n_in, n_joints, rng, hidden)
        self.R = _Head(n_in, 9, rng, hidden)
        self.T = _Head(n_in, 3, rng, hidden)
        self.kp2 = _Head(n_in, 2 * n_keypoints, rng, hidden)
        self.kp3 = _Head(n_in, 3 * n_keypoints, rng, hidden)
        self.lam = _Head(n_in, 1, rng, hidden)
        self.R.offset[:] = np.eye(3).reshape(-1)
        self.T.offset[:] = [0.0, 0.0, 0.0]

    def __call__(self, f):
        b = f.shape[0]
        A = Backbone2D.ANCHOR
        c = f[:, -A:-1]
        lam = (self.lam(f).softplus() * (-f[:, -1:]).exp()).reshape(b)
        scale = lam.reshape(b, 1)
        T = (c + self.T(f)) * scale
        kp3 = (c.reshape(b, 1, 3) + self.kp3(f).reshape(b, self.m, 3)) * scale.reshape(b, 1, 1)
        return {
            "p": self.p(f),
            "R": nearest_rotation(self.R(f).reshape(b, 3, 3)),
            "T": T,
            "kp2": self.kp2(f).reshape(b, self.m, 2),
            "kp3": kp3,
            "lam": lam,
        }


class Heads3D(Module):
    """Absolute depth with camera pose -> ``{p, kp3}`` for the 3D branch.

    The silhouette pixels of ``D'`` are unprojected and moved into the robot
    base frame with ``(R, T)``; a point encoder pools them, the flattened
    pose is appended, and the keypoint output (base frame) is mapped back to
    the camera frame.
    """

    def __init__(self, n_joints, n_keypoints, rng, width=64, n_attn=16, hidden=256):
        super().__init__()
        self.n, self.m = n_joints, n_keypoints
        self.pool = PointPool(3, width, n_attn, 3, rng)
        self.p = _Head(self.pool.out_dim + 12, n_joints, rng, hidden)
        self.kp = _Head(self.pool.out_dim + 12, 3 * n_keypoints, rng, hidden)

    def __call__(self, depth_abs, R, T, K, pixels):
        depth_abs, R, T = as_value(depth_abs), as_value(R), as_value(T)
        b = depth_abs.shape[0]
        cam = unproject_pixels(depth_abs, K, pixels.rows, pixels.cols)
        base = (cam - T.reshape(b, 1, 3)) @ R
        pooled = self.pool(base * 4.0, base, pixels.weight)
        g = concat([pooled, R.reshape(b, 9), T], axis=-1)
        kp_base = self.kp(g).reshape(b, self.m, 3)
        kp_cam = kp_base @ R.swapaxes(1, 2) + T.reshape(b, 1, 3)
        return {"p": self.p(g), "kp3": kp_cam}


class TagNetworks(Module):
    """All trainable edges of the graph, with a shared seed."""

    def __init__(self, n_joints, n_keypoints, seed=0, feature_dim=128):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.backbone_2d = Backbone2D(rng, feature_dim=feature_dim)
        self.backbone_3d = Backbone3D(rng)
        self.heads_2d = Heads2D(n_joints, n_keypoints, rng, feature_dim=feature_dim)
        self.heads_3d = Heads3D(n_joints, n_keypoints, rng)

    def calibrate(self, model, K, images, p, R, T, kp2, kp3, lam):
        """Set output offsets/scales of the heads from label statistics."""
        h2, h3 = self.heads_2d, self.heads_3d
        images = as_batch(images)
        _, c, log_s = scale_free_points(images, PixelSet.from_masks(images[:, 1] > 0.5), K)
        lam = np.asarray(lam, dtype=np.float64)
        spread = lam * np.exp(log_s[:, 0])
        h2.p.fit_stats(p)
        h3.p.fit_stats(p)
        h2.R.fit_stats(R)
        h2.T.fit_stats(T / lam[:, None] - c)
        h2.kp2.fit_stats(kp2)
        h2.kp3.fit_stats(kp3 / lam[:, None, None] - c[:, None])
        # softplus(offset + scale * z) ~ metric spread for z ~ N(0, 1)
        mean, std = spread.mean(), spread.std() + 1e-3
        offset = np.log(np.expm1(mean))
        h2.lam.set_buffer("offset", np.array([offset]))
        h2.lam.set_buffer("scale", np.array([std * (1.0 + np.exp(-offset))]))
        h3.kp.fit_stats(keypoints_from_config(model, p, np.eye(3), np.zeros(3)))


__all__ = [
    "SceneImage", "PixelSet", "Backbone2D", "Backbone3D", "Heads2D", "Heads3D", "TagNetworks",
]
