"""Synthetic scenes: state sampling, z-buffer rendering and dataset files.

Dataset directory layout
------------------------
``manifest``
    ``key = value`` text: ``format``, ``model_hash``, ``seed``, ``split``,
    ``count``, ``labels`` (1 if ground truth is stored, 0 if stripped),
    ``intrinsics`` (fx fy cx cy width height).
``record_NNNNNN.bin``
    Little-endian.  32-byte header: magic ``b"TGSC"`` then uint32 ``version``,
    ``index``, ``height``, ``width``, ``n_joints``, ``n_keypoints``,
    ``n_surface``; then uint32 CRC-32 of the payload and the payload:
    float32 ground-truth depth (H*W), float32 observed relative depth (H*W),
    packed mask bits (ceil(H*W/8) bytes, row-major, MSB first), then float64
    ``p`` (n), ``R`` (9), ``T`` (3), intrinsics (6), ``kp2`` (m*2),
    ``kp3`` (m*3), ``pts`` (s*3).
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import Z_MIN, DepthMap, Intrinsics, look_at, pixel_rays, project, unproject
from .diffcore.tensor import Value
from .errors import ChecksumError, ConfigError, DatasetError, EmptyCloudError, StaleDatasetError
from .kinematics import densify_surface, keypoints_from_config, sample_config, surface_cloud_from_config

logger = logging.getLogger(__name__)

DEFAULT_INTRINSICS = Intrinsics(fx=64.0, fy=64.0, cx=31.5, cy=31.5, width=64, height=64)
DENSIFY = 4
MAX_REJECTIONS = 1000
CAMERA_TRIES = 50
_RECORD_MAGIC = b"TGSC"
_RECORD_VERSION = 1


@dataclass(frozen=True)
class SplitConfig:
    radius: tuple
    elevation_deg: tuple
    azimuth_deg: tuple = (-45.0, 45.0)
    depth_noise: float = 0.0


SPLITS = {
    "in-dist": SplitConfig(radius=(0.8, 1.2), elevation_deg=(10.0, 60.0)),
    "ood": SplitConfig(radius=(1.2, 2.0), elevation_deg=(0.0, 80.0), depth_noise=0.01),
}


@dataclass
class Scene:
    """One rendered sample with its full ground truth.

    ``observed`` is the relative-depth channel the networks see (noisy for
    the ood split, zero off the mask); ``depth`` is the exact absolute depth.
    """

    p: np.ndarray
    R: np.ndarray
    T: np.ndarray
    K: Intrinsics
    depth: np.ndarray
    observed: np.ndarray
    mask: np.ndarray
    kp2: np.ndarray
    kp3: np.ndarray
    pts: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def depth_map(self):
        return DepthMap(self.depth, relative=False)

    def image(self):
        return scene_image(self.observed, self.mask)


def scene_image(observed, mask):
    """Four-channel (C, H, W) image: relative depth, silhouette, x and y in [-1, 1]."""
    h, w = mask.shape
    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij")
    return np.stack([observed.astype(np.float64), mask.astype(np.float64), xs, ys])


def workspace_centroid(model, steps=5):
    grids = [np.linspace(j.lower, j.upper, steps) for j in model.joints]
    configs = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, model.n_joints)
    pts = surface_cloud_from_config(model, configs, np.eye(3), np.zeros(3))
    return pts.reshape(-1, 3).mean(axis=0)


_DENSE_CACHE = {}


def _dense_model(model, densify):
    key = (model.digest(), densify)
    if key not in _DENSE_CACHE:
        links, offsets = densify_surface(model, densify)
        _DENSE_CACHE[key] = replace(model, surface_links=links, surface_offsets=offsets)
    return _DENSE_CACHE[key]


def render_depth(model, p, R, T, K, densify=DENSIFY):
    """Z-buffer splat of the densified surface samples.

    Each sample lands on its nearest pixel; the nearest depth wins.  Returns
    an absolute :class:`DepthMap` (float32 values, zero off the robot) and
    the boolean mask of touched pixels.
    """
    dense = _dense_model(model, densify)
    pts = surface_cloud_from_config(dense, p, R, T)
    front = pts[:, 2] > Z_MIN
    pts = pts[front]
    zbuf = np.full(K.height * K.width, np.inf)
    if len(pts):
        uv = project(pts, K)
        col = np.rint(uv[:, 0]).astype(np.int64)
        row = np.rint(uv[:, 1]).astype(np.int64)
        inside = (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
        np.minimum.at(zbuf, row[inside] * K.width + col[inside], pts[inside, 2])
    mask = np.isfinite(zbuf).reshape(K.height, K.width)
    if not mask.any():
        raise EmptyCloudError("robot is entirely behind or outside the camera view")
    depth = np.where(mask, zbuf.reshape(K.height, K.width), 0.0).astype(np.float32)
    return DepthMap(depth, relative=False), mask


def pixel_footprint(K, z):
    """Largest lateral offset between a point and its pixel-center ray at depth ``z``."""
    return 0.5 * z * np.hypot(1.0 / K.fx, 1.0 / K.fy)


def max_sample_gap(model):
    """Largest distance between consecutive surface samples on one link."""
    same = model.surface_links[1:] == model.surface_links[:-1]
    if not same.any():
        return 0.0
    d = np.linalg.norm(np.diff(model.surface_offsets, axis=0), axis=1)
    return float(d[same].max())


def quantization_bound(model, K, z_max):
    """Squared-distance bound on the unprojected-to-surface nearest neighbour.

    An unprojected pixel sits within one pixel footprint of the densified
    sample that won the pixel, which is itself within half a sample gap of
    an original surface sample.
    """
    return (pixel_footprint(K, z_max) + 0.5 * max_sample_gap(model)) ** 2


def _relative_channel(depth, mask, noise, rng):
    obs = depth.astype(np.float64)
    if noise > 0:
        obs = obs + noise * rng.standard_normal(obs.shape)
        obs = np.maximum(obs, Z_MIN)
    med = np.median(obs[mask])
    return np.where(mask, obs / med, 0.0).astype(np.float32)


def sample_scene(model, seed, split="in-dist", K=DEFAULT_INTRINSICS, centroid=None):
    """Draw a scene whose keypoints and surface samples are all visible.

    Rejection redraws only the camera while ``p`` is kept, so the joint
    angles stay uniform within their limits.  A configuration is dropped
    only after ``CAMERA_TRIES`` failed viewpoints.
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {sorted(SPLITS)}")
    cfg = SPLITS[split]
    rng = np.random.default_rng(seed)
    target = workspace_centroid(model) if centroid is None else centroid
    p, tries = None, 0
    for _ in range(MAX_REJECTIONS):
        if p is None or tries == CAMERA_TRIES:
            p, tries = sample_config(model, rng), 0
        tries += 1
        r = rng.uniform(*cfg.radius)
        el, az = np.radians(rng.uniform(*cfg.elevation_deg)), np.radians(rng.uniform(*cfg.azimuth_deg))
        eye = target + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        pose = look_at(eye, target)
        kp3 = keypoints_from_config(model, p, pose.R, pose.T)
        pts = surface_cloud_from_config(model, p, pose.R, pose.T)
        if (kp3[:, 2] <= Z_MIN).any() or (pts[:, 2] <= Z_MIN).any():
            continue
        kp2 = project(kp3, K)
        if not (_inside(kp2, K) and _inside(project(pts, K), K)):
            continue
        dmap, mask = render_depth(model, p, pose.R, pose.T, K)
        if not surface_visible(model, pts, dmap, mask, K):
            continue
        observed = _relative_channel(dmap.values, mask, cfg.depth_noise, rng)
        return Scene(p=p, R=pose.R, T=pose.T, K=K, depth=dmap.values, observed=observed, mask=mask,
                     kp2=kp2, kp3=kp3, pts=pts, meta={"split": split, "radius": r})
    raise ConfigError(f"{MAX_REJECTIONS} consecutive rejections; camera ranges cannot frame the robot")


def surface_visible(model, pts, dmap, mask, K):
    """True when every surface sample lies within the quantization radius of
    some unprojected robot pixel, i.e. no sample is hidden behind another link."""
    cloud = unproject(dmap, K, mask)
    radius2 = quantization_bound(model, K, float(pts[:, 2].max()))
    d2 = ((pts[:, None, :] - cloud[None, :, :]) ** 2).sum(-1).min(axis=1)
    return bool((d2 <= radius2).all())


def _inside(uv, K):
    return bool(((uv >= 0.0) & (uv <= np.array([K.width - 1.0, K.height - 1.0]))).all())


def scene_seed(seed, index):
    return np.random.SeedSequence([int(seed), int(index)])


def generate(model, split, count, seed, K=DEFAULT_INTRINSICS):
    centroid = workspace_centroid(model)
    return [sample_scene(model, scene_seed(seed, i), split, K, centroid) for i in range(count)]


def oracle_graph(model, scenes, max_points=None):
    """Alignment graph with every node set from ground truth.

    Relative depth is the exact depth over its median and the regulator is
    that median, so ``3D:D_abs`` reproduces the rendered depth.  ``2D:f``
    holds the scene images.  ``max_points=None`` unprojects every robot pixel.
    """
    from .diffcore.networks import PixelSet
    from .taggraph import tag_structure

    K = scenes[0].K
    masks = np.stack([s.mask for s in scenes])
    depth = np.stack([s.depth.astype(np.float64) for s in scenes])
    lam = np.array([np.median(d[m]) for d, m in zip(depth, masks)])
    p, R, T = (np.stack([getattr(s, k) for s in scenes]) for k in ("p", "R", "T"))
    kp3 = np.stack([s.kp3 for s in scenes])
    pixels = PixelSet.from_masks(masks, max_points=max_points)
    b = np.arange(len(scenes))[:, None]
    unproj = depth[b, pixels.rows, pixels.cols][..., None] * pixel_rays(K, pixels.rows, pixels.cols)
    values = {
        "f": np.stack([s.image() for s in scenes]),
        "lam": lam,
        "D": depth / lam[:, None, None],
        "D_abs": depth,
        "p": p, "R": R, "T": T,
        "kp2": np.stack([s.kp2 for s in scenes]),
        "kp3": kp3,
        "kp3_fk": keypoints_from_config(model, p, R, T),
        "kp2_proj": project(kp3, K),
        "pts_fk": surface_cloud_from_config(model, p, R, T),
        "pts_unproj": unproj,
    }
    graph = tag_structure()
    graph.batch, graph.pixels, graph.K, graph.model = len(scenes), pixels, K, model
    for nid, node in graph.nodes.items():
        node.value = Value(values[node.kind], requires_grad=False)
    return graph


# ---------------------------------------------------------------------------
# persistence


def _pack(scene, index, labels=True):
    h, w = scene.mask.shape
    n, m, s = len(scene.p), len(scene.kp3), len(scene.pts)

    def lab(a):
        a = np.asarray(a, dtype=np.float64)
        return a if labels else np.zeros_like(a)

    payload = b"".join([
        np.ascontiguousarray(lab(scene.depth), dtype="<f4").tobytes(),
        np.ascontiguousarray(scene.observed, dtype="<f4").tobytes(),
        np.packbits(scene.mask.reshape(-1)).tobytes(),
        lab(scene.p).astype("<f8").tobytes(),
        lab(scene.R).astype("<f8").reshape(-1).tobytes(),
        lab(scene.T).astype("<f8").tobytes(),
        scene.K.as_array().astype("<f8").tobytes(),
        lab(scene.kp2).astype("<f8").reshape(-1).tobytes(),
        lab(scene.kp3).astype("<f8").reshape(-1).tobytes(),
        lab(scene.pts).astype("<f8").reshape(-1).tobytes(),
    ])
    header = _RECORD_MAGIC + struct.pack("<7I", _RECORD_VERSION, index, h, w, n, m, s)
    return header + struct.pack("<I", zlib.crc32(payload)) + payload


def _unpack(raw, index, path=None):
    if raw[:4] != _RECORD_MAGIC:
        raise DatasetError(f"record {index}: bad magic")
    version, idx, h, w, n, m, s = struct.unpack("<7I", raw[4:32])
    if version != _RECORD_VERSION or idx != index:
        raise DatasetError(f"record {index}: unexpected version/index ({version}, {idx})")
    (crc,) = struct.unpack("<I", raw[32:36])
    payload = raw[36:]
    if zlib.crc32(payload) != crc:
        raise ChecksumError(index, path)
    off = 0

    def take(nbytes):
        nonlocal off
        chunk = payload[off:off + nbytes]
        off += nbytes
        return chunk

    depth = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float32)
    observed = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float32)
    mask = np.unpackbits(np.frombuffer(take((h * w + 7) // 8), dtype=np.uint8))[: h * w]
    mask = mask.reshape(h, w).astype(bool)

    def f8(count):
        return np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)

    p = f8(n)
    R = f8(9).reshape(3, 3)
    T = f8(3)
    K = Intrinsics.from_array(f8(6))
    kp2 = f8(2 * m).reshape(m, 2)
    kp3 = f8(3 * m).reshape(m, 3)
    pts = f8(3 * s).reshape(s, 3)
    if off != len(payload):
        raise DatasetError(f"record {index}: {len(payload) - off} trailing bytes")
    return Scene(p=p, R=R, T=T, K=K, depth=depth, observed=observed, mask=mask,
                 kp2=kp2, kp3=kp3, pts=pts)


def record_name(index):
    return f"record_{index:06d}.bin"


def write_dataset(scenes, path, model, seed, split, labels=True):
    """Write scenes plus a manifest; ``labels=False`` zeroes all ground truth."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    K = scenes[0].K if scenes else DEFAULT_INTRINSICS
    for i, scene in enumerate(scenes):
        (path / record_name(i)).write_bytes(_pack(scene, i, labels))
    intr = " ".join(repr(float(v)) for v in K.as_array())
    manifest = (
        f"format = tagpose-dataset-{_RECORD_VERSION}\n"
        f"model_hash = {model.digest()}\n"
        f"seed = {seed}\n"
        f"split = {split}\n"
        f"count = {len(scenes)}\n"
        f"labels = {1 if labels else 0}\n"
        f"intrinsics = {intr}\n"
    )
    (path / "manifest").write_text(manifest)
    return path


def read_manifest(path):
    path = Path(path)
    mpath = path / "manifest"
    if not mpath.is_file():
        raise DatasetError(f"no dataset manifest at {mpath}")
    out = {}
    for line in mpath.read_text().splitlines():
        if line.strip():
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    out["count"] = int(out["count"])
    out["labels"] = bool(int(out.get("labels", "1")))
    return out


def read_dataset(path, model=None):
    """Read every record; a model whose hash differs from the manifest is rejected."""
    path = Path(path)
    manifest = read_manifest(path)
    if model is not None and manifest["model_hash"] != model.digest():
        raise StaleDatasetError(f"{path}: dataset was generated for another robot model")
    scenes = []
    for i in range(manifest["count"]):
        rpath = path / record_name(i)
        if not rpath.is_file():
            raise DatasetError(f"missing record {i} ({rpath})")
        scene = _unpack(rpath.read_bytes(), i, str(rpath))
        scene.meta = {"split": manifest["split"], "labels": manifest["labels"]}
        scenes.append(scene)
    return scenes, manifest
