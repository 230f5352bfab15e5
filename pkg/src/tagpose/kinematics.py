"""Revolute-chain robot description, forward kinematics and point generators.

Kinematic convention: joint ``i`` rotates about ``axis`` (expressed in frame
``i-1``) at the origin of frame ``i-1``; the fixed origin transform then
carries the result to frame ``i``::

    frame_i = frame_{i-1} @ Rot(axis_i, p_i) @ [origin_rotation_i | origin_translation_i]

Frame 0 is the robot base.  A model with ``n`` joints has ``n + 1`` frames.

Robot description files
-----------------------
Plain text, ``#`` comments, one ``[section]`` header per record and
``key = value`` lines below it.  Vectors are whitespace separated numbers.
Sections and keys::

    [joint]            name, axis (3), origin_translation (3),
                       origin_rotation (9, row-major, default identity),
                       lower, upper, type (only "revolute" accepted)
    [keypoint]         link, offset (3)
    [surface_point]    link, and either offset (3) or
                       offsets (``x y z; x y z; ...``)

Angles are radians, lengths meters.  Unknown sections or keys are rejected.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .diffcore.tensor import Value, as_value, stack
from .errors import DimensionError, NumericError, SchemaError

_TOL = 1e-9


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray
    origin_translation: np.ndarray
    origin_rotation: np.ndarray
    lower: float
    upper: float
    name: str = ""


@dataclass(frozen=True)
class RobotModel:
    """Immutable revolute chain with keypoint and surface-sample offsets.

    ``keypoint_links``/``keypoint_offsets`` and ``surface_links``/
    ``surface_offsets`` attach points to link frames (index 0 is the base).
    """

    joints: tuple
    keypoint_links: np.ndarray
    keypoint_offsets: np.ndarray
    surface_links: np.ndarray
    surface_offsets: np.ndarray

    def __post_init__(self):
        if len(self.joints) < 1:
            raise ValueError("a robot needs at least one joint")
        for j in self.joints:
            if abs(np.linalg.norm(j.axis) - 1.0) > _TOL:
                raise ValueError(f"joint {j.name!r}: axis must have unit norm")
            r = j.origin_rotation
            if np.abs(r.T @ r - np.eye(3)).max() > _TOL or abs(np.linalg.det(r) - 1.0) > _TOL:
                raise ValueError(f"joint {j.name!r}: origin_rotation is not a proper rotation")
            if not j.lower < j.upper:
                raise ValueError(f"joint {j.name!r}: lower limit must be below upper limit")
        if len(self.keypoint_links) < 4:
            raise ValueError("at least 4 keypoints are required")
        for links in (self.keypoint_links, self.surface_links):
            if len(links) and (links.min() < 0 or links.max() > self.n_joints):
                raise ValueError("link index out of range")
        for arr in (self.keypoint_offsets, self.surface_offsets):
            arr.setflags(write=False)

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def n_keypoints(self):
        return len(self.keypoint_links)

    @property
    def n_surface(self):
        return len(self.surface_links)

    @property
    def lower(self):
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self):
        return np.array([j.upper for j in self.joints])

    def digest(self):
        """Hex SHA-256 over the numeric content of the model."""
        h = hashlib.sha256()
        for j in self.joints:
            for arr in (j.axis, j.origin_translation, j.origin_rotation, [j.lower, j.upper]):
                h.update(np.asarray(arr, dtype="<f8").tobytes())
        for arr, dt in ((self.keypoint_links, "<i8"), (self.keypoint_offsets, "<f8"),
                        (self.surface_links, "<i8"), (self.surface_offsets, "<f8")):
            h.update(np.asarray(arr, dtype=dt).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# loading

_JOINT_KEYS = {"name", "axis", "origin_translation", "origin_rotation", "lower", "upper", "type"}
_POINT_KEYS = {"link", "offset", "offsets"}
_SECTIONS = {"joint": _JOINT_KEYS, "keypoint": _POINT_KEYS, "surface_point": _POINT_KEYS}


def _floats(text, count, line, path):
    try:
        vals = [float(t) for t in text.split()]
    except ValueError:
        raise SchemaError(f"expected numbers, got {text!r}", line, path) from None
    if count is not None and len(vals) != count:
        raise SchemaError(f"expected {count} numbers, got {len(vals)}", line, path)
    return np.array(vals)


def parse_robot(text, path=None):
    """Parse robot description ``text`` into a :class:`RobotModel`."""
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise SchemaError(f"unknown section [{section}]", lineno, path)
            records.append((section, lineno, {}))
            continue
        if "=" not in line:
            raise SchemaError(f"expected 'key = value', got {line!r}", lineno, path)
        if not records:
            raise SchemaError("key outside of any section", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, fields = records[-1]
        if key not in _SECTIONS[section]:
            raise SchemaError(f"unknown key {key!r} in [{section}]", lineno, path)
        if key in fields:
            raise SchemaError(f"duplicate key {key!r}", lineno, path)
        fields[key] = (value, lineno)

    joints, kp_links, kp_offsets, sf_links, sf_offsets = [], [], [], [], []
    for section, start, fields in records:
        def need(key):
            if key not in fields:
                raise SchemaError(f"[{section}] is missing {key!r}", start, path)
            return fields[key]

        if section == "joint":
            jtype, ln = fields.get("type", ("revolute", start))
            if jtype != "revolute":
                raise SchemaError(f"unsupported joint type {jtype!r} (only revolute)", ln, path)
            axis = _floats(need("axis")[0], 3, need("axis")[1], path)
            trans = _floats(need("origin_translation")[0], 3, need("origin_translation")[1], path)
            if "origin_rotation" in fields:
                rot = _floats(fields["origin_rotation"][0], 9, fields["origin_rotation"][1], path).reshape(3, 3)
            else:
                rot = np.eye(3)
            lower = _floats(need("lower")[0], 1, need("lower")[1], path)[0]
            upper = _floats(need("upper")[0], 1, need("upper")[1], path)[0]
            if abs(np.linalg.norm(axis) - 1.0) > _TOL:
                raise SchemaError("axis must have unit norm", need("axis")[1], path)
            if np.abs(rot.T @ rot - np.eye(3)).max() > _TOL or abs(np.linalg.det(rot) - 1) > _TOL:
                raise SchemaError("origin_rotation is not a proper rotation", fields["origin_rotation"][1], path)
            if not lower < upper:
                raise SchemaError("lower must be below upper", need("lower")[1], path)
            joints.append(Joint(axis, trans, rot, float(lower), float(upper),
                                fields.get("name", (f"joint{len(joints) + 1}",))[0]))
        else:
            link_text, link_line = need("link")
            try:
                link = int(link_text)
            except ValueError:
                raise SchemaError(f"link must be an integer, got {link_text!r}", link_line, path) from None
            if ("offset" in fields) == ("offsets" in fields):
                raise SchemaError(f"[{section}] needs exactly one of 'offset' or 'offsets'", start, path)
            if "offset" in fields:
                pts = [_floats(fields["offset"][0], 3, fields["offset"][1], path)]
            else:
                text_, ln = fields["offsets"]
                pts = [_floats(chunk, 3, ln, path) for chunk in text_.split(";") if chunk.strip()]
            links, offsets = (kp_links, kp_offsets) if section == "keypoint" else (sf_links, sf_offsets)
            for pt in pts:
                links.append(link)
                offsets.append(pt)

    if not joints:
        raise SchemaError("no [joint] sections", None, path)
    n = len(joints)
    for links, kind in ((kp_links, "keypoint"), (sf_links, "surface_point")):
        for link in links:
            if not 0 <= link <= n:
                raise SchemaError(f"{kind} link index {link} outside 0..{n}", None, path)
    if len(kp_links) < 4:
        raise SchemaError("at least 4 keypoints are required", None, path)
    return RobotModel(
        joints=tuple(joints),
        keypoint_links=np.array(kp_links, dtype=np.int64),
        keypoint_offsets=np.array(kp_offsets, dtype=np.float64).reshape(-1, 3),
        surface_links=np.array(sf_links, dtype=np.int64),
        surface_offsets=np.array(sf_offsets, dtype=np.float64).reshape(-1, 3),
    )


def load_robot(path=None):
    """Load a robot description file; ``None`` loads the bundled 3-joint arm."""
    if path is None:
        text = resources.files("tagpose.data").joinpath("default_arm.robot").read_text()
        return parse_robot(text, path="default_arm.robot")
    path = Path(path)
    return parse_robot(path.read_text(), path=str(path))


def default_robot():
    return load_robot(None)


# ---------------------------------------------------------------------------
# kinematics


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about a fixed unit ``axis`` by ``angle`` (Value, any shape)."""
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    a = as_value(angle).reshape(*angle.shape, 1, 1)
    return np.eye(3) + a.sin() * k + (1.0 - a.cos()) * (k @ k)


def _check_config(model, p):
    arr = p.data if isinstance(p, Value) else np.asarray(p, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] != model.n_joints:
        raise DimensionError(f"expected {model.n_joints} joint angles, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError("joint angles must be finite")


def _frames_value(model, p):
    batch = p.shape[:-1]
    rot = Value(np.broadcast_to(np.eye(3), batch + (3, 3)).copy(), requires_grad=False)
    trans = Value(np.zeros(batch + (3,)), requires_grad=False)
    rots, transes = [rot], [trans]
    for i, j in enumerate(model.joints):
        rj = rot @ axis_angle_matrix(j.axis, p[..., i])
        trans = trans + (rj @ j.origin_translation.reshape(3, 1)).reshape(*batch, 3)
        rot = rj @ j.origin_rotation
        rots.append(rot)
        transes.append(trans)
    return rots, transes


def forward_kinematics(model, p):
    """Link frames for joint angles ``p`` (shape ``(..., n)``).

    Returns ``(rotations, translations)`` with shapes ``(..., n+1, 3, 3)`` and
    ``(..., n+1, 3)``, expressed in the base frame.  A :class:`Value` input
    yields Values on the tape; arrays in give arrays out.
    """
    _check_config(model, p)
    if isinstance(p, Value):
        rots, transes = _frames_value(model, p)
        return stack(rots, axis=-3), stack(transes, axis=-2)
    return _frames_array(model, np.asarray(p, dtype=np.float64))


def _frames_array(model, p):
    batch = p.shape[:-1]
    rots = np.empty(batch + (model.n_joints + 1, 3, 3))
    transes = np.empty(batch + (model.n_joints + 1, 3))
    rot = np.broadcast_to(np.eye(3), batch + (3, 3))
    trans = np.zeros(batch + (3,))
    rots[..., 0, :, :], transes[..., 0, :] = rot, trans
    for i, j in enumerate(model.joints):
        k = np.array([[0.0, -j.axis[2], j.axis[1]], [j.axis[2], 0.0, -j.axis[0]], [-j.axis[1], j.axis[0], 0.0]])
        a = p[..., i, None, None]
        rj = rot @ (np.eye(3) + np.sin(a) * k + (1.0 - np.cos(a)) * (k @ k))
        trans = trans + rj @ j.origin_translation
        rot = rj @ j.origin_rotation
        rots[..., i + 1, :, :], transes[..., i + 1, :] = rot, trans
    return rots, transes


def _points_from_config(model, links, offsets, p, R, T):
    _check_config(model, p)
    if not any(isinstance(x, Value) for x in (p, R, T)):
        return _points_array(model, links, offsets, np.asarray(p, dtype=np.float64),
                             np.asarray(R, dtype=np.float64), np.asarray(T, dtype=np.float64))
    p, R, T = as_value(p), as_value(R), as_value(T)
    if R.shape[-2:] != (3, 3) or T.shape[-1] != 3:
        raise DimensionError("camera rotation must be (...,3,3) and translation (...,3)")
    rots, transes = forward_kinematics(model, p)
    if len(links) == 0:
        return Value(np.zeros(p.shape[:-1] + (0, 3)), requires_grad=False)
    link_rot = rots[..., links, :, :]
    link_trans = transes[..., links, :]
    local = (link_rot @ offsets[..., None]).reshape(*link_trans.shape) + link_trans
    # camera = R @ local + T, batched over points
    return local @ R.swapaxes(-1, -2) + T.reshape(*T.shape[:-1], 1, 3)


def _points_array(model, links, offsets, p, R, T):
    if R.shape[-2:] != (3, 3) or T.shape[-1] != 3:
        raise DimensionError("camera rotation must be (...,3,3) and translation (...,3)")
    rots, transes = _frames_array(model, p)
    if len(links) == 0:
        return np.zeros(p.shape[:-1] + (0, 3))
    local = (rots[..., links, :, :] @ offsets[..., None])[..., 0] + transes[..., links, :]
    return local @ np.swapaxes(R, -1, -2) + T[..., None, :]


def keypoints_from_config(model, p, R, T):
    """Keypoints in the camera frame: ``R @ (frame[link] applied to offset) + T``."""
    return _points_from_config(model, model.keypoint_links, model.keypoint_offsets, p, R, T)


def surface_cloud_from_config(model, p, R, T):
    """Surface samples in the camera frame (same contract as keypoints)."""
    return _points_from_config(model, model.surface_links, model.surface_offsets, p, R, T)


def densify_surface(model, factor):
    """Link indices and offsets with ``factor - 1`` points interpolated between
    consecutive surface samples that share a link."""
    links, offsets = [], []
    for i, (link, off) in enumerate(zip(model.surface_links, model.surface_offsets)):
        links.append(link)
        offsets.append(off)
        if i + 1 < model.n_surface and model.surface_links[i + 1] == link:
            nxt = model.surface_offsets[i + 1]
            for t in np.arange(1, factor) / factor:
                links.append(link)
                offsets.append((1 - t) * off + t * nxt)
    return np.array(links, dtype=np.int64), np.array(offsets).reshape(-1, 3)


def sample_config(model, rng, size=None):
    lo, hi = model.lower, model.upper
    shape = (model.n_joints,) if size is None else (size, model.n_joints)
    return lo + (hi - lo) * rng.random(shape)

