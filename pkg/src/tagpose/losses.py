"""Chamfer distances and the alignment, supervised and total losses.

Every loss is a batch mean of per-sample terms.  A term whose weight is zero
is not built at all, so it contributes exactly zero and no gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .diffcore.tensor import Value, as_value
from .errors import ConfigError, DimensionError, EmptyCloudError

logger = logging.getLogger(__name__)

# term -> (left node, right node, discrepancy kind)
ALIGN_TERMS = {
    "a1": ("3D:p", "2D:p", "joints"),
    "a2": ("3D:kp3", "2D:kp3", "keypoints"),
    "a3": ("3D:kp3", "2D:kp3_fk", "keypoints"),
    "a4": ("2D:kp2_proj", "2D:kp2", "keypoints"),
    "a5": ("3D:pts_unproj", "3D:pts_fk", "uni"),
    "a6": ("3D:pts_unproj", "2D:pts_fk", "chamfer"),
}
SUPERVISED_TERMS = ("b1", "b2", "b3", "b4", "b5", "b6", "b7")
TERM_GROUPS = {"keypoints": ("a2", "a3", "a4"), "joints": ("a1",), "pointcloud": ("a5", "a6")}


@dataclass
class LossWeights:
    a1: float = 1.0
    a2: float = 1.0
    a3: float = 1.0
    a4: float = 1.0
    a5: float = 1.0
    a6: float = 1.0
    b1: float = 1.0
    b2: float = 1.0
    b3: float = 1.0
    b4: float = 1.0
    b5: float = 1.0
    b6: float = 1.0
    b7: float = 1.0
    # align term -> "left" or "right": that side is treated as a constant target
    stop_gradient: dict = field(default_factory=dict)

    def __post_init__(self):
        for f in fields(self):
            if f.name == "stop_gradient":
                continue
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {f.name} must be a finite nonnegative number, got {v}")
            setattr(self, f.name, v)
        for term, side in self.stop_gradient.items():
            if term not in ALIGN_TERMS or side not in ("left", "right"):
                raise ConfigError(f"bad stop_gradient entry {term!r}: {side!r}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown loss weight(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "stop_gradient"}
        if self.stop_gradient:
            out["stop_gradient"] = dict(self.stop_gradient)
        return out

    def scaled(self, factor):
        d = self.to_dict()
        for k in list(d):
            if k != "stop_gradient":
                d[k] *= factor
        return LossWeights.from_dict(d)

    def with_groups(self, keypoints=True, joints=True, pointcloud=True):
        """Copy with the align terms of disabled loop groups set to zero."""
        d = self.to_dict()
        for group, on in (("keypoints", keypoints), ("joints", joints), ("pointcloud", pointcloud)):
            if not on:
                for term in TERM_GROUPS[group]:
                    d[term] = 0.0
        return LossWeights.from_dict(d)


# ---------------------------------------------------------------------------
# Chamfer


def _as_batched_cloud(x):
    x = as_value(x)
    if x.shape[-1] != 3:
        raise DimensionError(f"point clouds must be (..., N, 3), got {x.shape}")
    return (x.reshape(1, *x.shape), True) if x.ndim == 2 else (x, False)


def _cloud_weight(w, shape):
    if w is None:
        return np.ones(shape[:2])
    w = np.asarray(w, dtype=np.float64)
    return w[None] if w.ndim == 1 else w


def chamfer_uni(A, B, wa=None, wb=None):
    """Mean over ``A`` of the squared distance to the nearest point of ``B``.

    Clouds are ``(N, 3)`` or batched ``(batch, N, 3)``; optional 0/1 weights
    mark padding.  The nearest-neighbour assignment is found by brute force
    and held fixed; gradients flow through both matched coordinates.
    Batched input gives one value per sample.
    """
    A, single = _as_batched_cloud(A)
    B, _ = _as_batched_cloud(B)
    wa, wb = _cloud_weight(wa, A.shape), _cloud_weight(wb, B.shape)
    if A.shape[1] == 0 or B.shape[1] == 0 or (wa.sum(1) == 0).any() or (wb.sum(1) == 0).any():
        raise EmptyCloudError("chamfer distance of an empty point cloud")
    d2 = ((A.data[:, :, None, :] - B.data[:, None, :, :]) ** 2).sum(-1)
    d2 = np.where(wb[:, None, :] > 0, d2, np.inf)
    idx = d2.argmin(axis=2)
    matched = B[np.arange(B.shape[0])[:, None], idx]
    sq = ((A - matched) ** 2).sum(axis=-1)
    out = (sq * wa).sum(axis=1) / wa.sum(axis=1)
    return out.reshape(()) if single else out


def chamfer(A, B, wa=None, wb=None):
    """Bidirectional Chamfer distance: ``chamfer_uni(A, B) + chamfer_uni(B, A)``."""
    return chamfer_uni(A, B, wa, wb) + chamfer_uni(B, A, wb, wa)


# ---------------------------------------------------------------------------
# per-pair discrepancies


def _sq_norm(a, b, divisor):
    diff = as_value(a) - as_value(b)
    flat = (diff * diff).reshape(diff.shape[0], -1)
    return flat.sum(axis=1) / divisor


def _node_weight(graph, node):
    return graph.pixels.weight if node == "3D:pts_unproj" else None


def _valid_cloud_samples(graph, *nodes):
    if "3D:pts_unproj" in nodes:
        return graph.pixels.count > 0
    return np.ones(graph.batch, dtype=bool)


def _batch_mean(per_sample, valid):
    if valid.all():
        return per_sample.mean()
    return (per_sample * valid.astype(np.float64)).sum() / float(valid.sum())


def _stopped(value, stop):
    return value.detach() if stop else value


def pair_term(graph, left, right, kind, n, m, stop=None):
    """Batch-mean discrepancy between two node values, or None if it cannot apply."""
    a = _stopped(graph[left], stop == "left")
    b = _stopped(graph[right], stop == "right")
    if kind in ("uni", "chamfer"):
        valid = _valid_cloud_samples(graph, left, right)
        if not valid.any():
            logger.warning("empty unprojection cloud in every sample; skipping %s -- %s", left, right)
            return None
        wa, wb = _node_weight(graph, left), _node_weight(graph, right)
        if not valid.all():
            logger.warning("empty unprojection cloud in %d sample(s); term masked", int((~valid).sum()))
            # give empty samples a dummy point so the pairing is defined; they are masked out below
            wa = None if wa is None else np.where(valid[:, None] | (np.arange(wa.shape[1]) > 0), wa, 1.0)
            wb = None if wb is None else np.where(valid[:, None] | (np.arange(wb.shape[1]) > 0), wb, 1.0)
        fn = chamfer_uni if kind == "uni" else chamfer
        return _batch_mean(fn(a, b, wa, wb), valid)
    divisor = n if kind == "joints" else m
    return _sq_norm(a, b, divisor).mean()


def _generic_kind(node_id):
    kind = node_id.split(":")[1]
    if kind == "p":
        return "joints"
    if kind.startswith("pts"):
        return "chamfer"
    return "keypoints"


def align_terms(graph, w=None):
    """Unweighted align terms ``{term: scalar Value}`` for terms with nonzero weight."""
    w = w or LossWeights()
    n, m = graph.model.n_joints, graph.model.n_keypoints
    out = {}
    for term, (left, right, kind) in ALIGN_TERMS.items():
        if getattr(w, term) == 0.0:
            continue
        value = pair_term(graph, left, right, kind, n, m, w.stop_gradient.get(term))
        if value is not None:
            out[term] = value
    return out


def term_edges(graph):
    """Which alignment edge each align term sits on."""
    return {term: graph.edge(left, right) for term, (left, right, _) in ALIGN_TERMS.items()}


def _weighted_sum(terms, w):
    total = None
    for term, value in terms.items():
        part = value * getattr(w, term)
        total = part if total is None else total + part
    return total if total is not None else Value(0.0, requires_grad=False)


def align_loss(graph, w=None, return_terms=False):
    w = w or LossWeights()
    terms = align_terms(graph, w)
    total = _weighted_sum(terms, w)
    return (total, terms) if return_terms else total


def edge_alignment_loss(graph, edge, w=None):
    """Weighted loss carried by one alignment edge (None if it has weight zero).

    Loss-bearing edges use their align term; chain edges without a term get
    the natural discrepancy for their node kind at weight one.
    """
    w = w or LossWeights()
    n, m = graph.model.n_joints, graph.model.n_keypoints
    if edge.term is not None:
        weight = getattr(w, edge.term)
        if weight == 0.0:
            return None
        left, right, kind = ALIGN_TERMS[edge.term]
        value = pair_term(graph, left, right, kind, n, m, w.stop_gradient.get(edge.term))
    else:
        weight = 1.0
        value = pair_term(graph, edge.u, edge.v, _generic_kind(edge.u), n, m)
    return None if value is None else value * weight


# ---------------------------------------------------------------------------
# supervised


@dataclass
class GroundTruth:
    """Batched labels; any field may be None (that label is not available)."""

    p: np.ndarray = None
    R: np.ndarray = None
    T: np.ndarray = None
    kp2: np.ndarray = None
    pts: np.ndarray = None

    @classmethod
    def from_scenes(cls, scenes, available=("p", "R", "T", "kp2", "pts")):
        vals = {}
        for name in ("p", "R", "T", "kp2", "pts"):
            vals[name] = np.stack([getattr(s, name) for s in scenes]) if name in available else None
        return cls(**vals)

    def select(self, idx):
        return GroundTruth(**{k: None if v is None else v[idx] for k, v in self.__dict__.items()})


def supervised_terms(graph, gt, w=None):
    w = w or LossWeights()
    n, m = graph.model.n_joints, graph.model.n_keypoints
    out = {}

    def want(term, label):
        return label is not None and getattr(w, term) != 0.0

    if want("b1", gt.p):
        out["b1"] = _sq_norm(graph["3D:p"], gt.p, n).mean()
    if want("b2", gt.R):
        out["b2"] = _sq_norm(graph["2D:R"], gt.R, 1.0).mean()
    if want("b3", gt.T):
        out["b3"] = _sq_norm(graph["2D:T"], gt.T, 1.0).mean()
    if want("b4", gt.kp2):
        out["b4"] = _sq_norm(graph["2D:kp2"], gt.kp2, m).mean()
    if want("b5", gt.kp2):
        out["b5"] = _sq_norm(graph["2D:kp2_proj"], graph["2D:kp2"], m).mean()
    if want("b6", gt.pts):
        valid = _valid_cloud_samples(graph, "3D:pts_unproj")
        if valid.any():
            wa = np.where(valid[:, None] | (np.arange(graph.pixels.weight.shape[1]) > 0), graph.pixels.weight, 1.0)
            out["b6"] = _batch_mean(chamfer_uni(graph["3D:pts_unproj"], gt.pts, wa), valid)
        else:
            logger.warning("empty unprojection cloud in every sample; skipping b6")
    if want("b7", gt.pts):
        out["b7"] = chamfer(graph["2D:pts_fk"], gt.pts).mean()
    return out


def supervised_loss(graph, gt, w=None, return_terms=False):
    w = w or LossWeights()
    terms = supervised_terms(graph, gt, w) if gt is not None else {}
    total = _weighted_sum(terms, w)
    return (total, terms) if return_terms else total


def total_loss(graph, gt=None, w=None, return_terms=False):
    w = w or LossWeights()
    a, at = align_loss(graph, w, return_terms=True)
    s, st = supervised_loss(graph, gt, w, return_terms=True)
    total = a + s if st else a
    return (total, {**at, **st}) if return_terms else total
