"""Two-stage training, evaluation metrics and the metrics CSV.

Stage 1 fits the networks on a labelled split with the hybrid loss
(alignment plus supervised).  Stage 2 starts from a stage-1 checkpoint and
minimises the alignment loss alone on an unlabelled split; the labels of that
split are never read by the loss.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffcore.checkpoint import load_tensors, save_tensors
from .diffcore.networks import TagNetworks
from .diffcore.optim import Adam
from .diffcore.tensor import NonFiniteError, backward, no_grad, release_tape
from .errors import ConfigError, DatasetError, DivergenceError
from .kinematics import default_robot, load_robot
from .losses import ALIGN_TERMS, SUPERVISED_TERMS, GroundTruth, LossWeights, total_loss
from .synth import read_dataset
from .taggraph import build_tag

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    ["stage", "epoch", "split", "loss_total", "loss_align", "loss_supervised"]
    + list(ALIGN_TERMS) + list(SUPERVISED_TERMS) + ["add_auc", "mean_joint_dev_deg"]
)
_ARCH_KEY = "__arch__"


@dataclass
class StageConfig:
    lr: float
    epochs: int
    batch: int = 32
    decay: float = 0.95
    beta1: float = 0.9

    def validate(self, name):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError(f"{name}.lr must be a finite nonnegative number")
        if int(self.epochs) < 1 or int(self.batch) < 1:
            raise ConfigError(f"{name}.epochs and {name}.batch must be >= 1")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"{name}.decay must be in (0, 1]")
        if not 0 <= self.beta1 < 1:
            raise ConfigError(f"{name}.beta1 must be in [0, 1)")


def _default_stage1():
    return StageConfig(lr=1e-3, epochs=40)


def _default_stage2():
    return StageConfig(lr=1e-6, epochs=20)


def _default_stage1_weights():
    # pixel-unit terms are scaled to meters-squared magnitudes; the translation
    # and unprojected-cloud terms carry the metric scale, so they are boosted
    return LossWeights(a4=1e-4, b4=1e-4, b5=1e-4, b3=20.0, b6=5.0)


@dataclass
class TrainConfig:
    stage1: StageConfig = field(default_factory=_default_stage1)
    stage2: StageConfig = field(default_factory=_default_stage2)
    weights: LossWeights = field(default_factory=_default_stage1_weights)
    seed: int = 0
    toggles: dict = field(default_factory=lambda: {"keypoints": True, "joints": True, "pointcloud": True})
    robot: str = None
    train: str = None
    val: str = None
    ood_train: str = None
    ood_test: str = None
    out_dir: str = "runs"
    threshold_max: float = 0.1
    patience: int = 10
    max_points: int = 256

    def __post_init__(self):
        if isinstance(self.stage1, dict):
            self.stage1 = StageConfig(**self.stage1)
        if isinstance(self.stage2, dict):
            self.stage2 = StageConfig(**self.stage2)
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        self.stage1.validate("stage1")
        self.stage2.validate("stage2")
        unknown = set(self.toggles) - {"keypoints", "joints", "pointcloud"}
        if unknown:
            raise ConfigError(f"unknown loop group toggle(s): {', '.join(sorted(unknown))}")
        self.toggles = {g: bool(self.toggles.get(g, True)) for g in ("keypoints", "joints", "pointcloud")}
        if self.threshold_max <= 0:
            raise ConfigError("threshold_max must be positive")

    @property
    def align_weights(self):
        return self.weights.with_groups(**self.toggles)

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def robot_model(self):
        return load_robot(self.robot) if self.robot else default_robot()


# ---------------------------------------------------------------------------
# metrics


def wrap_angle(a):
    """Map angles onto (-pi, pi]."""
    return -((-np.asarray(a, dtype=np.float64) + np.pi) % (2 * np.pi) - np.pi)


def joint_deviation_deg(p_pred, p_gt):
    """Per-joint mean absolute wrapped angle error in degrees, and their mean."""
    err = np.abs(wrap_angle(np.asarray(p_pred) - np.asarray(p_gt)))
    per_joint = np.degrees(err.mean(axis=0))
    return per_joint, float(per_joint.mean())


def add_distances(kp_pred, kp_gt):
    """Per-sample mean Euclidean keypoint distance."""
    return np.linalg.norm(np.asarray(kp_pred) - np.asarray(kp_gt), axis=-1).mean(axis=-1)


def add_auc(add, threshold_max=0.1):
    """Normalised area under ``t -> fraction(ADD <= t)`` on ``[0, threshold_max]``.

    The curve is a step function, so the area is computed exactly: each
    sample contributes ``threshold_max - min(ADD, threshold_max)``.
    """
    add = np.asarray(add, dtype=np.float64)
    if add.size == 0:
        raise ValueError("ADD AUC of an empty split")
    return float(np.mean(1.0 - np.minimum(add, threshold_max) / threshold_max))


def add_curve(add, threshold_max=0.1, steps=101):
    t = np.linspace(0.0, threshold_max, steps)
    add = np.asarray(add, dtype=np.float64)
    return t, (add[None, :] <= t[:, None]).mean(axis=1)


# ---------------------------------------------------------------------------
# data helpers


def scene_batch(scenes):
    images = np.stack([s.image() for s in scenes])
    return images, scenes[0].K


def load_split(path, model):
    if path is None:
        raise DatasetError("dataset path not configured")
    if not Path(path).is_dir():
        raise DatasetError(f"dataset directory not found: {path}")
    scenes, manifest = read_dataset(path, model)
    if not scenes:
        raise DatasetError(f"dataset {path} is empty")
    return scenes, manifest


def _batches(count, batch, rng=None):
    order = np.arange(count) if rng is None else rng.permutation(count)
    return [order[i:i + batch] for i in range(0, count, batch)]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, nets):
    tensors = dict(nets.state_dict())
    tensors[_ARCH_KEY] = np.array([nets.heads_2d.n, nets.heads_2d.m, nets.backbone_2d.feature_dim], dtype=np.float64)
    save_tensors(path, tensors)
    return Path(path)


def load_checkpoint(path):
    tensors = load_tensors(path)
    arch = tensors.pop(_ARCH_KEY, None)
    if arch is None:
        raise ConfigError(f"{path}: checkpoint lacks architecture record")
    n, m, fdim = (int(v) for v in arch)
    nets = TagNetworks(n, m, seed=0, feature_dim=fdim)
    nets.load_state_dict(tensors)
    return nets


def _as_nets(checkpoint):
    return checkpoint if isinstance(checkpoint, TagNetworks) else load_checkpoint(checkpoint)


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict(nets, model, scenes, batch=64, max_points=256):
    """Joint angles, camera pose and 3D keypoints (from FK of the 3D-branch joints)."""
    out = {"p": [], "R": [], "T": [], "kp3": []}
    for idx in _batches(len(scenes), batch):
        images, K = scene_batch([scenes[i] for i in idx])
        with no_grad():
            g = build_tag(model, nets, images, K, max_points=max_points)
        out["p"].append(g["3D:p"].data)
        out["R"].append(g["2D:R"].data)
        out["T"].append(g["2D:T"].data)
        out["kp3"].append(g["3D:kp3_fk"].data)
    return {k: np.concatenate(v) for k, v in out.items()}


def evaluate_add_auc(checkpoint, scenes, threshold_max=0.1, model=None, pred=None):
    if not scenes:
        raise DatasetError("cannot evaluate an empty split")
    model = model or default_robot()
    pred = pred or predict(_as_nets(checkpoint), model, scenes)
    gt = np.stack([s.kp3 for s in scenes])
    return add_auc(add_distances(pred["kp3"], gt), threshold_max)


def evaluate_joint_deviation(checkpoint, scenes, model=None, pred=None):
    if not scenes:
        raise DatasetError("cannot evaluate an empty split")
    model = model or default_robot()
    pred = pred or predict(_as_nets(checkpoint), model, scenes)
    return joint_deviation_deg(pred["p"], np.stack([s.p for s in scenes]))


def evaluate(nets, model, scenes, threshold_max=0.1, max_points=256):
    pred = predict(nets, model, scenes, max_points=max_points)
    gt_kp = np.stack([s.kp3 for s in scenes])
    add = add_distances(pred["kp3"], gt_kp)
    per_joint, mean_dev = joint_deviation_deg(pred["p"], np.stack([s.p for s in scenes]))
    return {"add": add, "add_auc": add_auc(add, threshold_max), "per_joint_deg": per_joint,
            "mean_joint_dev_deg": mean_dev}


# ---------------------------------------------------------------------------
# metrics CSV


class MetricsLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []

    def add(self, stage, epoch, split, losses=None, add_auc_=None, joint_dev=None):
        row = {c: "" for c in METRIC_COLUMNS}
        row.update(stage=stage, epoch=epoch, split=split)
        for k, v in (losses or {}).items():
            row[k] = repr(float(v))
        if add_auc_ is not None:
            row["add_auc"] = repr(float(add_auc_))
        if joint_dev is not None:
            row["mean_joint_dev_deg"] = repr(float(joint_dev))
        self.rows.append(row)
        if self.path:
            self.write()

    def text(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(self.text())


def _mean_losses(records):
    keys = sorted({k for r in records for k in r})
    return {k: float(np.mean([r[k] for r in records if k in r])) for k in keys}


# ---------------------------------------------------------------------------
# training


@dataclass
class StageResult:
    nets: TagNetworks
    checkpoint: Path
    history: list
    best: dict


def calibrate_from_scenes(nets, model, scenes):
    K = scenes[0].K
    p = np.stack([s.p for s in scenes])
    R = np.stack([s.R for s in scenes])
    T = np.stack([s.T for s in scenes])
    kp2 = np.stack([s.kp2 for s in scenes])
    kp3 = np.stack([s.kp3 for s in scenes])
    lam = np.array([np.median(s.depth[s.mask]) for s in scenes])
    images = np.stack([s.image() for s in scenes])
    nets.calibrate(model, K, images, p, R, T, kp2, kp3, lam)


def _step(nets, opt, model, scenes, idx, weights, gt_on, max_points):
    images, K = scene_batch([scenes[i] for i in idx])
    g = build_tag(model, nets, images, K, max_points=max_points)
    gt = GroundTruth.from_scenes([scenes[i] for i in idx]) if gt_on else None
    loss, terms = total_loss(g, gt, weights, return_terms=True)
    if not math.isfinite(loss.item()):
        raise NonFiniteError("non-finite loss")
    backward(loss, params=opt.params)
    opt.step()
    release_tape(loss)
    record = {k: v.item() for k, v in terms.items()}
    record["loss_total"] = loss.item()
    record["loss_align"] = sum(v.item() * getattr(weights, k) for k, v in terms.items() if k.startswith("a"))
    record["loss_supervised"] = sum(v.item() * getattr(weights, k) for k, v in terms.items() if k.startswith("b"))
    return record


def _run_epochs(nets, model, scenes, stage_cfg, weights, supervised, seed, stage, log, out_dir, ckpt_name,
                evaluate_fn=None, select_best=True, patience=10, max_points=256):
    params = nets.parameters()
    opt = Adam(params, lr=stage_cfg.lr, beta1=stage_cfg.beta1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / ckpt_name
    save_checkpoint(ckpt, nets)
    history, best, stale = [], None, 0
    rng = np.random.default_rng([seed, stage])
    for epoch in range(1, int(stage_cfg.epochs) + 1):
        records = []
        for idx in _batches(len(scenes), int(stage_cfg.batch), rng):
            try:
                records.append(_step(nets, opt, model, scenes, idx, weights, supervised, max_points))
            except NonFiniteError as exc:
                raise DivergenceError(f"stage {stage} diverged in epoch {epoch}: {exc}; "
                                      f"last finite checkpoint at {ckpt}") from exc
        opt.lr *= stage_cfg.decay
        losses = _mean_losses(records)
        log.add(stage, epoch, "train", losses)
        entry = {"epoch": epoch, "losses": losses}
        score = None
        if evaluate_fn is not None:
            entry.update(evaluate_fn(epoch))
            score = entry.get("select")
        history.append(entry)
        logger.info("stage %d epoch %d loss %.6g %s", stage, epoch, losses["loss_total"],
                    {k: v for k, v in entry.items() if k not in ("losses", "epoch")})
        if not select_best:
            save_checkpoint(ckpt, nets)
            best = entry
            continue
        if best is None or score > best["select"]:
            best, stale = entry, 0
            save_checkpoint(ckpt, nets)
        else:
            stale += 1
            if stale >= patience:
                logger.info("stage %d: early stop after %d epochs without improvement", stage, patience)
                break
    return ckpt, history, best


def train_stage1(config, train_scenes=None, val_scenes=None, model=None, log=None):
    """Hybrid training on a labelled split; keeps the best-validation-AUC parameters."""
    model = model or config.robot_model()
    if train_scenes is None:
        train_scenes, _ = load_split(config.train, model)
    if val_scenes is None:
        val_scenes, _ = load_split(config.val, model)
    if not train_scenes[0].meta.get("labels", True):
        raise DatasetError("stage 1 needs a labelled training split")
    log = log or MetricsLog()
    nets = TagNetworks(model.n_joints, model.n_keypoints, seed=config.seed)
    calibrate_from_scenes(nets, model, train_scenes)

    def on_epoch(epoch):
        ev = evaluate(nets, model, val_scenes, config.threshold_max, config.max_points)
        log.add(1, epoch, "val", None, ev["add_auc"], ev["mean_joint_dev_deg"])
        return {"select": ev["add_auc"], "add_auc": ev["add_auc"], "mean_joint_dev_deg": ev["mean_joint_dev_deg"]}

    ckpt, history, best = _run_epochs(
        nets, model, train_scenes, config.stage1, config.align_weights, True, config.seed, 1, log,
        config.out_dir, "stage1.ckpt", on_epoch, True, config.patience, config.max_points)
    return StageResult(load_checkpoint(ckpt), ckpt, history, best)


def train_stage2(config, ood_scenes=None, checkpoint=None, model=None, log=None, eval_scenes=None):
    """Alignment-only training on an unlabelled split, starting from a stage-1 checkpoint.

    Only the images and intrinsics of ``ood_scenes`` are used.  ``eval_scenes``
    (optional, labelled) are scored after every epoch for the log only; they
    never influence the parameters.
    """
    model = model or config.robot_model()
    if ood_scenes is None:
        ood_scenes, _ = load_split(config.ood_train, model)
    if checkpoint is None:
        checkpoint = Path(config.out_dir) / "stage1.ckpt"
    nets = load_checkpoint(checkpoint) if not isinstance(checkpoint, TagNetworks) else _copy(checkpoint)
    blind = [_strip_labels(s) for s in ood_scenes]
    log = log or MetricsLog()
    weights = replace(config.align_weights, **{t: 0.0 for t in SUPERVISED_TERMS})

    def on_epoch(epoch):
        if not eval_scenes:
            return {}
        ev = evaluate(nets, model, eval_scenes, config.threshold_max, config.max_points)
        log.add(2, epoch, "ood_test", None, ev["add_auc"], ev["mean_joint_dev_deg"])
        return {"add_auc": ev["add_auc"], "mean_joint_dev_deg": ev["mean_joint_dev_deg"]}

    ckpt, history, best = _run_epochs(
        nets, model, blind, config.stage2, weights, False, config.seed, 2, log, config.out_dir,
        "stage2.ckpt", on_epoch, False, config.patience, config.max_points)
    return StageResult(nets, ckpt, history, best)


def _copy(nets):
    fresh = TagNetworks(nets.heads_2d.n, nets.heads_2d.m, seed=0, feature_dim=nets.backbone_2d.feature_dim)
    fresh.load_state_dict({k: v.copy() for k, v in nets.state_dict().items()})
    return fresh


def _strip_labels(scene):
    zero = np.zeros_like
    return replace(scene, p=zero(scene.p), R=zero(scene.R), T=zero(scene.T), depth=zero(scene.depth),
                   kp2=zero(scene.kp2), kp3=zero(scene.kp3), pts=zero(scene.pts))


def run(config, log_path=None):
    """Stage 1 then stage 2 from config paths; writes checkpoints, metrics CSV and config echo."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(out / "config.json")
    log = MetricsLog(log_path or out / "metrics.csv")
    model = config.robot_model()
    s1 = train_stage1(config, model=model, log=log)
    result = {"stage1": s1}
    if config.ood_train:
        eval_scenes = load_split(config.ood_test, model)[0] if config.ood_test else None
        result["stage2"] = train_stage2(config, checkpoint=s1.checkpoint, model=model, log=log,
                                        eval_scenes=eval_scenes)
    return result
