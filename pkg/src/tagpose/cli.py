"""Command-line entry point: ``tagpose gen|train|eval|analyze-graph|overlay``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(missing, stale or corrupt dataset; malformed robot file), 4 numeric error
(divergence, non-finite values).

Relative dataset paths that do not exist in the working directory are looked
up under ``$TAGPOSE_DATA``.  ``gen`` writes to ``$TAGPOSE_DATA/<split>`` when
no output directory is given.
"""
from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from .camera import project
from .diffcore.tensor import NonFiniteError
from .errors import (
    ConfigError, DatasetError, DivergenceError, DomainError, NumericError, SchemaError,
)
from .kinematics import default_robot, load_robot
from .synth import generate, write_dataset
from .taggraph import (
    build_tag, enumerate_closed_loops, loop_gradient_audit, parameter_groups, tag_structure,
)
from .trainer import (
    MetricsLog, TrainConfig, add_curve, evaluate, load_checkpoint, load_split, run,
    train_stage2,
)

DATA_ENV = "TAGPOSE_DATA"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

logger = logging.getLogger("tagpose")


def data_root():
    return Path(os.environ.get(DATA_ENV, "data"))


def resolve_data_path(path):
    if path is None:
        return None
    p = Path(path)
    if p.exists() or p.is_absolute():
        return str(p)
    alt = data_root() / p
    return str(alt) if alt.exists() else str(p)


def _model(robot):
    return load_robot(robot) if robot else default_robot()


def _fail(message, code):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


class _Group(click.Group):
    """Map package exceptions onto the documented exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (DivergenceError, NumericError, NonFiniteError, FloatingPointError) as exc:
            _fail(str(exc), EXIT_NUMERIC)
        except (DatasetError, SchemaError, FileNotFoundError) as exc:
            _fail(str(exc), EXIT_DATA)
        except (ConfigError, DomainError) as exc:
            _fail(str(exc), EXIT_USAGE)


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Alignment-graph robot pose estimation on synthetic depth scenes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


# ---------------------------------------------------------------------------
# gen


@main.command()
@click.option("--robot", type=click.Path(dir_okay=False), help="Robot description file (default: bundled arm).")
@click.option("--split", type=click.Choice(["in-dist", "ood"]), default="in-dist", show_default=True)
@click.option("--count", type=click.IntRange(min=1), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help=f"Output directory (default: ${DATA_ENV}/<split>).")
@click.option("--no-labels", is_flag=True, help="Store zeros instead of ground truth.")
def gen(robot, split, count, seed, out_dir, no_labels):
    """Generate a synthetic dataset split."""
    model = _model(robot)
    out = Path(out_dir) if out_dir else data_root() / split
    scenes = generate(model, split, count, seed)
    write_dataset(scenes, out, model, seed, split, labels=not no_labels)
    click.echo(f"wrote {count} scenes to {out}")


# ---------------------------------------------------------------------------
# train


def _parse_scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw, pairs):
    """Apply ``key=value`` pairs (dotted keys address nested blocks) to a config dict."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part} is not a block")
        node[parts[-1]] = _parse_scalar(value.strip())
    return raw


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON training config.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config key, e.g. stage1.lr=0.001 or toggles.joints=false. Repeatable.")
@click.option("--seed", type=int, help="Overrides config 'seed'.")
@click.option("--out-dir", help="Overrides config 'out_dir'.")
@click.option("--train", "train_path", help="Overrides config 'train'.")
@click.option("--val", "val_path", help="Overrides config 'val'.")
@click.option("--ood-train", help="Overrides config 'ood_train'.")
@click.option("--ood-test", help="Overrides config 'ood_test'.")
@click.option("--resume-stage2", type=click.Path(dir_okay=False),
              help="Skip stage 1 and run stage 2 from this stage-1 checkpoint.")
def train(config_path, overrides, seed, out_dir, train_path, val_path, ood_train, ood_test, resume_stage2):
    """Run stage 1 (hybrid loss) then stage 2 (alignment only).

    Precedence: built-in defaults < config file < --set < named flags.
    Writes stage1.ckpt, stage2.ckpt, metrics.csv and config.json to out_dir.
    """
    raw = json.loads(Path(config_path).read_text()) if config_path else {}
    apply_overrides(raw, overrides)
    named = {"seed": seed, "out_dir": out_dir, "train": train_path, "val": val_path,
             "ood_train": ood_train, "ood_test": ood_test}
    raw.update({k: v for k, v in named.items() if v is not None})
    for key in ("train", "val", "ood_train", "ood_test"):
        raw[key] = resolve_data_path(raw.get(key))
    try:
        config = TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if resume_stage2:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        config.dump(out / "config.json")
        model = config.robot_model()
        log = MetricsLog(out / "metrics.csv")
        if not config.ood_train:
            raise DatasetError("stage 2 needs 'ood_train'")
        eval_scenes = load_split(config.ood_test, model)[0] if config.ood_test else None
        result = train_stage2(config, checkpoint=resume_stage2, model=model, log=log, eval_scenes=eval_scenes)
        click.echo(f"stage 2 checkpoint: {result.checkpoint}")
        return
    result = run(config)
    click.echo(f"stage 1 checkpoint: {result['stage1'].checkpoint}")
    if "stage2" in result:
        click.echo(f"stage 2 checkpoint: {result['stage2'].checkpoint}")


# ---------------------------------------------------------------------------
# eval


@main.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--data", "data_path", required=True, help="Dataset directory to evaluate on.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--robot", type=click.Path(dir_okay=False))
@click.option("--threshold-max", type=float, default=0.1, show_default=True, help="ADD AUC range in meters.")
def eval_(checkpoint, data_path, out_dir, robot, threshold_max):
    """Write metrics.csv and add_curve.csv for a checkpoint on one split."""
    model = _model(robot)
    scenes, manifest = load_split(resolve_data_path(data_path), model)
    if not manifest["labels"]:
        raise DatasetError(f"{data_path} has no labels to evaluate against")
    nets = load_checkpoint(checkpoint)
    ev = evaluate(nets, model, scenes, threshold_max)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(out / "metrics.csv")
    log.add("eval", 0, manifest["split"], None, ev["add_auc"], ev["mean_joint_dev_deg"])
    t, frac = add_curve(ev["add"], threshold_max)
    lines = ["threshold_m,fraction"] + [f"{a!r},{b!r}" for a, b in zip(t.tolist(), frac.tolist())]
    (out / "add_curve.csv").write_text("\n".join(lines) + "\n")
    per_joint = " ".join(f"{v:.3f}" for v in ev["per_joint_deg"])
    click.echo(f"add_auc {ev['add_auc']:.6f}  mean_joint_dev_deg {ev['mean_joint_dev_deg']:.4f}  per_joint {per_joint}")


# ---------------------------------------------------------------------------
# analyze-graph


def graph_report(model, audit=True, seed=0):
    """Topology report as a plain dict (nodes, edges, loops, audit matrix)."""
    structure = tag_structure()
    loops = enumerate_closed_loops(structure)
    report = {
        "nodes": list(structure.nodes),
        "edges": [{"u": e.u, "v": e.v, "class": e.cls, "mechanism": e.mechanism, "term": e.term, "group": e.group}
                  for e in structure.edges],
        "adjacency": structure.adjacency_listing(),
        "loss_edges": [{"term": e.term, "u": e.u, "v": e.v} for e in structure.loss_edges()],
        "loops": [{"type": lp.kind, "alignment": lp.alignment.label(), "term": lp.alignment.term,
                   "length": len(lp), "nodes": list(lp.nodes)} for lp in loops],
    }
    if audit:
        from .diffcore.networks import TagNetworks
        from .trainer import calibrate_from_scenes, scene_batch

        scenes = generate(model, "in-dist", 4, seed)
        nets = TagNetworks(model.n_joints, model.n_keypoints, seed=seed)
        calibrate_from_scenes(nets, model, scenes)
        images, K = scene_batch(scenes)
        rows = []
        for lp in loops:
            graph = build_tag(model, nets, images, K)
            rows.append(parameter_groups(loop_gradient_audit(graph, lp, nets)))
        columns = sorted({g for r in rows for g in r})
        report["audit"] = {"columns": columns, "rows": rows}
    return report


def format_report(report):
    lines = [f"nodes ({len(report['nodes'])})"]
    lines += [f"  {n}" for n in report["nodes"]]
    fwd = [e for e in report["edges"] if e["class"] == "forward"]
    ali = [e for e in report["edges"] if e["class"] == "alignment"]
    lines.append(f"forward edges ({len(fwd)})")
    lines += [f"  {e['u']:<14} -> {e['v']:<14} {e['mechanism']}" for e in fwd]
    lines.append(f"alignment edges ({len(ali)})")
    lines += [f"  {e['u']:<14} -- {e['v']:<14} {e['term'] or '-':<3} {e['group']}" for e in ali]
    lines.append(f"loss-bearing alignment edges ({len(report['loss_edges'])})")
    lines += [f"  {e['term']}  {e['u']} -- {e['v']}" for e in report["loss_edges"]]
    lines.append(f"basis loops ({len(report['loops'])})")
    lines.append(f"  {'#':>2}  {'type':<24} {'alignment edge':<30} {'term':<4} length")
    for i, lp in enumerate(report["loops"]):
        lines.append(f"  {i:>2}  {lp['type']:<24} {lp['alignment']:<30} {lp['term'] or '-':<4} {lp['length']}")
    if "audit" in report:
        cols = report["audit"]["columns"]
        lines.append("gradient audit (x = parameter group receives gradient)")
        lines.append("  " + " " * 4 + " ".join(f"{c:>13}" for c in cols))
        for i, row in enumerate(report["audit"]["rows"]):
            lines.append(f"  {i:>2}  " + " ".join(f"{'x' if c in row else '.':>13}" for c in cols))
    return "\n".join(lines) + "\n"


@main.command("analyze-graph")
@click.option("--robot", type=click.Path(dir_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Emit the machine-readable report instead of the table.")
@click.option("--no-audit", is_flag=True, help="Skip the gradient audit (no networks are built).")
@click.option("--seed", type=int, default=0, show_default=True)
def analyze_graph(robot, as_json, no_audit, seed):
    """Print nodes, edges, basis loops and the gradient-audit matrix."""
    report = graph_report(_model(robot), audit=not no_audit, seed=seed)
    click.echo(json.dumps(report, indent=2) if as_json else format_report(report), nl=False)


# ---------------------------------------------------------------------------
# overlay


def skeleton_pixels(kp2, height, width):
    """Integer pixels on the polyline through consecutive 2D keypoints."""
    pix = set()
    kp2 = np.asarray(kp2, dtype=np.float64)
    for a, b in zip(kp2[:-1], kp2[1:]):
        steps = int(np.ceil(np.abs(b - a).max() * 2)) + 1
        for t in np.linspace(0.0, 1.0, steps + 1):
            u, v = np.rint(a + t * (b - a)).astype(int)
            if 0 <= u < width and 0 <= v < height:
                pix.add((int(v), int(u)))
    return pix


def overlay_image(scene, kp3_pred):
    """RGB image: depth as gray, ground-truth skeleton green, predicted skeleton red (overlap yellow)."""
    h, w = scene.mask.shape
    depth = scene.depth.astype(np.float64)
    img = np.zeros((h, w, 3), dtype=np.uint8)
    if scene.mask.any():
        d = depth[scene.mask]
        span = max(d.max() - d.min(), 1e-9)
        gray = 80 + 150 * (1.0 - (depth - d.min()) / span)
        img[scene.mask] = np.clip(gray[scene.mask], 0, 255).astype(np.uint8)[:, None]
    gt = skeleton_pixels(scene.kp2, h, w)
    pred = skeleton_pixels(project(np.asarray(kp3_pred), scene.K, strict=False), h, w)
    for r, c in gt:
        img[r, c] = (0, 255, 0)
    for r, c in pred:
        img[r, c] = (255, 255, 0) if (r, c) in gt else (255, 0, 0)
    return img, gt, pred


def write_ppm(path, img):
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise SchemaError("not a binary PPM file", path=str(path))
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--data", "data_path", required=True)
@click.option("--index", type=int, required=True, help="Scene index within the split.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Output .ppm file.")
@click.option("--robot", type=click.Path(dir_okay=False))
def overlay(checkpoint, data_path, index, out_path, robot):
    """Draw predicted (red) and ground-truth (green) skeletons over the depth image."""
    from .trainer import predict

    model = _model(robot)
    scenes, _ = load_split(resolve_data_path(data_path), model)
    if not 0 <= index < len(scenes):
        raise click.UsageError(f"index {index} out of range for {len(scenes)} scenes")
    nets = load_checkpoint(checkpoint)
    pred = predict(nets, model, [scenes[index]])
    img, _, _ = overlay_image(scenes[index], pred["kp3"][0])
    write_ppm(out_path, img)
    click.echo(f"wrote {out_path} ({img.shape[1]}x{img.shape[0]})")


if __name__ == "__main__":  # pragma: no cover
    main()
