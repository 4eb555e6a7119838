"""Command-line surface: segment, train, eval, explain, project, features.

Manifests are CSV files with a header row and columns
image_path,label,session[,mask_path]; paths resolve relative to the
manifest's directory. Labels come from {female, male}, sessions from
{1, 2, 3}. Config precedence is CLI flag > config file (JSON) > built-in
default; PROTOSCOPE_SEED supplies the default seed.

Exit codes: 0 success, 1 usage/input error, 2 partial data failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import augment as aug
from . import explain as xp
from . import features as feat
from . import prototree as pt
from . import rng as prng
from . import roi
from . import train as tr
from .raster import RasterImage, RasterError, load_image, save_image

LABELS = {"female": 0, "male": 1}
LABEL_NAMES = ("female", "male")
SESSIONS = (1, 2, 3)

_BACKBONE_TAG = 0x6261636B  # "back"

DEFAULTS = {
    "seed": None,  # resolved from PROTOSCOPE_SEED, else 0
    "preset": 5,
    "session": None,
    "pooled": False,
    "kfold": None,
    "epochs": 50,
    "batch_size": 16,
    "learning_rate": 0.001,
    "depth": 3,
    "input_size": 224,
    "mean": (0.5, 0.5, 0.5),
    "std": (0.5, 0.5, 0.5),
    "threshold": 0.5,
    "backbone": "seeded",
    "roi": "heuristic",
    "masks": None,
    "test_fraction": 0.2,
}


class UsageError(Exception):
    """Bad flags, manifest, or inputs (exit code 1)."""


class DataError(Exception):
    """Partial data failure (exit code 2)."""


@dataclass
class ManifestRow:
    image_path: Path
    label: int
    session: int
    mask_path: Path | None


@dataclass
class Manifest:
    rows: list
    base_dir: Path


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"unreadable manifest {path}: {exc}") from exc
    reader = csv.DictReader(text.splitlines())
    required = {"image_path", "label", "session"}
    if reader.fieldnames is None or not required <= set(reader.fieldnames):
        raise UsageError(
            f"manifest {path} must have header columns image_path,label,session[,mask_path]"
        )
    base = path.parent
    rows = []
    seen = set()
    for lineno, rec in enumerate(reader, start=2):
        raw_img = (rec.get("image_path") or "").strip()
        raw_label = (rec.get("label") or "").strip().lower()
        raw_session = (rec.get("session") or "").strip()
        raw_mask = (rec.get("mask_path") or "").strip()
        if not raw_img:
            raise UsageError(f"{path}:{lineno}: empty image_path")
        if raw_img in seen:
            raise UsageError(f"{path}:{lineno}: duplicate image path {raw_img}")
        seen.add(raw_img)
        if raw_label not in LABELS:
            raise UsageError(f"{path}:{lineno}: unknown label {raw_label!r}")
        try:
            session = int(raw_session)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad session {raw_session!r}") from None
        if session not in SESSIONS:
            raise UsageError(f"{path}:{lineno}: session must be one of {SESSIONS}")
        img_path = (base / raw_img).resolve()
        if not img_path.is_file():
            raise UsageError(f"{path}:{lineno}: image not found: {img_path}")
        mask_path = None
        if raw_mask:
            mask_path = (base / raw_mask).resolve()
            if not mask_path.is_file():
                raise UsageError(f"{path}:{lineno}: mask not found: {mask_path}")
        rows.append(ManifestRow(img_path, LABELS[raw_label], session, mask_path))
    return Manifest(rows, base)


# ---------------------------------------------------------------------------
# Config resolution: CLI flag > config file > built-in default.


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    file_path = getattr(args, "config", None)
    if file_path:
        try:
            loaded = json.loads(Path(file_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"bad config file {file_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"bad config file {file_path}: not a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["seed"] is None:
        env = os.environ.get("PROTOSCOPE_SEED")
        try:
            cfg["seed"] = int(env) if env else 0
        except ValueError:
            raise UsageError(f"PROTOSCOPE_SEED must be an integer, got {env!r}") from None
    cfg["mean"] = tuple(float(v) for v in cfg["mean"])
    cfg["std"] = tuple(float(v) for v in cfg["std"])
    if len(cfg["mean"]) != 3 or len(cfg["std"]) != 3:
        raise UsageError("mean and std must have 3 entries")
    if cfg["roi"] not in ("heuristic", "masks", "none"):
        raise UsageError(f"roi must be heuristic, masks, or none, got {cfg['roi']!r}")
    return cfg


def _roi_image(row: ManifestRow, cfg: dict) -> RasterImage:
    img = load_image(row.image_path)
    mode = cfg["roi"]
    if mode == "none":
        return img
    if mode == "masks":
        mask_path = row.mask_path
        if mask_path is None and cfg["masks"]:
            mask_path = Path(cfg["masks"]) / (row.image_path.stem + ".png")
        if mask_path is None or not Path(mask_path).is_file():
            raise DataError(f"no mask available for {row.image_path}")
        return roi.apply_mask(img, roi.load_mask(mask_path, img))
    try:
        seg = roi.segment_foreground(img)
    except roi.NoForegroundError as exc:
        raise DataError(f"segmentation failed for {row.image_path}: {exc}") from exc
    return roi.apply_mask(img, seg.mask)


def _session_rows(manifest: Manifest, cfg: dict) -> list:
    if cfg["pooled"]:
        return list(manifest.rows)
    session = cfg["session"]
    if session is None:
        raise UsageError("--session is required (or pass --pooled)")
    if session not in SESSIONS:
        raise UsageError(f"unknown session {session}")
    rows = [r for r in manifest.rows if r.session == session]
    if not rows:
        raise UsageError(f"no rows for session {session}")
    return rows


def _build_samples(rows, cfg: dict) -> list:
    samples = []
    if cfg["backbone"] != "seeded":
        fmap_dir = Path(cfg["backbone"])
        if not fmap_dir.is_dir():
            raise UsageError(f"backbone must be 'seeded' or an FMAP directory, got {fmap_dir}")
        for row in rows:
            fmap_path = fmap_dir / (row.image_path.stem + ".fmap")
            if not fmap_path.is_file():
                raise DataError(f"missing feature map {fmap_path}")
            try:
                fm = feat.load_feature_map(fmap_path)
            except feat.FmapError as exc:
                raise DataError(str(exc)) from exc
            samples.append(tr.Sample(label=row.label, fmap=fm))
        return samples
    for row in rows:
        samples.append(tr.Sample(label=row.label, image=_roi_image(row, cfg)))
    return samples


def _make_backbone(cfg: dict) -> feat.FrozenBackbone | None:
    if cfg["backbone"] != "seeded":
        return None
    return feat.init_frozen(prng.mix(cfg["seed"], _BACKBONE_TAG))


def _preset(cfg: dict) -> aug.AugmentPreset:
    return aug.preset_from_id(
        cfg["preset"], target=cfg["input_size"], mean=cfg["mean"], std=cfg["std"]
    )


def _tree_metadata(tree: pt.PrototypeTree, cfg: dict, backbone, session) -> None:
    if backbone is not None:
        tree.backbone = {
            "kind": "seeded",
            "seed": backbone.seed,
            "arch": [dict(layer) for layer in backbone.arch],
        }
    else:
        tree.backbone = {"kind": "external"}
    tree.normalization = {"mean": list(cfg["mean"]), "std": list(cfg["std"])}
    tree.preset_id = cfg["preset"]
    tree.train_info = {
        "seed": cfg["seed"],
        "session": session,
        "pooled": cfg["pooled"],
        "test_fraction": cfg["test_fraction"],
        "input_size": cfg["input_size"],
        "epochs": cfg["epochs"],
        "batch_size": cfg["batch_size"],
        "learning_rate": cfg["learning_rate"],
        "depth": cfg["depth"],
        "roi": cfg["roi"],
        "masks": cfg["masks"],
    }


def _write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Commands.


def cmd_segment(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["image_path,status"]
    failures = 0
    for row in manifest.rows:
        img = load_image(row.image_path)
        try:
            seg = roi.segment_foreground(img)
        except roi.NoForegroundError:
            lines.append(f"{row.image_path},NoForeground")
            failures += 1
            continue
        roi.save_mask(seg.mask, out_dir / (row.image_path.stem + ".png"))
        lines.append(f"{row.image_path},ok")
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")
    return 2 if failures else 0


def _train_one(rows, train_idx, test_idx, cfg, backbone, preset):
    samples = _build_samples(rows, cfg)
    config = tr.TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        tree_depth=cfg["depth"],
    )
    train_samples = [samples[i] for i in train_idx]
    test_samples = [samples[i] for i in test_idx]
    tree, history = tr.train_model(
        train_samples, config, preset, backbone=backbone, test_samples=test_samples
    )
    eval_maps = tr._eval_features(test_samples or train_samples, preset, backbone)
    eval_labels = [s.label for s in (test_samples or train_samples)]
    _, metrics = tr.evaluate(tree, eval_maps, eval_labels)
    return tree, history, metrics


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    rows = _session_rows(manifest, cfg)
    labels = [r.label for r in rows]
    sessions = [r.session for r in rows]
    for cls in (0, 1):
        if labels.count(cls) == 0:
            raise UsageError(f"class {LABEL_NAMES[cls]} is empty after filtering")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = _make_backbone(cfg)
    preset = _preset(cfg)

    if cfg["kfold"]:
        plan = tr.kfold_split(labels, k=cfg["kfold"], seed=cfg["seed"], sessions=sessions)
        fold_metrics = []
        for fold in range(cfg["kfold"]):
            tree, history, metrics = _train_one(
                rows, plan.fold_complement(fold), plan.fold_indices(fold), cfg, backbone, preset
            )
            _tree_metadata(tree, cfg, backbone, cfg["session"])
            tree.train_info["fold"] = fold
            pt.serialize(tree, out_dir / f"checkpoint_fold{fold}.json")
            tr.write_history_csv(history, out_dir / f"history_fold{fold}.csv")
            _write_json(metrics, out_dir / f"metrics_fold{fold}.json")
            fold_metrics.append(metrics)
        accs = [m["accuracy"] for m in fold_metrics]
        f1s = [m["macro"]["f1"] for m in fold_metrics]
        _write_json(
            {
                "folds": cfg["kfold"],
                "accuracy_mean": sum(accs) / len(accs),
                "accuracy_per_fold": accs,
                "macro_f1_mean": sum(f1s) / len(f1s),
                "macro_f1_per_fold": f1s,
            },
            out_dir / "metrics.json",
        )
        return 0

    plan = tr.split_train_test(labels, sessions, cfg["test_fraction"], cfg["seed"])
    train_idx, test_idx = plan.train_indices(), plan.test_indices()
    tree, history, metrics = _train_one(rows, train_idx, test_idx, cfg, backbone, preset)
    _tree_metadata(tree, cfg, backbone, cfg["session"])
    pt.serialize(tree, out_dir / "checkpoint.json")
    tr.write_history_csv(history, out_dir / "history.csv")
    metrics["split"] = {
        "train": {
            name: sum(1 for i in train_idx if labels[i] == cls)
            for cls, name in enumerate(LABEL_NAMES)
        },
        "test": {
            name: sum(1 for i in test_idx if labels[i] == cls)
            for cls, name in enumerate(LABEL_NAMES)
        },
    }
    _write_json(metrics, out_dir / "metrics.json")
    return 0


def _load_checkpoint(path) -> pt.PrototypeTree:
    try:
        return pt.deserialize(path)
    except pt.CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def _checkpoint_backbone(tree: pt.PrototypeTree, cfg: dict):
    info = tree.backbone or {"kind": "seeded"}
    if info.get("kind") == "seeded":
        backbone = feat.init_frozen(info["seed"], info.get("arch", feat.DEFAULT_ARCH))
        if backbone.out_channels != tree.feature_dim:
            raise UsageError(
                f"checkpoint/backbone mismatch: backbone emits {backbone.out_channels} "
                f"channels, tree expects {tree.feature_dim}"
            )
        return backbone
    if cfg["backbone"] == "seeded":
        raise UsageError(
            "checkpoint was trained on external features; pass --backbone FMAP_DIR"
        )
    return None


def _checkpoint_cfg(tree: pt.PrototypeTree, cfg: dict) -> dict:
    merged = dict(cfg)
    if tree.normalization:
        merged["mean"] = tuple(tree.normalization["mean"])
        merged["std"] = tuple(tree.normalization["std"])
    if tree.train_info:
        for key in ("seed", "session", "pooled", "test_fraction", "input_size", "roi", "masks"):
            if key in tree.train_info:
                merged[key] = tree.train_info[key]
    return merged


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    tree = _load_checkpoint(args.checkpoint)
    ck = _checkpoint_cfg(tree, cfg)
    if args.session is not None:
        ck["session"] = args.session
    manifest = load_manifest(args.manifest)
    rows = _session_rows(manifest, ck)
    labels = [r.label for r in rows]
    sessions = [r.session for r in rows]
    if args.split == "all":
        chosen = list(range(len(rows)))
    else:
        plan = tr.split_train_test(labels, sessions, ck["test_fraction"], ck["seed"])
        chosen = plan.test_indices() if args.split == "test" else plan.train_indices()
    if not chosen:
        raise UsageError(f"empty {args.split} set")
    backbone = _checkpoint_backbone(tree, ck)
    samples = _build_samples([rows[i] for i in chosen], ck)
    preset = aug.preset_from_id(0, target=ck["input_size"], mean=ck["mean"], std=ck["std"])
    maps = tr._eval_features(samples, preset, backbone)
    _, metrics = tr.evaluate(tree, maps, [s.label for s in samples])
    metrics["split"] = args.split
    metrics["count"] = len(samples)
    if args.out:
        _write_json(metrics, args.out)
    print(
        f"session={ck['session']} split={args.split} n={len(samples)} "
        f"accuracy={metrics['accuracy']:.4f} macro_f1={metrics['macro']['f1']:.4f}"
    )
    return 0


def cmd_explain(args) -> int:
    cfg = resolve_config(args)
    tree = _load_checkpoint(args.checkpoint)
    ck = _checkpoint_cfg(tree, cfg)
    image_path = Path(args.image)
    if not image_path.is_file():
        raise UsageError(f"image not found: {image_path}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    row = ManifestRow(image_path.resolve(), 0, ck.get("session") or 1, None)
    img = _roi_image(row, ck)
    tensor = aug.base_transform(img, target=ck["input_size"], mean=ck["mean"], std=ck["std"])
    backbone = _checkpoint_backbone(tree, ck)
    if backbone is None:
        raise UsageError("explain requires a seeded-backbone checkpoint")
    fm = feat.extract(backbone, tensor)
    report = xp.decision_chain(tree, fm, threshold=ck["threshold"])
    xp.write_report(report, out_dir / "report.json")
    display = RasterImage(np.clip(tensor.data * np.asarray(ck["std"]) + np.asarray(ck["mean"]), 0, 1))
    for step in report.steps:
        hm = xp.prototype_heatmap(tree, step.node, fm, display)
        overlay = xp.render_overlay(display, hm)
        save_image(overlay, out_dir / f"node{step.node}_overlay.png")
    return 0


def cmd_project(args) -> int:
    cfg = resolve_config(args)
    tree = _load_checkpoint(args.checkpoint)
    ck = _checkpoint_cfg(tree, cfg)
    if args.session is not None:
        ck["session"] = args.session
    manifest = load_manifest(args.manifest)
    rows = _session_rows(manifest, ck)
    labels = [r.label for r in rows]
    sessions = [r.session for r in rows]
    if args.split == "all":
        chosen = list(range(len(rows)))
    else:
        plan = tr.split_train_test(labels, sessions, ck["test_fraction"], ck["seed"])
        chosen = plan.train_indices()
    backbone = _checkpoint_backbone(tree, ck)
    samples = _build_samples([rows[i] for i in chosen], ck)
    preset = aug.preset_from_id(0, target=ck["input_size"], mean=ck["mean"], std=ck["std"])
    maps = tr._eval_features(samples, preset, backbone)
    ids = [str(rows[i].image_path) for i in chosen]
    projected = pt.project_prototypes(tree, maps, map_ids=ids)
    pt.serialize(projected, args.out)
    return 0


def cmd_features(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = _make_backbone(cfg)
    if backbone is None:
        raise UsageError("features export requires --backbone seeded")
    stems = [row.image_path.stem for row in manifest.rows]
    dupes = {s for s in stems if stems.count(s) > 1}
    if dupes:
        raise UsageError(f"duplicate image stems would collide: {sorted(dupes)}")
    for row in manifest.rows:
        img = _roi_image(row, cfg)
        tensor = aug.base_transform(
            img, target=cfg["input_size"], mean=cfg["mean"], std=cfg["std"]
        )
        fm = feat.extract(backbone, tensor)
        feat.save_feature_map(fm, out_dir / (row.image_path.stem + ".fmap"))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing.


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output file or directory")


def _add_pipeline(p):
    p.add_argument("--preset", type=int, choices=range(6))
    p.add_argument("--session", type=int)
    p.add_argument("--pooled", action="store_true", default=None)
    p.add_argument("--backbone", help="'seeded' or a directory of FMAP files")
    p.add_argument("--roi", choices=("heuristic", "masks", "none"))
    p.add_argument("--masks", help="directory of mask PNGs named by image stem")
    p.add_argument("--input-size", dest="input_size", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="protoscope", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="write heuristic foreground masks")
    p.add_argument("manifest")
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train a prototype tree on one session")
    p.add_argument("manifest")
    _add_common(p)
    _add_pipeline(p)
    p.add_argument("--kfold", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--depth", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    _add_common(p)
    _add_pipeline(p)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="decision chain + heatmaps for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    _add_common(p)
    _add_pipeline(p)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("project", help="project prototypes onto training patches")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    _add_common(p)
    _add_pipeline(p)
    p.add_argument("--split", choices=("train", "all"), default="train")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("features", help="batch-export FMAP feature files")
    p.add_argument("manifest")
    _add_common(p)
    _add_pipeline(p)
    p.set_defaults(func=cmd_features)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "out", None) is None and args.command != "eval":
            raise UsageError("--out is required")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RasterError, feat.FmapError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
