"""Command-line entry point: ``celldet {generate-synth,train,predict,evaluate,visualize}``.

Configuration comes from an optional YAML/JSON file with the sections listed
by ``--help``; ``--set section.key=value`` and dedicated flags override the
file.  ``--dump-config`` prints the resolved configuration and exits.

Exit codes: 0 success, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from collections import Counter
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, ImageDraw

from .assignment import LossConfig
from .data import (
    AnnotationError,
    AugmentConfig,
    SynthSpec,
    generate_synthetic,
    load_any,
    pad_to_multiple,
    read_annotation,
    save_mfov_dataset,
)
from .metrics import Detection, EvalConfig, GroundTruthCell, evaluate_dataset
from .model import BackboneConfig, HeadConfig, ModelConfig
from .training import TrainConfig, gts_of, load_checkpoint, predict, train

log = logging.getLogger("celldet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "eval": EvalConfig,
    "synth": SynthSpec,
    "augment": AugmentConfig,
}
NESTED = {("model", "backbone"): BackboneConfig, ("model", "head"): HeadConfig}

CLASS_COLORS = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180),
                (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128)]


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {name: asdict(cls()) for name, cls in SECTIONS.items()}


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{args.config}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
        _merge(cfg, doc)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_dotted(cfg, key, yaml.safe_load(raw))
    for dotted, attr in FLAG_KEYS:
        value = getattr(args, attr, None)
        if value is not None:
            _set_dotted(cfg, dotted, value)
    return cfg


# flag attribute -> config key; flags win over file and --set
FLAG_KEYS = [
    ("synth.seed", "seed"),
    ("train.seed", "seed"),
    ("model.mfov_k", "mfov_k"),
    ("eval.match_radius", "radius"),
    ("eval.confidence_threshold", "threshold"),
    ("train.max_steps", "steps"),
    ("train.strict_deterministic", "strict"),
]


def build(cfg: dict, section: str):
    try:
        if section == "model":
            return ModelConfig(**copy.deepcopy(cfg["model"]))
        return SECTIONS[section](**cfg[section])
    except TypeError as e:
        raise ConfigError(f"[{section}] {e}") from e


def config_help() -> str:
    lines = ["configuration keys (section.key = default):"]

    def walk(prefix, obj):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if is_dataclass(value):
                walk(f"{prefix}{f.name}.", value)
            else:
                lines.append(f"  {prefix}{f.name} = {json.dumps(value) if not isinstance(value, tuple) else list(value)}")

    for name, cls in SECTIONS.items():
        walk(f"{name}.", cls())
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands


def cmd_generate_synth(args, cfg) -> int:
    spec = build(cfg, "synth")
    k = cfg["model"]["mfov_k"]
    samples = generate_synthetic(spec, args.n_images, k)
    out = Path(args.out)
    save_mfov_dataset(samples, out)
    (out / "synth_config.json").write_text(
        json.dumps({"synth": cfg["synth"], "n_images": args.n_images, "mfov_k": k}, indent=1), encoding="utf-8"
    )
    counts = Counter(int(c) for s in samples for c in s.classes)
    print(f"wrote {len(samples)} samples with {k} FoV image(s) each to {out}")
    for c in range(spec.num_classes):
        print(f"  class {c}: {counts.get(c, 0)} cells")
    print(f"  total: {sum(counts.values())} cells")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    model_cfg = build(cfg, "model")
    samples = load_any(args.data, model_cfg.head.num_classes)
    if args.val:
        val = load_any(args.val, model_cfg.head.num_classes)
        tr = samples
    else:
        n_val = int(round(len(samples) * args.val_fraction))
        tr, val = (samples[:-n_val], samples[-n_val:]) if 0 < n_val < len(samples) else (samples, samples)
    res = train(tr, model_cfg, build(cfg, "train"), val_samples=val, eval_cfg=build(cfg, "eval"),
                loss_cfg=build(cfg, "loss"), augment_cfg=build(cfg, "augment"), out_dir=args.out)
    out = Path(args.out)
    with (out / "loss_history.jsonl").open("w", encoding="utf-8") as fh:
        for rec in res.history:
            fh.write(json.dumps(rec) + "\n")
    print(f"trained {len(res.history)} steps; best validation macro F1 {res.best_macro_f1:.4f}")
    print(f"checkpoints in {out}")
    return EXIT_OK


def _write_predictions(out: Path, names, dets) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, d in zip(names, dets):
        (out / f"{name}.json").write_text(
            json.dumps({"detections": [x.to_json() for x in d]}, indent=1), encoding="utf-8"
        )


def read_predictions(path) -> list[Detection]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        return [Detection.from_json(d) for d in doc["detections"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise AnnotationError(f"{path}: malformed predictions file ({e!r})") from e


def _live_predictions(args, cfg, samples):
    model, _ = load_checkpoint(args.checkpoint)
    mult = model.cfg.size_multiple
    for s in samples:
        h, w = s.size
        if (h % mult or w % mult) and not args.pad:
            raise ValueError(f"{s.name}: size {h}x{w} must be divisible by {mult} (use --pad)")
    padded = [pad_to_multiple(s, mult) for s in samples]
    dets, ips = predict(model, padded, cfg["eval"]["confidence_threshold"])
    # undo symmetric padding
    fixed = []
    for s, p, d in zip(samples, padded, dets):
        dy = (p.size[0] - s.size[0]) // 2
        dx = (p.size[1] - s.size[1]) // 2
        fixed.append([Detection(x.x - dx, x.y - dy, x.cls, x.conf) for x in d])
    return fixed, ips


def cmd_predict(args, cfg) -> int:
    samples = load_any(args.data)
    dets, ips = _live_predictions(args, cfg, samples)
    _write_predictions(Path(args.out), [s.name for s in samples], dets)
    print(f"{len(samples)} images, {sum(map(len, dets))} detections, {ips:.2f} images/s")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    eval_cfg = build(cfg, "eval")
    samples = load_any(args.data, eval_cfg.num_classes)
    anns = {s.name: gts_of(s) for s in samples}
    ips = None
    if args.predictions:
        pred_dir = Path(args.predictions)
        preds = {}
        for name in anns:
            f = pred_dir / f"{name}.json"
            if not f.exists():
                raise KeyError(f"no predictions for image {name!r} ({f})")
            preds[name] = read_predictions(f)
    elif args.checkpoint:
        dets, ips = _live_predictions(args, cfg, samples)
        preds = {s.name: d for s, d in zip(samples, dets)}
    else:
        raise ConfigError("evaluate needs --predictions or --checkpoint")
    report = evaluate_dataset(preds, anns, eval_cfg, images_per_second=ips)
    print(report.table())
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report.dumps(), encoding="utf-8")
    return EXIT_OK


def draw_points(image: np.ndarray, points, classes, radius: int = 3) -> np.ndarray:
    """Return a copy of ``image`` with a class-colored ring at every point."""
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8).copy())
    draw = ImageDraw.Draw(canvas)
    for (x, y), c in zip(points, classes):
        color = CLASS_COLORS[int(c) % len(CLASS_COLORS)]
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], outline=color, width=1)
    return np.asarray(canvas)


def cmd_visualize(args, cfg) -> int:
    image = np.asarray(Image.open(args.image).convert("RGB"))
    if args.deformation:
        if not args.checkpoint:
            raise ConfigError("--deformation needs --checkpoint")
        return _visualize_deformation(args, image)
    if args.predictions:
        dets = read_predictions(args.predictions)
        pts, cls = [(d.x, d.y) for d in dets], [d.cls for d in dets]
    elif args.annotation:
        item = read_annotation(args.annotation)
        pts, cls = [(x, y) for x, y, _ in item.cells], [c for _, _, c in item.cells]
    else:
        raise ConfigError("visualize needs --predictions, --annotation or --deformation")
    out = draw_points(image, pts, cls)
    Image.fromarray(out).save(args.out)
    print(f"drew {len(pts)} markers to {args.out}")
    return EXIT_OK


def _visualize_deformation(args, image: np.ndarray) -> int:
    import torch

    model, _ = load_checkpoint(args.checkpoint)
    if model.deformation is None:
        raise ConfigError("checkpoint has no deformation head (iterative mode)")
    if model.cfg.mfov_k != 1:
        raise ConfigError("deformation view supports single-FoV checkpoints only")
    mult = model.cfg.size_multiple
    h, w = image.shape[:2]
    if h % mult or w % mult:
        raise ValueError(f"image size {h}x{w} must be divisible by {mult}")
    x = torch.from_numpy(image.transpose(2, 0, 1).astype(np.float32) / 255.0)[None]
    with torch.no_grad():
        out = model(x)
    probs = out.logits.softmax(-1)[0, :, :-1]
    conf, cls = probs.max(-1)
    keep = (conf >= args.threshold if args.threshold is not None else conf >= 0.5).nonzero().flatten()
    init = out.proposals_initial.initial[keep].numpy()
    deformed = out.proposals_deformed.deformed[0, keep].numpy()
    c = cls[keep].numpy()
    left = draw_points(image, init, c)
    right = draw_points(image, deformed, c)
    Image.fromarray(np.concatenate([left, right], axis=1)).save(args.out)
    disp = float(np.linalg.norm(deformed - init, axis=1).mean()) if len(keep) else 0.0
    print(f"foreground proposals: {len(keep)}; mean displacement {disp:.4f} px")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    epilog = config_help()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="celldet", description=__doc__, epilog=epilog, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-synth", help="write a synthetic dataset", epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--mfov-k", dest="mfov_k", type=int)
    p.set_defaults(func=cmd_generate_synth)

    p = sub.add_parser("train", help="train a model", epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mfov-k", dest="mfov_k", type=int)
    p.add_argument("--radius", type=float)
    p.add_argument("--strict", action="store_const", const=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-image prediction files", epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--pad", action="store_true", help="pad images to the required size multiple")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against annotations", epilog=epilog,
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", help="directory of per-image prediction files")
    p.add_argument("--checkpoint", help="predict live with this checkpoint")
    p.add_argument("--radius", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--pad", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="draw points on an image", epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--predictions")
    p.add_argument("--annotation")
    p.add_argument("--checkpoint")
    p.add_argument("--deformation", action="store_true", help="initial vs deformed proposals side by side")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            print(yaml.safe_dump(json.loads(json.dumps(cfg)), sort_keys=False))
            return EXIT_OK
        return args.func(args, cfg)
    except (ConfigError, AnnotationError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def tree_digest(root) -> str:
    """SHA-256 over relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(f.relative_to(root).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


if __name__ == "__main__":
    sys.exit(main())
