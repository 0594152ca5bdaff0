"""Training loop, inference wrapper and checkpoint format.

Checkpoint format (``torch.save`` zip archive, loaded with ``weights_only=True``)::

    {
      "format": "celldet-checkpoint",
      "version": 1,
      "model_config": {...},          # ModelConfig.to_dict()
      "state_dict": {name: tensor},   # hierarchical parameter names
      "meta": {...},                  # step, best macro F1, train config
    }
"""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .assignment import LossConfig, batch_loss
from .data import AugmentConfig, MFoVSample, augment, pad_to_multiple
from .metrics import Detection, EvalConfig, EvalReport, GroundTruthCell, evaluate_dataset
from .model import ModelConfig, ModelOutput, PointProposalNet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "celldet-checkpoint"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    strict_deterministic: bool = False
    eval_every: int = 100
    augment: bool = True
    lr_decay_steps: int = 0  # 0 keeps the rate constant
    lr_decay_gamma: float = 0.1
    grad_clip_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    model: PointProposalNet
    history: list[dict]
    evals: list[dict] = field(default_factory=list)
    best_macro_f1: float = float("nan")
    best_checkpoint: Optional[Path] = None


def set_determinism(seed: int, strict: bool) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if strict:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def to_tensor_batch(samples: Sequence[MFoVSample], mfov_k: int):
    """Stack samples into ``(B, 3, H, W)`` (or ``(B, K, 3, H, W)``) plus per-image targets."""
    images = torch.from_numpy(np.stack([s.stacked() for s in samples]))
    if mfov_k == 1:
        images = images[:, -1]
    elif images.shape[1] != mfov_k:
        raise ValueError(f"model expects {mfov_k} FoVs, samples have {images.shape[1]}")
    targets = [(torch.from_numpy(s.points).float(), torch.from_numpy(s.classes)) for s in samples]
    return images, targets


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> PointProposalNet:
    if seed is not None:
        torch.manual_seed(seed)
    return PointProposalNet(cfg)


def output_detections(output: ModelOutput, threshold: float) -> list[list[Detection]]:
    """Keep proposals whose best foreground probability reaches ``threshold``."""
    probs = output.logits.detach().softmax(-1)[..., :-1]
    conf, cls = probs.max(-1)
    pts = output.final_points.detach()
    dets = []
    for b in range(pts.shape[0]):
        keep = torch.nonzero(conf[b] >= threshold).flatten().tolist()
        dets.append([
            Detection(float(pts[b, i, 0]), float(pts[b, i, 1]), int(cls[b, i]), float(conf[b, i]))
            for i in keep
        ])
    return dets


@torch.no_grad()
def predict(model: PointProposalNet, samples: Sequence[MFoVSample], confidence_threshold: float = 0.5,
            batch_size: int = 8) -> tuple[list[list[Detection]], float]:
    """Detections per sample and the measured images/second."""
    mult = model.cfg.size_multiple
    for s in samples:
        h, w = s.size
        if h % mult or w % mult:
            raise ValueError(f"image {s.name or '?'} is {h}x{w}; sides must be divisible by {mult}")
    was_training = model.training
    model.eval()
    out: list[list[Detection]] = []
    start = time.perf_counter()
    for i in range(0, len(samples), batch_size):
        images, _ = to_tensor_batch(samples[i:i + batch_size], model.cfg.mfov_k)
        out.extend(output_detections(model(images), confidence_threshold))
    elapsed = time.perf_counter() - start
    model.train(was_training)
    return out, (len(samples) / elapsed if elapsed > 0 else float("inf"))


def evaluate_model(model: PointProposalNet, samples: Sequence[MFoVSample], eval_cfg: EvalConfig) -> EvalReport:
    dets, ips = predict(model, samples, eval_cfg.confidence_threshold)
    preds = {s.name or str(i): d for i, (s, d) in enumerate(zip(samples, dets))}
    anns = {s.name or str(i): gts_of(s) for i, s in enumerate(samples)}
    return evaluate_dataset(preds, anns, eval_cfg, images_per_second=ips)


def gts_of(sample: MFoVSample) -> list[GroundTruthCell]:
    return [GroundTruthCell(float(x), float(y), int(c)) for (x, y), c in zip(sample.points, sample.classes)]


def save_checkpoint(path, model: PointProposalNet, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }, path)
    return path


def load_checkpoint(path) -> tuple[PointProposalNet, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    model = PointProposalNet(ModelConfig(**blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("meta", {})


def train(train_samples: Sequence[MFoVSample], model_cfg: ModelConfig, train_cfg: TrainConfig,
          val_samples: Optional[Sequence[MFoVSample]] = None, eval_cfg: Optional[EvalConfig] = None,
          loss_cfg: Optional[LossConfig] = None, augment_cfg: Optional[AugmentConfig] = None,
          out_dir=None, model: Optional[PointProposalNet] = None) -> TrainResult:
    """AdamW training with Hungarian label assignment.

    ``history`` holds one record per step with the loss breakdown.  When
    ``val_samples`` is given the model is evaluated at step 0, every
    ``eval_every`` steps and after the last step; evaluation records go to
    ``out_dir/metrics.jsonl`` and the best-macro-F1 weights to
    ``out_dir/best.pt``.
    """
    if not train_samples:
        raise ValueError("training dataset is empty")
    set_determinism(train_cfg.seed, train_cfg.strict_deterministic)
    loss_cfg = loss_cfg or LossConfig()
    eval_cfg = eval_cfg or EvalConfig(num_classes=model_cfg.head.num_classes)
    augment_cfg = augment_cfg or AugmentConfig()
    mult = model_cfg.size_multiple
    train_samples = [pad_to_multiple(s, mult) for s in train_samples]
    val_samples = [pad_to_multiple(s, mult) for s in val_samples] if val_samples else None

    model = model if model is not None else build_model(model_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    sched = None
    if train_cfg.lr_decay_steps > 0:
        sched = torch.optim.lr_scheduler.StepLR(opt, train_cfg.lr_decay_steps, train_cfg.lr_decay_gamma)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = (out_dir / "metrics.jsonl").open("w", encoding="utf-8")

    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult(model=model, history=[])
    best = -1.0

    def run_eval(step: int) -> None:
        nonlocal best
        if not val_samples:
            return
        report = evaluate_model(model, val_samples, eval_cfg)
        rec = {"step": step, "macro_f1": report.macro_f1, "macro_ap": report.macro_ap,
               "images_per_second": report.images_per_second}
        result.evals.append(rec)
        if metrics_file is not None:
            metrics_file.write(json.dumps(rec) + "\n")
            metrics_file.flush()
        log.info("step %d: macro F1 %.4f, macro AP %.4f", step, report.macro_f1, report.macro_ap)
        if report.macro_f1 > best:
            best = report.macro_f1
            result.best_macro_f1 = best
            if out_dir is not None:
                result.best_checkpoint = save_checkpoint(
                    out_dir / "best.pt", model,
                    {"step": step, "macro_f1": best, "train_config": asdict(train_cfg)},
                )

    try:
        run_eval(0)
        order: list[int] = []
        model.train()
        for step in range(1, train_cfg.max_steps + 1):
            batch = []
            while len(batch) < train_cfg.batch_size:
                if not order:
                    order = rng.permutation(len(train_samples)).tolist()
                batch.append(train_samples[order.pop()])
            if train_cfg.augment:
                batch = [augment(s, rng, augment_cfg, mult) for s in batch]
            images, targets = to_tensor_batch(batch, model_cfg.mfov_k)
            output = model(images)
            if not (torch.isfinite(output.matcher_logits).all() and torch.isfinite(output.matcher_points).all()):
                raise DivergenceError(f"non-finite network output at step {step}")
            losses, assignments = batch_loss(output, targets, loss_cfg)
            if not torch.isfinite(losses.total):
                raise DivergenceError(f"non-finite loss at step {step}: {losses.item()}")
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            if train_cfg.grad_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip_norm)
            opt.step()
            if sched is not None:
                sched.step()
            rec = {"step": step, **losses.item()}
            result.history.append(rec)
            if step % train_cfg.eval_every == 0 and step != train_cfg.max_steps:
                run_eval(step)
                model.train()
        if train_cfg.max_steps > 0:
            run_eval(train_cfg.max_steps)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "last.pt", model, {"step": train_cfg.max_steps,
                                                     "train_config": asdict(train_cfg)})
    model.eval()
    return result


def matched_distances(model: PointProposalNet, samples: Sequence[MFoVSample],
                      loss_cfg: Optional[LossConfig] = None) -> dict:
    """Mean distance to the matched ground truth of the initial, deformed and final positions.

    Matching uses the same Hungarian assignment as training.
    """
    loss_cfg = loss_cfg or LossConfig()
    model.eval()
    d_init, d_def, d_fin = [], [], []
    with torch.no_grad():
        images, targets = to_tensor_batch(samples, model.cfg.mfov_k)
        out = model(images)
        _, assignments = batch_loss(out, targets, loss_cfg)
        grid = out.proposals_initial.initial.double()
        for b, ((gp, _), a) in enumerate(zip(targets, assignments)):
            if not a.matched:
                continue
            gi = torch.tensor(a.gt_indices)
            pi = torch.tensor(a.proposal_indices)
            g = gp.double()[gi]
            d_init.append((grid[pi] - g).norm(dim=-1))
            d_def.append((out.proposals_deformed.deformed[b].double()[pi] - g).norm(dim=-1))
            d_fin.append((out.final_points[b].double()[pi] - g).norm(dim=-1))
    mean = lambda xs: float(torch.cat(xs).mean()) if xs else math.nan  # noqa: E731
    return {"initial": mean(d_init), "deformed": mean(d_def), "final": mean(d_fin)}
