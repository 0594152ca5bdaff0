"""Distance-threshold evaluation of point detections: TP/FP/FN, F1 and AP per class."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

AP_METHOD = "all-points interpolated AP over a per-class confidence sweep"


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    cls: int
    conf: float = 1.0

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "class": self.cls, "conf": self.conf}

    @classmethod
    def from_json(cls, d: Mapping) -> "Detection":
        return cls(float(d["x"]), float(d["y"]), int(d["class"]), float(d.get("conf", 1.0)))


@dataclass(frozen=True)
class GroundTruthCell:
    x: float
    y: float
    cls: int


@dataclass
class EvalConfig:
    match_radius: float = 6.0
    num_classes: int = 3
    confidence_threshold: float = 0.5

    def __post_init__(self):
        if self.match_radius <= 0:
            raise ValueError("match_radius must be positive")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]  # (detection index, gt index)
    tp_flags: np.ndarray  # per detection, in input order

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)


def _ratio(a: float, b: float) -> float:
    return float(a) / b if b else 0.0


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _xy(items) -> np.ndarray:
    return np.array([[it.x, it.y] for it in items], dtype=np.float64).reshape(-1, 2)


def _confidence_order(confs: np.ndarray) -> np.ndarray:
    # descending confidence, ties by input index
    return np.lexsort((np.arange(len(confs)), -confs))


def match_for_eval(detections: Sequence[Detection], gts: Sequence[GroundTruthCell],
                   radius: float, class_id: int | None = None) -> MatchResult:
    """Greedy one-to-one matching by descending confidence.

    Each detection takes the nearest still-unmatched ground truth strictly
    closer than ``radius``.  With ``class_id`` set, both lists are first
    filtered to that class and the returned indices refer to the filtered
    lists.
    """
    if class_id is not None:
        detections = [d for d in detections if d.cls == class_id]
        gts = [g for g in gts if g.cls == class_id]
    det = _xy(detections)
    gt = _xy(gts)
    confs = np.array([d.conf for d in detections], dtype=np.float64)
    taken = np.zeros(len(gt), dtype=bool)
    flags = np.zeros(len(det), dtype=bool)
    pairs = []
    if len(gt):
        dist = np.sqrt(((det[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
        for i in _confidence_order(confs):
            d = np.where(taken | (dist[i] >= radius), np.inf, dist[i])
            j = int(np.argmin(d)) if len(d) else -1
            if j >= 0 and np.isfinite(d[j]):
                taken[j] = True
                flags[i] = True
                pairs.append((int(i), j))
    tp = int(flags.sum())
    return MatchResult(tp, len(det) - tp, len(gt) - tp, pairs, flags)


def pr_curve(confs: np.ndarray, tp_flags: np.ndarray, num_gt: int):
    """Precision and recall after each detection of the confidence-sorted list."""
    order = _confidence_order(np.asarray(confs, dtype=np.float64))
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64)[order])
    n = np.arange(1, len(order) + 1)
    precision = tp / n
    recall = tp / num_gt if num_gt else np.zeros_like(tp)
    return precision, recall


def ap_from_flags(confs, tp_flags, num_gt: int) -> float:
    """All-points AP: area under the monotone precision envelope."""
    if num_gt == 0:
        return float("nan")
    precision, recall = pr_curve(confs, tp_flags, num_gt)
    if len(precision) == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections: Sequence[Detection], gts: Sequence[GroundTruthCell],
                      radius: float, class_id: int | None = None) -> float:
    """AP for one class on one pooled detection list.  NaN when there are no ground truths."""
    if class_id is not None:
        detections = [d for d in detections if d.cls == class_id]
        gts = [g for g in gts if g.cls == class_id]
    res = match_for_eval(detections, gts, radius)
    return ap_from_flags(np.array([d.conf for d in detections]), res.tp_flags, len(gts))


@dataclass
class ClassReport:
    precision: float
    recall: float
    f1: float
    ap: float | None
    tp: int
    fp: int
    fn: int
    num_gt: int


@dataclass
class EvalReport:
    per_class: dict[int, ClassReport]
    macro_f1: float
    macro_ap: float
    match_radius: float
    confidence_threshold: float
    excluded_classes: list[int] = field(default_factory=list)
    images_per_second: float | None = None
    ap_method: str = AP_METHOD

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in d["per_class"].items()}
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def table(self) -> str:
        lines = [
            f"# radius {self.match_radius:g} px, F1 at conf >= {self.confidence_threshold:g}; AP: {self.ap_method}",
            f"{'class':>5} {'n_gt':>6} {'TP':>6} {'FP':>6} {'FN':>6} {'P':>7} {'R':>7} {'F1':>7} {'AP':>7}",
        ]
        for c, r in sorted(self.per_class.items()):
            ap = "   n/a" if r.ap is None else f"{r.ap:7.4f}"
            lines.append(
                f"{c:>5} {r.num_gt:>6} {r.tp:>6} {r.fp:>6} {r.fn:>6} "
                f"{r.precision:7.4f} {r.recall:7.4f} {r.f1:7.4f} {ap}"
            )
        lines.append(f"macro F1 {self.macro_f1:.4f}  macro AP {self.macro_ap:.4f}")
        if self.excluded_classes:
            lines.append(f"excluded (no ground truth): {self.excluded_classes}")
        if self.images_per_second is not None:
            lines.append(f"throughput {self.images_per_second:.2f} images/s")
        return "\n".join(lines)


def evaluate_dataset(predictions: Mapping[str, Sequence[Detection]],
                     annotations: Mapping[str, Sequence[GroundTruthCell]],
                     config: EvalConfig, images_per_second: float | None = None) -> EvalReport:
    """Pool matches per class over all images and average over classes that have ground truth."""
    missing = sorted(set(annotations) - set(predictions))
    if missing:
        raise KeyError(f"no predictions for image(s): {', '.join(missing)}")
    extra = sorted(set(predictions) - set(annotations))
    if extra:
        raise KeyError(f"no annotations for image(s): {', '.join(extra)}")

    per_class, excluded = {}, []
    f1s, aps = [], []
    keys = sorted(annotations)
    for c in range(config.num_classes):
        tp = fp = fn = n_gt = 0
        confs, flags = [], []
        for key in keys:
            dets = [d for d in predictions[key] if d.cls == c]
            gts = [g for g in annotations[key] if g.cls == c]
            n_gt += len(gts)
            sweep = match_for_eval(dets, gts, config.match_radius)
            confs.extend(d.conf for d in dets)
            flags.extend(sweep.tp_flags.tolist())
            kept = [d for d in dets if d.conf >= config.confidence_threshold]
            cut = match_for_eval(kept, gts, config.match_radius)
            tp, fp, fn = tp + cut.tp, fp + cut.fp, fn + cut.fn
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        ap = ap_from_flags(np.array(confs), np.array(flags, dtype=bool), n_gt) if n_gt else None
        per_class[c] = ClassReport(p, r, f1_score(p, r), ap, tp, fp, fn, n_gt)
        if n_gt:
            f1s.append(per_class[c].f1)
            aps.append(ap)
        else:
            excluded.append(c)
    return EvalReport(
        per_class=per_class,
        macro_f1=float(np.mean(f1s)) if f1s else 0.0,
        macro_ap=float(np.mean(aps)) if aps else 0.0,
        match_radius=config.match_radius,
        confidence_threshold=config.confidence_threshold,
        excluded_classes=excluded,
        images_per_second=images_per_second,
    )
