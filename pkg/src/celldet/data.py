"""Point-annotation I/O, training augmentation and the synthetic blob-cell generator.

Annotation JSON (one file per image)::

    {"width": int, "height": int, "cells": [{"x": float, "y": float, "class": int}, ...]}

Plain datasets live under ``root/images/<name>.png`` and
``root/annotations/<name>.json``.  Multi-FoV datasets use one directory per
sample, ``root/sample_0001/fov_1.png ... fov_K.png`` plus ``fov_K.json``; FoV 1
is the widest view and only FoV ``K`` is annotated.

Synthetic geometry: the generator draws a canvas whose side is
``canvas_size * 2**(K-1)`` pixels at the innermost magnification.  View ``k``
covers the centered square of side ``canvas_size * 2**(K-k)`` and is
box-downsampled by ``f = 2**(K-k)``, so a canvas point ``X`` lands at
``(X - o_k - (f - 1) / 2) / f`` in view ``k`` where ``o_k`` is the view's
offset on the canvas.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

DEFAULT_COLORS = [(20, 80, 140), (80, 140, 20), (140, 20, 80)]
DEFAULT_TINTS = [(250, 170, 170), (170, 250, 170), (170, 170, 250)]
BACKGROUND = (220, 215, 225)


class AnnotationError(ValueError):
    pass


@dataclass
class AnnotatedImage:
    image_path: Optional[str]
    width: int
    height: int
    cells: list[tuple[float, float, int]] = field(default_factory=list)
    magnification_tag: Optional[str] = None

    def validate(self, num_classes: Optional[int] = None, source: str = "") -> None:
        for i, (x, y, c) in enumerate(self.cells):
            where = f"{source} cell #{i}"
            if not (math.isfinite(x) and math.isfinite(y)):
                raise AnnotationError(f"{where}: non-finite coordinate ({x}, {y})")
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise AnnotationError(
                    f"{where}: ({x}, {y}) outside [0, {self.width}) x [0, {self.height})"
                )
            if c < 0 or (num_classes is not None and c >= num_classes):
                raise AnnotationError(f"{where}: unknown class id {c}")

    def to_json(self) -> dict:
        d = {
            "width": self.width,
            "height": self.height,
            "cells": [{"x": float(x), "y": float(y), "class": int(c)} for x, y, c in self.cells],
        }
        if self.magnification_tag is not None:
            d["magnification_tag"] = self.magnification_tag
        return d


def parse_annotation(doc: dict, source: str = "", image_path: Optional[str] = None,
                     num_classes: Optional[int] = None) -> AnnotatedImage:
    try:
        width, height = int(doc["width"]), int(doc["height"])
        cells = [(float(c["x"]), float(c["y"]), int(c["class"])) for c in doc["cells"]]
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationError(f"{source}: malformed annotation ({e!r})") from e
    item = AnnotatedImage(image_path, width, height, cells, doc.get("magnification_tag"))
    item.validate(num_classes, source)
    return item


def read_annotation(path, num_classes: Optional[int] = None, image_path: Optional[str] = None) -> AnnotatedImage:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: malformed JSON ({e})") from e
    return parse_annotation(doc, str(path), image_path, num_classes)


def write_annotation(item: AnnotatedImage, path) -> None:
    Path(path).write_text(json.dumps(item.to_json(), indent=1), encoding="utf-8")


def load_dataset(root, num_classes: Optional[int] = None) -> list[AnnotatedImage]:
    """Read ``root/annotations/*.json``, pairing each with ``root/images/<stem>.*``."""
    root = Path(root)
    ann_dir, img_dir = root / "annotations", root / "images"
    if not ann_dir.is_dir() or not img_dir.is_dir():
        raise AnnotationError(f"{root}: expected images/ and annotations/ subdirectories")
    items = []
    for ann in sorted(ann_dir.glob("*.json")):
        matches = sorted(img_dir.glob(ann.stem + ".*"))
        if not matches:
            raise AnnotationError(f"{ann}: no image named {ann.stem}.* in {img_dir}")
        rel = matches[0].relative_to(root).as_posix()
        items.append(read_annotation(ann, num_classes, image_path=rel))
    return items


def save_dataset(items: Sequence[AnnotatedImage], root, images: Optional[Sequence[np.ndarray]] = None) -> None:
    root = Path(root)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for i, item in enumerate(items):
        stem = Path(item.image_path).stem if item.image_path else f"image_{i:04d}"
        if images is not None:
            Image.fromarray(images[i]).save(root / "images" / f"{stem}.png")
        write_annotation(item, root / "annotations" / f"{stem}.json")


# ---------------------------------------------------------------------------
# in-memory samples


@dataclass
class MFoVSample:
    """``images[k-1]`` is FoV ``k`` as ``(H, W, 3)`` uint8; cells belong to the last one."""

    images: list[np.ndarray]
    points: np.ndarray  # (N, 2) float64, (x, y) in the innermost view
    classes: np.ndarray  # (N,) int64
    name: str = ""

    @property
    def num_fovs(self) -> int:
        return len(self.images)

    @property
    def size(self) -> tuple[int, int]:
        h, w = self.images[-1].shape[:2]
        return h, w

    def annotation(self) -> AnnotatedImage:
        h, w = self.size
        cells = [(float(x), float(y), int(c)) for (x, y), c in zip(self.points, self.classes)]
        return AnnotatedImage(f"fov_{self.num_fovs}.png", w, h, cells)

    def stacked(self) -> np.ndarray:
        """``(K, 3, H, W)`` float32 in [0, 1]."""
        return np.stack([im.transpose(2, 0, 1) for im in self.images]).astype(np.float32) / 255.0


def image_sample(image: np.ndarray, item: AnnotatedImage, name: str = "") -> MFoVSample:
    pts = np.array([[x, y] for x, y, _ in item.cells], dtype=np.float64).reshape(-1, 2)
    cls = np.array([c for _, _, c in item.cells], dtype=np.int64)
    return MFoVSample([np.asarray(image, dtype=np.uint8)], pts, cls, name)


def load_images(root, items: Sequence[AnnotatedImage]) -> list[MFoVSample]:
    root = Path(root)
    out = []
    for item in items:
        img = np.asarray(Image.open(root / item.image_path).convert("RGB"))
        out.append(image_sample(img, item, Path(item.image_path).stem))
    return out


def save_mfov_dataset(samples: Sequence[MFoVSample], root) -> None:
    root = Path(root)
    for i, s in enumerate(samples, start=1):
        d = root / (s.name or f"sample_{i:04d}")
        d.mkdir(parents=True, exist_ok=True)
        for k, im in enumerate(s.images, start=1):
            Image.fromarray(im).save(d / f"fov_{k}.png")
        write_annotation(s.annotation(), d / f"fov_{s.num_fovs}.json")


def load_mfov_dataset(root, num_classes: Optional[int] = None) -> list[MFoVSample]:
    root = Path(root)
    samples = []
    for d in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("sample_")):
        fovs = sorted(d.glob("fov_*.png"), key=lambda p: int(p.stem.split("_")[1]))
        if not fovs:
            raise AnnotationError(f"{d}: no fov_*.png images")
        k = len(fovs)
        item = read_annotation(d / f"fov_{k}.json", num_classes, image_path=f"{d.name}/fov_{k}.png")
        images = [np.asarray(Image.open(p).convert("RGB")) for p in fovs]
        s = image_sample(images[-1], item, d.name)
        s.images = images
        samples.append(s)
    return samples


def load_any(root, num_classes: Optional[int] = None) -> list[MFoVSample]:
    """Load either dataset layout."""
    root = Path(root)
    if (root / "annotations").is_dir():
        return load_images(root, load_dataset(root, num_classes))
    return load_mfov_dataset(root, num_classes)


def pad_to_multiple(sample: MFoVSample, multiple: int, fill: Optional[Sequence[int]] = None) -> MFoVSample:
    """Pad every view symmetrically so both sides are multiples of ``multiple``.

    Symmetric padding keeps the views concentric; annotations shift by the
    top/left pad.
    """
    h, w = sample.size
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return sample
    top, left = ph // 2, pw // 2
    images = []
    for im in sample.images:
        color = fill if fill is not None else im.reshape(-1, 3).mean(0).round()
        out = np.empty((h + ph, w + pw, 3), dtype=np.uint8)
        out[:] = np.asarray(color, dtype=np.uint8)
        out[top:top + h, left:left + w] = im
        images.append(out)
    return MFoVSample(images, sample.points + [left, top], sample.classes.copy(), sample.name)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    p_scale: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    p_shift: float = 0.5
    max_shift_frac: float = 0.1
    p_hflip: float = 0.5
    p_vflip: float = 0.5


@dataclass
class AugmentDraw:
    scale: float = 1.0
    shift: tuple[int, int] = (0, 0)
    hflip: bool = False
    vflip: bool = False

    @classmethod
    def sample(cls, rng: np.random.Generator, cfg: AugmentConfig, size: tuple[int, int]) -> "AugmentDraw":
        h, w = size
        scale = float(rng.uniform(*cfg.scale_range)) if rng.random() < cfg.p_scale else 1.0
        shift = (0, 0)
        if rng.random() < cfg.p_shift:
            mx, my = int(cfg.max_shift_frac * w), int(cfg.max_shift_frac * h)
            shift = (int(rng.integers(-mx, mx + 1)), int(rng.integers(-my, my + 1)))
        return cls(scale, shift, bool(rng.random() < cfg.p_hflip), bool(rng.random() < cfg.p_vflip))


def _rescale_view(im: np.ndarray, scale: float):
    """Scale about the image center, keeping the canvas size.  Returns the image and the point map."""
    h, w = im.shape[:2]
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    sy, sx = nh / h, nw / w
    big = np.asarray(Image.fromarray(im).resize((nw, nh), Image.BILINEAR))
    fill = im.reshape(-1, 3).mean(0).round().astype(np.uint8)
    out = np.empty_like(im)
    out[:] = fill
    # place resized image centered on the original canvas
    oy, ox = (h - nh) // 2, (w - nw) // 2
    sy0, sx0 = max(0, -oy), max(0, -ox)
    dy0, dx0 = max(0, oy), max(0, ox)
    ch, cw = min(nh - sy0, h - dy0), min(nw - sx0, w - dx0)
    out[dy0:dy0 + ch, dx0:dx0 + cw] = big[sy0:sy0 + ch, sx0:sx0 + cw]

    def mapping(pts):
        return np.stack([(pts[:, 0] + 0.5) * sx - 0.5 + ox, (pts[:, 1] + 0.5) * sy - 0.5 + oy], axis=1)

    return out, mapping


def _shift_view(im: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = im.shape[:2]
    out = np.empty_like(im)
    out[:] = im.reshape(-1, 3).mean(0).round().astype(np.uint8)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = im[ys, xs]
    return out


def apply_augment(sample: MFoVSample, draw: AugmentDraw, size_multiple: int = 1) -> MFoVSample:
    """Apply a fixed draw.  Multi-FoV samples ignore the shift to stay concentric."""
    h, w = sample.size
    images = [im.copy() for im in sample.images]
    pts = sample.points.astype(np.float64).copy()
    if draw.scale != 1.0:
        scaled = [_rescale_view(im, draw.scale) for im in images]
        images = [im for im, _ in scaled]
        pts = scaled[-1][1](pts) if len(pts) else pts
    if draw.shift != (0, 0) and len(images) == 1:
        dx, dy = draw.shift
        images = [_shift_view(images[0], dx, dy)]
        pts = pts + [dx, dy]
    if draw.hflip:
        images = [im[:, ::-1].copy() for im in images]
        pts[:, 0] = w - 1 - pts[:, 0]
    if draw.vflip:
        images = [im[::-1].copy() for im in images]
        pts[:, 1] = h - 1 - pts[:, 1]
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    out = MFoVSample(images, pts[keep], sample.classes[keep].copy(), sample.name)
    return pad_to_multiple(out, size_multiple)


def augment(sample: MFoVSample, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None,
            size_multiple: int = 1) -> MFoVSample:
    """Random scale, shift and flips; cells leaving the frame are dropped."""
    cfg = cfg or AugmentConfig()
    return apply_augment(sample, AugmentDraw.sample(rng, cfg, sample.size), size_multiple)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    canvas_size: int = 64
    num_classes: int = 3
    cells_per_image: tuple[int, int] = (6, 10)
    blob_radius: list[tuple[float, float]] = field(
        default_factory=lambda: [(3.0, 4.0), (4.0, 5.0), (5.0, 6.0)]
    )
    class_color_means: list[tuple[int, int, int]] = field(default_factory=lambda: list(DEFAULT_COLORS))
    background_texture_scale: float = 16.0
    texture_amplitude: float = 10.0
    seed: int = 0
    # class is decided by the tint of the surroundings outside the innermost view
    context_tint: bool = False
    tint_colors: list[tuple[int, int, int]] = field(default_factory=lambda: list(DEFAULT_TINTS))

    def __post_init__(self):
        self.cells_per_image = tuple(self.cells_per_image)
        self.blob_radius = [tuple(r) for r in self.blob_radius]
        self.class_color_means = [tuple(c) for c in self.class_color_means]
        self.tint_colors = [tuple(c) for c in self.tint_colors]
        if self.canvas_size <= 0 or self.num_classes <= 0:
            raise ValueError("canvas_size and num_classes must be positive")
        lo, hi = self.cells_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid cells_per_image {self.cells_per_image}")
        if len(self.blob_radius) < self.num_classes or len(self.class_color_means) < self.num_classes:
            raise ValueError("need a blob_radius range and a color mean per class")
        if self.context_tint and len(self.tint_colors) < self.num_classes:
            raise ValueError("need a tint color per class")
        if not self.context_tint:
            cols = np.array(self.class_color_means[: self.num_classes], dtype=int)
            for a in range(len(cols)):
                for b in range(a + 1, len(cols)):
                    if np.any(np.abs(cols[a] - cols[b]) < 60):
                        raise ValueError(
                            f"class colors {a} and {b} must differ by >= 60 in every channel"
                        )

    @property
    def max_radius(self) -> float:
        return max(r[1] for r in self.blob_radius[: self.num_classes])


def view_geometry(canvas_size: int, num_fovs: int, k: int) -> tuple[float, int]:
    """``(offset, factor)`` of FoV ``k`` on the synthetic canvas."""
    side = canvas_size * 2 ** (num_fovs - 1)
    factor = 2 ** (num_fovs - k)
    return (side - canvas_size * factor) / 2, factor


def inner_to_view(points: np.ndarray, canvas_size: int, num_fovs: int, k: int) -> np.ndarray:
    """Map innermost-view coordinates to FoV ``k`` coordinates."""
    off_inner, _ = view_geometry(canvas_size, num_fovs, num_fovs)
    off, f = view_geometry(canvas_size, num_fovs, k)
    canvas = np.asarray(points, dtype=np.float64) + off_inner
    return (canvas - off - (f - 1) / 2) / f


def _texture(rng: np.random.Generator, side: int, scale: float, amplitude: float) -> np.ndarray:
    n = max(2, int(math.ceil(side / scale)) + 1)
    coarse = rng.standard_normal((n, n))
    fine = ndimage.zoom(coarse, side / n, order=1, mode="nearest")[:side, :side]
    if fine.shape != (side, side):
        fine = np.pad(fine, ((0, side - fine.shape[0]), (0, side - fine.shape[1])), mode="edge")
    return fine * amplitude


def _place_cells(rng: np.random.Generator, n: int, lo: float, hi: float, sep: float,
                 existing: list, exclude: Optional[tuple[float, float]] = None) -> list:
    """Rejection-sample ``n`` centers in ``[lo, hi)^2`` at least ``sep`` apart."""
    area = (hi - lo) ** 2
    if exclude is not None:
        area -= (exclude[1] - exclude[0]) ** 2
    if n and n * (math.sqrt(3) / 2) * sep ** 2 > 0.9 * area:
        raise ValueError(f"cannot pack {n} cells of separation {sep:.1f} px into {area:.0f} px^2")
    placed = []
    attempts = 0
    while len(placed) < n:
        attempts += 1
        if attempts > 2000 * max(n, 1):
            raise ValueError(f"could not place {n} cells at separation {sep:.1f} px")
        p = rng.uniform(lo, hi, size=2)
        if exclude is not None and exclude[0] <= p[0] < exclude[1] and exclude[0] <= p[1] < exclude[1]:
            continue
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= sep ** 2 for q in existing + placed):
            placed.append((float(p[0]), float(p[1])))
    return placed


def render_canvas(spec: SynthSpec, side: int, cells: Sequence[tuple[float, float, int, float]],
                  rng: np.random.Generator, tint: Optional[tuple] = None,
                  neutral: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Draw textured background plus blobs ``(x, y, class, radius)``; returns uint8 ``(side, side, 3)``.

    With ``tint`` set, the background outside the square ``neutral = (lo, hi)``
    takes the tint color.
    """
    tex = _texture(rng, side, spec.background_texture_scale, spec.texture_amplitude)
    img = np.empty((side, side, 3), dtype=np.float64)
    img[:] = BACKGROUND
    if tint is not None:
        mask = np.ones((side, side), dtype=bool)
        if neutral is not None:
            mask[neutral[0]:neutral[1], neutral[0]:neutral[1]] = False
        img[mask] = tint
    img += tex[..., None]
    for x, y, c, r in cells:
        color = np.asarray(spec.class_color_means[c] if not spec.context_tint else _neutral_color(spec),
                           dtype=np.float64)
        sigma = r / 2.0
        x0, x1 = max(0, int(math.floor(x - r))), min(side, int(math.ceil(x + r)) + 1)
        y0, y1 = max(0, int(math.floor(y - r))), min(side, int(math.ceil(y + r)) + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d2 = (xx - x) ** 2 + (yy - y) ** 2
        alpha = np.where(d2 <= r * r, np.exp(-d2 / (2 * sigma ** 2)), 0.0)[..., None]
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch * (1 - alpha) + color * alpha
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _neutral_color(spec: SynthSpec) -> tuple[int, int, int]:
    return tuple(int(v) for v in np.mean(spec.class_color_means[: spec.num_classes], axis=0).round())


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Integer box average with round-half-up, exact and platform independent."""
    if factor == 1:
        return img.copy()
    h, w = img.shape[:2]
    blocks = img.reshape(h // factor, factor, w // factor, factor, 3).astype(np.int64)
    total = blocks.sum(axis=(1, 3))
    n = factor * factor
    return ((total + n // 2) // n).astype(np.uint8)


def generate_synthetic(spec: SynthSpec, n_images: int, mfov_k: int = 1) -> list[MFoVSample]:
    """Deterministic blob-cell samples with ``mfov_k`` concentric views each."""
    if n_images < 0 or mfov_k < 1:
        raise ValueError("n_images must be >= 0 and mfov_k >= 1")
    root = np.random.SeedSequence(spec.seed)
    return [_one_sample(spec, mfov_k, np.random.default_rng(child), i)
            for i, child in enumerate(root.spawn(n_images))]


def _one_sample(spec: SynthSpec, k_total: int, rng: np.random.Generator, index: int) -> MFoVSample:
    s = spec.canvas_size
    side = s * 2 ** (k_total - 1)
    off = (side - s) // 2
    sep = 2 * spec.max_radius + 1
    margin = 2.0
    n_inner = int(rng.integers(spec.cells_per_image[0], spec.cells_per_image[1] + 1))
    inner = _place_cells(rng, n_inner, off + margin, off + s - 1 - margin, sep, [])
    outer = []
    if k_total > 1:
        density = n_inner / (s * s)
        n_outer = int(round(density * (side * side - s * s)))
        outer = _place_cells(rng, n_outer, margin, side - 1 - margin, sep, inner, exclude=(off, off + s))

    sample_class = int(rng.integers(spec.num_classes)) if spec.context_tint else None
    cells = []
    for x, y in inner + outer:
        c = sample_class if sample_class is not None else int(rng.integers(spec.num_classes))
        lo, hi = spec.blob_radius[0] if spec.context_tint else spec.blob_radius[c]
        cells.append((x, y, c, float(rng.uniform(lo, hi))))

    tint = spec.tint_colors[sample_class] if sample_class is not None else None
    canvas = render_canvas(spec, side, cells, rng, tint=tint, neutral=(off, off + s))
    images = []
    for k in range(1, k_total + 1):
        o, f = view_geometry(s, k_total, k)
        o = int(o)
        images.append(downsample(canvas[o:o + s * f, o:o + s * f], f))
    pts = np.array([[x - off, y - off] for x, y, _, _ in cells[:n_inner]], dtype=np.float64).reshape(-1, 2)
    cls = np.array([c for _, _, c, _ in cells[:n_inner]], dtype=np.int64)
    return MFoVSample(images, pts, cls, f"sample_{index + 1:04d}")
