"""Point proposal network with multi-scale decoding, deformable proposals and mFoV fusion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .geometry import (
    ProposalSet,
    PyramidLevel,
    apply_deformation,
    bilinear_sample,
    crop_center,
    generate_grid_proposals,
    mfov_crop_limits,
    required_size_multiple,
)

MODES = ("dpa", "iterative")
UPSAMPLERS = ("transposed", "bilinear")


@dataclass
class BackboneConfig:
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    pyramid_channels: int = 64
    levels: list[int] = field(default_factory=lambda: [2, 3, 4, 5])

    def __post_init__(self):
        lv = list(self.levels)
        if not lv or min(lv) < 2 or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError(f"levels must be strictly increasing and >= 2, got {lv}")
        if len(self.stage_channels) < max(lv) - 1:
            raise ValueError(
                f"levels up to {max(lv)} need {max(lv) - 1} stage_channels, got {len(self.stage_channels)}"
            )
        if self.pyramid_channels <= 0:
            raise ValueError("pyramid_channels must be positive")


@dataclass
class HeadConfig:
    hidden_dim: int = 128
    dropout_rate: float = 0.1
    num_classes: int = 3

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    interval: int = 16
    mode: str = "dpa"
    n_stages: int = 2
    mfov_k: int = 1
    upsample: str = "transposed"
    # multipliers on the raw outputs of the offset heads
    deform_scale: float = 1.0
    regression_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.upsample not in UPSAMPLERS:
            raise ValueError(f"unknown upsample {self.upsample!r}; expected one of {UPSAMPLERS}")
        if self.mode == "iterative" and self.n_stages < 1:
            raise ValueError("iterative mode needs n_stages >= 1")
        if self.mfov_k < 1:
            raise ValueError("mfov_k must be >= 1")
        if self.interval <= 0:
            raise ValueError("interval must be positive")

    @property
    def size_multiple(self) -> int:
        return required_size_multiple(self.backbone.levels, self.mfov_k)

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(ch: int) -> nn.GroupNorm:
    # at least 8 channels per group so 1x1 maps still normalize over something
    return nn.GroupNorm(math.gcd(max(1, ch // 8), ch), ch)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.norm1 = _norm(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.norm2 = _norm(ch)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class DownStage(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.down = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
        self.norm = _norm(cout)
        self.block = ResidualBlock(cout)

    def forward(self, x):
        return self.block(F.relu(self.norm(self.down(x))))


class PyramidEncoder(nn.Module):
    """Strided residual trunk followed by a top-down pyramid neck.

    Stage ``s`` (0-based) runs at stride ``2**(s + 2)``; the neck emits one
    ``pyramid_channels``-wide map per configured level.
    """

    def __init__(self, cfg: BackboneConfig, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.levels = list(cfg.levels)
        n_stages = max(self.levels) - 1
        chans = cfg.stage_channels[:n_stages]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, chans[0], 3, stride=2, padding=1, bias=False),
            _norm(chans[0]),
            nn.ReLU(inplace=True),
        )
        cins = [chans[0]] + chans[:-1]
        self.stages = nn.ModuleList(DownStage(a, b) for a, b in zip(cins, chans))
        c = cfg.pyramid_channels
        self.lateral = nn.ModuleList(nn.Conv2d(chans[j - 2], c, 1) for j in self.levels)
        self.smooth = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for _ in self.levels)

    def forward(self, image: Tensor) -> list[Tensor]:
        h, w = image.shape[-2:]
        mult = 2 ** max(self.levels)
        if h % mult or w % mult:
            raise ValueError(f"input size {h}x{w} must be divisible by {mult}")
        feats = {}
        x = self.stem(image)
        for s, stage in enumerate(self.stages):
            x = stage(x)
            feats[s + 2] = x
        out = [None] * len(self.levels)
        top = None
        for i in reversed(range(len(self.levels))):
            lat = self.lateral[i](feats[self.levels[i]])
            if top is not None:
                lat = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            top = lat
            out[i] = self.smooth[i](lat)
        return out


def build_pyramid(image: Tensor, encoder: PyramidEncoder) -> list[PyramidLevel]:
    """Run ``encoder`` and wrap each map as a :class:`PyramidLevel`."""
    return [PyramidLevel(j, t) for j, t in zip(encoder.levels, encoder(image))]


class MLP(nn.Module):
    """FC-ReLU-Dropout-FC."""

    def __init__(self, din: int, hidden: int, dout: int, dropout: float, zero_init: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(din, hidden)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, dout)
        if zero_init:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(self.drop(F.relu(self.fc1(x))))


def extract_multiscale_features(pyramid: Sequence[PyramidLevel], points: Tensor) -> Tensor:
    """Concatenate bilinear samples from every level, finest first."""
    if not pyramid:
        raise ValueError("empty pyramid")
    ordered = sorted(pyramid, key=lambda lv: lv.level_index)
    return torch.cat([bilinear_sample(lv, points) for lv in ordered], dim=-1)


class DecodeHeads(nn.Module):
    def __init__(self, din: int, head: HeadConfig, regression_scale: float = 1.0):
        super().__init__()
        self.regression = MLP(din, head.hidden_dim, 2, head.dropout_rate, zero_init=True)
        self.classification = MLP(din, head.hidden_dim, head.num_classes + 1, head.dropout_rate)
        self.regression_scale = regression_scale

    def forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        return self.regression(features) * self.regression_scale, self.classification(features)


class MFoVAggregator(nn.Module):
    """Fuse context pyramids into the innermost FoV's pyramid.

    One transposed convolution per level performs a 2x step and is reused
    ``K - k`` times for FoV ``k``; a 3x3 convolution per level follows the sum.
    """

    def __init__(self, num_fovs: int, num_levels: int, channels: int, upsample: str = "transposed"):
        super().__init__()
        self.num_fovs = num_fovs
        self.upsample = upsample
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(channels, channels, 2, stride=2, bias=False) for _ in range(num_levels)
        )
        for layer in self.up:
            # start as nearest-neighbour upsampling
            with torch.no_grad():
                layer.weight.zero_()
                layer.weight[range(channels), range(channels)] = 1.0
        self.fuse = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(num_levels))

    def forward(self, pyramids: Sequence[Sequence[Tensor]]) -> list[Tensor]:
        return mfov_aggregate(pyramids, self)


def mfov_aggregate(pyramids: Sequence[Sequence[Tensor]], agg: MFoVAggregator) -> list[Tensor]:
    """Return the enhanced innermost pyramid.

    ``pyramids[k - 1]`` is the pyramid of FoV ``k`` (outermost first), each a
    list of ``(B, C, H, W)`` maps ordered by level.
    """
    k_total = len(pyramids)
    if k_total == 1:
        return list(pyramids[0])
    ref = [t.shape for t in pyramids[-1]]
    for k, pyr in enumerate(pyramids, start=1):
        if [t.shape for t in pyr] != ref:
            raise ValueError(f"pyramid of FoV {k} has shapes {[tuple(t.shape) for t in pyr]}, expected {ref}")
    out = []
    for i, inner in enumerate(pyramids[-1]):
        merged = inner
        for k in range(1, k_total):
            limits = mfov_crop_limits(k_total, k)
            x = crop_center(pyramids[k - 1][i], limits)
            if agg.upsample == "bilinear":
                x = F.interpolate(x, scale_factor=limits.upsample_factor, mode="bilinear", align_corners=False)
            else:
                for _ in range(k_total - k):
                    x = agg.up[i](x)
            merged = merged + x
        out.append(agg.fuse[i](merged))
    return out


@dataclass
class ModelOutput:
    proposals_initial: ProposalSet
    proposals_deformed: ProposalSet
    final_points: Tensor  # (B, M, 2)
    logits: Tensor  # (B, M, C + 1)
    regression_offsets: Tensor  # (B, M, 2)
    # iterative mode: (points, logits) of every stage, in order
    stages: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    @property
    def num_proposals(self) -> int:
        return self.final_points.shape[1]

    @property
    def matcher_points(self) -> Tensor:
        if self.stages:
            return torch.cat([p for p, _ in self.stages], dim=1)
        return self.final_points

    @property
    def matcher_logits(self) -> Tensor:
        if self.stages:
            return torch.cat([lg for _, lg in self.stages], dim=1)
        return self.logits


class PointProposalNet(nn.Module):
    """Detect cells as points by refining and classifying a grid of proposals.

    ``dpa`` mode samples finest-level features at the grid, moves every
    proposal by a learned offset, re-samples all levels at the moved points
    and decodes a residual offset plus class logits.  ``iterative`` mode
    instead chains ``n_stages`` decode heads, each starting from the previous
    stage's points.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        bb, head = cfg.backbone, cfg.head
        c = bb.pyramid_channels
        n_levels = len(bb.levels)
        self.encoders = nn.ModuleList(PyramidEncoder(bb) for _ in range(cfg.mfov_k))
        self.aggregator = (
            MFoVAggregator(cfg.mfov_k, n_levels, c, cfg.upsample) if cfg.mfov_k > 1 else None
        )
        din = n_levels * c
        if cfg.mode == "dpa":
            self.deformation = MLP(c, head.hidden_dim, 2, head.dropout_rate, zero_init=True)
            self.heads = nn.ModuleList([DecodeHeads(din, head, cfg.regression_scale)])
        else:
            self.deformation = None
            self.heads = nn.ModuleList(
                DecodeHeads(din, head, cfg.regression_scale) for _ in range(cfg.n_stages)
            )
        self._grid_cache: dict = {}

    def proposals(self, height: int, width: int) -> ProposalSet:
        key = (height, width)
        if key not in self._grid_cache:
            self._grid_cache[key] = generate_grid_proposals(height, width, self.cfg.interval)
        return self._grid_cache[key]

    def pyramid(self, images) -> list[PyramidLevel]:
        views = self._split_views(images)
        h, w = views[-1].shape[-2:]
        mult = self.cfg.size_multiple
        if h % mult or w % mult:
            raise ValueError(f"input size {h}x{w} must be divisible by {mult}")
        pyramids = [enc(v) for enc, v in zip(self.encoders, views)]
        maps = mfov_aggregate(pyramids, self.aggregator) if self.aggregator is not None else pyramids[0]
        return [PyramidLevel(j, t) for j, t in zip(self.cfg.backbone.levels, maps)]

    def _split_views(self, images) -> list[Tensor]:
        k = self.cfg.mfov_k
        if isinstance(images, Tensor):
            if images.dim() == 5:
                views = list(images.unbind(1))
            elif images.dim() == 4:
                views = [images]
            elif images.dim() == 3:
                views = [images.unsqueeze(0)]
            else:
                raise ValueError(f"unsupported image tensor shape {tuple(images.shape)}")
        else:
            views = list(images)
        if len(views) != k:
            raise ValueError(f"model expects {k} FoV images, got {len(views)}")
        shape = views[0].shape
        if any(v.shape != shape for v in views):
            raise ValueError("all FoV images must share one shape")
        return views

    def forward(self, images, mode: Optional[str] = None) -> ModelOutput:
        mode = mode or self.cfg.mode
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode != self.cfg.mode:
            raise ValueError(f"model was built for mode {self.cfg.mode!r}, not {mode!r}")
        pyr = self.pyramid(images)
        b = pyr[0].data.shape[0]
        h, w = self._split_views(images)[-1].shape[-2:]
        props = self.proposals(h, w)
        grid = props.initial.to(pyr[0].data.dtype).to(pyr[0].data.device)
        points = grid.unsqueeze(0).expand(b, -1, -1)

        if mode == "dpa":
            finest = min(pyr, key=lambda lv: lv.level_index)
            f2 = bilinear_sample(finest, points)
            offsets = self.deformation(f2) * self.cfg.deform_scale
            deformed = apply_deformation(props, offsets)
            feats = extract_multiscale_features(pyr, deformed.deformed)
            reg, logits = self.heads[0](feats)
            return ModelOutput(
                proposals_initial=props,
                proposals_deformed=deformed,
                final_points=deformed.deformed + reg,
                logits=logits,
                regression_offsets=reg,
            )

        stages = []
        current = points
        for heads in self.heads:
            start = current
            reg, logits = heads(extract_multiscale_features(pyr, start))
            current = start + reg
            stages.append((current, logits))
        return ModelOutput(
            proposals_initial=props,
            proposals_deformed=ProposalSet(props.initial, props.interval, start),
            final_points=current,
            logits=logits,
            regression_offsets=reg,
            stages=stages,
        )


def deformation_offsets(model: PointProposalNet, finest_rows: Tensor) -> Tensor:
    """Pixel offsets predicted from finest-level feature rows ``(..., C_feat)``."""
    if model.deformation is None:
        raise ValueError("model has no deformation head (iterative mode)")
    return model.deformation(finest_rows) * model.cfg.deform_scale
