"""Coordinate and sampling arithmetic shared by the model and the data pipeline.

Conventions used throughout the package:

* Points are stored as ``(x, y)`` pairs in pixels of the annotated image.
  Pixel centers sit on integer coordinates, so pixel ``(c, r)`` spans
  ``[c - 0.5, c + 0.5)`` and a horizontal flip maps ``x -> W - 1 - x``.
* A feature level with stride ``s`` maps image point ``x`` to the continuous
  feature coordinate ``(x + 0.5) / s - 0.5`` so that the center of a stride
  cell lands on the integer index of that cell.
* Sampling clamps neighbor indices to the valid range (border replication);
  coordinates themselves are never clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor


@dataclass
class ProposalSet:
    """Pre-set grid proposals and, optionally, their deformed positions.

    ``initial`` and ``deformed`` are ``(M, 2)`` (or batched ``(B, M, 2)`` for
    ``deformed``) tensors of ``(x, y)`` pixel coordinates.
    """

    initial: Tensor
    interval: float
    deformed: Optional[Tensor] = None

    def __post_init__(self):
        if self.deformed is not None and self.deformed.shape[-2] != self.initial.shape[-2]:
            raise ValueError(
                f"deformed has {self.deformed.shape[-2]} points, initial has {self.initial.shape[-2]}"
            )

    def __len__(self) -> int:
        return self.initial.shape[-2]


@dataclass
class PyramidLevel:
    """One feature map of a pyramid. ``data`` is ``(C, H, W)`` or ``(B, C, H, W)``."""

    level_index: int
    data: Tensor

    def __post_init__(self):
        if self.level_index < 0:
            raise ValueError(f"level_index must be >= 0, got {self.level_index}")

    @property
    def stride(self) -> int:
        return 2 ** self.level_index

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def spatial_size(self) -> tuple[int, int]:
        return tuple(self.data.shape[-2:])


@dataclass(frozen=True)
class CropLimits:
    lo: float
    hi: float
    upsample_factor: int

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi <= 1.0):
            raise ValueError(f"invalid crop interval [{self.lo}, {self.hi})")
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be a positive integer")


def generate_grid_proposals(height: int, width: int, interval: float,
                            dtype: torch.dtype = torch.float32) -> ProposalSet:
    """One proposal at the center of every ``interval`` x ``interval`` cell.

    Proposals are ordered row-major: y is the outer loop, x the inner one, so
    proposal ``i`` sits in grid row ``i // nx`` and column ``i % nx``.
    """
    if height <= 0 or width <= 0 or interval <= 0:
        raise ValueError(
            f"height, width and interval must be positive, got {height}, {width}, {interval}"
        )
    half = interval / 2.0
    nx = max(0, math.ceil((width - half) / interval))
    ny = max(0, math.ceil((height - half) / interval))
    xs = half + interval * torch.arange(nx, dtype=torch.float64)
    ys = half + interval * torch.arange(ny, dtype=torch.float64)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    points = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1).to(dtype)
    return ProposalSet(initial=points, interval=float(interval))


def image_to_feature_coords(points: Tensor, stride: float) -> Tensor:
    """Map ``(..., 2)`` image coordinates to continuous feature coordinates."""
    return (points + 0.5) / stride - 0.5


def bilinear_sample(level: PyramidLevel | Tensor, points: Tensor, stride: Optional[float] = None) -> Tensor:
    """Bilinearly interpolate feature vectors at image-space points.

    ``level`` is a :class:`PyramidLevel` or a raw ``(C, H, W)`` / ``(B, C, H, W)``
    tensor together with ``stride``.  ``points`` is ``(M, 2)`` for an unbatched
    map or ``(B, M, 2)`` for a batched one.  Returns ``(M, C)`` or ``(B, M, C)``.

    The result is differentiable with respect to both the map values and the
    point coordinates.  Neighbor indices are clamped, so any finite point
    yields a border-replicated value.
    """
    if isinstance(level, PyramidLevel):
        data, stride = level.data, level.stride
    else:
        data = level
        if stride is None:
            raise ValueError("stride is required when sampling a raw tensor")

    unbatched = data.dim() == 3
    if unbatched:
        data = data.unsqueeze(0)
        points = points.unsqueeze(0)
    b, c, h, w = data.shape
    if points.shape[0] != b:
        raise ValueError(f"batch mismatch: map has {b} images, points have {points.shape[0]}")

    fx, fy = image_to_feature_coords(points, stride).unbind(-1)
    x0f = torch.floor(fx)
    y0f = torch.floor(fy)
    wx1 = fx - x0f
    wy1 = fy - y0f
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1

    x0 = x0f.long()
    y0 = y0f.long()
    x0c, x1c = x0.clamp(0, w - 1), (x0 + 1).clamp(0, w - 1)
    y0c, y1c = y0.clamp(0, h - 1), (y0 + 1).clamp(0, h - 1)

    flat = data.reshape(b, c, h * w)

    def gather(yi: Tensor, xi: Tensor) -> Tensor:
        idx = (yi * w + xi).unsqueeze(1).expand(-1, c, -1)
        return torch.gather(flat, 2, idx)  # (B, C, M)

    out = (
        gather(y0c, x0c) * (wy0 * wx0).unsqueeze(1)
        + gather(y0c, x1c) * (wy0 * wx1).unsqueeze(1)
        + gather(y1c, x0c) * (wy1 * wx0).unsqueeze(1)
        + gather(y1c, x1c) * (wy1 * wx1).unsqueeze(1)
    ).transpose(1, 2)
    return out[0] if unbatched else out


def apply_deformation(proposals: ProposalSet, offsets: Tensor) -> ProposalSet:
    """Return a copy of ``proposals`` with ``deformed = initial + offsets``.

    ``offsets`` is ``(M, 2)`` or ``(B, M, 2)``.  Deformed points are not
    clamped to the image.
    """
    if offsets.shape[-1] != 2 or offsets.shape[-2] != len(proposals):
        raise ValueError(
            f"expected offsets of shape (..., {len(proposals)}, 2), got {tuple(offsets.shape)}"
        )
    deformed = proposals.initial.to(offsets.dtype) + offsets
    return ProposalSet(initial=proposals.initial, interval=proposals.interval, deformed=deformed)


def mfov_crop_limits(num_fovs: int, fov_index: int) -> CropLimits:
    """Normalized center-crop interval of FoV ``fov_index`` (1-based) out of ``num_fovs``.

    FoV ``k`` covers ``2**(K-k)`` times the side of the innermost FoV ``K``,
    so the retained fraction is ``1 / 2**(K-k)`` and upsampling by the same
    factor restores the innermost resolution.
    """
    if not 1 <= fov_index < num_fovs:
        raise ValueError(f"need 1 <= k < K, got K={num_fovs}, k={fov_index}")
    factor = 2 ** (num_fovs - fov_index)
    denom = 2 * factor
    return CropLimits(lo=(factor - 1) / denom, hi=(factor + 1) / denom, upsample_factor=factor)


def crop_center(level: PyramidLevel | Tensor, limits: CropLimits):
    """Crop ``[lo*size, hi*size)`` on both spatial axes.

    Accepts a :class:`PyramidLevel` (returns one) or a tensor whose last two
    dims are spatial (returns a tensor).
    """
    data = level.data if isinstance(level, PyramidLevel) else level
    h, w = data.shape[-2:]
    bounds = []
    for size in (h, w):
        lo, hi = limits.lo * size, limits.hi * size
        if lo != int(lo) or hi != int(hi):
            raise ValueError(
                f"spatial size {size} must be divisible by {2 * limits.upsample_factor} "
                f"to crop [{limits.lo}, {limits.hi})"
            )
        bounds.append((int(lo), int(hi)))
    (y0, y1), (x0, x1) = bounds
    cropped = data[..., y0:y1, x0:x1]
    if isinstance(level, PyramidLevel):
        return PyramidLevel(level.level_index, cropped)
    return cropped


def required_size_multiple(levels: Sequence[int], num_fovs: int = 1) -> int:
    """Smallest side length multiple that makes every level and every crop integral."""
    top = max(levels)
    return 2 ** top if num_fovs <= 1 else 2 ** (top + num_fovs)
