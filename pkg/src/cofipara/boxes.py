"""Normalized bounding boxes, IoU and generalized IoU.

Scalar functions operate on :class:`BoundingBox` and plain floats; the
``*_tensor`` variants are the differentiable batched versions used by the
losses. Both clip corners to the unit square before measuring areas.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"box {name}={v} outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box has non-positive size w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self):
        """Corner form (x1, y1, x2, y2) clipped to [0, 1]."""
        clip = lambda v: min(max(v, 0.0), 1.0)  # noqa: E731
        return (
            clip(self.cx - self.w / 2),
            clip(self.cy - self.h / 2),
            clip(self.cx + self.w / 2),
            clip(self.cy + self.h / 2),
        )

    @property
    def area(self):
        return self.w * self.h

    def to_list(self):
        return [self.cx, self.cy, self.w, self.h]

    def to_dict(self):
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}


def _area(x1, y1, x2, y2):
    return max(x2 - x1, 0.0) * max(y2 - y1, 0.0)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    inter = _area(max(ax1, bx1), max(ay1, by1), min(ax2, bx2), min(ay2, by2))
    union = _area(ax1, ay1, ax2, ay2) + _area(bx1, by1, bx2, by2) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """IoU minus the fraction of the enclosing box not covered by the union."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    inter = _area(max(ax1, bx1), max(ay1, by1), min(ax2, bx2), min(ay2, by2))
    union = _area(ax1, ay1, ax2, ay2) + _area(bx1, by1, bx2, by2) - inter
    hull = _area(min(ax1, bx1), min(ay1, by1), max(ax2, bx2), max(ay2, by2))
    if union <= 0.0 or hull <= 0.0:
        return 0.0
    return inter / union - (hull - union) / hull


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    out = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
    return out.clamp(0.0, 1.0)


def giou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU for matching shapes ``(..., 4)`` in center-size form."""
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    lt = torch.minimum(a[..., :2], b[..., :2])
    rb = torch.maximum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    tiny = torch.finfo(a.dtype).tiny
    return inter / union.clamp(min=tiny) - (hull - union) / hull.clamp(min=tiny)


def pairwise_giou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU matrix of shape ``(len(a), len(b))``."""
    return giou_tensor(a[:, None, :].expand(-1, len(b), -1), b[None, :, :].expand(len(a), -1, -1))
