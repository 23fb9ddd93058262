"""Axis-aligned box geometry: IoU, center-distance penalized overlap, analytic gradients.

All boxes live in continuous pixel coordinates and are parameterized by center
and size; corners are derived. Sizes must be strictly positive, so every
formula below is total on valid boxes.

The penalized overlap score is

    score = iou - penalty_weight * rho2 / c2

where rho2 is the squared distance between the two centers and c2 the squared
diagonal of the smallest axis-aligned box enclosing both. The matching loss is
1 - score exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "Box2D",
    "BoxGrad",
    "OverlapBreakdown",
    "iou",
    "center_dist_sq",
    "enclosing_diag_sq",
    "overlap_breakdown",
    "diou_score",
    "diou_loss",
    "diou_score_grad",
]


@dataclass(frozen=True)
class Box2D:
    """Box with center (cx, cy) and strictly positive sides (w, h), in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        cx, cy, w, h = (float(v) for v in (self.cx, self.cy, self.w, self.h))
        if not all(math.isfinite(v) for v in (cx, cy, w, h)):
            raise ValueError(f"box parameters must be finite, got ({cx}, {cy}, {w}, {h})")
        if w <= 0.0 or h <= 0.0:
            raise ValueError(f"box sides must be positive, got w={w}, h={h}")
        object.__setattr__(self, "cx", cx)
        object.__setattr__(self, "cy", cy)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)

    @property
    def x0(self) -> float:
        return self.cx - 0.5 * self.w

    @property
    def y0(self) -> float:
        return self.cy - 0.5 * self.h

    @property
    def x1(self) -> float:
        return self.cx + 0.5 * self.w

    @property
    def y1(self) -> float:
        return self.cy + 0.5 * self.h

    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1), with x0 < x1 and y0 < y1."""
        return (self.x0, self.y0, self.x1, self.y1)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box2D":
        return cls(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box2D":
        """From top-left-corner form, the on-disk convention."""
        return cls(x + 0.5 * w, y + 0.5 * h, w, h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.w, self.h)

    def recentered(self, cx: float, cy: float) -> "Box2D":
        return Box2D(cx, cy, self.w, self.h)


@dataclass(frozen=True)
class BoxGrad:
    """Partial derivatives of a scalar with respect to a box's (cx, cy, w, h)."""

    d_cx: float
    d_cy: float
    d_w: float
    d_h: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.d_cx, self.d_cy, self.d_w, self.d_h)


@dataclass(frozen=True)
class OverlapBreakdown:
    """All intermediate quantities of one penalized-overlap evaluation.

    penalty is the raw rho2/c2 ratio; score and loss already carry the
    penalty weight, so score = iou - weight * penalty and loss = 1 - score.
    """

    iou: float
    rho_sq: float
    c_sq: float
    penalty: float
    score: float
    loss: float


def _inter_union(a: Box2D, b: Box2D) -> tuple[float, float]:
    # Areas are derived from corners so that intersection <= each area holds
    # exactly in floating point (min/max and subtraction are monotone); this
    # keeps iou(a, a) == 1.0 and iou <= 1 without clamping.
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
    area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
    return inter, area_a + area_b - inter


def iou(a: Box2D, b: Box2D) -> float:
    """Intersection-over-union, in [0, 1]; 0 for disjoint boxes."""
    inter, union = _inter_union(a, b)
    return inter / union


def center_dist_sq(a: Box2D, b: Box2D) -> float:
    """Squared Euclidean distance between the two box centers, in pixels^2."""
    return (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2


def enclosing_diag_sq(a: Box2D, b: Box2D) -> float:
    """Squared diagonal of the smallest axis-aligned box covering both, in pixels^2."""
    ew = max(a.x1, b.x1) - min(a.x0, b.x0)
    eh = max(a.y1, b.y1) - min(a.y0, b.y0)
    return ew * ew + eh * eh


def overlap_breakdown(a: Box2D, b: Box2D, penalty_weight: float = 1.0) -> OverlapBreakdown:
    """Evaluate overlap, penalty, score and loss for one box pair."""
    if penalty_weight < 0.0:
        raise ValueError(f"penalty_weight must be >= 0, got {penalty_weight}")
    ov = iou(a, b)
    rho_sq = center_dist_sq(a, b)
    c_sq = enclosing_diag_sq(a, b)
    penalty = rho_sq / c_sq
    score = ov - penalty_weight * penalty
    return OverlapBreakdown(
        iou=ov,
        rho_sq=rho_sq,
        c_sq=c_sq,
        penalty=penalty,
        score=score,
        loss=1.0 - score,
    )


def diou_score(a: Box2D, b: Box2D, penalty_weight: float = 1.0) -> float:
    """IoU minus the weighted normalized squared center distance."""
    return overlap_breakdown(a, b, penalty_weight).score


def diou_loss(a: Box2D, b: Box2D, penalty_weight: float = 1.0) -> float:
    """1 - iou + weighted penalty; exactly 1 - diou_score."""
    return overlap_breakdown(a, b, penalty_weight).loss


def diou_score_grad(a: Box2D, b: Box2D, penalty_weight: float = 1.0) -> tuple[float, BoxGrad]:
    """Score and its exact derivative with respect to a's (cx, cy, w, h).

    b is treated as fixed. At non-smooth configurations (exactly touching or
    aligned edges) a deterministic subgradient is returned: a tied edge of the
    intersection or enclosure is attributed to the first box, and a contact
    with zero overlap area keeps the zero overlap gradient (the penalty term
    still provides a descent direction there).
    """
    if penalty_weight < 0.0:
        raise ValueError(f"penalty_weight must be >= 0, got {penalty_weight}")

    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()

    # Derivatives are 4-vectors over (cx, cy, w, h).
    zero = (0.0, 0.0, 0.0, 0.0)

    # Intersection. d(ax0) = (1, 0, -1/2, 0), d(ax1) = (1, 0, 1/2, 0).
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw > 0.0 and ih > 0.0:
        inter = iw * ih
        d_iw_cx = (1.0 if ax1 <= bx1 else 0.0) - (1.0 if ax0 >= bx0 else 0.0)
        d_iw_w = 0.5 * (1.0 if ax1 <= bx1 else 0.0) + 0.5 * (1.0 if ax0 >= bx0 else 0.0)
        d_ih_cy = (1.0 if ay1 <= by1 else 0.0) - (1.0 if ay0 >= by0 else 0.0)
        d_ih_h = 0.5 * (1.0 if ay1 <= by1 else 0.0) + 0.5 * (1.0 if ay0 >= by0 else 0.0)
        d_inter = (d_iw_cx * ih, iw * d_ih_cy, d_iw_w * ih, iw * d_ih_h)
    else:
        inter = 0.0
        d_inter = zero

    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    d_union = (-d_inter[0], -d_inter[1], a.h - d_inter[2], a.w - d_inter[3])
    ov = inter / union
    d_iou = tuple((d_inter[k] * union - inter * d_union[k]) / (union * union) for k in range(4))

    # Center-distance penalty.
    dx = a.cx - b.cx
    dy = a.cy - b.cy
    rho_sq = dx * dx + dy * dy
    d_rho = (2.0 * dx, 2.0 * dy, 0.0, 0.0)

    ew = max(ax1, bx1) - min(ax0, bx0)
    eh = max(ay1, by1) - min(ay0, by0)
    c_sq = ew * ew + eh * eh
    d_ew_cx = (1.0 if ax1 >= bx1 else 0.0) - (1.0 if ax0 <= bx0 else 0.0)
    d_ew_w = 0.5 * (1.0 if ax1 >= bx1 else 0.0) + 0.5 * (1.0 if ax0 <= bx0 else 0.0)
    d_eh_cy = (1.0 if ay1 >= by1 else 0.0) - (1.0 if ay0 <= by0 else 0.0)
    d_eh_h = 0.5 * (1.0 if ay1 >= by1 else 0.0) + 0.5 * (1.0 if ay0 <= by0 else 0.0)
    d_c_sq = (2.0 * ew * d_ew_cx, 2.0 * eh * d_eh_cy, 2.0 * ew * d_ew_w, 2.0 * eh * d_eh_h)

    d_pen = tuple(
        (d_rho[k] * c_sq - rho_sq * d_c_sq[k]) / (c_sq * c_sq) for k in range(4)
    )

    score = ov - penalty_weight * rho_sq / c_sq
    grad = BoxGrad(
        d_cx=d_iou[0] - penalty_weight * d_pen[0],
        d_cy=d_iou[1] - penalty_weight * d_pen[1],
        d_w=d_iou[2] - penalty_weight * d_pen[2],
        d_h=d_iou[3] - penalty_weight * d_pen[3],
    )
    return score, grad
