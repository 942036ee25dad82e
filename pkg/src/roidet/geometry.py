"""Boxes, coordinate frames, IoU, and the invertible pad+resize transform.

All boxes are axis-aligned and stored as (center, size) in a named
coordinate frame.  Frames are plain string tags: boxes may only be
compared or combined when their tags are equal.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


def original_frame(image_id: str | None = None) -> str:
    """Frame tag for boxes in original image pixels."""
    return f"original:{image_id}" if image_id else "original"


def canvas_frame(side: int) -> str:
    """Frame tag for boxes on a square model canvas of the given side."""
    return f"canvas:{side}"


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle: center (cx, cy), size (w, h), frame tag."""

    cx: float
    cy: float
    w: float
    h: float
    frame: str

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        if not self.frame:
            raise ValueError("box frame tag must be present")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def is_square(self) -> bool:
        return self.w == self.h

    @staticmethod
    def square(cx: float, cy: float, side: float, frame: str) -> "Box":
        return Box(cx, cy, side, side, frame)

    @staticmethod
    def from_corners(x0: float, y0: float, x1: float, y1: float, frame: str) -> "Box":
        return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, frame)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes in the same frame.

    Returns a value in [0, 1]; 0 when the boxes are disjoint.  Raises on a
    frame mismatch or a nonpositive side.
    """
    if a.frame != b.frame:
        raise ValueError(f"frame mismatch: {a.frame!r} vs {b.frame!r}")
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise ValueError("iou requires positive box sides")
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two arrays of boxes in (cx, cy, w, h) layout.

    `a` has shape [N, 4], `b` has shape [M, 4]; the result is [N, M].
    Vectorized counterpart of `iou` for matching and NMS; callers are
    responsible for frame agreement.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    ix = np.minimum(ax1[:, None], bx1[None, :]) - np.maximum(ax0[:, None], bx0[None, :])
    iy = np.minimum(ay1[:, None], by1[None, :]) - np.maximum(ay0[:, None], by0[None, :])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    return inter / (area_a + area_b - inter)


def clip_box(b: Box, width: float, height: float, min_side: float = 1e-6) -> Box:
    """Intersect a box with the rectangle [0, width] x [0, height].

    A box that leaves no overlap is shrunk to `min_side` at the nearest
    edge so the positive-side invariant still holds.
    """
    x0 = min(max(b.x0, 0.0), width - min_side)
    y0 = min(max(b.y0, 0.0), height - min_side)
    x1 = max(min(b.x1, width), x0 + min_side)
    y1 = max(min(b.y1, height), y0 + min_side)
    return Box.from_corners(x0, y0, x1, y1, b.frame)


@dataclass(frozen=True)
class PadResizeTransform:
    """Centered zero-pad to a square followed by resize to a target canvas.

    Padding splits the deficit evenly, flooring on the leading (left/top)
    side.  The transform is invertible on box coordinates; `scale` is the
    uniform factor from square to canvas.
    """

    orig_w: int
    orig_h: int
    pad_left: int
    pad_top: int
    square_side: int
    target: int
    image_id: str | None = None

    @property
    def scale(self) -> float:
        return self.target / self.square_side

    @property
    def src_frame(self) -> str:
        return original_frame(self.image_id)

    @property
    def dst_frame(self) -> str:
        return canvas_frame(self.target)


def make_transform(orig_w: int, orig_h: int, target: int = 224,
                   image_id: str | None = None) -> PadResizeTransform:
    """Build the pad+resize transform for an image of the given size."""
    if orig_w <= 0 or orig_h <= 0 or target <= 0:
        raise ValueError(f"dimensions must be positive, got ({orig_w}, {orig_h}, {target})")
    side = max(orig_w, orig_h)
    return PadResizeTransform(
        orig_w=orig_w,
        orig_h=orig_h,
        pad_left=(side - orig_w) // 2,
        pad_top=(side - orig_h) // 2,
        square_side=side,
        target=target,
        image_id=image_id,
    )


def map_box(t: PadResizeTransform, b: Box, direction: str = "forward") -> Box:
    """Map a box through the transform: original -> canvas or back.

    `forward` requires the box in the transform's original frame and
    produces a canvas-frame box; `inverse` goes the other way.  The map is
    affine with a uniform scale, so aspect ratio and IoU are preserved.
    """
    k = t.scale
    if direction == "forward":
        if b.frame != t.src_frame:
            raise ValueError(f"forward map expects frame {t.src_frame!r}, got {b.frame!r}")
        return Box((b.cx + t.pad_left) * k, (b.cy + t.pad_top) * k,
                   b.w * k, b.h * k, t.dst_frame)
    if direction == "inverse":
        if b.frame != t.dst_frame:
            raise ValueError(f"inverse map expects frame {t.dst_frame!r}, got {b.frame!r}")
        return Box(b.cx / k - t.pad_left, b.cy / k - t.pad_top,
                   b.w / k, b.h / k, t.src_frame)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def retag(b: Box, frame: str) -> Box:
    """Copy of the box carrying a different frame tag."""
    return replace(b, frame=frame)
