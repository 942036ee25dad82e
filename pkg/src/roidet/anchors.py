"""Anchor grids and data-driven scale selection.

A single feature layer of G x G cells on an S-pixel canvas carries one
anchor per (cell, scale, aspect ratio).  `coverage` expresses an anchor
side as a fraction of the canvas side, directly comparable to the per-ROI
size ratio computed by the dataset statistics, which is what drives the
scale recommendation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, canvas_frame

SCALE_GRAIN = 0.05
_GRAIN_INV = 20  # exact integer inverse of the grain
_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class ScaleSpec:
    """Arithmetic scale range: start, start+step, ..., stop."""

    start: float
    stop: float
    step: float

    def __post_init__(self):
        if self.start <= 0:
            raise ValueError(f"start must be positive, got {self.start}")
        if self.stop < self.start:
            raise ValueError(f"stop {self.stop} < start {self.start}")
        if self.step <= 0:
            raise ValueError(f"step must be positive, got {self.step}")
        n = round((self.stop - self.start) / self.step)
        if abs(self.start + n * self.step - self.stop) > _ALIGN_TOL:
            raise ValueError(
                f"stop {self.stop} is not start + k*step for integer k (step {self.step})"
            )

    @property
    def count(self) -> int:
        return round((self.stop - self.start) / self.step) + 1


def expand_scales(spec: ScaleSpec) -> list[float]:
    """Expand the spec into its scale list, e.g. (0.7, 2.2, 0.3) -> 6 values."""
    return [spec.start + i * spec.step for i in range(spec.count)]


@dataclass(frozen=True)
class AnchorLayerSpec:
    """Predictor layout: one or more square grids over a shared canvas."""

    grids: tuple[int, ...]
    canvas_side: int = 224
    aspect_ratios: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if not self.grids or any(g < 1 for g in self.grids):
            raise ValueError(f"grid sizes must be >= 1, got {self.grids}")
        if self.canvas_side < 1:
            raise ValueError("canvas side must be >= 1")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")


@dataclass(frozen=True)
class Anchor:
    """One anchor box plus its provenance in the grid."""

    box: Box
    grid: int
    cell: tuple[int, int]
    scale: float


@dataclass
class AnchorSet:
    """All anchors of a layer spec, in deterministic grid-major order.

    Ordering is grid (as listed), then cell row, cell column, scale, and
    aspect ratio; the detector head emits its per-anchor outputs in exactly
    this order.
    """

    layer_spec: AnchorLayerSpec
    scales: list[float]
    anchors: list[Anchor]
    _array: np.ndarray | None = field(default=None, repr=False)

    @property
    def total(self) -> int:
        return len(self.anchors)

    @property
    def frame(self) -> str:
        return canvas_frame(self.layer_spec.canvas_side)

    def boxes_array(self) -> np.ndarray:
        """Anchor geometry as an [A, 4] array of (cx, cy, w, h)."""
        if self._array is None:
            self._array = np.array(
                [[a.box.cx, a.box.cy, a.box.w, a.box.h] for a in self.anchors],
                dtype=np.float64,
            )
        return self._array


def build_grid(layers: AnchorLayerSpec, scales: list[float]) -> AnchorSet:
    """Generate every anchor of the layer spec for the given scales.

    Cell (i, j) of a G-grid is centered at ((j+0.5)*S/G, (i+0.5)*S/G); a
    scale-s anchor there has side s*S/G (aspect 1:1).  Anchors whose sides
    exceed the cell may overhang the canvas; they are stored unclipped.
    """
    if not scales:
        raise ValueError("at least one scale required")
    s_canvas = layers.canvas_side
    frame = canvas_frame(s_canvas)
    anchors = []
    for g in layers.grids:
        cell = s_canvas / g
        for i in range(g):
            cy = (i + 0.5) * cell
            for j in range(g):
                cx = (j + 0.5) * cell
                for scale in scales:
                    side = scale * cell
                    for ar in layers.aspect_ratios:
                        w = side * math.sqrt(ar)
                        h = side / math.sqrt(ar)
                        anchors.append(Anchor(Box(cx, cy, w, h, frame), g, (i, j), scale))
    return AnchorSet(layer_spec=layers, scales=list(scales), anchors=anchors)


def coverage(scale: float, g: int) -> float:
    """Anchor side as a fraction of the canvas side: scale / G.

    The anchor side is scale * S/G, so dividing by S leaves scale/G; this
    is a side-length ratio, not an area ratio, and compares directly to
    the dataset's per-ROI size ratios.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    if g < 1:
        raise ValueError("grid size must be >= 1")
    return scale / g


def recommend_scales(stats, g: int, margin: float = 0.02, step_count: int = 6) -> ScaleSpec:
    """Derive a ScaleSpec whose coverage interval contains the observed ROI
    ratio range.

    The ratio range is taken at the (margin, 1-margin) quantiles of the
    dataset's ROI ratios, converted to scale units (ratio * G), snapped
    outward to the 0.05 grain, and widened to a minimum span of 0.1 when
    degenerate.  The step is the span divided by step_count-1, rounded UP
    to the grain so that re-aligning stop never shrinks the interval.
    Containment at the low end requires q_lo*G >= 0.05 (one grain), the
    smallest expressible start.
    """
    if step_count < 2:
        raise ValueError(f"step_count must be >= 2, got {step_count}")
    ratios = np.asarray(getattr(stats, "roi_ratios", stats), dtype=np.float64)
    if ratios.size == 0:
        raise ValueError("ratio histogram is empty")
    q_lo, q_hi = np.quantile(ratios, [margin, 1.0 - margin])

    # Work in integer grain units to dodge float fuzz in the rounding.
    start_u = max(1, math.floor(q_lo * g / SCALE_GRAIN + _ALIGN_TOL))
    stop_u = max(start_u, math.ceil(q_hi * g / SCALE_GRAIN - _ALIGN_TOL))
    while stop_u - start_u < 2:  # minimum span of 0.1 in scale units
        start_u = max(1, start_u - 1)
        stop_u += 1
    step_u = math.ceil((stop_u - start_u) / (step_count - 1))
    stop_u = start_u + step_u * (step_count - 1)
    # divide by the integer inverse so values round like their literals
    return ScaleSpec(start=start_u / _GRAIN_INV, stop=stop_u / _GRAIN_INV,
                     step=step_u / _GRAIN_INV)


def design_report(spec: ScaleSpec, g: int, canvas_side: int = 224,
                  aspect_ratios: tuple[float, ...] = (1.0,)) -> dict:
    """JSON-ready anchor design summary: scales, coverages, anchor count."""
    scales = expand_scales(spec)
    layer = AnchorLayerSpec(grids=(g,), canvas_side=canvas_side, aspect_ratios=aspect_ratios)
    total = build_grid(layer, scales).total
    return {
        "grid": g,
        "canvas_side": canvas_side,
        "scale_spec": {"start": spec.start, "stop": spec.stop, "step": spec.step},
        "scales": scales,
        "coverage": [coverage(s, g) for s in scales],
        "total_anchors": total,
    }
