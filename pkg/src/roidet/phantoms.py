"""Synthetic pelvic-phantom generator for desk-scale training and tests.

Each phantom is a grayscale image with a smooth gradient background and
two bright disks ("femoral heads") placed left and right of the vertical
midline.  Ground truth is a square around each disk with side = disk
diameter * LOOSE_FIT, so emitted ROI/image ratios stay inside the
configured band.  The disks are kept high-contrast: they are the sole
structures a detector must learn at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import AnnotationDocument, ImageRecord, RoiLabel

LOOSE_FIT = 1.2
_MAX_PLACEMENT_TRIES = 100


@dataclass
class PhantomConfig:
    canvas_long_side: int = 320
    aspect_range: tuple[float, float] = (0.8, 1.3)
    roi_ratio_range: tuple[float, float] = (0.10, 0.30)
    noise_level: float = 0.02
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.roi_ratio_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"roi_ratio_range must sit inside (0, 1), got {self.roi_ratio_range}")
        if self.aspect_range[0] <= 0 or self.aspect_range[1] < self.aspect_range[0]:
            raise ValueError(f"bad aspect_range {self.aspect_range}")
        if self.canvas_long_side < 16:
            raise ValueError("canvas_long_side too small")


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys = np.linspace(0, 1, h)[:, None]
    xs = np.linspace(0, 1, w)[None, :]
    base = rng.uniform(0.10, 0.22)
    grad_v = rng.uniform(-0.06, 0.06)
    grad_h = rng.uniform(-0.04, 0.04)
    img = base + grad_v * ys + grad_h * xs
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return img, (yy, xx)


def _disk(img: np.ndarray, grids, cx: float, cy: float, radius: float,
          brightness: float) -> None:
    yy, xx = grids
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    edge = 1.5  # soft rim, px
    img += brightness * np.clip((radius - dist) / edge + 0.5, 0.0, 1.0)


def _place_rois(rng: np.random.Generator, w: int, h: int, long_side: int,
                ratio_range: tuple[float, float]) -> list[tuple[float, float, int]]:
    """Pick (cx, cy, side) for the left and right ROI squares.

    Squares must fit inside the image, sit strictly on their side of the
    vertical midline, and not cross it (which also rules out overlap).
    """
    lo, hi = ratio_range
    side_lo = int(np.ceil(lo * long_side))
    side_hi = int(np.floor(hi * long_side))
    mid = w / 2.0
    for _ in range(_MAX_PLACEMENT_TRIES):
        side = int(rng.integers(side_lo, side_hi + 1))
        half = side / 2.0
        margin = 2.0
        x_left_lo, x_left_hi = half + margin, mid - half - margin
        y_lo = max(half + margin, 0.30 * h)
        y_hi = min(h - half - margin, 0.70 * h)
        if x_left_hi <= x_left_lo or y_hi <= y_lo:
            continue
        lx = rng.uniform(x_left_lo, x_left_hi)
        rx = w - rng.uniform(x_left_lo, x_left_hi)  # mirrored band
        ly = rng.uniform(y_lo, y_hi)
        ry = rng.uniform(y_lo, y_hi)
        return [(lx, ly, side), (rx, ry, side)]
    raise RuntimeError(
        f"could not place two ROIs in a {w}x{h} phantom after "
        f"{_MAX_PLACEMENT_TRIES} attempts (ratio range {ratio_range})"
    )


def synth_generate(cfg: PhantomConfig, n: int,
                   rng: np.random.Generator | None = None,
                   ) -> tuple[list[np.ndarray], AnnotationDocument]:
    """Generate `n` phantoms and their annotation document.

    Deterministic given (config, n): each phantom is drawn from its own
    generator spawned from the config seed, so generation could fan out
    per index without changing the result.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = np.random.SeedSequence(cfg.seed).spawn(n) if rng is None else None
    images: list[np.ndarray] = []
    records: list[ImageRecord] = []
    for i in range(n):
        g = np.random.default_rng(seeds[i]) if seeds is not None else rng
        aspect = g.uniform(*cfg.aspect_range)
        long = cfg.canvas_long_side
        if aspect >= 1.0:
            w, h = long, max(16, round(long / aspect))
        else:
            w, h = max(16, round(long * aspect)), long
        long_side = max(w, h)

        img, grids = _background(g, h, w)
        rois = _place_rois(g, w, h, long_side, cfg.roi_ratio_range)
        labels = []
        for (cx, cy, side), name in zip(rois, ("hip_left", "hip_right")):
            radius = side / (2.0 * LOOSE_FIT)
            _disk(img, grids, cx, cy, radius, g.uniform(0.60, 0.80))
            labels.append(RoiLabel(label=name, cx=cx, cy=cy, side=float(side)))

        img += g.normal(0.0, cfg.noise_level, size=img.shape)
        raster = np.clip(img, 0.0, 1.0)
        raster = np.round(raster * 255.0).astype(np.uint8)
        images.append(raster)
        records.append(ImageRecord(
            id=f"phantom_{i:04d}",
            file=f"phantom_{i:04d}.png",
            width=w,
            height=h,
            rois=labels,
        ))
    return images, AnnotationDocument(images=records)
