"""Annotation ingestion, dataset statistics, preprocessing, augmentation.

Annotation files are JSON documents with a top-level "images" list; ROI
coordinates live in the original pixel frame and every ROI is a square
centered on the anatomy.  Preprocessing zero-pads each image to a square
and resizes it to the model canvas, returning the transform so boxes can
be mapped both ways.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box, PadResizeTransform, make_transform, original_frame

HISTOGRAM_BIN_WIDTH = 0.02


class AnnotationError(ValueError):
    """Raised when an annotation document fails schema or invariant checks."""


@dataclass
class RoiLabel:
    label: str
    cx: float
    cy: float
    side: float

    def to_box(self, frame: str) -> Box:
        return Box.square(self.cx, self.cy, self.side, frame)


@dataclass
class ImageRecord:
    id: str
    file: str
    width: int
    height: int
    rois: list[RoiLabel] = field(default_factory=list)

    @property
    def long_side(self) -> int:
        return max(self.width, self.height)

    def gt_boxes(self) -> list[Box]:
        frame = original_frame(self.id)
        return [r.to_box(frame) for r in self.rois]


@dataclass
class AnnotationDocument:
    images: list[ImageRecord]

    @property
    def n_rois(self) -> int:
        return sum(len(im.rois) for im in self.images)

    def to_json_obj(self) -> dict:
        return {
            "images": [
                {
                    "id": im.id,
                    "file": im.file,
                    "width": im.width,
                    "height": im.height,
                    "rois": [
                        {"label": r.label, "cx": r.cx, "cy": r.cy, "side": r.side}
                        for r in im.rois
                    ],
                }
                for im in self.images
            ]
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_obj(), indent=2) + "\n",
                              encoding="utf-8")


def _require(cond: bool, msg: str, problems: list[str]) -> None:
    if not cond:
        problems.append(msg)


def parse_annotations(obj) -> AnnotationDocument:
    """Validate a parsed JSON object and build the document.

    Collects every invariant violation (with the offending image id) and
    raises a single AnnotationError listing them all.
    """
    problems: list[str] = []
    if not isinstance(obj, dict) or "images" not in obj:
        raise AnnotationError("top-level object must contain an 'images' list")
    if not isinstance(obj["images"], list):
        raise AnnotationError("'images' must be a list")

    images: list[ImageRecord] = []
    seen_ids: set[str] = set()
    for k, raw in enumerate(obj["images"]):
        where = f"images[{k}]"
        if not isinstance(raw, dict):
            problems.append(f"{where}: entry is not an object")
            continue
        missing = [f for f in ("id", "file", "width", "height", "rois") if f not in raw]
        if missing:
            problems.append(f"{where}: missing fields {missing}")
            continue
        img_id = str(raw["id"])
        where = f"image {img_id!r}"
        if img_id in seen_ids:
            problems.append(f"{where}: duplicate image id")
            continue
        seen_ids.add(img_id)
        try:
            width, height = int(raw["width"]), int(raw["height"])
        except (TypeError, ValueError):
            problems.append(f"{where}: width/height must be integers")
            continue
        _require(width > 0 and height > 0, f"{where}: nonpositive dimensions", problems)
        rois = []
        if not isinstance(raw["rois"], list):
            problems.append(f"{where}: 'rois' must be a list")
            continue
        for r_idx, r in enumerate(raw["rois"]):
            if not isinstance(r, dict) or any(f not in r for f in ("label", "cx", "cy", "side")):
                problems.append(f"{where}: roi[{r_idx}] missing label/cx/cy/side")
                continue
            cx, cy, side = float(r["cx"]), float(r["cy"]), float(r["side"])
            _require(side > 0, f"{where}: roi[{r_idx}] side must be > 0, got {side}", problems)
            _require(0 <= cx <= width and 0 <= cy <= height,
                     f"{where}: roi[{r_idx}] center ({cx}, {cy}) outside image bounds",
                     problems)
            rois.append(RoiLabel(label=str(r["label"]), cx=cx, cy=cy, side=side))
        images.append(ImageRecord(id=img_id, file=str(raw["file"]),
                                  width=width, height=height, rois=rois))
    if problems:
        raise AnnotationError("invalid annotation document:\n  " + "\n  ".join(problems))
    return AnnotationDocument(images=images)


def load_annotations(path) -> AnnotationDocument:
    """Load and validate an annotation JSON file."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: JSON parse failure at line {e.lineno} "
                              f"column {e.colno}: {e.msg}") from e
    return parse_annotations(obj)


@dataclass
class SideSummary:
    max: float
    min: float
    median: float
    mean: float
    stddev: float


@dataclass
class DatasetStats:
    long_side_summary: SideSummary
    roi_ratio_histogram: dict  # {"bin_edges": [...], "counts": [...]}
    roi_ratios: list[float]
    n_images: int
    n_rois: int

    def to_json_obj(self) -> dict:
        return {
            "n_images": self.n_images,
            "n_rois": self.n_rois,
            "long_side_summary": vars(self.long_side_summary),
            "roi_ratio_histogram": self.roi_ratio_histogram,
            "roi_ratios": self.roi_ratios,
        }


def compute_stats(doc: AnnotationDocument) -> DatasetStats:
    """Long-side summary and per-ROI size-ratio distribution.

    The ratio of an ROI is its square side divided by the long side of its
    image, which normalizes ROI size across resolutions.
    """
    if not doc.images:
        raise ValueError("cannot compute statistics of an empty document")
    long_sides = np.array([im.long_side for im in doc.images], dtype=np.float64)
    ratios = [r.side / im.long_side for im in doc.images for r in im.rois]
    n_bins = round(1.0 / HISTOGRAM_BIN_WIDTH)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(ratios, bins=edges)
    return DatasetStats(
        long_side_summary=SideSummary(
            max=float(long_sides.max()),
            min=float(long_sides.min()),
            median=float(np.median(long_sides)),
            mean=float(long_sides.mean()),
            stddev=float(long_sides.std()),
        ),
        roi_ratio_histogram={"bin_edges": edges.tolist(), "counts": counts.tolist()},
        roi_ratios=ratios,
        n_images=len(doc.images),
        n_rois=len(ratios),
    )


def stats_text_table(stats: DatasetStats, bar_width: int = 50) -> str:
    """Plain-text rendering of the summary plus a ratio histogram."""
    s = stats.long_side_summary
    lines = [
        f"images: {stats.n_images}   rois: {stats.n_rois}",
        f"long side (px): max {s.max:.0f}  min {s.min:.0f}  median {s.median:.0f}"
        f"  mean {s.mean:.1f}  stddev {s.stddev:.1f}",
        "",
        "ROI/image ratio histogram",
    ]
    counts = stats.roi_ratio_histogram["counts"]
    edges = stats.roi_ratio_histogram["bin_edges"]
    peak = max(max(counts), 1)
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        if c == 0:
            continue
        bar = "#" * max(1, round(bar_width * c / peak))
        lines.append(f"  [{lo:.2f}, {hi:.2f})  {c:>6d}  {bar}")
    return "\n".join(lines) + "\n"


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     zero_outside: bool) -> np.ndarray:
    """Sample a 2D image at fractional pixel-index positions.

    Positions beyond the array either replicate the border (resize) or
    read zeros (rotation).
    """
    h, w = img.shape
    if zero_outside:
        # one-pixel zero apron so out-of-range neighbors contribute nothing
        img = np.pad(img, 1)
        ys, xs = ys + 1, xs + 1
        h, w = img.shape
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    ty = ys - y0f
    tx = xs - x0f
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 * (1 - tx) + v01 * tx
    bot = v10 * (1 - tx) + v11 * tx
    return top * (1 - ty) + bot * ty


def _resize_square(img: np.ndarray, out_side: int) -> np.ndarray:
    in_side = img.shape[0]
    s = in_side / out_side
    pos = (np.arange(out_side) + 0.5) * s - 0.5
    ys, xs = np.meshgrid(pos, pos, indexing="ij")
    return _bilinear_sample(img, ys, xs, zero_outside=False)


def preprocess(image: np.ndarray, target: int = 224,
               image_id: str | None = None) -> tuple[np.ndarray, PadResizeTransform]:
    """Pad a grayscale raster to a square, resize to the canvas, scale to [0,1].

    Accepts 8-bit rasters (divided by 255) or float rasters already in
    [0, 1].  Returns a [1, target, target] float64 canvas whose padding
    bands are exactly zero, plus the box transform.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected a nonempty 2D raster, got shape {image.shape}")
    if image.dtype == np.uint8:
        pixels = image.astype(np.float64) / 255.0
    else:
        pixels = image.astype(np.float64)
    h, w = pixels.shape
    t = make_transform(w, h, target, image_id=image_id)
    square = np.zeros((t.square_side, t.square_side), dtype=np.float64)
    square[t.pad_top:t.pad_top + h, t.pad_left:t.pad_left + w] = pixels
    canvas = _resize_square(square, target)
    return canvas[None, :, :], t


@dataclass
class AugmentConfig:
    max_rotation_deg: float = 3.0
    rotation_prob: float = 0.9
    lighting_balance: float = 0.5
    lighting_contrast: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rotation_prob <= 1.0:
            raise ValueError("rotation_prob must be in [0, 1]")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")


def _rotate_canvas(canvas: np.ndarray, theta: float) -> np.ndarray:
    """Rotate a square canvas by theta (radians) about its center.

    Continuous coordinates put pixel (i, j) at (j+0.5, i+0.5); content
    outside the canvas reads as zero.
    """
    side = canvas.shape[0]
    c = side / 2.0
    idx = np.arange(side) + 0.5
    yy, xx = np.meshgrid(idx, idx, indexing="ij")
    cos_t, sin_t = math.cos(-theta), math.sin(-theta)
    src_x = cos_t * (xx - c) - sin_t * (yy - c) + c
    src_y = sin_t * (xx - c) + cos_t * (yy - c) + c
    return _bilinear_sample(canvas, src_y - 0.5, src_x - 0.5, zero_outside=True)


def _rotate_box(b: Box, theta: float, side: int) -> Box | None:
    """Axis-aligned bounding box of the box's corners rotated about the
    canvas center, clipped to the canvas; None if nothing remains."""
    c = side / 2.0
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    corners = [(b.x0, b.y0), (b.x1, b.y0), (b.x1, b.y1), (b.x0, b.y1)]
    xs = [cos_t * (x - c) - sin_t * (y - c) + c for x, y in corners]
    ys = [sin_t * (x - c) + cos_t * (y - c) + c for x, y in corners]
    x0, x1 = max(min(xs), 0.0), min(max(xs), float(side))
    y0, y1 = max(min(ys), 0.0), min(max(ys), float(side))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return Box.from_corners(x0, y0, x1, y1, b.frame)


def augment(canvas: np.ndarray, boxes: list[Box], cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, list[Box]]:
    """Random small rotation plus lighting jitter.

    With probability `rotation_prob` the canvas rotates by an angle drawn
    uniformly within +-max_rotation_deg; each ground-truth square is
    replaced by the bounding box of its rotated corners.  Lighting applies
    a contrast stretch about mid-gray and a brightness shift, then clamps
    to [0, 1].
    """
    out = canvas
    squeeze = canvas.ndim == 3
    plane = canvas[0] if squeeze else canvas
    new_boxes = list(boxes)

    if rng.random() < cfg.rotation_prob and cfg.max_rotation_deg > 0:
        theta = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
        if theta != 0.0:
            side = plane.shape[0]
            plane = _rotate_canvas(plane, theta)
            new_boxes = [rb for b in boxes if (rb := _rotate_box(b, theta, side))]

    b, c = cfg.lighting_balance, cfg.lighting_contrast
    if b > 0 or c > 0:
        factor = rng.uniform(1.0 / (1.0 + c), 1.0 + c)
        shift = rng.uniform(-b / 2.0, b / 2.0)
        plane = np.clip(factor * (plane - 0.5) + 0.5 + shift, 0.0, 1.0)

    out = plane[None, :, :] if squeeze else plane
    return out, new_boxes
