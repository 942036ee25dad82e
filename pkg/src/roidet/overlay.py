"""Overlay rendering: ground truth in yellow, detections in red.

Drawing is pure numpy rasterization (strokes plus a tiny bitmap font for
the confidence text), so output bytes are fully deterministic.  Files are
written as PNG (via Pillow) or binary PPM depending on the extension.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

YELLOW = (255, 255, 0)
RED = (255, 0, 0)
STROKE = 2

# 3x5 glyphs for "0123456789."
_GLYPHS = {
    "0": ["111", "101", "101", "101", "111"],
    "1": ["010", "110", "010", "010", "111"],
    "2": ["111", "001", "111", "100", "111"],
    "3": ["111", "001", "111", "001", "111"],
    "4": ["101", "101", "111", "001", "001"],
    "5": ["111", "100", "111", "001", "111"],
    "6": ["111", "100", "111", "101", "111"],
    "7": ["111", "001", "010", "010", "010"],
    "8": ["111", "101", "111", "101", "111"],
    "9": ["111", "101", "111", "001", "111"],
    ".": ["000", "000", "000", "000", "010"],
}


def _paint(rgb: np.ndarray, y0: int, y1: int, x0: int, x1: int, color) -> None:
    h, w = rgb.shape[:2]
    y0, y1 = max(0, y0), min(h, y1)
    x0, x1 = max(0, x0), min(w, x1)
    if y0 < y1 and x0 < x1:
        rgb[y0:y1, x0:x1] = color


def _draw_rect(rgb: np.ndarray, x0: float, y0: float, x1: float, y1: float,
               color, stroke: int = STROKE) -> None:
    xi0, yi0 = int(np.floor(x0)), int(np.floor(y0))
    xi1, yi1 = int(np.ceil(x1)), int(np.ceil(y1))
    _paint(rgb, yi0, yi0 + stroke, xi0, xi1, color)            # top
    _paint(rgb, yi1 - stroke, yi1, xi0, xi1, color)            # bottom
    _paint(rgb, yi0, yi1, xi0, xi0 + stroke, color)            # left
    _paint(rgb, yi0, yi1, xi1 - stroke, xi1, color)            # right


def _draw_text(rgb: np.ndarray, x: int, y: int, text: str, color,
               scale: int = 2) -> None:
    cx = x
    for ch in text:
        glyph = _GLYPHS.get(ch)
        if glyph is None:
            cx += 4 * scale
            continue
        for gy, row in enumerate(glyph):
            for gx, bit in enumerate(row):
                if bit == "1":
                    _paint(rgb, y + gy * scale, y + (gy + 1) * scale,
                           cx + gx * scale, cx + (gx + 1) * scale, color)
        cx += 4 * scale
    return


def render_overlay(image: np.ndarray, gts, preds, out_path) -> None:
    """Write the annotated raster: yellow GT boxes, red predictions with
    their confidence printed beside the box."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.asarray(image, dtype=np.float64) * 255.0, 0, 255).astype(np.uint8)
    rgb = np.stack([image] * 3, axis=-1)

    for g in gts:
        _draw_rect(rgb, g.x0, g.y0, g.x1, g.y1, YELLOW)
    for p in preds:
        b = p.box
        _draw_rect(rgb, b.x0, b.y0, b.x1, b.y1, RED)
        label = f"{p.confidence:.2f}"
        tx = int(np.floor(b.x0)) + STROKE + 2
        ty = int(np.floor(b.y0)) - 12
        if ty < 0:
            ty = int(np.floor(b.y0)) + STROKE + 2
        _draw_text(rgb, tx, ty, label, RED)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix.lower() == ".ppm":
        header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
        out_path.write_bytes(header + rgb.tobytes())
    elif out_path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(rgb).save(out_path, format="PNG")
    else:
        raise ValueError(f"unsupported overlay format {out_path.suffix!r} "
                         "(use .png or .ppm)")
