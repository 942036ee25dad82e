"""Prediction decoding, NMS, the metric suite, and the experiment grid.

Metrics mirror the reporting grid of the source experiments: average and
minimal per-ROI IoU, average confidence, AP at the 0.5 IoU cutoff, and
the count of ROIs detected below that cutoff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorLayerSpec, AnchorSet, ScaleSpec, build_grid, expand_scales
from .detector import DetectorConfig, DetectorModel, build_detector
from .geometry import Box, PadResizeTransform, clip_box, iou, iou_matrix, map_box
from .training import TrainConfig, TrainSample, decode_boxes, split_train_val, train


@dataclass(frozen=True)
class Prediction:
    box: Box
    confidence: float
    anchor_index: int


def nms(candidates, iou_threshold: float):
    """Greedy non-maximum suppression.

    Candidates are (Box, confidence, ...) tuples; they are visited in
    descending confidence (ties keep input order) and dropped iff their
    IoU with an already-kept box exceeds the threshold strictly.  Returns
    the kept candidates in visit order.
    """
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i][1], i))
    kept: list[int] = []
    for i in order:
        box = candidates[i][0]
        if all(iou(box, candidates[j][0]) <= iou_threshold for j in kept):
            kept.append(i)
    return [candidates[i] for i in kept]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def predict_on_canvas(logits: np.ndarray, offsets: np.ndarray,
                      anchor_set: AnchorSet, top_k: int = 2,
                      nms_iou: float = 0.4, conf_floor: float = 0.05,
                      ) -> list[tuple[Box, float, int]]:
    """Decode one image's raw outputs into canvas-frame detections."""
    conf = _sigmoid(np.asarray(logits, dtype=np.float64))
    keep = np.nonzero(conf >= conf_floor)[0]
    if keep.size == 0:
        return []
    boxes_arr = decode_boxes(anchor_set.boxes_array()[keep],
                             np.asarray(offsets, dtype=np.float64)[keep])
    frame = anchor_set.frame
    side = anchor_set.layer_spec.canvas_side
    cands = [
        (clip_box(Box(cx, cy, w, h, frame), side, side), float(conf[i]), int(i))
        for (cx, cy, w, h), i in zip(boxes_arr, keep)
    ]
    return nms(cands, nms_iou)[:top_k]


def predict(model: DetectorModel, canvas: np.ndarray, anchor_set: AnchorSet,
            transform: PadResizeTransform, top_k: int = 2,
            nms_iou: float = 0.4, conf_floor: float = 0.05) -> list[Prediction]:
    """Full decode path for one preprocessed image.

    Runs the model, decodes offsets against the anchors, filters by the
    confidence floor, suppresses duplicates, keeps the top_k, and maps
    the survivors back to the original pixel frame (clipped to bounds).
    """
    batch = canvas if canvas.ndim == 4 else canvas[None]
    logits, offsets = model.forward(batch)
    kept = predict_on_canvas(logits.data[0], offsets.data[0], anchor_set,
                             top_k=top_k, nms_iou=nms_iou, conf_floor=conf_floor)
    out = []
    for box, conf, idx in kept:
        orig = map_box(transform, box, "inverse")
        orig = clip_box(orig, transform.orig_w, transform.orig_h)
        out.append(Prediction(box=orig, confidence=conf, anchor_index=idx))
    return out


def greedy_iou_assignment(pred_boxes: list[Box], gts: list[Box]) -> list[float]:
    """One-to-one matching by globally descending IoU; per-GT IoU list.

    Unmatched ground truths score 0; surplus predictions are simply left
    unmatched here (they count as false positives in AP).
    """
    per_gt = [0.0] * len(gts)
    if not pred_boxes or not gts:
        return per_gt
    m = iou_matrix(np.array([[b.cx, b.cy, b.w, b.h] for b in pred_boxes]),
                   np.array([[b.cx, b.cy, b.w, b.h] for b in gts]))
    pairs = sorted(((i, j) for i in range(len(pred_boxes)) for j in range(len(gts))),
                   key=lambda p: (-m[p[0], p[1]], p[0], p[1]))
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    for i, j in pairs:
        if i in used_pred or j in used_gt:
            continue
        per_gt[j] = float(m[i, j])
        used_pred.add(i)
        used_gt.add(j)
    return per_gt


def match_for_metrics(preds: list[Prediction], gts: list[Box]) -> list[float]:
    """Per-GT IoU list for one image (greedy one-to-one assignment)."""
    return greedy_iou_assignment([p.box for p in preds], gts)


def ap50(preds_by_image: dict[str, list[Prediction]],
         gts_by_image: dict[str, list[Box]], iou_cut: float = 0.5) -> float:
    """Average precision at a single IoU cutoff.

    All predictions rank by descending confidence; each claims the best
    still-unclaimed ground truth of its image when their IoU reaches the
    cutoff, else counts as a false positive.  AP is the area under the
    all-point interpolated precision-recall curve.
    """
    n_gts = sum(len(v) for v in gts_by_image.values())
    if n_gts == 0:
        raise ValueError("ap50 requires at least one ground truth")
    ranked = sorted(
        ((img, k, p) for img, plist in preds_by_image.items()
         for k, p in enumerate(plist)),
        key=lambda t: (-t[2].confidence, t[0], t[1]),
    )
    claimed: dict[str, set[int]] = {img: set() for img in gts_by_image}
    flags = np.zeros(len(ranked), dtype=bool)
    for r, (img, _, p) in enumerate(ranked):
        gts = gts_by_image.get(img, [])
        best_j, best_v = -1, iou_cut
        for j, g in enumerate(gts):
            if j in claimed[img]:
                continue
            v = iou(p.box, g)
            if v >= best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            claimed[img].add(best_j)
            flags[r] = True
    return ap_from_flags(flags, n_gts)


def ap_from_flags(tp_flags: np.ndarray, n_gts: int) -> float:
    """All-point interpolated AP from ranked true-positive flags."""
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_gts
    precision = tp / (tp + fp)
    # upper envelope of precision from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap_total = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap_total += (r - prev_r) * p
            prev_r = r
    return float(ap_total)


@dataclass
class MetricsReport:
    avg_iou: float
    avg_confidence: float
    min_iou: float
    ap50: float
    n_images: int
    n_rois: int
    n_below_half: int

    def to_json_obj(self) -> dict:
        return dict(vars(self))

    def table_row(self, name: str = "") -> str:
        return (f"{name:<12} {self.avg_iou:>8.4f} {self.avg_confidence:>10.4f} "
                f"{self.min_iou:>8.4f} {self.ap50:>8.4f} {self.n_below_half:>10d}")


REPORT_HEADER = (f"{'experiment':<12} {'avg IoU':>8} {'avg conf':>10} "
                 f"{'min IoU':>8} {'AP50':>8} {'IoU<0.5':>10}")


def report(preds_by_image: dict[str, list[Prediction]],
           gts_by_image: dict[str, list[Box]]) -> MetricsReport:
    """Aggregate the metric suite over a dataset."""
    if not gts_by_image:
        raise ValueError("report requires a nonempty dataset")
    ious: list[float] = []
    confs: list[float] = []
    for img, gts in gts_by_image.items():
        preds = preds_by_image.get(img, [])
        ious.extend(match_for_metrics(preds, gts))
        confs.extend(p.confidence for p in preds)
    if not ious:
        raise ValueError("report requires at least one ground-truth ROI")
    ious_arr = np.array(ious)
    return MetricsReport(
        avg_iou=float(ious_arr.mean()),
        avg_confidence=float(np.mean(confs)) if confs else 0.0,
        min_iou=float(ious_arr.min()),
        ap50=ap50(preds_by_image, gts_by_image),
        n_images=len(gts_by_image),
        n_rois=len(ious),
        n_below_half=int(np.count_nonzero(ious_arr < 0.5)),
    )


def evaluate_samples(model: DetectorModel, samples: list[TrainSample],
                     anchor_set: AnchorSet, top_k: int = 2,
                     batch_size: int = 16) -> MetricsReport:
    """Run the decode path over canvas samples and aggregate the report."""
    preds_by_image: dict[str, list[Prediction]] = {}
    gts_by_image: dict[str, list[Box]] = {}
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        logits, offsets = model.forward(np.stack([s.canvas for s in chunk]))
        for i, s in enumerate(chunk):
            kept = predict_on_canvas(logits.data[i], offsets.data[i], anchor_set,
                                     top_k=top_k)
            preds_by_image[s.image_id] = [
                Prediction(box=b, confidence=c, anchor_index=a) for b, c, a in kept
            ]
            gts_by_image[s.image_id] = s.gt_boxes
    return report(preds_by_image, gts_by_image)


@dataclass(frozen=True)
class GridRow:
    name: str
    grids: tuple[int, ...]
    scale_spec: ScaleSpec


@dataclass
class GridResult:
    name: str
    n_anchors: int
    validation: MetricsReport
    test: MetricsReport


def run_experiment_grid(grid: list[GridRow], train_samples: list[TrainSample],
                        test_samples: list[TrainSample], cfg: TrainConfig,
                        seed: int = 0, canvas_side: int = 224,
                        channels: tuple[int, ...] = (8, 16, 32, 64, 64),
                        ) -> list[GridResult]:
    """Train and evaluate one fresh model per grid row under a shared budget.

    Row i trains with seed + i, so a single-row grid reproduces a direct
    train-plus-report run bit for bit.
    """
    results = []
    for i, row in enumerate(grid):
        try:
            scales = expand_scales(row.scale_spec)
            layer = AnchorLayerSpec(grids=row.grids, canvas_side=canvas_side)
            anchor_set = build_grid(layer, scales)
            det_cfg = DetectorConfig(canvas_side=canvas_side, channels=channels,
                                     head_grids=row.grids,
                                     anchors_per_cell=len(scales))
            row_seed = seed + i
            model = build_detector(det_cfg, np.random.default_rng(row_seed))
            model, history = train(model, train_samples, anchor_set, cfg, seed=row_seed)

            _, val_samples = split_train_val(train_samples, cfg.val_fraction, row_seed)
            val_report = evaluate_samples(model, val_samples, anchor_set)
            test_report = evaluate_samples(model, test_samples, anchor_set)
            results.append(GridResult(name=row.name, n_anchors=anchor_set.total,
                                      validation=val_report, test=test_report))
        except Exception as e:
            raise RuntimeError(f"experiment row {row.name!r} failed: {e}") from e
    return results


def grid_text_table(results: list[GridResult]) -> str:
    lines = [
        f"{'experiment':<12} {'anchors':>8} "
        f"{'val IoU':>8} {'val conf':>9} {'test IoU':>9} {'test conf':>10} "
        f"{'min IoU':>8} {'AP50':>8}"
    ]
    for r in results:
        lines.append(
            f"{r.name:<12} {r.n_anchors:>8d} "
            f"{r.validation.avg_iou:>8.4f} {r.validation.avg_confidence:>9.4f} "
            f"{r.test.avg_iou:>9.4f} {r.test.avg_confidence:>10.4f} "
            f"{r.test.min_iou:>8.4f} {r.test.ap50:>8.4f}"
        )
    return "\n".join(lines) + "\n"


def grid_json(results: list[GridResult]) -> str:
    return json.dumps([
        {
            "name": r.name,
            "n_anchors": r.n_anchors,
            "validation": r.validation.to_json_obj(),
            "test": r.test.to_json_obj(),
        }
        for r in results
    ], indent=2, sort_keys=True)
