"""Anchor matching, losses, the one-cycle schedule, and the staged trainer.

Matching and box coding follow standard single-shot practice: each ground
truth forces its best-IoU anchor positive, anchors above the IoU
threshold join in, and offsets are (center delta / anchor size, log size
ratio).  Classification uses the focal loss; box regression is smooth-L1
on positives; both terms are normalized by the positive count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSet
from .autodiff import Tensor
from .dataset import AugmentConfig, augment
from .detector import DetectorModel
from .geometry import Box, iou_matrix

PROB_CLAMP = 1e-7


@dataclass
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    batch_size: int = 16

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


UNFREEZE_LEVELS = ("head", "head+last", "all")


@dataclass
class StageConfig:
    lr_max: float
    cycles: int
    unfreeze_level: str

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ValueError("lr_max must be positive")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")
        if self.unfreeze_level not in UNFREEZE_LEVELS:
            raise ValueError(f"unfreeze_level must be one of {UNFREEZE_LEVELS}")


@dataclass
class ScheduleConfig:
    stages: list[StageConfig] = field(default_factory=lambda: [
        StageConfig(0.01, 40, "head"),
        StageConfig(0.0025, 40, "head+last"),
        StageConfig(0.0025, 40, "all"),
    ])
    # discriminative rates: early backbone / late backbone / head
    lr_divisors: tuple[float, float, float] = (100.0, 10.0, 1.0)


@dataclass
class LossConfig:
    focal: FocalConfig = field(default_factory=FocalConfig)
    box_weight: float = 1.0


@dataclass
class MatchResult:
    """Per-anchor assignment: -1 background, otherwise ground-truth index."""

    labels: np.ndarray            # [A] int64
    target_offsets: np.ndarray    # [A, 4], zeros for background

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def n_positive(self) -> int:
        return int(np.count_nonzero(self.labels >= 0))


def encode_box(anchor: Box, gt: Box) -> np.ndarray:
    """Offsets (dx, dy, dw, dh) mapping the anchor onto the ground truth."""
    if anchor.w <= 0 or anchor.h <= 0 or gt.w <= 0 or gt.h <= 0:
        raise ValueError("encode_box requires positive sides")
    return np.array([
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        math.log(gt.w / anchor.w),
        math.log(gt.h / anchor.h),
    ])


def decode_box(anchor: Box, offsets) -> Box:
    """Inverse of encode_box."""
    dx, dy, dw, dh = np.asarray(offsets, dtype=np.float64)
    return Box(
        anchor.cx + dx * anchor.w,
        anchor.cy + dy * anchor.h,
        anchor.w * math.exp(dw),
        anchor.h * math.exp(dh),
        anchor.frame,
    )


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized encode over aligned [N, 4] (cx, cy, w, h) arrays."""
    out = np.empty_like(anchors)
    out[:, 0] = (gts[:, 0] - anchors[:, 0]) / anchors[:, 2]
    out[:, 1] = (gts[:, 1] - anchors[:, 1]) / anchors[:, 3]
    out[:, 2] = np.log(gts[:, 2] / anchors[:, 2])
    out[:, 3] = np.log(gts[:, 3] / anchors[:, 3])
    return out


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.empty_like(anchors)
    out[:, 0] = anchors[:, 0] + offsets[:, 0] * anchors[:, 2]
    out[:, 1] = anchors[:, 1] + offsets[:, 1] * anchors[:, 3]
    out[:, 2] = anchors[:, 2] * np.exp(offsets[:, 2])
    out[:, 3] = anchors[:, 3] * np.exp(offsets[:, 3])
    return out


def _clipped_anchor_array(anchor_set: AnchorSet) -> np.ndarray:
    """Anchor geometry clipped to the canvas, corners intersected; anchors
    are stored unclipped, overhang is removed only for IoU."""
    s = anchor_set.layer_spec.canvas_side
    arr = anchor_set.boxes_array()
    x0 = np.clip(arr[:, 0] - arr[:, 2] / 2, 0, s)
    y0 = np.clip(arr[:, 1] - arr[:, 3] / 2, 0, s)
    x1 = np.clip(arr[:, 0] + arr[:, 2] / 2, 0, s)
    y1 = np.clip(arr[:, 1] + arr[:, 3] / 2, 0, s)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=1)


def match_anchors(anchor_set: AnchorSet, gts: list[Box],
                  pos_threshold: float = 0.5) -> MatchResult:
    """Assign anchors to ground truths.

    Positives are the best-IoU anchor of every ground truth (forced, each
    GT gets a distinct anchor, highest IoU pairs claimed first) plus any
    anchor whose clipped IoU with some GT reaches the threshold.  Ties
    break toward the lowest anchor index, then the lowest GT index.
    """
    if anchor_set.total == 0:
        raise ValueError("anchor set is empty")
    a = anchor_set.total
    labels = np.full(a, -1, dtype=np.int64)
    targets = np.zeros((a, 4), dtype=np.float64)
    if not gts:
        return MatchResult(labels, targets)
    if len(gts) > a:
        raise ValueError(f"{len(gts)} ground truths exceed {a} anchors")

    gt_arr = np.array([[b.cx, b.cy, b.w, b.h] for b in gts])
    m = iou_matrix(_clipped_anchor_array(anchor_set), gt_arr)  # [A, NG]

    # forced pass: claim (gt, anchor) pairs in descending IoU order
    order = sorted(
        ((i, j) for i in range(a) for j in range(len(gts))),
        key=lambda p: (-m[p[0], p[1]], p[0], p[1]),
    )
    gt_satisfied = np.zeros(len(gts), dtype=bool)
    anchor_forced = np.zeros(a, dtype=bool)
    for i, j in order:
        if gt_satisfied.all():
            break
        if gt_satisfied[j] or anchor_forced[i]:
            continue
        labels[i] = j
        anchor_forced[i] = True
        gt_satisfied[j] = True

    # threshold pass for the remaining anchors
    best_gt = m.argmax(axis=1)
    best_iou = m[np.arange(a), best_gt]
    extra = (~anchor_forced) & (best_iou >= pos_threshold)
    labels[extra] = best_gt[extra]

    pos = labels >= 0
    anchors_arr = anchor_set.boxes_array()
    targets[pos] = encode_boxes(anchors_arr[pos], gt_arr[labels[pos]])
    return MatchResult(labels, targets)


def focal_loss(p: float | np.ndarray, y, cfg: FocalConfig):
    """Focal loss on probabilities: -alpha_t * (1 - p_t)^gamma * log(p_t).

    alpha weights the positive class and (1 - alpha) the negative class;
    probabilities are clamped away from 0 and 1 before the log.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = cfg.alpha * y + (1.0 - cfg.alpha) * (1.0 - y)
    out = -alpha_t * (1.0 - p_t) ** cfg.gamma * np.log(p_t)
    return float(out) if out.ndim == 0 else out


def _focal_terms(logits: Tensor, y: np.ndarray, cfg: FocalConfig) -> Tensor:
    """Differentiable focal loss per anchor, built from graph primitives."""
    p = ad.clip(ad.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = ad.add(ad.mul(p, y), ad.mul(ad.add(ad.mul(p, -1.0), 1.0), 1.0 - y))
    alpha_t = cfg.alpha * y + (1.0 - cfg.alpha) * (1.0 - y)
    modulator = ad.power(ad.add(ad.mul(p_t, -1.0), 1.0), cfg.gamma)
    return ad.mul(ad.mul(ad.mul(modulator, ad.log(p_t)), alpha_t), -1.0)


def detection_loss(logits: Tensor, offsets: Tensor, match: MatchResult,
                   cfg: LossConfig) -> Tensor:
    """Focal term over all anchors plus smooth-L1 over positives, both
    normalized by max(1, #positives)."""
    a = match.labels.shape[0]
    if logits.shape != (a,) or offsets.shape != (a, 4):
        raise ValueError(f"loss shapes {logits.shape}/{offsets.shape} do not "
                         f"match anchor count {a}")
    y = (match.labels >= 0).astype(np.float64)
    norm = 1.0 / max(1, match.n_positive)
    cls_term = ad.mul(ad.tsum(_focal_terms(logits, y, cfg.focal)), norm)
    mask = y[:, None]
    diff = ad.mul(ad.add(offsets, -match.target_offsets), mask)
    box_term = ad.mul(ad.tsum(ad.smooth_l1(diff)), cfg.box_weight * norm)
    return ad.add(cls_term, box_term)


def lr_at(step: int, lr_max: float, total_steps: int,
          warmup_frac: float = 0.3, start_div: float = 25.0,
          final_div: float = 1e4) -> float:
    """One-cycle rate: linear warm-up to the peak over the first 30% of
    the stage, cosine decay to lr_max/1e4 at the last step."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside stage budget [0, {total_steps})")
    if total_steps == 1:
        return lr_max
    warm = max(1, round(warmup_frac * (total_steps - 1)))
    lr_start = lr_max / start_div
    if step <= warm:
        return lr_start + (lr_max - lr_start) * step / warm
    lr_end = lr_max / final_div
    span = total_steps - 1 - warm
    t = (step - warm) / span
    return lr_end + (lr_max - lr_end) * (1.0 + math.cos(math.pi * t)) / 2.0


class Adam:
    """Adam with bias correction over named parameter groups."""

    def __init__(self, groups: dict[str, list[Tensor]], cfg: OptimizerConfig):
        self.groups = groups
        self.cfg = cfg
        self.state = {id(t): [np.zeros_like(t.data), np.zeros_like(t.data), 0]
                      for ts in groups.values() for t in ts}

    def step(self, group_lrs: dict[str, float],
             trainable: set[str] | None = None) -> None:
        c = self.cfg
        for name, tensors in self.groups.items():
            if trainable is not None and name not in trainable:
                continue
            lr = group_lrs[name]
            for t in tensors:
                if t.grad is None:
                    continue
                m, v, _ = st = self.state[id(t)]
                st[2] += 1
                k = st[2]
                m *= c.beta1
                m += (1 - c.beta1) * t.grad
                v *= c.beta2
                v += (1 - c.beta2) * t.grad ** 2
                m_hat = m / (1 - c.beta1 ** k)
                v_hat = v / (1 - c.beta2 ** k)
                t.data -= lr * m_hat / (np.sqrt(v_hat) + c.epsilon)

    def zero_grad(self) -> None:
        for tensors in self.groups.values():
            for t in tensors:
                t.zero_grad()


@dataclass
class TrainSample:
    """One preprocessed training example on the model canvas."""

    canvas: np.ndarray          # [1, S, S] float64 in [0, 1]
    gt_boxes: list[Box]         # canvas frame
    image_id: str
    transform: "object" = None  # PadResizeTransform back to original pixels


def prepare_samples(images: list[np.ndarray], doc, target: int = 224) -> list[TrainSample]:
    """Preprocess rasters and map their ROIs onto the model canvas."""
    from .dataset import preprocess
    from .geometry import map_box

    if len(images) != len(doc.images):
        raise ValueError(f"{len(images)} rasters vs {len(doc.images)} records")
    out = []
    for raster, rec in zip(images, doc.images):
        canvas, t = preprocess(raster, target, image_id=rec.id)
        boxes = [map_box(t, b, "forward") for b in rec.gt_boxes()]
        out.append(TrainSample(canvas=canvas, gt_boxes=boxes, image_id=rec.id,
                               transform=t))
    return out


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    train_loss: float
    val_loss: float
    val_avg_iou: float


@dataclass
class TrainConfig:
    focal: FocalConfig = field(default_factory=FocalConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    box_weight: float = 1.0
    val_fraction: float = 0.1

    @property
    def loss(self) -> LossConfig:
        return LossConfig(focal=self.focal, box_weight=self.box_weight)


def _unfrozen_groups(level: str) -> set[str]:
    return {"head": {"head"},
            "head+last": {"head", "late"},
            "all": {"head", "late", "early"}}[level]


def split_train_val(samples: list, val_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle split; at least one sample always stays in training.

    The split generator is the first spawn of the seed sequence, shared
    with `train` so external callers can reconstruct the same split.
    """
    root = np.random.SeedSequence(seed)
    split_rng = np.random.default_rng(root.spawn(1)[0])
    idx = split_rng.permutation(len(samples))
    n_val = min(int(round(len(samples) * val_fraction)), len(samples) - 1)
    return [samples[i] for i in idx[n_val:]], [samples[i] for i in idx[:n_val]]


def _batch_loss(model: DetectorModel, batch: list[tuple[np.ndarray, MatchResult]],
                cfg: LossConfig) -> Tensor:
    canvases = np.stack([c for c, _ in batch])
    logits, offsets = model.forward(canvases)
    terms = []
    for b, (_, match) in enumerate(batch):
        terms.append(detection_loss(_row(logits, b), _row(offsets, b), match, cfg))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(batch))


def _row(t: Tensor, b: int) -> Tensor:
    """View row b of a batched tensor as its own graph node."""
    out = Tensor(t.data[b], parents=(t,))

    def backward(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            full[b] = g
            t._accumulate(full)

    out._backward = backward
    return out


def validation_metrics(model: DetectorModel, samples: list[TrainSample],
                       anchor_set: AnchorSet, cfg: LossConfig,
                       batch_size: int = 16) -> tuple[float, float]:
    """Mean loss and mean per-GT IoU (via the decode path) on a sample set."""
    from .evaluation import predict_on_canvas  # local import to avoid a cycle

    losses = []
    ious: list[float] = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        batch = [(s.canvas, match_anchors(anchor_set, s.gt_boxes)) for s in chunk]
        loss = _batch_loss(model, batch, cfg)
        losses.append(float(loss.data))
        canvases = np.stack([s.canvas for s in chunk])
        logits, offsets = model.forward(canvases)
        for i, s in enumerate(chunk):
            preds = predict_on_canvas(logits.data[i], offsets.data[i], anchor_set,
                                      top_k=max(1, len(s.gt_boxes)))
            ious.extend(_per_gt_ious(preds, s.gt_boxes))
    avg_iou = float(np.mean(ious)) if ious else 0.0
    return float(np.mean(losses)), avg_iou


def _per_gt_ious(pred_boxes: list[tuple], gts: list[Box]) -> list[float]:
    from .evaluation import greedy_iou_assignment

    if not gts:
        return []
    return greedy_iou_assignment([t[0] for t in pred_boxes], gts)


def train(model: DetectorModel, samples: list[TrainSample], anchor_set: AnchorSet,
          cfg: TrainConfig, seed: int = 0,
          ) -> tuple[DetectorModel, list[EpochRecord]]:
    """Run the staged schedule and return the model plus per-epoch history.

    The sample list is split (1 - val_fraction)/val_fraction by a seeded
    shuffle; each stage applies its unfreeze level and a fresh one-cycle
    rate curve.  Deterministic given the seed: shuffles and augmentation
    draws come from generators derived from it.
    """
    if not samples:
        raise ValueError("training requires at least one sample")
    if anchor_set.total != model.config.total_anchors:
        raise ValueError(f"anchor set size {anchor_set.total} does not match "
                         f"model head {model.config.total_anchors}")

    root = np.random.SeedSequence(seed)
    _, shuffle_seed, aug_seed = root.spawn(3)
    shuffle_rng, aug_rng = np.random.default_rng(shuffle_seed), np.random.default_rng(aug_seed)
    tr, val = split_train_val(samples, cfg.val_fraction, seed)

    matches = {s.image_id: match_anchors(anchor_set, s.gt_boxes) for s in samples}
    name_groups = model.group_names()
    groups = {g: [model.params[n] for n in names] for g, names in name_groups.items()}
    divisors = dict(zip(("early", "late", "head"), cfg.schedule.lr_divisors))
    opt = Adam(groups, cfg.optimizer)
    bs = cfg.optimizer.batch_size

    history: list[EpochRecord] = []
    epoch_counter = 0
    for stage_idx, stage in enumerate(cfg.schedule.stages):
        steps_per_epoch = math.ceil(len(tr) / bs)
        total_steps = stage.cycles * steps_per_epoch
        trainable = _unfrozen_groups(stage.unfreeze_level)
        step = 0
        for _ in range(stage.cycles):
            order = shuffle_rng.permutation(len(tr))
            losses = []
            for lo in range(0, len(tr), bs):
                batch = []
                for i in order[lo:lo + bs]:
                    s = tr[i]
                    canvas, boxes = augment(s.canvas, s.gt_boxes, cfg.augment, aug_rng)
                    if boxes == s.gt_boxes:
                        match = matches[s.image_id]
                    else:
                        match = match_anchors(anchor_set, boxes)
                    batch.append((canvas, match))
                opt.zero_grad()
                loss = _batch_loss(model, batch, cfg.loss)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise RuntimeError(
                        f"non-finite loss {loss_val} at stage {stage_idx} step {step}")
                loss.backward()
                lr = lr_at(step, stage.lr_max, total_steps)
                opt.step({g: lr / divisors[g] for g in groups}, trainable)
                losses.append(loss_val)
                step += 1
            if val:
                val_loss, val_iou = validation_metrics(model, val, anchor_set, cfg.loss, bs)
            else:
                val_loss, val_iou = float("nan"), float("nan")
            history.append(EpochRecord(
                epoch=epoch_counter, stage=stage_idx,
                train_loss=float(np.mean(losses)), val_loss=val_loss,
                val_avg_iou=val_iou))
            epoch_counter += 1
    return model, history


def history_to_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "stage", "train_loss", "val_loss", "val_avg_iou"])
        for r in history:
            w.writerow([r.epoch, r.stage, f"{r.train_loss:.9g}",
                        f"{r.val_loss:.9g}", f"{r.val_avg_iou:.9g}"])
