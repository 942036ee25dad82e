"""Command-line entry point.

Every command is a thin composition of module operations; business logic
lives in the library.  Exit codes: 0 success, 1 runtime failure (message
on stderr), 2 usage error (argparse help text).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import anchors as anc
from . import dataset as ds
from . import evaluation as ev
from . import training as tr
from .detector import DetectorConfig, build_detector, load_checkpoint, save_checkpoint
from .overlay import render_overlay
from .phantoms import PhantomConfig, synth_generate
from .server import serve_annotator

CHECKPOINT_NAME = "model.roidet"


def _load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def _save_image(arr: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(arr).save(path)


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _load_samples(annotations_path, images_dir=None, target: int = 224):
    doc = ds.load_annotations(annotations_path)
    root = Path(images_dir) if images_dir else Path(annotations_path).parent
    images = []
    for im in doc.images:
        p = Path(im.file)
        images.append(_load_image(p if p.is_absolute() else root / p))
    return tr.prepare_samples(images, doc, target), doc, images


def _train_config(args) -> tr.TrainConfig:
    raw = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    focal = tr.FocalConfig(**raw.get("focal", {}))
    optim = tr.OptimizerConfig(**raw.get("optimizer", {}))
    sched_raw = raw.get("schedule", {})
    stages = [tr.StageConfig(**st) for st in sched_raw.get("stages", [])] or None
    schedule = tr.ScheduleConfig(**({"stages": stages} if stages else {}))
    if "lr_divisors" in sched_raw:
        schedule.lr_divisors = tuple(sched_raw["lr_divisors"])
    augment = ds.AugmentConfig(**raw.get("augment", {}))
    cfg = tr.TrainConfig(
        focal=focal, optimizer=optim, schedule=schedule, augment=augment,
        box_weight=raw.get("box_weight", 1.0),
        val_fraction=raw.get("val_fraction", 0.1),
    )
    if getattr(args, "epochs", None):
        for st in cfg.schedule.stages:
            st.cycles = args.epochs
    if getattr(args, "batch_size", None):
        cfg.optimizer.batch_size = args.batch_size
    return cfg


def _scale_spec(args) -> anc.ScaleSpec:
    return anc.ScaleSpec(args.scale_start, args.scale_stop, args.scale_step)


def _build_anchor_set(grids, spec, canvas=224):
    scales = anc.expand_scales(spec)
    return anc.build_grid(anc.AnchorLayerSpec(grids=tuple(grids), canvas_side=canvas),
                          scales), scales


def cmd_stats(args) -> int:
    doc = ds.load_annotations(args.annotations)
    stats = ds.compute_stats(doc)
    text = ds.stats_text_table(stats)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(stats.to_json_obj(), out / "stats.json")
        (out / "stats.txt").write_text(text, encoding="utf-8")
    else:
        json.dump(stats.to_json_obj(), sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def cmd_design_anchors(args) -> int:
    doc = ds.load_annotations(args.annotations)
    stats = ds.compute_stats(doc)
    spec = anc.recommend_scales(stats, g=args.grid, margin=args.margin,
                                step_count=args.steps)
    report = anc.design_report(spec, g=args.grid)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(report, out / "anchors.json")
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def cmd_synth(args) -> int:
    cfg = PhantomConfig(
        canvas_long_side=args.long_side,
        roi_ratio_range=(args.ratio_lo, args.ratio_hi),
        noise_level=args.noise,
        seed=args.seed,
    )
    images, doc = synth_generate(cfg, args.count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for img, rec in zip(images, doc.images):
        _save_image(img, out / rec.file)
    doc.save(out / "annotations.json")
    print(f"wrote {len(images)} phantoms to {out}")
    return 0


def cmd_train(args) -> int:
    samples, _, _ = _load_samples(args.annotations, args.images_dir)
    spec = _scale_spec(args)
    anchor_set, scales = _build_anchor_set(args.grid, spec)
    cfg = _train_config(args)
    det_cfg = DetectorConfig(head_grids=tuple(args.grid), anchors_per_cell=len(scales))
    model = build_detector(det_cfg, np.random.default_rng(args.seed))
    model, history = tr.train(model, samples, anchor_set, cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / CHECKPOINT_NAME, extra={
        "grids": list(args.grid),
        "scale_spec": {"start": spec.start, "stop": spec.stop, "step": spec.step},
    })
    tr.history_to_csv(history, out / "history.csv")
    last = history[-1]
    print(f"trained {len(history)} epochs; final val loss {last.val_loss:.4f}, "
          f"val avg IoU {last.val_avg_iou:.4f}")
    return 0


def _restore(checkpoint_path):
    model, extra = load_checkpoint(checkpoint_path)
    spec = anc.ScaleSpec(**extra["scale_spec"])
    anchor_set, _ = _build_anchor_set(extra["grids"], spec,
                                      canvas=model.config.canvas_side)
    return model, anchor_set


def cmd_eval(args) -> int:
    samples, _, _ = _load_samples(args.annotations, args.images_dir)
    model, anchor_set = _restore(args.checkpoint)
    rep = ev.evaluate_samples(model, samples, anchor_set, top_k=args.top_k)
    text = ev.REPORT_HEADER + "\n" + rep.table_row("eval") + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(rep.to_json_obj(), out / "metrics.json")
        (out / "metrics.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_infer(args) -> int:
    model, anchor_set = _restore(args.checkpoint)
    raster = _load_image(args.image)
    canvas, t = ds.preprocess(raster, model.config.canvas_side)
    preds = ev.predict(model, canvas, anchor_set, t, top_k=args.top_k)
    obj = {
        "image": str(args.image),
        "predictions": [
            {"cx": p.box.cx, "cy": p.box.cy, "w": p.box.w, "h": p.box.h,
             "confidence": p.confidence, "anchor_index": p.anchor_index}
            for p in preds
        ],
    }
    if args.out:
        _write_json(obj, args.out)
    else:
        json.dump(obj, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def cmd_grid(args) -> int:
    rows_raw = json.loads(Path(args.grid_config).read_text(encoding="utf-8"))
    rows = [ev.GridRow(name=r["name"], grids=tuple(r["grids"]),
                       scale_spec=anc.ScaleSpec(r["start"], r["stop"], r["step"]))
            for r in rows_raw]
    train_samples, _, _ = _load_samples(args.annotations, args.images_dir)
    test_samples, _, _ = _load_samples(args.test_annotations, args.test_images_dir)
    cfg = _train_config(args)
    results = ev.run_experiment_grid(rows, train_samples, test_samples, cfg,
                                     seed=args.seed)
    table = ev.grid_text_table(results)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.json").write_text(ev.grid_json(results) + "\n", encoding="utf-8")
        (out / "grid.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_render(args) -> int:
    samples, doc, images = _load_samples(args.annotations, args.images_dir)
    model, anchor_set = _restore(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wanted = set(args.ids) if args.ids else None
    for sample, rec, raster in zip(samples, doc.images, images):
        if wanted and rec.id not in wanted:
            continue
        preds = ev.predict(model, sample.canvas, anchor_set, sample.transform,
                           top_k=args.top_k)
        render_overlay(raster, rec.gt_boxes(), preds,
                       out / f"{rec.id}.{args.format}")
    print(f"overlays written to {out}")
    return 0


def cmd_serve_annotator(args) -> int:
    serve_annotator(args.annotations, images_dir=args.images_dir,
                    ui_dir=args.ui_dir, port=args.port)
    return 0


def _add_scale_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", type=int, nargs="+", default=[7],
                   help="head grid sizes, e.g. --grid 7 or --grid 4 2 1")
    p.add_argument("--scale-start", type=float, default=0.7)
    p.add_argument("--scale-stop", type=float, default=2.2)
    p.add_argument("--scale-step", type=float, default=0.3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roidet",
        description="Single-shot hip ROI detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="dataset statistics from an annotation file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("design-anchors", help="data-driven anchor scale selection")
    p.add_argument("--annotations", required=True)
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--margin", type=float, default=0.02)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_design_anchors)

    p = sub.add_parser("synth", help="generate synthetic phantoms")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--long-side", type=int, default=320)
    p.add_argument("--ratio-lo", type=float, default=0.10)
    p.add_argument("--ratio-hi", type=float, default=0.30)
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images-dir")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="override cycles of every stage")
    p.add_argument("--batch-size", type=int)
    _add_scale_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images-dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="detect ROIs in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("grid", help="run an experiment grid")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images-dir")
    p.add_argument("--test-annotations", required=True)
    p.add_argument("--test-images-dir")
    p.add_argument("--grid-config", required=True,
                   help="JSON list of {name, grids, start, stop, step}")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("render", help="write detection overlays")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images-dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", nargs="*")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("serve-annotator", help="serve the annotation endpoint")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images-dir")
    p.add_argument("--ui-dir", help="static annotator UI to serve at /")
    p.add_argument("--port", type=int, default=8731)
    p.set_defaults(fn=cmd_serve_annotator)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"roidet: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
