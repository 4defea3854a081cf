"""maskpipe command line: dataset tooling, evaluation, annotation, benchmarks.

Exit codes: 0 success, 1 validation error, 2 I/O or file-format error.
All randomness flows through --seed; reruns produce byte-identical outputs.
Set MASKPIPE_LOG to change the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import augment, dataset_voc, fewshot, metrics, train_config, video_pipeline
from .detectors import build_detector
from .errors import FormatError, MaskPipeError, ValidationError
from .geometry import BBox, Detection
from .loss import LossWeights, gradient_check
from .metrics import REPORT_STYLES, ReportStyle

log = logging.getLogger("maskpipe")

REPORT_STYLES.setdefault(
    "prf",
    ReportStyle(
        headers=("Class", "Precision", "Recall", "F1"),
        formats=(None, ".4f", ".4f", ".4f"),
        csv_headers=("class", "precision", "recall", "f1"),
    ),
)


def _read_voc_dir(voc_dir: Path) -> list[dataset_voc.VocAnnotation]:
    files = sorted(Path(voc_dir).glob("*.xml"))
    if not files:
        raise FormatError(f"no VOC XML files in {voc_dir}")
    return [dataset_voc.parse_voc(p.read_text()) for p in files]


def cmd_dataset_build_slices(args) -> int:
    annotations = _read_voc_dir(args.voc_dir)
    slices, hist = dataset_voc.build_slices(annotations, args.images_dir)
    dataset_voc.write_slice_dataset(args.out, slices, image_format=args.format)
    print(f"wrote {len(slices)} slices to {args.out}")
    print("histogram " + " / ".join(str(c) for c in hist))
    return 0


def _histogram(args) -> list[int]:
    if args.dataset:
        samples = dataset_voc.read_slice_dataset(args.dataset)
        hist = [0] * len(dataset_voc.MASK_CATALOG)
        for s in samples:
            hist[s.class_id] += 1
        return hist
    annotations = _read_voc_dir(args.voc_dir)
    hist = [0] * len(dataset_voc.MASK_CATALOG)
    for ann in annotations:
        for obj in ann.objects:
            hist[dataset_voc.MASK_CATALOG.id_of(obj.name)] += 1
    return hist


def cmd_dataset_stats(args) -> int:
    hist = _histogram(args)
    print(" / ".join(str(c) for c in hist))
    for name, count in zip(dataset_voc.MASK_CATALOG.display_names, hist):
        print(f"{name}: {count}")
    positive = [c for c in hist if c > 0]
    if positive:
        print(f"imbalance ratio {max(positive) / min(positive):.2f}")
    return 0


def cmd_dataset_undersample(args) -> int:
    samples = dataset_voc.read_slice_dataset(args.dataset)
    kept = dataset_voc.undersample(samples, cap=args.cap, seed=args.seed)
    dataset_voc.write_slice_dataset(args.out, kept, image_format=args.format)
    print(f"kept {len(kept)} of {len(samples)} slices (cap {args.cap}, seed {args.seed})")
    return 0


def cmd_dataset_augment(args) -> int:
    samples = dataset_voc.read_slice_dataset(args.dataset)
    if args.plan:
        plan = augment.plan_from_config(Path(args.plan).read_text())
    else:
        plan = augment.AugmentationPlan(seed=args.seed)
    augmented = [
        dataset_voc.SliceSample(
            s.image_id, s.crop_box, s.class_id, augment.apply_plan(s.pixels, plan, i)[0]
        )
        for i, s in enumerate(samples)
    ]
    dataset_voc.write_slice_dataset(args.out, augmented, image_format=args.format)
    print(f"augmented {len(augmented)} slices (seed {plan.seed})")
    return 0


def cmd_dataset_split(args) -> int:
    files = sorted(p.name for p in Path(args.voc_dir).glob("*.xml"))
    if not files:
        raise FormatError(f"no VOC XML files in {args.voc_dir}")
    train, val = dataset_voc.split_4to1(files, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text("\n".join(train) + "\n")
    (out / "val.txt").write_text("\n".join(val) + "\n")
    print(f"{len(train)} train / {len(val)} validation")
    return 0


def _load_predictions(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            dets = [
                Detection(BBox(d["x1"], d["y1"], d["x2"], d["y2"]), d["conf"], d["class_id"])
                for d in rec["detections"]
            ]
            out[rec["image"]] = dets
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad prediction record ({exc})") from exc
    return out


def cmd_eval_detections(args) -> int:
    predictions = _load_predictions(args.pred)
    annotations = _read_voc_dir(args.truth_dir)
    catalog = dataset_voc.MASK_CATALOG
    totals = {c: [0, 0, 0] for c in range(len(catalog))}
    for ann in annotations:
        truth = [
            (
                BBox(
                    (obj.xmin - 1) / ann.width, (obj.ymin - 1) / ann.height,
                    obj.xmax / ann.width, obj.ymax / ann.height,
                ),
                catalog.id_of(obj.name),
            )
            for obj in ann.objects
        ]
        counts = metrics.match_detections(
            predictions.get(ann.filename, []), truth, args.iou_thresh
        )
        for c, cc in counts.items():
            totals[c][0] += cc.tp
            totals[c][1] += cc.fp
            totals[c][2] += cc.fn
    counts = {c: metrics.ClassCounts(*v) for c, v in totals.items()}
    report = metrics.precision_recall_f1(counts)
    rows = [
        (catalog.display_names[c], r.precision, r.recall, r.f1)
        for c, r in report.per_class.items()
    ]
    rows.append(("macro", report.macro.precision, report.macro.recall, report.macro.f1))
    rows.append(("micro", report.micro.precision, report.micro.recall, report.micro.f1))
    text = metrics.render_report(rows, "prf")
    print(text, end="")
    if args.out:
        Path(args.out).write_text(metrics.render_csv(rows, "prf"))
    return 0


def _episode_inputs(args):
    """Support pool and queries from MEMB files or a slice dataset directory."""
    if args.emb_train and args.emb_val:
        ids, vecs = fewshot.read_embeddings(args.emb_train)
        pool: dict[int, list[np.ndarray]] = {}
        for class_id, vec in zip(ids.tolist(), vecs):
            pool.setdefault(class_id, []).append(vec)
        qids, qvecs = fewshot.read_embeddings(args.emb_val)
        queries = [(vec, class_id) for class_id, vec in zip(qids.tolist(), qvecs)]
        return pool, queries, np.asarray
    if args.dataset:
        samples = dataset_voc.read_slice_dataset(args.dataset)
        image_ids = sorted({s.image_id for s in samples})
        train_ids, val_ids = dataset_voc.split_4to1(image_ids, seed=args.seed)
        train_ids = set(train_ids)
        pool = {}
        queries = []
        embedder = fewshot.BaselineEmbedder()
        for s in samples:
            if s.image_id in train_ids:
                pool.setdefault(s.class_id, []).append(s.pixels)
            else:
                queries.append((s.pixels, s.class_id))
        return pool, queries, embedder
    raise ValidationError("provide either --emb-train and --emb-val, or --dataset")


def _episode_config(args, support_size) -> fewshot.EpisodeConfig:
    size = support_size if support_size == "full" else int(support_size)
    return fewshot.EpisodeConfig(
        support_size=size,
        seed=args.seed,
        epsilon=args.epsilon,
        regularizer=args.regularizer,
        metric=args.metric,
        undersample_cap=args.undersample_cap,
    )


def _print_episode(report: fewshot.EpisodeReport) -> None:
    cfg = report.config
    print(
        f"support={cfg.support_size} seed={cfg.seed} epsilon={cfg.epsilon} "
        f"metric={cfg.metric} regularizer={cfg.regularizer}"
    )
    total = sum(report.query_counts.values())
    print(f"accuracy {report.accuracy:.4f} over {total} queries")
    names = dataset_voc.MASK_CATALOG.display_names
    for class_id, acc in sorted(report.per_class_accuracy.items()):
        name = names[class_id] if class_id < len(names) else f"class {class_id}"
        print(f"  {name}: {acc:.4f} ({report.query_counts[class_id]})")


def cmd_eval_episodic(args) -> int:
    pool, queries, embedder = _episode_inputs(args)
    cfg = _episode_config(args, args.support_size)
    report = fewshot.run_episode(
        pool, queries, embedder, cfg, dataset_voc.MASK_CATALOG.display_names
    )
    _print_episode(report)
    if args.out:
        Path(args.out).write_text(report.confusion.to_csv())
    return 0


def cmd_eval_sweep(args) -> int:
    pool, queries, embedder = _episode_inputs(args)
    sizes = [s if s == "full" else int(s) for s in args.sizes.split(",") if s]
    cfg = _episode_config(args, "full")
    rows = fewshot.sweep_support_sizes(
        pool, queries, embedder, sizes, cfg, dataset_voc.MASK_CATALOG.display_names
    )
    table = [(f"support-{label}", report.accuracy) for label, report in rows]
    text = metrics.render_report(table, "episodic")
    print(text, end="")
    if args.out:
        Path(args.out).write_text(metrics.render_csv(table, "episodic"))
    return 0


def cmd_annotate(args) -> int:
    stream = video_pipeline.open_stream(args.inp)
    model = build_detector(args.model, args.conf_thresh, args.iou_thresh)
    result = video_pipeline.run_pipeline(stream, model, skip=args.skip, tracker=args.track)
    video_pipeline.write_stream(args.out, result.stream)
    sidecar_path = args.sidecar or (str(args.out) + ".sidecar.jsonl")
    Path(sidecar_path).write_text(
        video_pipeline.sidecar_to_jsonl(result.sidecar, model.labels)
    )
    print(
        f"{result.model_calls} model calls over {stream.frame_count} frames (skip={args.skip})"
    )
    print(f"wrote {args.out} and {sidecar_path}")
    return 0


def cmd_bench(args) -> int:
    stream = video_pipeline.open_stream(args.inp)
    model = build_detector(args.model, args.conf_thresh, args.iou_thresh)
    report = video_pipeline.pipeline_bench(stream, model, skip=args.skip, tracker=args.track)
    print(report.render(), end="")
    return 0


def cmd_loss_check(args) -> int:
    if args.cfg:
        cfg = train_config.parse_config(Path(args.cfg).read_text())
        weights = cfg.loss_weights()
    else:
        weights = LossWeights()
    print(f"alpha={weights.alpha} beta={weights.beta}")
    worst = gradient_check(grids=args.grids, seed=args.seed)
    print(f"max relative gradient error: {worst:.3e}")
    if worst >= 1e-4:
        print("FAIL: analytic gradient disagrees with finite differences")
        return 1
    print("OK: analytic gradient matches finite differences")
    return 0


def _synth_frame(i: int, width: int, height: int) -> np.ndarray:
    ys = np.arange(height, dtype=np.uint16)[:, None]
    xs = np.arange(width, dtype=np.uint16)[None, :]
    frame = np.empty((height, width, 3), dtype=np.uint8)
    frame[..., 0] = ((xs + 3 * i) % 256).astype(np.uint8)
    frame[..., 1] = ((ys + 2 * i) % 256).astype(np.uint8)
    frame[..., 2] = ((xs // 2 + ys // 2 + i) % 256).astype(np.uint8)
    return frame


def cmd_video_synth(args) -> int:
    frames = [_synth_frame(i, args.width, args.height) for i in range(args.frames)]
    num, _, den = args.fps.partition("/")
    stream = video_pipeline.MemoryFrameStream(frames, (int(num), int(den or 1)))
    video_pipeline.write_stream(args.out, stream)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def cmd_video_export(args) -> int:
    stream = video_pipeline.open_stream(args.inp)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(stream):
        dataset_voc.write_ppm(out / f"{i:06d}.ppm", frame)
    print(f"exported {stream.frame_count} frames to {out}")
    return 0


def cmd_video_import(args) -> int:
    files = sorted(Path(args.frames_dir).glob("*.ppm"))
    if not files:
        raise FormatError(f"no .ppm frames in {args.frames_dir}")
    frames = [dataset_voc.read_ppm(p) for p in files]
    num, _, den = args.fps.partition("/")
    stream = video_pipeline.MemoryFrameStream(frames, (int(num), int(den or 1)))
    video_pipeline.write_stream(args.out, stream)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskpipe",
        description="Mask-detection toolkit: datasets, evaluation, video annotation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="VOC and slice-dataset tooling")
    dsub = dataset.add_subparsers(dest="subcommand", required=True)

    p = dsub.add_parser("build-slices", help="cut per-object crops from VOC annotations")
    p.add_argument("--voc-dir", required=True, help="directory of VOC XML files")
    p.add_argument("--images-dir", required=True, help="directory of source images")
    p.add_argument("--out", required=True, help="output slice-dataset directory")
    p.add_argument("--format", choices=("ppm", "png"), default="ppm", help="crop file format")
    p.set_defaults(func=cmd_dataset_build_slices)

    p = dsub.add_parser("stats", help="class histogram and imbalance ratio")
    p.add_argument("--voc-dir", help="directory of VOC XML files")
    p.add_argument("--dataset", help="slice-dataset directory (alternative input)")
    p.set_defaults(func=cmd_dataset_stats)

    p = dsub.add_parser("undersample", help="cap per-class slice counts")
    p.add_argument("--dataset", required=True, help="slice-dataset directory")
    p.add_argument("--cap", type=int, required=True, help="per-class sample cap")
    p.add_argument("--seed", type=int, default=0, help="selection seed")
    p.add_argument("--out", required=True, help="output slice-dataset directory")
    p.add_argument("--format", choices=("ppm", "png"), default="ppm", help="crop file format")
    p.set_defaults(func=cmd_dataset_undersample)

    p = dsub.add_parser("augment", help="apply the augmentation plan to every slice")
    p.add_argument("--dataset", required=True, help="slice-dataset directory")
    p.add_argument("--plan", help="augmentation plan config (key=value); defaults used otherwise")
    p.add_argument("--seed", type=int, default=0, help="plan seed when no --plan is given")
    p.add_argument("--out", required=True, help="output slice-dataset directory")
    p.add_argument("--format", choices=("ppm", "png"), default="ppm", help="crop file format")
    p.set_defaults(func=cmd_dataset_augment)

    p = dsub.add_parser("split", help="seeded 4:1 train/validation split")
    p.add_argument("--voc-dir", required=True, help="directory of VOC XML files")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.add_argument("--out", required=True, help="directory for train.txt / val.txt")
    p.set_defaults(func=cmd_dataset_split)

    evaluate = sub.add_parser("eval", help="detection and episodic evaluation")
    esub = evaluate.add_subparsers(dest="subcommand", required=True)

    p = esub.add_parser("detections", help="match predictions against VOC truth")
    p.add_argument("--pred", required=True, help="JSON-lines prediction file")
    p.add_argument("--truth-dir", required=True, help="directory of VOC XML files")
    p.add_argument("--iou-thresh", type=float, default=0.5, help="match threshold")
    p.add_argument("--out", help="write the report as CSV here")
    p.set_defaults(func=cmd_eval_detections)

    def episodic_flags(p):
        p.add_argument("--emb-train", help="support embeddings (.memb)")
        p.add_argument("--emb-val", help="query embeddings (.memb)")
        p.add_argument("--dataset", help="slice-dataset directory (baseline embedder)")
        p.add_argument("--seed", type=int, default=0, help="sampling seed")
        p.add_argument("--epsilon", type=float, default=1e-3, help="covariance ridge")
        p.add_argument(
            "--regularizer", choices=("blend", "ridge"), default="blend",
            help="covariance estimator",
        )
        p.add_argument(
            "--metric", choices=("mahalanobis", "euclidean"), default="mahalanobis",
            help="classification metric",
        )
        p.add_argument(
            "--undersample-cap", type=int, default=None,
            help="cap the support pool before sampling",
        )
        p.add_argument("--out", help="write CSV output here")

    p = esub.add_parser("episodic", help="one support/query episode")
    episodic_flags(p)
    p.add_argument("--support-size", default="full", help='supports per class or "full"')
    p.set_defaults(func=cmd_eval_episodic)

    p = esub.add_parser("sweep", help="episodes over several support sizes")
    episodic_flags(p)
    p.add_argument("--sizes", default="50,100,500,full", help="comma list of sizes")
    p.set_defaults(func=cmd_eval_sweep)

    p = sub.add_parser("annotate", help="run the detection pipeline over a video")
    p.add_argument("--in", dest="inp", required=True, help="input .mdvs stream")
    p.add_argument("--model", required=True, help="synthetic[:MODE] or playback:DIR")
    p.add_argument("--skip", type=int, default=1, help="invoke the model every K frames")
    p.add_argument("--track", action="store_true", help="extrapolate between model calls")
    p.add_argument("--conf-thresh", type=float, default=0.25, help="decode confidence cut")
    p.add_argument("--iou-thresh", type=float, default=0.45, help="decode NMS threshold")
    p.add_argument("--out", required=True, help="output .mdvs stream")
    p.add_argument("--sidecar", help="sidecar JSONL path (default <out>.sidecar.jsonl)")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("bench", help="pipeline throughput with model/overhead split")
    p.add_argument("--in", dest="inp", required=True, help="input .mdvs stream")
    p.add_argument("--model", required=True, help="synthetic[:MODE] or playback:DIR")
    p.add_argument("--skip", type=int, default=1, help="invoke the model every K frames")
    p.add_argument("--track", action="store_true", help="extrapolate between model calls")
    p.add_argument("--conf-thresh", type=float, default=0.25, help="decode confidence cut")
    p.add_argument("--iou-thresh", type=float, default=0.45, help="decode NMS threshold")
    p.set_defaults(func=cmd_bench)

    loss_cmd = sub.add_parser("loss", help="loss verification")
    lsub = loss_cmd.add_subparsers(dest="subcommand", required=True)
    p = lsub.add_parser("check", help="analytic gradient vs finite differences")
    p.add_argument("--cfg", help="training config supplying alpha/beta")
    p.add_argument("--grids", type=int, default=100, help="random grids to verify")
    p.add_argument("--seed", type=int, default=0, help="grid generation seed")
    p.set_defaults(func=cmd_loss_check)

    video = sub.add_parser("video", help="container utilities")
    vsub = video.add_subparsers(dest="subcommand", required=True)
    p = vsub.add_parser("synth", help="deterministic test-pattern stream")
    p.add_argument("--out", required=True, help="output .mdvs path")
    p.add_argument("--frames", type=int, default=30, help="frame count")
    p.add_argument("--width", type=int, default=320, help="frame width")
    p.add_argument("--height", type=int, default=240, help="frame height")
    p.add_argument("--fps", default="25/1", help="frame rate as NUM[/DEN]")
    p.set_defaults(func=cmd_video_synth)

    p = vsub.add_parser("export", help="dump a stream as a PPM sequence")
    p.add_argument("--in", dest="inp", required=True, help="input .mdvs stream")
    p.add_argument("--out-dir", required=True, help="directory for frames")
    p.set_defaults(func=cmd_video_export)

    p = vsub.add_parser("import", help="build a stream from a PPM sequence")
    p.add_argument("--frames-dir", required=True, help="directory of .ppm frames")
    p.add_argument("--fps", default="25/1", help="frame rate as NUM[/DEN]")
    p.add_argument("--out", required=True, help="output .mdvs path")
    p.set_defaults(func=cmd_video_import)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MASKPIPE_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MaskPipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
