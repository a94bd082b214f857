"""Command-line front end for reproducible experiments.

Subcommands: ``simgen`` renders a synthetic sequence with ground truth,
``estimate`` solves per-object poses from the stored correspondence
maps, ``evaluate`` scores predictions with occlusion-aware AP,
``adapt`` runs pseudo-label rounds, and ``losses`` reports the training
loss breakdown of stored predictions.  Every command writes an
effective-config snapshot next to its outputs; identical inputs and
seeds reproduce outputs byte for byte.  Exit codes: 0 success, 2 bad
input or configuration, 3 runtime failure.
"""

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import (
    AdaptationConfig,
    FilterThresholds,
    RenderEstimator,
    adaptation_loop,
    load_detections,
    load_estimates,
    write_pseudo_labels,
)
from .camera import BBox, ego_to_allo, encode_translation, matrix_to_rot6d
from .errors import ArtiposeError, ConfigError, InputError
from .formats import canonical_json
from .losses import (
    DEFAULT_NUM_POINTS,
    GroundTruth,
    LossWeights,
    PosePrediction,
    loss_total,
)
from .meshes import (
    ArticulationState,
    articulate,
    load_model_manifest,
    normalize_vertices,
    sample_surface_points,
    save_model_manifest,
)
from .metrics import (
    GTBox,
    PredictionRecord,
    detection_ap,
    load_annotation_bundle,
    pose_ap_report,
    visibility_fraction,
)
from .pnp import CorrSet, pairs_from_map, pnp_ransac
from .raster import rasterize_crop, render_amodal, render_correspondence
from .simulate import (
    CROP_OUT_SIZE,
    DEFAULT_CAMERA,
    NoiseConfig,
    OccluderConfig,
    SceneConfig,
    export_gt,
    generate_sequence,
    load_correspondence,
    load_dataset,
    model_corr_bbox,
    needle_holder_model,
    tweezers_model,
)
from .tracking import Detection, TrackerParams


def _read_config(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


def _write_snapshot(path, command, effective):
    body = canonical_json(effective)
    payload = {
        "command": command,
        "version": __version__,
        "config_sha256": hashlib.sha256(body.encode()).hexdigest(),
        "effective": effective,
    }
    Path(path).write_text(canonical_json(payload))
    return payload


def _require_file(path, kind):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{kind} not found: {path}")
    return path


def _open_dataset(dataset_dir):
    return load_dataset(_require_file(Path(dataset_dir) / "scene_gt.json", "dataset"))


def _dataset_models(ds):
    if not ds.model_paths:
        raise InputError("dataset lists no model manifests")
    models = [load_model_manifest(_require_file(p, "model manifest")) for p in ds.model_paths]
    return models, {m.class_id: m for m in models}


def _solver_seed(seed, frame_id, class_id):
    return seed * 1000003 + frame_id * 1009 + class_id


# ---------------------------------------------------------------------------
# simgen


def cmd_simgen(args):
    cfg = _read_config(args.config)
    frames_n = args.frames if args.frames is not None else int(cfg.get("frames", 200))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    occ_cfg = cfg.get("occluders", {})
    occ_enabled = bool(occ_cfg.get("enabled", True)) and not args.no_occluders
    occluder = OccluderConfig(
        enabled=occ_enabled,
        count_range=tuple(occ_cfg.get("count_range", (1, 2))),
        size_range=tuple(occ_cfg.get("size_range", (0.015, 0.04))),
    )
    depth_range = tuple(cfg.get("depth_range", (0.75, 1.05)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    models = (needle_holder_model(), tweezers_model())
    names = ("needle_holder", "tweezers")
    rel_paths = []
    for model, name in zip(models, names):
        manifest = save_model_manifest(model, out / "models", name)
        rel_paths.append(str(manifest.relative_to(out)))

    scene = SceneConfig(
        models=models,
        camera=DEFAULT_CAMERA,
        depth_range=depth_range,
        occluder=occluder,
        seed=seed,
    )
    rendered = generate_sequence(scene, frames_n)
    export_gt(rendered, out, scene.camera, rel_paths)
    _write_snapshot(
        out / "simgen_config.json",
        "simgen",
        {
            "frames": frames_n,
            "seed": seed,
            "depth_range": list(depth_range),
            "occluders": {
                "enabled": occluder.enabled,
                "count_range": list(occluder.count_range),
                "size_range": list(occluder.size_range),
            },
            "camera": {
                "f": scene.camera.f,
                "px": scene.camera.px,
                "py": scene.camera.py,
                "width": scene.camera.width,
                "height": scene.camera.height,
            },
            "models": rel_paths,
        },
    )
    print(f"wrote {frames_n} frames to {out}")
    return 0


# ---------------------------------------------------------------------------
# estimate


def _estimate_frame(frame, ds, models, boxes, sigma, conf_model, seed):
    records = []
    skipped = 0
    for obj in frame.objects:
        cmap = load_correspondence(obj.corr_path, obj.crop)
        try:
            pairs = pairs_from_map(cmap, boxes[obj.model_index])
            if sigma > 0.0:
                rng = np.random.default_rng([seed, frame.frame_id, obj.class_id])
                pairs = CorrSet(
                    pairs.pts3d,
                    pairs.pts2d + sigma * rng.standard_normal(pairs.pts2d.shape),
                )
            res = pnp_ransac(
                pairs,
                ds.camera,
                seed=_solver_seed(seed, frame.frame_id, obj.class_id),
            )
        except InputError:
            raise
        except ArtiposeError:
            skipped += 1
            continue
        confidence = 1.0 if conf_model == "constant" else res.inlier_ratio
        records.append(
            {
                "frame_id": frame.frame_id,
                "class": obj.class_id,
                "confidence": float(confidence),
                "R": [float(v) for v in res.pose.R.reshape(9)],
                "t_mm": [float(v * 1000.0) for v in res.pose.t],
                "articulation": float(obj.articulation),
                "inliers": res.inlier_count,
                "outliers": res.outlier_count,
                "reproj_err": float(res.mean_reproj_err),
                "converged": bool(res.converged),
            }
        )
    return records, skipped


def cmd_estimate(args):
    ds = _open_dataset(args.dataset)
    models, _ = _dataset_models(ds)
    boxes = [model_corr_bbox(m) for m in models]
    noise = NoiseConfig(corr_px_sigma=args.noise_sigma, detector_conf_model=args.conf_model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def work(frame):
        return _estimate_frame(
            frame, ds, models, boxes, noise.corr_px_sigma, noise.detector_conf_model, args.seed
        )

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(work, ds.frames))
    else:
        results = [work(frame) for frame in ds.frames]

    skipped = sum(s for _, s in results)
    lines = [json.dumps(rec, sort_keys=True) for recs, _ in results for rec in recs]
    out.write_text("\n".join(lines) + ("\n" if lines else ""))
    _write_snapshot(
        out.with_name(out.stem + "_config.json"),
        "estimate",
        {
            "dataset": str(Path(args.dataset)),
            "noise_sigma": args.noise_sigma,
            "conf_model": args.conf_model,
            "seed": args.seed,
            "jobs": args.jobs,
        },
    )
    print(f"wrote {len(lines)} estimates to {out} ({skipped} skipped)")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _prediction_rasters(estimates, models_by_class, camera):
    """Render each estimate to a full-image mask; unrenderable ones drop."""
    mask_preds = []
    box_preds = []
    for (frame_id, class_id), est in sorted(estimates.items()):
        if class_id not in models_by_class:
            raise InputError(f"prediction for unknown class {class_id}")
        mesh = articulate(models_by_class[class_id], ArticulationState(est.articulation))
        try:
            mask = render_amodal(mesh, est.pose, camera)
        except InputError:
            raise
        except ArtiposeError:
            continue
        mask_preds.append(
            PredictionRecord(
                frame_id=frame_id,
                class_id=class_id,
                confidence=est.class_confidence,
                mask=mask,
            )
        )
        box_preds.append(
            PredictionRecord(
                frame_id=frame_id,
                class_id=class_id,
                confidence=est.class_confidence,
                bbox=mask.bbox(),
            )
        )
    return mask_preds, box_preds


def _gt_boxes_from_annotations(annotations):
    boxes = []
    for ann in annotations:
        for class_id, amodal in ann.amodal_masks.items():
            box = amodal.bbox()
            if box is None:
                continue
            vis = ann.visible_masks.get(class_id)
            fraction = visibility_fraction(vis, amodal) if vis is not None else 1.0
            boxes.append(
                GTBox(frame_id=ann.frame_id, class_id=class_id, bbox=box, visibility=fraction)
            )
    return boxes


def _ap_payload(report):
    return {
        "per_class": {str(cls): ap for cls, ap in sorted(report.per_class_ap.items())},
        "mean": report.mean_ap,
    }


def _format_report_txt(payload):
    lines = [
        f"artipose evaluation (version {payload['version']})",
        f"config sha256: {payload['config_sha256']}",
        "",
        f"pose AP (mean over IoU {payload['iou_thresholds'][0]:.2f}..{payload['iou_thresholds'][-1]:.2f}):",
    ]
    for cls, ap in payload["pose_ap"]["per_class"].items():
        lines.append(f"  class {cls}: {ap:.4f}")
    lines.append(f"  mean: {payload['pose_ap']['mean']:.4f}")
    lines.append("detection AP:")
    for cls, ap in payload["detection_ap"]["per_class"].items():
        lines.append(f"  class {cls}: {ap:.4f}")
    lines.append(f"  mean: {payload['detection_ap']['mean']:.4f}")
    lines.append("")
    lines.append(
        f"{payload['n_predictions']} predictions over {payload['n_frames']} frames"
    )
    return "\n".join(lines) + "\n"


def cmd_evaluate(args):
    ds = _open_dataset(args.dataset)
    _, models_by_class = _dataset_models(ds)
    annotations = load_annotation_bundle(
        _require_file(Path(args.dataset) / "annotations.json", "annotations")
    )
    estimates = load_estimates(_require_file(args.predictions, "predictions file"))
    mask_preds, box_preds = _prediction_rasters(estimates, models_by_class, ds.camera)
    pose_report = pose_ap_report(mask_preds, annotations)
    det_report = detection_ap(box_preds, _gt_boxes_from_annotations(annotations))

    effective = {
        "dataset": str(Path(args.dataset)),
        "predictions": str(Path(args.predictions)),
    }
    body = canonical_json(effective)
    payload = {
        "version": __version__,
        "config_sha256": hashlib.sha256(body.encode()).hexdigest(),
        "iou_thresholds": list(pose_report.thresholds),
        "pose_ap": _ap_payload(pose_report),
        "detection_ap": _ap_payload(det_report),
        "n_predictions": len(mask_preds),
        "n_frames": len(annotations),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(canonical_json(payload))
    out.with_suffix(".txt").write_text(_format_report_txt(payload))
    _write_snapshot(out.with_name(out.stem + "_config.json"), "evaluate", effective)
    print(
        f"pose mean AP {pose_report.mean_ap:.4f}, "
        f"detection mean AP {det_report.mean_ap:.4f} -> {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# adapt


def cmd_adapt(args):
    ds = _open_dataset(args.dataset)
    _, models_by_class = _dataset_models(ds)
    gt_boxes = {
        (frame.frame_id, obj.class_id): obj.bbox_amodal
        for frame in ds.frames
        for obj in frame.objects
        if obj.bbox_amodal is not None
    }
    if args.detections is not None:
        detections = load_detections(_require_file(args.detections, "detections file"))
    else:
        rng = np.random.default_rng([args.seed, 977])
        detections = []
        for frame in ds.frames:
            for obj in frame.objects:
                box = obj.bbox_amodal
                if box is None:
                    continue
                detections.append(
                    Detection(
                        frame_id=frame.frame_id,
                        class_id=obj.class_id,
                        confidence=1.0,
                        bbox=BBox(
                            cx=box.cx + rng.normal(0.0, args.box_jitter * box.w),
                            cy=box.cy + rng.normal(0.0, args.box_jitter * box.h),
                            w=max(box.w * (1.0 + rng.normal(0.0, args.box_jitter)), 4.0),
                            h=max(box.h * (1.0 + rng.normal(0.0, args.box_jitter)), 4.0),
                        ),
                    )
                )
    estimator = RenderEstimator.from_dataset(
        ds,
        models_by_class,
        noise=NoiseConfig(corr_px_sigma=args.noise_sigma),
        seed=args.seed,
    )
    cfg = _read_config(args.config)
    thr_cfg = cfg.get("thresholds", {})
    thresholds = FilterThresholds(
        conf_min=float(thr_cfg.get("conf_min", FilterThresholds().conf_min)),
        outlier_max_frac=float(
            thr_cfg.get("outlier_max_frac", FilterThresholds().outlier_max_frac)
        ),
        reproj_max_px=float(thr_cfg.get("reproj_max_px", FilterThresholds().reproj_max_px)),
    )
    config = AdaptationConfig(
        tracker=TrackerParams(),
        thresholds=thresholds,
        mixing_ratio=float(cfg.get("mixing_ratio", AdaptationConfig().mixing_ratio)),
    )
    results = adaptation_loop(
        detections,
        estimator,
        models_by_class,
        ds.camera,
        config,
        rounds=args.rounds,
        gt_boxes=gt_boxes,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metric_rows = []
    for i, (labels, metrics) in enumerate(results, start=1):
        write_pseudo_labels(labels, out / f"labels_round{i}.json")
        metric_rows.append(
            {
                "round": i,
                "selection_rate": metrics.selection_rate,
                "n_selected": metrics.n_selected,
                "n_refine_failed": metrics.n_refine_failed,
                "n_pose_labels": metrics.n_pose_labels,
                "mean_refined_iou": metrics.mean_refined_iou,
                "mean_input_iou": metrics.mean_input_iou,
            }
        )
    (out / "metrics.json").write_text(canonical_json({"rounds": metric_rows}))
    _write_snapshot(
        out / "adapt_config.json",
        "adapt",
        {
            "dataset": str(Path(args.dataset)),
            "detections": None if args.detections is None else str(Path(args.detections)),
            "rounds": args.rounds,
            "seed": args.seed,
            "noise_sigma": args.noise_sigma,
            "box_jitter": args.box_jitter,
            "thresholds": {
                "conf_min": thresholds.conf_min,
                "outlier_max_frac": thresholds.outlier_max_frac,
                "reproj_max_px": thresholds.reproj_max_px,
            },
            "mixing_ratio": config.mixing_ratio,
        },
    )
    last = metric_rows[-1]
    print(
        f"{len(results)} round(s): selection rate {last['selection_rate']:.2f}, "
        f"{last['n_pose_labels']} pose labels -> {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# losses


def _class_logits(confidence, class_id, n_classes):
    p = min(max(confidence, 1e-6), 1.0 - 1e-6)
    logits = np.full(n_classes, math.log((1.0 - p) / max(n_classes - 1, 1)))
    logits[class_id] = math.log(p)
    return logits


def _losses_for_object(obj, est, model, box, camera, weights, pts, n_classes):
    crop = obj.crop
    center = (crop.cx, crop.cy)
    gt_corr = load_correspondence(obj.corr_path, crop)
    gt_mesh = articulate(model, ArticulationState(obj.articulation))
    _, gt_crop_masks = rasterize_crop([(gt_mesh, obj.pose)], camera, crop, CROP_OUT_SIZE)
    gt = GroundTruth(
        R=ego_to_allo(obj.pose.R, center, camera),
        site=encode_translation(obj.pose.t, crop, camera),
        articulation=obj.articulation,
        class_id=obj.class_id,
        corr=gt_corr.data.astype(np.float64),
        mask_vis=gt_corr.valid.data.astype(np.float64),
        mask_full=gt_crop_masks[0].data.astype(np.float64),
    )
    pred_mesh = articulate(model, ArticulationState(est.articulation))
    coords = normalize_vertices(pred_mesh, box)
    pred_corr = render_correspondence(
        pred_mesh, coords, est.pose, camera, crop, CROP_OUT_SIZE
    )
    _, pred_crop_masks = rasterize_crop(
        [(pred_mesh, est.pose)], camera, crop, CROP_OUT_SIZE
    )
    pred_full = pred_crop_masks[0].data.astype(np.float64)
    pred = PosePrediction(
        rot6d=matrix_to_rot6d(ego_to_allo(est.pose.R, center, camera)),
        site=encode_translation(est.pose.t, crop, camera),
        articulation=est.articulation,
        class_logits=_class_logits(est.class_confidence, est.class_id, n_classes),
        corr=pred_corr.data.astype(np.float64),
        mask_vis=pred_full,
        mask_full=pred_full,
    )
    return loss_total(pred, gt, weights, pts)


def cmd_losses(args):
    ds = _open_dataset(args.dataset)
    models, models_by_class = _dataset_models(ds)
    estimates = load_estimates(_require_file(args.predictions, "predictions file"))
    wcfg = _read_config(args.weights)
    weights = LossWeights(
        w_pose=float(wcfg.get("w_pose", 1.0)),
        w_geom=float(wcfg.get("w_geom", 1.0)),
        w_cat=float(wcfg.get("w_cat", 1.0)),
        w_art=float(wcfg.get("w_art", 1.0)),
    )
    boxes = {m.class_id: model_corr_bbox(m) for m in models}
    pts = {
        m.class_id: sample_surface_points(
            articulate(m, ArticulationState(0.5)), DEFAULT_NUM_POINTS, seed=0
        )
        for m in models
    }
    objects = {
        (frame.frame_id, obj.class_id): obj
        for frame in ds.frames
        for obj in frame.objects
    }
    n_classes = max(2, max(models_by_class) + 1)
    rows = []
    skipped = 0
    for key in sorted(estimates):
        if key not in objects:
            raise InputError(f"prediction without ground truth: frame {key[0]} class {key[1]}")
        obj = objects[key]
        est = estimates[key]
        try:
            breakdown = _losses_for_object(
                obj,
                est,
                models_by_class[key[1]],
                boxes[key[1]],
                ds.camera,
                weights,
                pts[key[1]],
                n_classes,
            )
        except InputError:
            raise
        except ArtiposeError:
            skipped += 1
            continue
        rows.append(
            {
                "frame_id": key[0],
                "class": key[1],
                "total": breakdown.total,
                "pose": breakdown.pose,
                "rotation": breakdown.rotation,
                "center": breakdown.center,
                "depth": breakdown.depth,
                "geom": breakdown.geom,
                "corr": breakdown.corr,
                "mask": breakdown.mask,
                "category": breakdown.category,
                "articulation": breakdown.articulation,
            }
        )
    if not rows:
        raise InputError("no prediction produced a loss value")
    fields = [k for k in rows[0] if k not in ("frame_id", "class")]
    means = {f: float(np.mean([r[f] for r in rows])) for f in fields}
    effective = {
        "dataset": str(Path(args.dataset)),
        "predictions": str(Path(args.predictions)),
        "weights": {
            "w_pose": weights.w_pose,
            "w_geom": weights.w_geom,
            "w_cat": weights.w_cat,
            "w_art": weights.w_art,
        },
    }
    body = canonical_json(effective)
    payload = {
        "version": __version__,
        "config_sha256": hashlib.sha256(body.encode()).hexdigest(),
        "weights": effective["weights"],
        "mean": means,
        "per_object": rows,
        "n_skipped": skipped,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(canonical_json(payload))
    _write_snapshot(out.with_name(out.stem + "_config.json"), "losses", effective)
    print(f"mean total loss {means['total']:.4f} over {len(rows)} objects -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="artipose",
        description="Synthetic articulated-tool pose experiments.",
    )
    parser.add_argument("--version", action="version", version=f"artipose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simgen", help="render a synthetic ground-truth sequence")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--frames", type=int, help="number of frames")
    p.add_argument("--seed", type=int, help="generator seed")
    p.add_argument("--no-occluders", action="store_true", help="disable occluders")
    p.set_defaults(func=cmd_simgen)

    p = sub.add_parser("estimate", help="solve poses from stored correspondence maps")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output JSONL file")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="correspondence pixel noise")
    p.add_argument(
        "--conf-model",
        choices=("inlier_fraction", "constant"),
        default="inlier_fraction",
        help="how prediction confidence is derived",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True, help="estimate JSONL file")
    p.add_argument("--out", required=True, help="report JSON path (a .txt sibling is written too)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("adapt", help="run pseudo-label adaptation rounds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--detections", help="detection JSONL; synthesized from GT when absent")
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--box-jitter", type=float, default=0.1, help="relative box jitter for synthesized detections")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("losses", help="loss breakdown of predictions vs ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--weights", help="JSON file with w_pose/w_geom/w_cat/w_art")
    p.set_defaults(func=cmd_losses)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 2
    except ArtiposeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
