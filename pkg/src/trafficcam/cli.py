"""Command line entry point: ``trafficcam <command> ...``.

Exit codes: 0 success, 2 bad input, 3 numerical failure, 4 network failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from collections import defaultdict
from typing import List, Optional, Sequence

import numpy as np

from . import dataset_mixer as mixer
from . import density as dens
from . import detection as det
from . import fd_fit
from .config import AppConfig, default_config_toml, load_config
from .errors import InputError, NumericError, SchemaError
from .feed import FeedError, fetch_feed
from .fileio import (
    annotations_from_dict,
    annotations_to_dict,
    calibration_from_dict,
    calibration_to_dict,
    camera_to_dict,
    check_version,
    markings_from_dict,
    markings_to_dict,
    models_from_dict,
    models_to_dict,
    read_json,
    versioned,
    write_json,
)
from .measurement import evaluate_markings, lane_length, segment_lengths
from .mvcalib import calibrate
from .synth import generate_scene, lane_geometries
from .vehicles import model_library

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_NETWORK = 0, 2, 3, 4

logger = logging.getLogger("trafficcam")


def _write_text(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _emit_json(path: Optional[str], doc) -> None:
    if path is None or path == "-":
        json.dump(doc, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        write_json(path, doc)


def _read_lines(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.readlines()


def _read_lanes(path: str) -> List[det.LaneGeometry]:
    doc = check_version(read_json(path), "lanes")
    return det.lanes_from_dict(doc)


# ------------------------------------------------------------------- commands


def cmd_calibrate(args, cfg: AppConfig) -> int:
    annotations, size = annotations_from_dict(read_json(args.annotations))
    models = models_from_dict(read_json(args.models)) if args.models else model_library()
    overrides = {} if args.seed is None else {"seed": args.seed}
    result = calibrate(annotations, models, size, cfg.mvcalib(**overrides), stages=args.stages)
    doc = calibration_to_dict(result, size)
    doc["config"] = {"f_default_px": cfg.calibration.f_default,
                     "matching_evaluations": cfg.calibration.matching_evaluations,
                     "finetune_evaluations": cfg.calibration.finetune_evaluations,
                     "rematch_rounds": cfg.calibration.rematch_rounds,
                     "beta": cfg.mixer.beta, "gamma": cfg.mixer.gamma}
    _emit_json(args.output, doc)
    return EXIT_OK


def cmd_measure(args, cfg: AppConfig) -> int:
    params, size, _ = calibration_from_dict(read_json(args.calibration))
    if args.markings:
        segments, msize = markings_from_dict(read_json(args.markings))
        if tuple(msize) != tuple(size):
            raise InputError(f"markings image size {msize} differs from calibration {size}")
        lengths = segment_lengths(segments, params, size)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["segment", "length_m", "true_length_m", "abs_error_m", "ape_pct"])
        truth = segments.true_length_m
        for k, length in enumerate(lengths):
            if truth is None:
                w.writerow([k, repr(float(length)), "", "", ""])
            else:
                err = abs(length - truth)
                w.writerow([k, repr(float(length)), truth, repr(float(err)), repr(float(100.0 * err / truth))])
        _write_text(args.output, buf.getvalue())
        if args.summary and truth is not None:
            m = evaluate_markings(segments, params, size)
            _emit_json(args.summary, versioned({"rmse_m": m.rmse, "mae_m": m.mae, "mape_pct": m.mape,
                                                "n_segments": int(len(lengths))}))
    if args.lanes:
        doc = check_version(read_json(args.lanes), "lanes")
        for k, raw in enumerate(doc.get("lanes", [])):
            if "centerline" not in raw:
                raise SchemaError("missing", field=f"lanes[{k}].centerline")
            raw["length_m"] = lane_length(raw["centerline"], params, size)
        det.lanes_from_dict(doc)  # validates the measured lanes
        _emit_json(args.lanes_output, doc)
    if not args.markings and not args.lanes:
        raise InputError("nothing to measure: pass --markings and/or --lanes")
    return EXIT_OK


def cmd_mix(args, cfg: AppConfig) -> int:
    doc = check_version(read_json(args.manifest), "manifest")
    try:
        manifest = mixer.DatasetManifest.from_dict(doc)
    except KeyError as exc:
        raise SchemaError("missing", field=str(exc.args[0])) from None
    beta = cfg.mixer.beta if args.beta is None else args.beta
    gamma = cfg.mixer.gamma if args.gamma is None else args.gamma
    alloc = mixer.solve_allocation(manifest, beta, gamma)
    report = mixer.verify_allocation(alloc, manifest, beta, gamma)
    out = versioned(mixer.allocation_to_dict(alloc))
    out["rounding_violations"] = [
        {"constraint": c.name, "slack": c.slack} for c in report.violations
    ]
    _emit_json(args.output, out)
    if args.csv:
        _write_text(args.csv, mixer.allocation_csv(alloc))
    return EXIT_OK


def _pair_frames(preds: Sequence[det.DetectionFrame], truths: Sequence[det.DetectionFrame]):
    by_key = {(f.camera_id, f.timestamp): f for f in preds}
    images = []
    for t in truths:
        p = by_key.pop((t.camera_id, t.timestamp), None)
        images.append((list(p.boxes) if p else [], list(t.boxes)))
    images += [(list(p.boxes), []) for p in by_key.values()]
    return [i[0] for i in images], [i[1] for i in images]


def cmd_eval_detections(args, cfg: AppConfig) -> int:
    preds = list(det.read_frames(_read_lines(args.predictions), with_confidence=True))
    truths = list(det.read_frames(_read_lines(args.truth), with_confidence=False))
    P, T = _pair_frames(preds, truths)
    iou_t = cfg.detection.iou_threshold if args.iou is None else args.iou
    conf_min = cfg.detection.confidence_min if args.confidence_min is None else args.confidence_min
    tp = fp = fn = 0
    for p, t in zip(P, T):
        r = det.match_detections([b for b in p if b.confidence >= conf_min], t, iou_t)
        tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
    precision, recall = det.precision_recall(tp, fp, fn)
    ap = {f"{t:.2f}": det.average_precision(P, T, t) for t in det.MAP_THRESHOLDS}
    doc = versioned({
        "iou_threshold": iou_t,
        "confidence_min": conf_min,
        "tp": tp, "fp": fp, "fn": fn,
        "precision": precision, "recall": recall,
        "ap": det.average_precision(P, T, iou_t),
        "map_50": ap["0.50"],
        "map_50_95": float(np.mean(list(ap.values()))),
        "ap_by_threshold": ap,
    })
    _emit_json(args.output, doc)
    if args.plot_data:
        cut, prec, rec = det.pr_curve(P, T, iou_t)
        rows = "".join(f"{c!r},{p!r},{r!r}\n" for c, p, r in zip(cut, prec, rec))
        _write_text(args.plot_data, "confidence_cutoff,precision,recall\n" + rows)
    return EXIT_OK


def cmd_density(args, cfg: AppConfig) -> int:
    lanes = _read_lanes(args.lanes)
    conf_min = cfg.detection.confidence_min if args.confidence_min is None else args.confidence_min
    interval = cfg.density.interval_s if args.interval_s is None else args.interval_s
    per_frame = []
    for frame in det.read_frames(_read_lines(args.detections), with_confidence=True):
        k = dens.density_from_counts(det.count_per_lane(frame, lanes, conf_min), lanes)
        per_frame += [dens.FrameDensity(frame.camera_id, lane, frame.timestamp, v) for lane, v in k.items()]
    records = dens.aggregate(per_frame, interval)
    _write_text(args.output, dens.records_to_csv(records))
    if args.truth:
        with open(args.truth, "r", encoding="utf-8") as fh:
            truth = {(r.camera_id, r.lane_id, r.interval_start): r.k for r in dens.records_from_csv(fh.read())}
        pairs = [(r.k, truth[(r.camera_id, r.lane_id, r.interval_start)]) for r in records
                 if r.k is not None and truth.get((r.camera_id, r.lane_id, r.interval_start)) is not None]
        if not pairs:
            raise InputError("no interval is present in both the estimate and the truth file")
        e = dens.error_metrics([p[0] for p in pairs], [p[1] for p in pairs])
        _emit_json(args.errors, versioned({"rmse_veh_per_km": e.rmse, "mae_veh_per_km": e.mae, "mape_pct": e.mape,
                                           "n_points": len(pairs), "n_zero_truth_skipped": e.n_skipped}))
    if args.plot_data:
        pivot = dens.day_of_week_pivot(records, 3600.0)
        rows = [f"{d},{h},{'' if np.isnan(pivot[d, h]) else repr(float(pivot[d, h]))}\n"
                for d in range(7) for h in range(pivot.shape[1])]
        _write_text(args.plot_data, "day_of_week,hour,k_veh_per_km\n" + "".join(rows))
    return EXIT_OK


def cmd_fit_fd(args, cfg: AppConfig) -> int:
    with open(args.data, "r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        k = np.array([float(r["k_veh_per_km"]) for r in rows])
        v = np.array([float(r["v_kmh"]) for r in rows])
    except KeyError as exc:
        raise SchemaError("missing column", field=str(exc.args[0])) from None
    except ValueError as exc:
        raise SchemaError(f"non-numeric value ({exc})") from None
    params = fd_fit.fit_fd(k, v, args.model, seed=args.seed)
    k_star, q_star = fd_fit.max_flow(params)
    _emit_json(args.output, versioned({**params.to_dict(), "k_at_max_flow_veh_per_km": k_star,
                                       "max_flow_veh_per_h": q_star, "n_points": int(k.size)}))
    if args.plot_data:
        _write_text(args.plot_data, fd_fit.curve_csv(params))
    return EXIT_OK


def cmd_synth(args, cfg: AppConfig) -> int:
    scene = generate_scene(args.seed, args.n_vehicles, noise_px=args.noise_px)
    os.makedirs(args.output_dir, exist_ok=True)
    path = lambda name: os.path.join(args.output_dir, name)
    write_json(path("annotations.json"), annotations_to_dict(scene.annotations, scene.image_size))
    write_json(path("models.json"), models_to_dict(scene.models))
    write_json(path("markings.json"), markings_to_dict(scene.marking_lines_image, scene.image_size, 6.0))
    write_json(path("camera_truth.json"), versioned({
        "image_size": list(scene.image_size),
        "camera": camera_to_dict(scene.params),
        "seed": args.seed,
        "placements": [{"index": p.index, "model": p.model_name, "position_m": p.position.tolist(),
                        "heading_rad": p.heading} for p in scene.placements],
    }))
    write_json(path("lanes.json"), versioned(det.lanes_to_dict(lane_geometries(scene))))
    return EXIT_OK


def cmd_fetch(args, cfg: AppConfig) -> int:
    fc = cfg.fetch
    frames = fetch_feed(
        args.url, args.camera, args.output_dir,
        interval_s=fc.interval_s if args.interval_s is None else args.interval_s,
        max_frames=args.max_frames, max_retries=fc.max_retries, backoff_s=fc.backoff_s, timeout_s=fc.timeout_s,
    )
    logger.info("index holds %d frame(s)", len(frames))
    return EXIT_OK


def cmd_config(args, cfg: AppConfig) -> int:
    _write_text(args.output, default_config_toml())
    return EXIT_OK


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trafficcam", description="Traffic camera calibration and density tools.")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="estimate camera parameters from annotated vehicles")
    c.add_argument("--annotations", required=True)
    c.add_argument("--models", help="vehicle model file (default: built-in library)")
    c.add_argument("--stages", type=int, choices=(1, 2, 3), default=3)
    c.add_argument("--seed", type=int)
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_calibrate)

    c = sub.add_parser("measure", help="ground distances of markings and lane lengths")
    c.add_argument("--calibration", required=True)
    c.add_argument("--markings")
    c.add_argument("--summary", help="write RMSE/MAE/MAPE JSON here")
    c.add_argument("--lanes", help="lane file whose centrelines are measured")
    c.add_argument("--lanes-output")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_measure)

    c = sub.add_parser("mix", help="balanced image allocation across datasets")
    c.add_argument("--manifest", required=True)
    c.add_argument("--beta", type=float)
    c.add_argument("--gamma", type=float)
    c.add_argument("--csv")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_mix)

    c = sub.add_parser("eval-detections", help="IoU matching, precision/recall and mAP")
    c.add_argument("--predictions", required=True)
    c.add_argument("--truth", required=True)
    c.add_argument("--iou", type=float)
    c.add_argument("--confidence-min", type=float)
    c.add_argument("--plot-data", help="write the precision/recall curve as CSV")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_eval_detections)

    c = sub.add_parser("density", help="per-lane traffic density from detections")
    c.add_argument("--detections", required=True)
    c.add_argument("--lanes", required=True)
    c.add_argument("--interval-s", type=float)
    c.add_argument("--confidence-min", type=float)
    c.add_argument("--truth", help="density CSV to compare against")
    c.add_argument("--errors", help="where to write the error report (default stdout)")
    c.add_argument("--plot-data", help="write a day-of-week by hour table as CSV")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_density)

    c = sub.add_parser("fit-fd", help="fit a speed-density fundamental diagram")
    c.add_argument("--data", required=True, help="CSV with k_veh_per_km and v_kmh columns")
    c.add_argument("--model", choices=fd_fit.MODELS, default=fd_fit.NEWELL)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--plot-data", help="write curve samples as CSV")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_fit_fd)

    c = sub.add_parser("synth", help="write a synthetic scene with known camera")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-vehicles", type=int, default=7)
    c.add_argument("--noise-px", type=float, default=0.0)
    c.add_argument("--output-dir", required=True)
    c.set_defaults(func=cmd_synth)

    c = sub.add_parser("fetch", help="poll a camera snapshot URL")
    c.add_argument("--url", required=True)
    c.add_argument("--camera", required=True)
    c.add_argument("--output-dir", required=True)
    c.add_argument("--interval-s", type=float)
    c.add_argument("--max-frames", type=int, default=1)
    c.set_defaults(func=cmd_fetch)

    c = sub.add_parser("config", help="print the default configuration as TOML")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_config)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except FeedError as exc:
        logger.error("%s", exc)
        return EXIT_NETWORK
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError, UnicodeDecodeError) as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    except NumericError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
