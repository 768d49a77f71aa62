"""
Command line entry point: `python -m cgdet <command>` or the `cgdet` console script.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

import os
import sys
import json
import logging
import argparse
from pathlib import Path

from . import constants
from .data import SplitSpec, patient_split, summarize_manifest, tag_manifest, validate_manifest
from .exceptions import ConfigurationError, DataFormatError, StructuralError
from .formats import (dumps, mask_loader_for, read_ground_truth, read_heatmap, read_hu, read_manifest, read_mask,
                      read_predictions, read_verdicts, rounded_box, write_json, write_manifest, write_pgm,
                      write_predictions)
from .fusion import FusionConfig, ModelWeights, ensemble_dataset, group_by_image
from .guidance import GuidanceConfig, guidance_summary, guided_filter_dataset
from .imaging import WindowSpec, infer_attention, mask_to_annotations, mask_to_label, window
from .reporting import (EvalConfig, build_eval_report, classification_data, comparison_table, save_points,
                        save_pr_curves, save_roc_curve, save_table, setup_logging)

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_USAGE_ERROR = 2


def _emit(payload, output):
    if output is None:
        sys.stdout.write(dumps(payload))
    else:
        write_json(output, payload)
        logging.info(f"wrote {output}")


def cmd_window(args) -> int:
    spec = WindowSpec(level=args.level, width=args.width)
    img = read_hu(args.input)
    gray = window(img, spec)
    write_pgm(args.output, gray.values)
    logging.info(f"windowed {img.width}x{img.height} image at WL={spec.level} WW={spec.width} into {args.output}")
    return EXIT_OK


def cmd_crop(args) -> int:
    heatmap = read_heatmap(args.heatmap, features=args.features)
    result = infer_attention(heatmap, args.image_width, args.image_height)
    if result.degenerate:
        logging.warning("attention is degenerate, falling back to the full image")
    _emit({
        "schema": constants.SCHEMA_CROP,
        "box": rounded_box(result.box),
        "image_width": args.image_width,
        "image_height": args.image_height,
        "threshold": result.threshold,
        "degenerate": result.degenerate,
    }, args.output)
    return EXIT_OK


def cmd_annotate(args) -> int:
    mask = read_mask(args.mask)
    boxes = mask_to_annotations(mask, args.margin)
    _emit({
        "schema": constants.SCHEMA_ANNOTATION,
        "image_id": args.image_id or Path(args.mask).stem,
        "label": mask_to_label(mask),
        "width": mask.width,
        "height": mask.height,
        "margin": args.margin,
        "annotations": [rounded_box(b) for b in boxes],
    }, args.output)
    return EXIT_OK


def parse_weights(tokens) -> dict[str, float]:
    weights = {}
    for token in tokens:
        model_id, sep, value = token.rpartition("=")
        if not sep or not model_id:
            raise ConfigurationError(f"weights are given as MODEL=WEIGHT, got {token!r}")
        try:
            weights[model_id] = float(value)
        except ValueError:
            raise ConfigurationError(f"weight of model {model_id} is not a number: {value!r}")
    return weights


def cmd_fuse(args) -> int:
    cfg = FusionConfig(method=args.method, iou_threshold=args.iou_threshold, score_floor=args.score_floor)
    if args.weights:
        weights = ModelWeights(parse_weights(args.weights), default=args.default_weight)
    else:
        weights = ModelWeights.uniform()
    dets = []
    for path in args.predictions:
        dets.extend(read_predictions(path))
    weights.check_models({det.model_id for det in dets})
    fused = ensemble_dataset(dets, cfg, weights, workers=args.workers, progress_bar=args.progress)
    write_predictions(args.output, fused)
    logging.info(f"wrote {len(fused)} fused detections to {args.output}")
    return EXIT_OK


def cmd_guide(args) -> int:
    cfg = GuidanceConfig(theta=args.theta, conf_floor=args.conf_floor)
    dets = read_predictions(args.predictions)
    verdicts = read_verdicts(args.verdicts)
    per_image = group_by_image(dets)
    filtered = guided_filter_dataset(per_image, verdicts, cfg)
    summary = guidance_summary(per_image, filtered, verdicts, cfg)
    # guided_filter returns the very same objects, which keeps the input order intact
    kept = {id(det) for image_dets in filtered.values() for det in image_dets}
    write_predictions(args.output, [det for det in dets if id(det) in kept])
    print(f"guidance dropped {summary['dropped']} of {summary['dropped'] + summary['kept']} detections "
          f"on {summary['gated_images']} gated images")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = EvalConfig(iou_thresholds=args.iou_thresholds, score_threshold=args.score_threshold,
                     theta=args.theta, workers=args.workers, progress_bar=args.progress)
    preds = read_predictions(args.predictions)
    image_ids, gts = read_ground_truth(args.ground_truth)
    if not gts:
        raise StructuralError(f"{args.ground_truth}: ground truth holds no boxes")
    verdicts = read_verdicts(args.verdicts) if args.verdicts else None

    report = build_eval_report(preds, image_ids, gts, cfg, verdicts)
    _emit(report.to_payload(), args.output)

    data = classification_data(image_ids, gts, verdicts) if verdicts is not None else None
    has_roc = data is not None and len({d.label for d in data}) == 2
    if args.points_dir:
        save_points(report, args.points_dir, data if has_roc else None)
    if args.plot:
        Path(args.plot).mkdir(parents=True, exist_ok=True)
        save_pr_curves(report, args.plot)
        if has_roc:
            save_roc_curve(data, args.plot)
    return EXIT_OK


def cmd_report(args) -> int:
    df = comparison_table(args.reports, names=args.names, kind=args.kind)
    if args.output:
        save_table(df, args.output)
    else:
        sys.stdout.write(df.to_csv(float_format="%.3f"))
    return EXIT_OK


def parse_ratios(ratios: str, names=None) -> "dict[str, float]":
    try:
        parts = [float(p) for p in ratios.split(":")]
    except ValueError:
        raise ConfigurationError(f"ratios are given as e.g. 80:20 or 70:10:20, got {ratios!r}")
    if names is None:
        names = {1: ["train"], 2: ["train", "test"], 3: ["train", "val", "test"]}.get(len(parts))
        if names is None:
            raise ConfigurationError(f"name the {len(parts)} splits with --names")
    if len(names) != len(parts):
        raise ConfigurationError(f"{len(names)} split names for {len(parts)} ratios")
    total = sum(parts)
    if total <= 0:
        raise ConfigurationError(f"ratios must have a positive sum, got {ratios!r}")
    return {name: part / total for name, part in zip(names, parts)}


def cmd_split(args) -> int:
    spec = SplitSpec(fractions=parse_ratios(args.ratios, args.names), seed=args.seed)
    manifest = read_manifest(args.manifest)
    splits = patient_split(manifest, spec)
    write_manifest(args.output, tag_manifest(manifest, splits))
    for name, ids in splits.items():
        images = sum(len(p.images) for p in manifest.patients if p.patient_id in set(ids))
        logging.info(f"{name}: {len(ids)} patients, {images} images")
    return EXIT_OK


def cmd_validate(args) -> int:
    manifest = read_manifest(args.manifest)
    violations = validate_manifest(manifest, mask_loader_for(args.manifest))
    summary = summarize_manifest(manifest)
    _emit({
        "schema": constants.SCHEMA_VALIDATION,
        "violations": [v.as_dict() for v in violations],
        "summary": summary,
    }, args.output)
    for v in violations:
        logging.warning(f"{v.kind}: {v.message}")
    return EXIT_DATA_ERROR if violations else EXIT_OK


def _add_common(parser):
    parser.add_argument("--log-file", nargs="?", const=constants.LOG_FILE, default=None,
                        help=f"also write the log to this file ({constants.LOG_FILE} when no name is given)")
    parser.add_argument("--verbose", action="store_true")


def _add_parallel(parser):
    parser.add_argument("--workers", type=int, default=1, help="threads used across images")
    parser.add_argument("--progress", action="store_true", help="show a progress bar")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="cgdet", description="Detection ensembling, classifier guidance and evaluation for CT pulmonary embolism detection")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    p = sub.add_parser("window", help="map a raw HU slice to an 8 bit PGM with a CT window")
    p.add_argument("input", help="raw little endian int16 file with a .json sidecar")
    p.add_argument("--level", type=float, default=constants.WINDOW_LEVEL)
    p.add_argument("--width", type=float, default=constants.WINDOW_WIDTH)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_window)
    commands["window"] = p

    p = sub.add_parser("crop", help="infer the attention crop box from a heatmap")
    p.add_argument("heatmap", help=".npy heatmap (H x W in [0, 1]) or feature maps (C x H x W)")
    p.add_argument("--image-width", type=int, required=True)
    p.add_argument("--image-height", type=int, required=True)
    p.add_argument("--features", action="store_true", help="normalize the array as raw feature maps")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_crop)
    commands["crop"] = p

    p = sub.add_parser("annotate", help="derive the slice label and expanded boxes from a lesion mask")
    p.add_argument("mask", help="PGM mask, nonzero pixels are lesion")
    p.add_argument("--image-id", default=None)
    p.add_argument("--margin", type=int, default=constants.ANNOTATION_MARGIN)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_annotate)
    commands["annotate"] = p

    p = sub.add_parser("fuse", help="ensemble the predictions of several detectors")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--method", default=constants.FUSION_METHOD, type=str.upper, choices=["NMS", "NMW", "WBF"])
    p.add_argument("--iou-threshold", type=float, default=constants.FUSION_IOU_THRESHOLD)
    p.add_argument("--weights", nargs="+", default=None, metavar="MODEL=WEIGHT")
    p.add_argument("--default-weight", type=float, default=None, help="weight of models missing from --weights")
    p.add_argument("--score-floor", type=float, default=constants.FUSION_SCORE_FLOOR)
    p.add_argument("--output", required=True)
    _add_parallel(p)
    p.set_defaults(func=cmd_fuse)
    commands["fuse"] = p

    p = sub.add_parser("guide", help="filter detections with the image classifier's verdicts")
    p.add_argument("predictions")
    p.add_argument("verdicts")
    p.add_argument("--theta", type=float, default=constants.GUIDANCE_THETA)
    p.add_argument("--conf-floor", type=float, default=constants.GUIDANCE_CONF_FLOOR)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_guide)
    commands["guide"] = p

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("predictions")
    p.add_argument("ground_truth")
    p.add_argument("--iou-thresholds", type=float, nargs="+", default=list(constants.EVAL_IOU_THRESHOLDS))
    p.add_argument("--score-threshold", type=float, default=constants.EVAL_SCORE_THRESHOLD)
    p.add_argument("--verdicts", default=None, help="classifier verdicts, enables the classification block")
    p.add_argument("--theta", type=float, default=constants.GUIDANCE_THETA)
    p.add_argument("--output", default=None)
    p.add_argument("--points-dir", default=None, help="write PR/ROC points as CSV here")
    p.add_argument("--plot", default=None, help="write PR/ROC plots into this directory")
    _add_parallel(p)
    p.set_defaults(func=cmd_eval)
    commands["eval"] = p

    p = sub.add_parser("report", help="compare several evaluation reports in one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--names", nargs="+", default=None)
    p.add_argument("--kind", choices=["detection", "classification"], default="detection")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_report)
    commands["report"] = p

    p = sub.add_parser("split", help="patient-wise split of a dataset manifest")
    p.add_argument("manifest")
    p.add_argument("--ratios", default="80:20")
    p.add_argument("--names", nargs="+", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_split)
    commands["split"] = p

    p = sub.add_parser("validate", help="check a dataset manifest for inconsistencies")
    p.add_argument("manifest")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_validate)
    commands["validate"] = p

    for p in commands.values():
        _add_common(p)
    return parser, commands


def load_config_defaults(commands: dict):
    """Applies the per command sections of the JSON file named by CGDET_CONFIG as argparse defaults."""
    path = os.environ.get(constants.CONFIG_ENV_VAR)
    if not path:
        return
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}")
    if not isinstance(config, dict):
        raise ConfigurationError(f"config file {path} must hold an object of command sections")
    for command, section in config.items():
        if command not in commands or not isinstance(section, dict):
            raise ConfigurationError(f"config file {path}: unknown command section {command!r}")
        known = {action.dest for action in commands[command]._actions}
        unknown = sorted(set(section) - known)
        if unknown:
            raise ConfigurationError(f"config file {path}: unknown options {unknown} for {command}")
        commands[command].set_defaults(**section)


def main(argv=None) -> int:
    parser, commands = build_parser()
    try:
        load_config_defaults(commands)
    except ConfigurationError as e:
        print(f"cgdet: error: {e}", file=sys.stderr)
        return EXIT_USAGE_ERROR
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE_ERROR

    setup_logging(args.log_file, args.verbose)
    try:
        return args.func(args)
    except ConfigurationError as e:
        logging.error(f"configuration error: {e}")
        return EXIT_USAGE_ERROR
    except (StructuralError, DataFormatError, OSError) as e:
        logging.error(f"data error: {e}")
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
