"""Command-line entry point: every pipeline stage as a subcommand.

Machine-first contract: exactly one JSON summary line on stdout, human
logs on stderr, outputs only under --out. Exit 0 on success (validator
defects are data, not failure), 1 on operational failure (missing files,
malformed inputs, failing detector commands), 2 on usage errors. All
randomness flows from --seed; the PALLETBENCH_SEED environment variable
overrides it for CI pinning.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import os
import sys

from .coco import (
    canonical_json_bytes,
    merge_datasets,
    parse_dataset,
    parse_predictions,
    serialize_dataset,
    serialize_predictions,
    validate_dataset,
)
from .evaluate import (
    EvalConfig,
    GROUPINGS,
    MODES,
    evaluate,
    stability_compare,
)
from .experiment import (
    DEFAULT_METRIC_PATH,
    PREDICTIONS_FILENAME,
    GridSpec,
    MockDetectorConfig,
    collect_results,
    darkening_sweep,
    expand_grid,
    manifest_from_json_obj,
    mock_detect,
    select_best,
)
from .photometric import (
    DATASET_FILENAME,
    MANIFEST_FILENAME,
    darken_dataset_random,
    darken_dataset_static,
)
from .scenegen import (
    config_from_json_obj,
    config_to_json_obj,
    export_dataset,
    generate_batch,
    scene_to_json_obj,
)

log = logging.getLogger("palletbench")

SCENES_FILENAME = "scenes.json"
SEED_ENV_VAR = "PALLETBENCH_SEED"


class UsageError(Exception):
    """Flag combination or value the parser alone cannot reject."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _resolve_seed(args: argparse.Namespace) -> int:
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
    return args.seed


def _read_json(path: str):
    with open(path, "rb") as f:
        return json.loads(f.read().decode("utf-8"))


def _read_dataset(path: str):
    with open(path, "rb") as f:
        return parse_dataset(f.read())


def _read_predictions(path: str, dataset):
    with open(path, "rb") as f:
        return parse_predictions(f.read(), dataset)


def _write_canonical(path: str, obj) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(canonical_json_bytes(obj))


def _eval_config(args: argparse.Namespace) -> EvalConfig:
    try:
        return EvalConfig(
            iou_thresholds=tuple(args.iou),
            mode=args.mode,
            grouping=args.grouping,
        )
    except ValueError as e:
        raise UsageError(str(e))


def _split_dataset_path(args: argparse.Namespace) -> tuple[str, str, str]:
    """(dataset dir, dataset file name, images root) for dir-based ops."""
    dataset_dir = os.path.dirname(args.dataset) or "."
    images_root = args.images_root if args.images_root else dataset_dir
    return dataset_dir, os.path.basename(args.dataset), images_root


def _cmd_validate(args: argparse.Namespace) -> dict:
    dataset = _read_dataset(args.dataset)
    report = validate_dataset(dataset, image_root=args.images_root)
    log.info(
        "validated %s: %d images, %d annotations, %d defects",
        args.dataset,
        len(dataset.images),
        len(dataset.annotations),
        len(report.defects),
    )
    return {
        "defects": len(report.defects),
        "by_code": report.counts(),
        "ok": report.ok,
    }


def _cmd_generate(args: argparse.Namespace) -> dict:
    cfg = config_from_json_obj(_read_json(args.config))
    seed = _resolve_seed(args)
    specs = generate_batch(cfg, args.count, seed)
    obj = {
        "master_seed": seed,
        "config": config_to_json_obj(cfg),
        "scenes": [scene_to_json_obj(s) for s in specs],
    }
    _write_canonical(os.path.join(args.out, SCENES_FILENAME), obj)
    log.info("generated %d scenes (seed %d) under %s", len(specs), seed, args.out)
    return {"scenes": len(specs), "seed": seed, "out": args.out}


def _cmd_export(args: argparse.Namespace) -> dict:
    cfg = config_from_json_obj(_read_json(args.config))
    seed = _resolve_seed(args)
    specs = generate_batch(cfg, args.count, seed)
    dataset = export_dataset(specs, args.out, min_visibility=args.min_visibility)
    obj = {
        "master_seed": seed,
        "config": config_to_json_obj(cfg),
        "scenes": [scene_to_json_obj(s) for s in specs],
    }
    _write_canonical(os.path.join(args.out, SCENES_FILENAME), obj)
    log.info(
        "exported %d images, %d annotations under %s",
        len(dataset.images),
        len(dataset.annotations),
        args.out,
    )
    return {
        "images": len(dataset.images),
        "annotations": len(dataset.annotations),
        "seed": seed,
        "out": args.out,
    }


def _cmd_darken(args: argparse.Namespace) -> dict:
    dataset_dir, dataset_filename, images_root = _split_dataset_path(args)
    if args.random:
        seed = _resolve_seed(args)
        dataset, manifest = darken_dataset_random(
            dataset_dir, args.darken, seed, args.out, dataset_filename, images_root
        )
        log.info(
            "randomly darkened %d images (d_max %d, seed %d) into %s",
            len(dataset.images),
            args.darken,
            seed,
            args.out,
        )
        return {
            "images": len(dataset.images),
            "darken": args.darken,
            "random": True,
            "seed": seed,
            "manifest": os.path.join(args.out, MANIFEST_FILENAME),
            "out": args.out,
        }
    dataset = darken_dataset_static(
        dataset_dir, args.darken, args.out, dataset_filename, images_root
    )
    log.info(
        "darkened %d images by %d%% into %s", len(dataset.images), args.darken, args.out
    )
    return {
        "images": len(dataset.images),
        "darken": args.darken,
        "random": False,
        "out": args.out,
    }


def _detector_from_config(obj: dict, seed: int, jitter_px: int):
    if not isinstance(obj, dict):
        raise ValueError("detector config must be a JSON object")
    if "command" in obj:
        extra = set(obj) - {"command"}
        if extra:
            raise ValueError(f"unexpected detector config keys: {sorted(extra)}")
        if not isinstance(obj["command"], str) or not obj["command"].strip():
            raise ValueError("detector command must be a non-empty string")
        return obj["command"]
    known = {"brightness_floor", "brightness_ref", "jitter_px", "seed"}
    extra = set(obj) - known
    if extra:
        raise ValueError(f"unexpected detector config keys: {sorted(extra)}")
    return MockDetectorConfig(
        brightness_floor=float(obj.get("brightness_floor", 40.0)),
        brightness_ref=float(obj.get("brightness_ref", 120.0)),
        jitter_px=int(obj.get("jitter_px", jitter_px)),
        seed=int(obj.get("seed", seed)),
    )


def _cmd_sweep_darken(args: argparse.Namespace) -> dict:
    dataset_dir, dataset_filename, images_root = _split_dataset_path(args)
    seed = _resolve_seed(args)
    eval_cfg = _eval_config(args)
    if args.config:
        detector = _detector_from_config(_read_json(args.config), seed, args.jitter_px)
    else:
        detector = MockDetectorConfig(seed=seed, jitter_px=args.jitter_px)
    table = darkening_sweep(
        dataset_dir,
        args.levels,
        detector,
        eval_cfg,
        args.out,
        dataset_filename,
        images_root,
    )
    failed = sum(1 for r in table.rows if r.failed)
    log.info(
        "swept %d darkening levels (%d failed) into %s", len(table.rows), failed, args.out
    )
    return {
        "levels": len(table.rows),
        "failed": failed,
        "map50_by_level": {str(r.level): r.map50 for r in table.rows},
        "curve_csv": os.path.join(args.out, "curve.csv"),
        "out": args.out,
    }


def _cmd_evaluate(args: argparse.Namespace) -> dict:
    dataset = _read_dataset(args.dataset)
    preds = _read_predictions(args.predictions[0], dataset)
    report = evaluate(dataset, preds, _eval_config(args))
    if args.out:
        _write_canonical(os.path.join(args.out, "report.json"), report.to_json_obj())
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as f:
            f.write(report.to_csv())
    log.info(
        "evaluated %d predictions against %d annotations (%s, %s)",
        len(preds),
        len(dataset.annotations),
        report.mode,
        report.grouping,
    )
    return {
        "map50": report.map50,
        "mean_ap": {f"{t:g}": m for t, m in report.mean_ap},
        "groups": len({g.group for g in report.groups}),
        "mode": report.mode,
        "grouping": report.grouping,
    }


def _cmd_stability(args: argparse.Namespace) -> dict:
    if len(args.predictions) != 2:
        raise UsageError("stability needs exactly two --predictions files")
    dataset = _read_dataset(args.dataset)
    a = _read_predictions(args.predictions[0], dataset)
    b = _read_predictions(args.predictions[1], dataset)
    report = stability_compare(a, b, dataset, iou_floor=args.iou[0])
    if args.out:
        _write_canonical(os.path.join(args.out, "stability.json"), report.to_json_obj())
    log.info(
        "stability over %d vs %d predictions: matched %.4f",
        len(a),
        len(b),
        report.matched_fraction,
    )
    return {
        "matched_fraction": report.matched_fraction,
        "mean_matched_iou": report.mean_matched_iou,
        "a_count": len(a),
        "b_count": len(b),
    }


def _cmd_grid_expand(args: argparse.Namespace) -> dict:
    obj = _read_json(args.config)
    if not isinstance(obj, dict) or "params" not in obj or "command_template" not in obj:
        raise ValueError("grid config needs 'params' and 'command_template'")
    grid = GridSpec(
        params={str(k): tuple(v) for k, v in obj["params"].items()},
        command_template=str(obj["command_template"]),
        metric_path_template=str(obj.get("metric_path_template", DEFAULT_METRIC_PATH)),
    )
    manifest = expand_grid(grid, args.out)
    path = os.path.join(args.out, "manifest.json")
    _write_canonical(path, manifest.to_json_obj())
    log.info("expanded %d runs into %s", len(manifest.runs), path)
    return {"runs": len(manifest.runs), "manifest": path, "out": args.out}


def _cmd_grid_collect(args: argparse.Namespace) -> dict:
    manifest = manifest_from_json_obj(_read_json(args.config))
    table = collect_results(manifest)
    path = os.path.join(args.out, "results.json")
    _write_canonical(path, table.to_json_obj())
    failed = sum(1 for r in table.rows if r.failed)
    summary = {
        "runs": len(table.rows),
        "failed": failed,
        "results": path,
        "out": args.out,
    }
    if args.metric:
        best = select_best(table, args.metric, args.direction)
        row = next(r for r in table.rows if r.run.run_id == best.run_id)
        summary["best_run_id"] = best.run_id
        summary["best_params"] = dict(best.params)
        summary["best_value"] = row.metrics[args.metric]
    log.info("collected %d runs (%d failed) into %s", len(table.rows), failed, path)
    return summary


def _cmd_mock_detect(args: argparse.Namespace) -> dict:
    dataset = _read_dataset(args.dataset)
    _, _, images_root = _split_dataset_path(args)
    seed = _resolve_seed(args)
    if args.config:
        cfg = _detector_from_config(_read_json(args.config), seed, args.jitter_px)
        if not isinstance(cfg, MockDetectorConfig):
            raise ValueError("mock-detect config must not carry an external command")
    else:
        cfg = MockDetectorConfig(seed=seed, jitter_px=args.jitter_px)
    preds = mock_detect(dataset, images_root, cfg)
    path = os.path.join(args.out, PREDICTIONS_FILENAME)
    os.makedirs(args.out, exist_ok=True)
    with open(path, "wb") as f:
        f.write(serialize_predictions(preds))
    log.info("mock-detected %d instances into %s", len(preds), path)
    return {"predictions": len(preds), "seed": cfg.seed, "out": args.out}


def _cmd_merge(args: argparse.Namespace) -> dict:
    if len(args.dataset) < 2:
        raise UsageError("merge needs at least two --dataset files")
    merged = functools.reduce(
        merge_datasets, (_read_dataset(p) for p in args.dataset)
    )
    path = os.path.join(args.out, DATASET_FILENAME)
    os.makedirs(args.out, exist_ok=True)
    with open(path, "wb") as f:
        f.write(serialize_dataset(merged))
    log.info("merged %d datasets into %s", len(args.dataset), path)
    return {
        "images": len(merged.images),
        "annotations": len(merged.annotations),
        "categories": len(merged.categories),
        "out": args.out,
    }


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--iou",
        type=_float_list,
        default=[0.5],
        help="comma-separated IoU acceptance thresholds (default 0.5)",
    )
    p.add_argument(
        "--mode", choices=MODES, default="mask", help="overlap measure (default mask)"
    )
    p.add_argument(
        "--grouping",
        choices=GROUPINGS,
        default="by_class",
        help="AP grouping axis (default by_class)",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="palletbench",
        description="Synthetic pallet dataset generation, degradation, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="lint a dataset JSON file")
    p.add_argument("--dataset", required=True, help="dataset JSON file")
    p.add_argument("--images-root", help="check image files exist under this directory")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("generate", help="draw randomised scene descriptions")
    p.add_argument("--config", required=True, help="randomisation config JSON")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("export", help="generate, render, and annotate a dataset")
    p.add_argument("--config", required=True, help="randomisation config JSON")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument(
        "--min-visibility",
        type=float,
        default=0.05,
        help="drop instances with a smaller visible fraction (default 0.05)",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("darken", help="write a brightness-reduced dataset copy")
    p.add_argument("--dataset", required=True, help="dataset JSON file")
    p.add_argument(
        "--images-root", help="image directory (default: the dataset file's directory)"
    )
    p.add_argument(
        "--darken",
        type=int,
        required=True,
        help="darkening percent; with --random, the maximum percent",
    )
    p.add_argument(
        "--random",
        action="store_true",
        help="draw a per-image darkening percent in [0, --darken]",
    )
    p.add_argument("--seed", type=int, default=0, help="master seed for --random")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_darken)

    p = sub.add_parser(
        "sweep-darken", help="evaluate a detector across static darkening levels"
    )
    p.add_argument("--dataset", required=True, help="dataset JSON file")
    p.add_argument(
        "--images-root", help="image directory (default: the dataset file's directory)"
    )
    p.add_argument(
        "--levels", type=_int_list, required=True, help="comma-separated percents"
    )
    p.add_argument("--seed", type=int, default=0, help="mock detector seed (default 0)")
    p.add_argument(
        "--jitter-px", type=int, default=0, help="mock detector mask jitter in pixels"
    )
    p.add_argument(
        "--config",
        help="detector config JSON: mock parameters, or {\"command\": ...} for an "
        "external detector invoked per level",
    )
    _add_eval_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_sweep_darken)

    p = sub.add_parser("evaluate", help="score predictions against a dataset")
    p.add_argument("--dataset", required=True, help="dataset JSON file")
    p.add_argument(
        "--predictions", required=True, action="append", help="predictions JSON file"
    )
    _add_eval_flags(p)
    p.add_argument("--out", help="also write report.json and report.csv here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser(
        "stability", help="measure agreement between two prediction sets"
    )
    p.add_argument("--dataset", required=True, help="dataset JSON file")
    p.add_argument(
        "--predictions",
        required=True,
        action="append",
        help="predictions JSON file (give exactly twice)",
    )
    p.add_argument(
        "--iou",
        type=_float_list,
        default=[0.5],
        help="minimum mask IoU for two predictions to count as matched",
    )
    p.add_argument("--out", help="also write stability.json here")
    p.set_defaults(func=_cmd_stability)

    p = sub.add_parser("grid-expand", help="expand a parameter grid into a run manifest")
    p.add_argument("--config", required=True, help="grid config JSON")
    p.add_argument("--out", required=True, help="root directory for run dirs")
    p.set_defaults(func=_cmd_grid_expand)

    p = sub.add_parser("grid-collect", help="collect per-run metrics into one table")
    p.add_argument("--config", required=True, help="run manifest JSON")
    p.add_argument("--metric", help="also report the best run by this metric")
    p.add_argument(
        "--direction",
        choices=("maximize", "minimize"),
        default="maximize",
        help="sense of --metric (default maximize)",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_grid_collect)

    p = sub.add_parser(
        "mock-detect", help="run the brightness-driven mock detector"
    )
    p.add_argument("--dataset", required=True, help="dataset JSON file")
    p.add_argument(
        "--images-root", help="image directory (default: the dataset file's directory)"
    )
    p.add_argument("--seed", type=int, default=0, help="detector seed (default 0)")
    p.add_argument(
        "--jitter-px", type=int, default=0, help="translate emitted masks by this much"
    )
    p.add_argument("--config", help="mock detector parameter JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_mock_detect)

    p = sub.add_parser("merge", help="merge datasets, unifying categories by name")
    p.add_argument(
        "--dataset",
        required=True,
        action="append",
        help="dataset JSON file (give two or more)",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_merge)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    try:
        summary = args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        log.error("%s", e)
        return 1
    print(json.dumps(summary, sort_keys=True, separators=(",", ":")))
    return 0


if __name__ == "__main__":
    sys.exit(main())
