"""Experiment orchestration: grid expansion over external commands, result
collection, a brightness-sensitive mock detector, and the darkening-sweep
harness.

External trainers and detectors are opaque argv commands; templates are
split on whitespace and placeholders substituted per token, so no shell is
ever involved. A detector command receives {dataset_dir} and {run_dir} and
must leave predictions.json in the run dir; a grid run's metrics land at
its metric path as a flat JSON object of numbers. Missing or corrupt
outputs mark the run FAILED and the sweep or collection carries on.

The mock detector stands in for a trained model: per image it computes a
detection probability q from mean brightness (0 at brightness_floor, 1 at
brightness_ref) and re-emits each GT instance with probability q, drawing
from a stream keyed by (seed, annotation id) so emissions at a harsher
darkening level are always a subset of those at a milder one. Its masks
are the GT masks, optionally translated by jitter_px; its published score
is q scaled into [q/2, q].
"""

from __future__ import annotations

import itertools
import json
import os
import string
import subprocess
from dataclasses import dataclass

from .coco import (
    Dataset,
    PredictedInstance,
    PredictionSet,
    canonical_json_bytes,
    parse_dataset,
    parse_predictions,
    serialize_predictions,
)
from .evaluate import EvalConfig, EvalReport, evaluate
from .maskgeom import rle_encode, segmentation_to_mask, shift_mask
from .photometric import (
    DATASET_FILENAME,
    darken_dataset_static,
    load_image,
    mean_brightness,
)
from .rng import SplitMix64, derive_seed

PREDICTIONS_FILENAME = "predictions.json"
DEFAULT_METRIC_PATH = "{run_dir}/metrics.json"

# jitter directions in stream-draw order: right, left, down, up
_JITTER_DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class GridSpecError(ValueError):
    """Grid definition is unusable."""


class NoValidRuns(ValueError):
    """Every run failed or lacks the requested metric."""


@dataclass(frozen=True)
class GridSpec:
    params: dict[str, tuple]
    command_template: str
    metric_path_template: str = DEFAULT_METRIC_PATH

    def validate(self) -> None:
        if not self.params:
            raise GridSpecError("grid needs at least one parameter")
        for name, values in self.params.items():
            if not values:
                raise GridSpecError(f"parameter {name!r} has no values")
        allowed = set(self.params) | {"run_dir"}
        for template in (self.command_template, self.metric_path_template):
            for _, field_name, _, _ in string.Formatter().parse(template):
                if field_name is None:
                    continue
                if field_name not in allowed:
                    raise GridSpecError(
                        f"template references undeclared parameter {field_name!r}"
                    )


@dataclass(frozen=True)
class RunConfig:
    run_id: int
    params: dict[str, object]
    command: tuple[str, ...]
    run_dir: str
    metric_path: str


@dataclass(frozen=True)
class RunManifest:
    runs: tuple[RunConfig, ...]

    def to_json_obj(self) -> dict:
        return {
            "runs": [
                {
                    "run_id": r.run_id,
                    "params": dict(r.params),
                    "command": list(r.command),
                    "run_dir": r.run_dir,
                    "metric_path": r.metric_path,
                }
                for r in self.runs
            ]
        }


def manifest_from_json_obj(obj: dict) -> RunManifest:
    runs = []
    for r in obj["runs"]:
        runs.append(
            RunConfig(
                run_id=int(r["run_id"]),
                params=dict(r["params"]),
                command=tuple(str(t) for t in r["command"]),
                run_dir=str(r["run_dir"]),
                metric_path=str(r["metric_path"]),
            )
        )
    return RunManifest(runs=tuple(runs))


def render_command(template: str, mapping: dict[str, object]) -> tuple[str, ...]:
    """Split on whitespace and substitute placeholders per token; the result
    is an argv list, never a shell string."""
    try:
        return tuple(token.format_map(mapping) for token in template.split())
    except KeyError as e:
        raise GridSpecError(f"template references undeclared parameter {e}") from e
    except (IndexError, ValueError) as e:
        raise GridSpecError(f"unusable template: {e}") from e


def expand_grid(g: GridSpec, out_root: str | os.PathLike) -> RunManifest:
    """Cartesian product in lexicographic parameter-name order, values in
    their given order; run ids dense from 0."""
    g.validate()
    out_root = os.fspath(out_root)
    names = sorted(g.params)
    runs = []
    for run_id, combo in enumerate(itertools.product(*(g.params[n] for n in names))):
        params = dict(zip(names, combo))
        run_dir = os.path.join(out_root, f"run_{run_id:04d}")
        mapping = {**params, "run_dir": run_dir}
        runs.append(
            RunConfig(
                run_id=run_id,
                params=params,
                command=render_command(g.command_template, mapping),
                run_dir=run_dir,
                metric_path=g.metric_path_template.format_map(mapping),
            )
        )
    return RunManifest(runs=tuple(runs))


@dataclass(frozen=True)
class ResultRow:
    run: RunConfig
    metrics: dict[str, float] | None
    failed: bool
    note: str = ""


@dataclass(frozen=True)
class ResultsTable:
    rows: tuple[ResultRow, ...]

    def to_json_obj(self) -> dict:
        return {
            "rows": [
                {
                    "run_id": r.run.run_id,
                    "params": dict(r.run.params),
                    "metrics": r.metrics,
                    "failed": r.failed,
                    "note": r.note,
                }
                for r in self.rows
            ]
        }


def _read_metrics(path: str) -> dict[str, float]:
    with open(path, "rb") as f:
        obj = json.loads(f.read().decode("utf-8"))
    if not isinstance(obj, dict):
        raise ValueError("metric file must hold a JSON object")
    out = {}
    for key, value in obj.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"metric {key!r} is not a number")
        out[str(key)] = float(value)
    return out


def collect_results(m: RunManifest) -> ResultsTable:
    """One row per run; unreadable metric files become FAILED rows, never
    exceptions."""
    rows = []
    for run in m.runs:
        try:
            metrics = _read_metrics(run.metric_path)
        except (OSError, ValueError) as e:
            rows.append(ResultRow(run=run, metrics=None, failed=True, note=str(e)))
            continue
        rows.append(ResultRow(run=run, metrics=metrics, failed=False))
    return ResultsTable(rows=tuple(rows))


def select_best(
    t: ResultsTable, metric_name: str, direction: str = "maximize"
) -> RunConfig:
    """Best run by the metric; ties go to the lowest run id."""
    if direction not in ("maximize", "minimize"):
        raise ValueError("direction must be maximize or minimize")
    candidates = [
        (r.metrics[metric_name], r.run)
        for r in t.rows
        if not r.failed and r.metrics is not None and metric_name in r.metrics
    ]
    if not candidates:
        raise NoValidRuns(f"no successful run carries metric {metric_name!r}")
    sign = -1.0 if direction == "maximize" else 1.0
    return min(candidates, key=lambda c: (sign * c[0], c[1].run_id))[1]


@dataclass(frozen=True)
class MockDetectorConfig:
    brightness_floor: float = 40.0
    brightness_ref: float = 120.0
    jitter_px: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.brightness_floor < self.brightness_ref:
            raise ValueError("brightness_floor must be below brightness_ref")
        if self.jitter_px < 0:
            raise ValueError("jitter_px must be >= 0")


def mock_detect(
    d: Dataset, images_root: str | os.PathLike, cfg: MockDetectorConfig
) -> PredictionSet:
    """Re-emit GT instances with a probability driven by image brightness.

    Per annotation, a stream seeded by (cfg.seed, annotation id) draws the
    emission variate, the jitter direction, and the score modulation, in
    that order. The emission variate does not depend on the image, so
    darkening an image can only remove emissions, never add or reshuffle
    them.
    """
    images_root = os.fspath(images_root)
    by_image: dict[int, list] = {}
    for ann in d.annotations:
        by_image.setdefault(ann.image_id, []).append(ann)
    span = cfg.brightness_ref - cfg.brightness_floor
    preds: PredictionSet = []
    for im in d.images:
        pixels = load_image(os.path.join(images_root, im.file_name))
        q = (mean_brightness(pixels) - cfg.brightness_floor) / span
        q = min(1.0, max(0.0, q))
        for ann in by_image.get(im.id, []):
            rng = SplitMix64(derive_seed(cfg.seed, ann.id))
            if rng.next_float() >= q:
                continue
            dx, dy = _JITTER_DIRECTIONS[rng.next_below(4)]
            score = q * (0.5 + 0.5 * rng.next_float())
            mask = segmentation_to_mask(ann.segmentation, im.width, im.height)
            if cfg.jitter_px:
                mask = shift_mask(mask, dx * cfg.jitter_px, dy * cfg.jitter_px)
            preds.append(
                PredictedInstance(
                    image_id=im.id,
                    category_id=ann.category_id,
                    segmentation=rle_encode(mask),
                    score=score,
                )
            )
    return preds


@dataclass(frozen=True)
class CurveRow:
    level: int
    map50: float | None
    group_aps: dict[str, float]
    failed: bool
    note: str = ""


@dataclass(frozen=True)
class CurveTable:
    rows: tuple[CurveRow, ...]

    def group_names(self) -> list[str]:
        names: set[str] = set()
        for row in self.rows:
            names.update(row.group_aps)
        return sorted(names)

    def to_csv(self) -> str:
        groups = self.group_names()
        lines = [",".join(["darkening_percent", "map50"] + groups)]
        for row in self.rows:
            if row.failed:
                cells = [str(row.level), "FAILED"] + ["" for _ in groups]
            else:
                cells = [str(row.level), f"{row.map50:.6f}"]
                cells += [
                    f"{row.group_aps[g]:.6f}" if g in row.group_aps else ""
                    for g in groups
                ]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json_obj(self) -> dict:
        return {
            "rows": [
                {
                    "darkening_percent": r.level,
                    "map50": r.map50,
                    "group_aps": dict(sorted(r.group_aps.items())),
                    "failed": r.failed,
                    "note": r.note,
                }
                for r in self.rows
            ]
        }


def _sweep_predictions(
    detector: MockDetectorConfig | str, dataset: Dataset, variant_dir: str
) -> PredictionSet:
    if isinstance(detector, MockDetectorConfig):
        preds = mock_detect(dataset, variant_dir, detector)
        with open(os.path.join(variant_dir, PREDICTIONS_FILENAME), "wb") as f:
            f.write(serialize_predictions(preds))
        return preds
    argv = render_command(
        detector, {"dataset_dir": variant_dir, "run_dir": variant_dir}
    )
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"detector command exited {proc.returncode}: {proc.stderr.strip()[:500]}"
        )
    with open(os.path.join(variant_dir, PREDICTIONS_FILENAME), "rb") as f:
        return parse_predictions(f.read(), dataset)


def darkening_sweep(
    dataset_dir: str | os.PathLike,
    levels: list[int],
    detector: MockDetectorConfig | str,
    eval_cfg: EvalConfig,
    out_dir: str | os.PathLike,
    dataset_filename: str = DATASET_FILENAME,
    images_root: str | os.PathLike | None = None,
) -> CurveTable:
    """Evaluate the detector against statically darkened dataset variants.

    Each level materialises a darkened copy under out_dir, runs the
    detector on it, and records mAP50 plus per-group AP. A failing level
    becomes a FAILED row and the sweep continues. Writes curve.csv and
    curve.json beside the variants.
    """
    if not levels:
        raise ValueError("need at least one darkening level")
    if any(not 0 <= d <= 100 for d in levels):
        raise ValueError("darkening levels must lie in [0, 100]")
    if any(a >= b for a, b in zip(levels, levels[1:])):
        raise ValueError("darkening levels must be strictly increasing")
    dataset_dir = os.fspath(dataset_dir)
    out_dir = os.fspath(out_dir)
    threshold = 0.5 if 0.5 in eval_cfg.iou_thresholds else eval_cfg.iou_thresholds[0]

    rows = []
    for level in levels:
        variant_dir = os.path.join(out_dir, f"level_{level:03d}")
        try:
            dataset = darken_dataset_static(
                dataset_dir, level, variant_dir, dataset_filename, images_root
            )
            preds = _sweep_predictions(detector, dataset, variant_dir)
            report: EvalReport = evaluate(dataset, preds, eval_cfg)
        except Exception as e:  # a broken level must not kill the sweep
            rows.append(
                CurveRow(level=level, map50=None, group_aps={}, failed=True, note=str(e))
            )
            continue
        map50 = report.map50
        if map50 is None:
            map50 = dict(report.mean_ap)[threshold]
        rows.append(
            CurveRow(
                level=level,
                map50=map50,
                group_aps={
                    g.group: g.ap for g in report.groups if g.threshold == threshold
                },
                failed=False,
            )
        )

    table = CurveTable(rows=tuple(rows))
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "curve.csv"), "w", encoding="utf-8") as f:
        f.write(table.to_csv())
    with open(os.path.join(out_dir, "curve.json"), "wb") as f:
        f.write(canonical_json_bytes(table.to_json_obj()))
    return table
