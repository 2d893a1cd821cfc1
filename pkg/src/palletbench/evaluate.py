"""COCO-style evaluation: greedy matching, 101-point interpolated AP,
mAP50, grouped by class, by pallet arrangement, or both.

Matching is per image and category: detections in descending score order
(ties by insertion order) greedily claim the unmatched ground-truth
instance with the highest IoU, scoring a true positive iff that IoU
reaches the threshold; a sub-threshold best match claims nothing.

Grouping follows the ground truth. A true positive joins its matched GT's
group; an unmatched detection is charged to every group of its category
that holds at least one GT instance (the conservative choice, recorded in
report output). Groups with zero GT are never scored and never pull the
mean down.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass

from .coco import (
    Annotation,
    Dataset,
    PredictedInstance,
    PredictionFormatError,
    PredictionSet,
)
from .maskgeom import bbox_iou, mask_iou, segmentation_to_bbox, segmentation_to_mask

MODES = ("mask", "bbox")
GROUPINGS = ("by_class", "by_arrangement", "by_class_and_arrangement")
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

FP_ATTRIBUTION_NOTE = (
    "unmatched detections are charged to every group of their category "
    "that contains ground truth"
)


class EmptyGroupError(ValueError):
    """AP requested for a group without ground truth."""


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.5,)
    mode: str = "mask"
    grouping: str = "by_class"
    max_detections_per_image: int = 100

    def __post_init__(self):
        if not self.iou_thresholds:
            raise ValueError("need at least one IoU threshold")
        if any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if any(
            a >= b for a, b in zip(self.iou_thresholds, self.iou_thresholds[1:])
        ):
            raise ValueError("IoU thresholds must be strictly increasing")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.grouping not in GROUPINGS:
            raise ValueError(f"grouping must be one of {GROUPINGS}")
        if self.max_detections_per_image < 1:
            raise ValueError("max_detections_per_image must be >= 1")


@dataclass(frozen=True)
class DetectionMatch:
    score: float
    order: int  # insertion index of the prediction, the global tie-breaker
    is_tp: bool
    gt_ann_id: int | None


@dataclass(frozen=True)
class MatchSlice:
    matches: tuple[DetectionMatch, ...]
    gt_count: int


def _pairwise_iou(
    gt: list[Annotation],
    det: list[PredictedInstance],
    mode: str,
    width: int,
    height: int,
) -> np.ndarray:
    if mode == "mask":
        gt_masks = [segmentation_to_mask(a.segmentation, width, height) for a in gt]
        det_masks = [segmentation_to_mask(p.segmentation, width, height) for p in det]
        return np.asarray(
            [[mask_iou(dm, gm) for gm in gt_masks] for dm in det_masks]
        ).reshape(len(det), len(gt))
    gt_boxes = [a.bbox for a in gt]
    det_boxes = [segmentation_to_bbox(p.segmentation) for p in det]
    return np.asarray(
        [[bbox_iou(db, gb) for gb in gt_boxes] for db in det_boxes]
    ).reshape(len(det), len(gt))


def match_instances(
    gt: list[Annotation],
    det: list[tuple[int, PredictedInstance]],
    threshold: float,
    mode: str,
    width: int,
    height: int,
    max_detections: int = 100,
) -> MatchSlice:
    """Match one image/category group at one threshold.

    det carries (insertion order, prediction) pairs; gt order is the GT
    tie-breaker when IoUs are equal.
    """
    ordered = sorted(det, key=lambda item: (-item[1].score, item[0]))[:max_detections]
    iou = _pairwise_iou(gt, [p for _, p in ordered], mode, width, height)
    taken = [False] * len(gt)
    out = []
    for row, (order, pred) in enumerate(ordered):
        best_gt, best_iou = None, 0.0
        for col, ann in enumerate(gt):
            if taken[col]:
                continue
            if iou[row, col] > best_iou:
                best_gt, best_iou = col, iou[row, col]
        if best_gt is not None and best_iou >= threshold:
            taken[best_gt] = True
            out.append(
                DetectionMatch(
                    score=pred.score, order=order, is_tp=True, gt_ann_id=gt[best_gt].id
                )
            )
        else:
            out.append(
                DetectionMatch(score=pred.score, order=order, is_tp=False, gt_ann_id=None)
            )
    return MatchSlice(matches=tuple(out), gt_count=len(gt))


def average_precision(
    matches: list[DetectionMatch], gt_count: int
) -> tuple[float, tuple[float, ...]]:
    """101-point interpolated AP and the interpolated precision curve.

    Precision is interpolated as p(r) = max precision at recall >= r and
    sampled at recalls {0.00, 0.01, ..., 1.00}.
    """
    if gt_count < 1:
        raise EmptyGroupError("average precision needs at least one GT instance")
    ordered = sorted(matches, key=lambda m: (-m.score, m.order))
    if not ordered:
        curve = tuple(0.0 for _ in RECALL_POINTS)
        return 0.0, curve
    tp = np.cumsum([1 if m.is_tp else 0 for m in ordered])
    recall = tp / gt_count
    precision = tp / np.arange(1, len(ordered) + 1)
    # running max from the right: best precision at or beyond each point
    suffix_best = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    curve = np.where(idx < len(ordered), suffix_best[np.minimum(idx, len(ordered) - 1)], 0.0)
    return float(curve.mean()), tuple(float(p) for p in curve)


@dataclass(frozen=True)
class GroupEval:
    group: str
    threshold: float
    ap: float
    gt_count: int
    precision_curve: tuple[float, ...]


@dataclass(frozen=True)
class EvalReport:
    mode: str
    grouping: str
    groups: tuple[GroupEval, ...]
    mean_ap: tuple[tuple[float, float], ...]  # (threshold, mAP)
    map50: float | None

    def group_ap(self, group: str, threshold: float) -> float:
        for g in self.groups:
            if g.group == group and g.threshold == threshold:
                return g.ap
        raise KeyError((group, threshold))

    def to_json_obj(self) -> dict:
        return {
            "mode": self.mode,
            "grouping": self.grouping,
            "fp_attribution": FP_ATTRIBUTION_NOTE,
            "groups": [
                {
                    "group": g.group,
                    "threshold": g.threshold,
                    "ap": g.ap,
                    "gt_count": g.gt_count,
                    "precision_curve": list(g.precision_curve),
                }
                for g in self.groups
            ],
            "mean_ap": [
                {"threshold": t, "map": m} for t, m in self.mean_ap
            ],
            "map50": self.map50,
        }

    def to_csv(self) -> str:
        lines = ["group,threshold,ap,gt_count"]
        for g in self.groups:
            lines.append(f"{g.group},{g.threshold:g},{g.ap:.6f},{g.gt_count}")
        return "\n".join(lines) + "\n"


def _group_key(category_name: str, arrangement: str, grouping: str) -> str:
    if grouping == "by_class":
        return category_name
    if grouping == "by_arrangement":
        return arrangement
    return f"{category_name}/{arrangement}"


def _check_predictions(d: Dataset, p: PredictionSet) -> None:
    image_ids = {im.id for im in d.images}
    category_ids = {c.id for c in d.categories}
    for k, pred in enumerate(p):
        if pred.image_id not in image_ids:
            raise PredictionFormatError(
                "UNKNOWN_IMAGE_ID", f"prediction {k}: image {pred.image_id}"
            )
        if pred.category_id not in category_ids:
            raise PredictionFormatError(
                "UNKNOWN_CATEGORY_ID", f"prediction {k}: category {pred.category_id}"
            )
        if not 0.0 <= pred.score <= 1.0:
            raise PredictionFormatError(
                "SCORE_RANGE", f"prediction {k}: score {pred.score}"
            )


def evaluate(d: Dataset, p: PredictionSet, cfg: EvalConfig) -> EvalReport:
    """Score predictions against a dataset per the config's grouping."""
    _check_predictions(d, p)
    images = d.images_by_id()
    categories = d.categories_by_id()

    gt_by_slot: dict[tuple[int, int], list[Annotation]] = {}
    for ann in d.annotations:
        gt_by_slot.setdefault((ann.image_id, ann.category_id), []).append(ann)
    det_by_slot: dict[tuple[int, int], list[tuple[int, PredictedInstance]]] = {}
    for order, pred in enumerate(p):
        det_by_slot.setdefault((pred.image_id, pred.category_id), []).append(
            (order, pred)
        )

    group_gt_counts: dict[str, int] = {}
    groups_of_category: dict[int, set[str]] = {}
    gt_group: dict[int, str] = {}
    for ann in d.annotations:
        if ann.category_id not in categories or ann.image_id not in images:
            raise ValueError(
                f"annotation {ann.id} has dangling references; "
                "validate the dataset before evaluating"
            )
        key = _group_key(
            categories[ann.category_id].name, ann.arrangement, cfg.grouping
        )
        group_gt_counts[key] = group_gt_counts.get(key, 0) + 1
        groups_of_category.setdefault(ann.category_id, set()).add(key)
        gt_group[ann.id] = key

    group_matches: dict[tuple[str, float], list[DetectionMatch]] = {}
    for slot in sorted(set(gt_by_slot) | set(det_by_slot)):
        image_id, category_id = slot
        gt = gt_by_slot.get(slot, [])
        det = det_by_slot.get(slot, [])
        if not det:
            continue
        image = images[image_id]
        fp_groups = sorted(groups_of_category.get(category_id, ()))
        for threshold in cfg.iou_thresholds:
            result = match_instances(
                gt,
                det,
                threshold,
                cfg.mode,
                image.width,
                image.height,
                cfg.max_detections_per_image,
            )
            for m in result.matches:
                targets = [gt_group[m.gt_ann_id]] if m.is_tp else fp_groups
                for g in targets:
                    group_matches.setdefault((g, threshold), []).append(m)

    group_evals = []
    for group in sorted(group_gt_counts):
        for threshold in cfg.iou_thresholds:
            ap, curve = average_precision(
                group_matches.get((group, threshold), []), group_gt_counts[group]
            )
            group_evals.append(
                GroupEval(
                    group=group,
                    threshold=threshold,
                    ap=ap,
                    gt_count=group_gt_counts[group],
                    precision_curve=curve,
                )
            )

    mean_ap = []
    for threshold in cfg.iou_thresholds:
        aps = [g.ap for g in group_evals if g.threshold == threshold]
        mean_ap.append((threshold, float(np.mean(aps)) if aps else 0.0))
    map50 = next((m for t, m in mean_ap if t == 0.5), None)
    return EvalReport(
        mode=cfg.mode,
        grouping=cfg.grouping,
        groups=tuple(group_evals),
        mean_ap=tuple(mean_ap),
        map50=map50,
    )


@dataclass(frozen=True)
class ImageStability:
    image_id: int
    a_count: int
    b_count: int
    matched: int
    mean_iou: float


@dataclass(frozen=True)
class StabilityReport:
    matched_fraction: float
    mean_matched_iou: float
    per_image: tuple[ImageStability, ...]

    def to_json_obj(self) -> dict:
        return {
            "matched_fraction": self.matched_fraction,
            "mean_matched_iou": self.mean_matched_iou,
            "per_image": [
                {
                    "image_id": s.image_id,
                    "a_count": s.a_count,
                    "b_count": s.b_count,
                    "matched": s.matched,
                    "mean_iou": s.mean_iou,
                }
                for s in self.per_image
            ],
        }


def stability_compare(
    a: PredictionSet, b: PredictionSet, d: Dataset, iou_floor: float = 0.5
) -> StabilityReport:
    """Measure how far two prediction sets over the same dataset agree.

    Per image and category, a's instances (descending score) greedily claim
    b's unmatched instance of highest mask IoU; pairs at or above iou_floor
    count as matched. Two empty sets agree perfectly by definition.
    """
    _check_predictions(d, a)
    _check_predictions(d, b)
    images = d.images_by_id()

    def slots(preds):
        by: dict[tuple[int, int], list[tuple[int, PredictedInstance]]] = {}
        for order, pred in enumerate(preds):
            by.setdefault((pred.image_id, pred.category_id), []).append((order, pred))
        return by

    a_slots, b_slots = slots(a), slots(b)
    per_image: dict[int, list[int]] = {}  # image -> [a, b, matched]
    iou_sum = 0.0
    matched_total = 0
    for slot in sorted(set(a_slots) | set(b_slots)):
        image_id, _ = slot
        image = images[image_id]
        a_list = sorted(a_slots.get(slot, []), key=lambda t: (-t[1].score, t[0]))
        b_list = b_slots.get(slot, [])
        stats = per_image.setdefault(image_id, [0, 0, 0, 0.0])
        stats[0] += len(a_list)
        stats[1] += len(b_list)
        if not a_list or not b_list:
            continue
        b_masks = [
            segmentation_to_mask(p.segmentation, image.width, image.height)
            for _, p in b_list
        ]
        taken = [False] * len(b_list)
        for _, pred in a_list:
            mask = segmentation_to_mask(pred.segmentation, image.width, image.height)
            best, best_iou = None, 0.0
            for col, bm in enumerate(b_masks):
                if taken[col]:
                    continue
                v = mask_iou(mask, bm)
                if v > best_iou:
                    best, best_iou = col, v
            if best is not None and best_iou >= iou_floor:
                taken[best] = True
                stats[2] += 1
                stats[3] += best_iou
                matched_total += 1
                iou_sum += best_iou

    details = []
    for image_id in sorted(per_image):
        a_n, b_n, m, s = per_image[image_id]
        details.append(
            ImageStability(
                image_id=image_id,
                a_count=a_n,
                b_count=b_n,
                matched=m,
                mean_iou=s / m if m else (1.0 if a_n == b_n == 0 else 0.0),
            )
        )
    denom = max(len(a), len(b))
    if denom == 0:
        return StabilityReport(1.0, 1.0, tuple(details))
    return StabilityReport(
        matched_fraction=matched_total / denom,
        mean_matched_iou=iou_sum / matched_total if matched_total else 0.0,
        per_image=tuple(details),
    )
