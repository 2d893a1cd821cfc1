"""Dataset and prediction data model with JSON I/O, linting, and merging.

The wire format is a COCO-JSON subset: top-level ``images``, ``categories``
and ``annotations`` arrays, polygon or integer-list RLE segmentations, and a
separate predictions file holding a JSON array of scored instances.
Compressed-string RLE counts are rejected. Unknown fields are carried
through untouched so foreign files round-trip.

Serialisation is canonical: sorted keys, compact separators, floats rounded
to 6 decimals. Serialising the same dataset twice is byte-identical;
datasets whose floats carry more than 6 decimals lose the excess on the
wire.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

from .maskgeom import PolygonSet, Rle, Segmentation, polygon_area

ARRANGEMENTS = ("individual", "stacked", "racked", "unspecified")

DEFECT_CODES = (
    "DANGLING_IMAGE_REF",
    "DANGLING_CATEGORY_REF",
    "DUP_ID",
    "ODD_COORDS",
    "DEGENERATE_POLYGON",
    "BBOX_OUT_OF_BOUNDS",
    "AREA_MISMATCH",
    "RLE_LENGTH_MISMATCH",
    "MISSING_IMAGE_FILE",
)

AREA_MISMATCH_TOLERANCE = 0.05


class CocoFormatError(ValueError):
    """Dataset document violates the wire format."""


class PredictionFormatError(ValueError):
    """Prediction document violates the wire format; .code names the rule."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    name: str
    supercategory: str = ""
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    segmentation: Segmentation
    bbox: tuple[float, float, float, float]
    area: float
    iscrowd: int = 0
    arrangement: str = "unspecified"
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...]
    categories: tuple[CategoryRecord, ...]
    annotations: tuple[Annotation, ...]
    extra: dict[str, Any] = field(default_factory=dict)

    def images_by_id(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    def categories_by_id(self) -> dict[int, CategoryRecord]:
        return {c.id: c for c in self.categories}


@dataclass(frozen=True)
class PredictedInstance:
    image_id: int
    category_id: int
    segmentation: Segmentation
    score: float


PredictionSet = list[PredictedInstance]


@dataclass(frozen=True)
class Defect:
    code: str
    message: str
    ids: tuple[int, ...]


@dataclass(frozen=True)
class ValidationReport:
    defects: tuple[Defect, ...]

    @property
    def ok(self) -> bool:
        return not self.defects

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for d in self.defects:
            out[d.code] = out.get(d.code, 0) + 1
        return dict(sorted(out.items()))


def _require_int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise CocoFormatError(f"{what} must be an integer, got {value!r}")
    return value


def _require_number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CocoFormatError(f"{what} must be a number, got {value!r}")
    return float(value)


def segmentation_from_json(obj, what: str = "segmentation") -> Segmentation:
    """Decode a polygon list or an RLE object; strings are rejected."""
    if isinstance(obj, list):
        rings = []
        for k, ring in enumerate(obj):
            if not isinstance(ring, list):
                raise CocoFormatError(f"{what}: ring {k} is not a list")
            rings.append(
                tuple(_require_number(v, f"{what}: ring {k} coordinate") for v in ring)
            )
        return PolygonSet(rings=tuple(rings))
    if isinstance(obj, dict):
        size = obj.get("size")
        counts = obj.get("counts")
        if isinstance(counts, str):
            raise CocoFormatError(
                f"{what}: compressed RLE strings are not supported; "
                "counts must be a list of integers"
            )
        if (
            not isinstance(size, list)
            or len(size) != 2
            or not isinstance(counts, list)
        ):
            raise CocoFormatError(f"{what}: RLE needs size [h, w] and integer counts")
        h = _require_int(size[0], f"{what}: RLE height")
        w = _require_int(size[1], f"{what}: RLE width")
        vals = tuple(_require_int(c, f"{what}: RLE count") for c in counts)
        if any(c < 0 for c in vals):
            raise CocoFormatError(f"{what}: RLE counts must be non-negative")
        return Rle(size=(h, w), counts=vals)
    raise CocoFormatError(f"{what}: expected polygon list or RLE object")


def segmentation_to_json(seg: Segmentation):
    if isinstance(seg, PolygonSet):
        return [list(ring) for ring in seg.rings]
    return {"size": list(seg.size), "counts": list(seg.counts)}


def _parse_image(obj) -> ImageRecord:
    if not isinstance(obj, dict):
        raise CocoFormatError("image record is not an object")
    rest = dict(obj)
    rec = ImageRecord(
        id=_require_int(rest.pop("id", None), "image id"),
        file_name=str(rest.pop("file_name", "")),
        width=_require_int(rest.pop("width", None), "image width"),
        height=_require_int(rest.pop("height", None), "image height"),
        extra=rest,
    )
    if rec.width < 1 or rec.height < 1:
        raise CocoFormatError(f"image {rec.id}: non-positive dimensions")
    return rec


def _parse_category(obj) -> CategoryRecord:
    if not isinstance(obj, dict):
        raise CocoFormatError("category record is not an object")
    rest = dict(obj)
    rec = CategoryRecord(
        id=_require_int(rest.pop("id", None), "category id"),
        name=str(rest.pop("name", "")),
        supercategory=str(rest.pop("supercategory", "")),
        extra=rest,
    )
    if not rec.name:
        raise CocoFormatError(f"category {rec.id}: empty name")
    return rec


def _parse_annotation(obj) -> Annotation:
    if not isinstance(obj, dict):
        raise CocoFormatError("annotation record is not an object")
    rest = dict(obj)
    ann_id = _require_int(rest.pop("id", None), "annotation id")
    bbox_obj = rest.pop("bbox", None)
    if not isinstance(bbox_obj, list) or len(bbox_obj) != 4:
        raise CocoFormatError(f"annotation {ann_id}: bbox must be [x, y, w, h]")
    arrangement = rest.pop("arrangement", "unspecified")
    if arrangement not in ARRANGEMENTS:
        raise CocoFormatError(
            f"annotation {ann_id}: unknown arrangement {arrangement!r}"
        )
    return Annotation(
        id=ann_id,
        image_id=_require_int(rest.pop("image_id", None), "annotation image_id"),
        category_id=_require_int(
            rest.pop("category_id", None), "annotation category_id"
        ),
        segmentation=segmentation_from_json(
            rest.pop("segmentation", None), f"annotation {ann_id} segmentation"
        ),
        bbox=tuple(_require_number(v, f"annotation {ann_id} bbox") for v in bbox_obj),
        area=_require_number(rest.pop("area", None), f"annotation {ann_id} area"),
        iscrowd=_require_int(rest.pop("iscrowd", 0), f"annotation {ann_id} iscrowd"),
        arrangement=arrangement,
        extra=rest,
    )


def parse_dataset(data: bytes | str) -> Dataset:
    """Parse a dataset document; structural problems raise CocoFormatError,
    content problems (dangling refs, bad geometry) are left for validate_dataset.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"malformed JSON: {e}") from e
    if not isinstance(doc, dict):
        raise CocoFormatError("top level must be a JSON object")
    rest = dict(doc)
    arrays = {}
    for key in ("images", "categories", "annotations"):
        arr = rest.pop(key, None)
        if not isinstance(arr, list):
            raise CocoFormatError(f"missing or non-array top-level key {key!r}")
        arrays[key] = arr
    return Dataset(
        images=tuple(_parse_image(o) for o in arrays["images"]),
        categories=tuple(_parse_category(o) for o in arrays["categories"]),
        annotations=tuple(_parse_annotation(o) for o in arrays["annotations"]),
        extra=rest,
    )


def _round_floats(obj):
    if isinstance(obj, float):
        r = round(obj, 6)
        return 0.0 if r == 0 else r
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def canonical_json_bytes(obj) -> bytes:
    """Canonical encoding shared by every JSON artifact this package writes."""
    payload = json.dumps(
        _round_floats(obj),
        sort_keys=True,
        separators=(",", ":"),
        allow_nan=False,
    )
    return (payload + "\n").encode("utf-8")


def _image_to_json(im: ImageRecord) -> dict:
    out = dict(im.extra)
    out.update(
        id=im.id, file_name=im.file_name, width=im.width, height=im.height
    )
    return out


def _category_to_json(c: CategoryRecord) -> dict:
    out = dict(c.extra)
    out.update(id=c.id, name=c.name, supercategory=c.supercategory)
    return out


def _annotation_to_json(a: Annotation) -> dict:
    out = dict(a.extra)
    out.update(
        id=a.id,
        image_id=a.image_id,
        category_id=a.category_id,
        segmentation=segmentation_to_json(a.segmentation),
        bbox=list(a.bbox),
        area=a.area,
        iscrowd=a.iscrowd,
        arrangement=a.arrangement,
    )
    return out


def serialize_dataset(d: Dataset) -> bytes:
    doc = dict(d.extra)
    doc["images"] = [_image_to_json(im) for im in d.images]
    doc["categories"] = [_category_to_json(c) for c in d.categories]
    doc["annotations"] = [_annotation_to_json(a) for a in d.annotations]
    return canonical_json_bytes(doc)


def parse_predictions(data: bytes | str, reference: Dataset) -> PredictionSet:
    """Parse a predictions array and resolve it against a reference dataset."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise PredictionFormatError("MALFORMED_JSON", str(e)) from e
    if not isinstance(doc, list):
        raise PredictionFormatError("MALFORMED_JSON", "top level must be an array")
    image_ids = {im.id for im in reference.images}
    category_ids = {c.id for c in reference.categories}
    out: PredictionSet = []
    for k, obj in enumerate(doc):
        if not isinstance(obj, dict):
            raise PredictionFormatError("MALFORMED_JSON", f"entry {k} is not an object")
        try:
            image_id = _require_int(obj.get("image_id"), f"entry {k} image_id")
            category_id = _require_int(obj.get("category_id"), f"entry {k} category_id")
            score = _require_number(obj.get("score"), f"entry {k} score")
            seg = segmentation_from_json(
                obj.get("segmentation"), f"entry {k} segmentation"
            )
        except CocoFormatError as e:
            raise PredictionFormatError("MALFORMED_JSON", str(e)) from e
        if not 0.0 <= score <= 1.0:
            raise PredictionFormatError(
                "SCORE_RANGE", f"entry {k}: score {score} outside [0, 1]"
            )
        if image_id not in image_ids:
            raise PredictionFormatError(
                "UNKNOWN_IMAGE_ID", f"entry {k}: image_id {image_id} not in dataset"
            )
        if category_id not in category_ids:
            raise PredictionFormatError(
                "UNKNOWN_CATEGORY_ID",
                f"entry {k}: category_id {category_id} not in dataset",
            )
        out.append(
            PredictedInstance(
                image_id=image_id,
                category_id=category_id,
                segmentation=seg,
                score=score,
            )
        )
    return out


def serialize_predictions(preds: PredictionSet) -> bytes:
    return canonical_json_bytes(
        [
            {
                "image_id": p.image_id,
                "category_id": p.category_id,
                "segmentation": segmentation_to_json(p.segmentation),
                "score": p.score,
            }
            for p in preds
        ]
    )


def _dup_ids(records, table: str) -> list[Defect]:
    seen: set[int] = set()
    flagged: set[int] = set()
    out = []
    for r in records:
        if r.id in seen and r.id not in flagged:
            flagged.add(r.id)
            out.append(
                Defect(
                    code="DUP_ID",
                    message=f"duplicate {table} id {r.id}",
                    ids=(r.id,),
                )
            )
        seen.add(r.id)
    return out


def _segmentation_pixel_area(seg: Segmentation) -> float:
    """Area implied by the segmentation: shoelace sum for polygons, set-pixel
    count for RLE."""
    if isinstance(seg, PolygonSet):
        return sum(polygon_area(r) for r in seg.ring_arrays())
    return float(sum(seg.counts[1::2]))


def validate_dataset(d: Dataset, image_root: str | os.PathLike | None = None) -> ValidationReport:
    """Lint a dataset; every finding is data (a Defect), never an exception.

    Structural segmentation defects (ODD_COORDS, RLE_LENGTH_MISMATCH)
    suppress the area comparison for that annotation, since no reliable
    area can be computed from a corrupt encoding.
    """
    defects: list[Defect] = []
    defects += _dup_ids(d.images, "image")
    defects += _dup_ids(d.categories, "category")
    defects += _dup_ids(d.annotations, "annotation")

    images = d.images_by_id()
    categories = d.categories_by_id()

    for a in d.annotations:
        if a.image_id not in images:
            defects.append(
                Defect(
                    code="DANGLING_IMAGE_REF",
                    message=f"annotation {a.id} references missing image {a.image_id}",
                    ids=(a.id, a.image_id),
                )
            )
        if a.category_id not in categories:
            defects.append(
                Defect(
                    code="DANGLING_CATEGORY_REF",
                    message=f"annotation {a.id} references missing category {a.category_id}",
                    ids=(a.id, a.category_id),
                )
            )

        structurally_sound = True
        if isinstance(a.segmentation, PolygonSet):
            odd = [
                k for k, ring in enumerate(a.segmentation.rings) if len(ring) % 2
            ]
            if odd:
                structurally_sound = False
                defects.append(
                    Defect(
                        code="ODD_COORDS",
                        message=(
                            f"annotation {a.id}: ring(s) {odd} have an odd "
                            "coordinate count"
                        ),
                        ids=(a.id,),
                    )
                )
            else:
                degenerate = [
                    k
                    for k, ring in enumerate(a.segmentation.ring_arrays())
                    if polygon_area(ring) < 1.0
                ]
                if degenerate:
                    defects.append(
                        Defect(
                            code="DEGENERATE_POLYGON",
                            message=(
                                f"annotation {a.id}: ring(s) {degenerate} cover "
                                "less than one pixel"
                            ),
                            ids=(a.id,),
                        )
                    )
        else:
            h, w = a.segmentation.size
            total = sum(a.segmentation.counts)
            if total != h * w:
                structurally_sound = False
                defects.append(
                    Defect(
                        code="RLE_LENGTH_MISMATCH",
                        message=(
                            f"annotation {a.id}: RLE counts sum to {total}, "
                            f"expected {h * w}"
                        ),
                        ids=(a.id,),
                    )
                )

        im = images.get(a.image_id)
        if im is not None:
            x, y, w, h = a.bbox
            if w < 0 or h < 0 or x < 0 or y < 0 or x + w > im.width or y + h > im.height:
                defects.append(
                    Defect(
                        code="BBOX_OUT_OF_BOUNDS",
                        message=(
                            f"annotation {a.id}: bbox {list(a.bbox)} exceeds "
                            f"image {im.id} bounds {im.width}x{im.height}"
                        ),
                        ids=(a.id, im.id),
                    )
                )

        if structurally_sound:
            computed = _segmentation_pixel_area(a.segmentation)
            if computed > 0:
                if abs(a.area - computed) / computed > AREA_MISMATCH_TOLERANCE:
                    defects.append(
                        Defect(
                            code="AREA_MISMATCH",
                            message=(
                                f"annotation {a.id}: stated area {a.area} vs "
                                f"computed {computed}"
                            ),
                            ids=(a.id,),
                        )
                    )
            elif a.area > 0:
                defects.append(
                    Defect(
                        code="AREA_MISMATCH",
                        message=(
                            f"annotation {a.id}: stated area {a.area} but "
                            "segmentation covers nothing"
                        ),
                        ids=(a.id,),
                    )
                )

    if image_root is not None:
        for im in d.images:
            if not os.path.isfile(os.path.join(os.fspath(image_root), im.file_name)):
                defects.append(
                    Defect(
                        code="MISSING_IMAGE_FILE",
                        message=f"image {im.id}: file {im.file_name!r} not found",
                        ids=(im.id,),
                    )
                )

    return ValidationReport(defects=tuple(defects))


def merge_datasets(a: Dataset, b: Dataset) -> Dataset:
    """Concatenate two datasets: a's records first, ids renumbered densely
    from 1, categories unified by name."""
    cat_ids: dict[str, int] = {}
    categories: list[CategoryRecord] = []
    for c in list(a.categories) + list(b.categories):
        if c.name in cat_ids:
            kept = categories[cat_ids[c.name] - 1]
            if kept.supercategory != c.supercategory:
                raise CocoFormatError(
                    f"category {c.name!r}: conflicting supercategories "
                    f"{kept.supercategory!r} vs {c.supercategory!r}"
                )
            continue
        new_id = len(categories) + 1
        cat_ids[c.name] = new_id
        categories.append(
            CategoryRecord(
                id=new_id,
                name=c.name,
                supercategory=c.supercategory,
                extra=dict(c.extra),
            )
        )

    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    for src in (a, b):
        image_map: dict[int, int] = {}
        src_categories = src.categories_by_id()
        for im in src.images:
            new_id = len(images) + 1
            image_map[im.id] = new_id
            images.append(
                ImageRecord(
                    id=new_id,
                    file_name=im.file_name,
                    width=im.width,
                    height=im.height,
                    extra=dict(im.extra),
                )
            )
        for ann in src.annotations:
            cat = src_categories.get(ann.category_id)
            if cat is None or ann.image_id not in image_map:
                raise CocoFormatError(
                    f"annotation {ann.id} has dangling references; "
                    "validate inputs before merging"
                )
            annotations.append(
                Annotation(
                    id=len(annotations) + 1,
                    image_id=image_map[ann.image_id],
                    category_id=cat_ids[cat.name],
                    segmentation=ann.segmentation,
                    bbox=ann.bbox,
                    area=ann.area,
                    iscrowd=ann.iscrowd,
                    arrangement=ann.arrangement,
                    extra=dict(ann.extra),
                )
            )

    extra = dict(b.extra)
    extra.update(a.extra)
    return Dataset(
        images=tuple(images),
        categories=tuple(categories),
        annotations=tuple(annotations),
        extra=extra,
    )
