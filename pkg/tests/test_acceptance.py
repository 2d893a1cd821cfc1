"""Acceptance suite: eleven end-to-end guarantees, one test per criterion.

Each test prints a single verdict line outside pytest's capture so a
verbose run shows one pass/fail line per criterion. Tolerances and time
budgets are pinned in the asserts; independent oracles live in oracles.py
or inline in the test that uses them.
"""

import dataclasses
import json
import math
import random
import time

import numpy as np
import pytest
from scipy.ndimage import binary_fill_holes

from oracles import brute_force_evaluate, darken_value, raycast_scene
from palletbench.coco import (
    Annotation,
    CategoryRecord,
    Dataset,
    ImageRecord,
    PredictedInstance,
    serialize_dataset,
    serialize_predictions,
    validate_dataset,
)
from palletbench.evaluate import EvalConfig, evaluate, stability_compare
from palletbench.experiment import (
    GridSpec,
    MockDetectorConfig,
    ResultRow,
    ResultsTable,
    darkening_sweep,
    expand_grid,
    mock_detect,
    select_best,
)
from palletbench.maskgeom import (
    PolygonSet,
    Rle,
    instance_iou,
    mask_to_bbox,
    mask_to_polygons,
    rasterize_polygons,
    rle_decode,
    rle_encode,
    shift_mask,
)
from palletbench.photometric import darken_static
from palletbench.rng import seed_stream
from palletbench.scenegen import (
    RandomisationConfig,
    export_dataset,
    generate_batch,
    generate_scene,
    rasterize_scene,
)


def verdict(capsys, number, message):
    with capsys.disabled():
        print(f"\n[criterion {number:02d}] PASS {message}")


def echo_predictions(d):
    return [
        PredictedInstance(
            image_id=a.image_id,
            category_id=a.category_id,
            segmentation=a.segmentation,
            score=1.0,
        )
        for a in d.annotations
    ]


def tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


# ---------------------------------------------------------------------------
# 1. Rasterised polygon IoU vs exact convex clipping, 200 pairs, |diff| <= 0.02
# ---------------------------------------------------------------------------


def _shoelace(points):
    total = 0.0
    for (x1, y1), (x2, y2) in zip(points, points[1:] + points[:1]):
        total += x1 * y2 - x2 * y1
    return total / 2.0


def _clip_iou_oracle(flat_a, flat_b):
    """Exact IoU of two convex rings via half-plane clipping; no library code."""

    def positive(flat):
        pts = [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]
        return pts if _shoelace(pts) > 0 else pts[::-1]

    subject = positive(flat_a)
    clipper = positive(flat_b)
    for (cx1, cy1), (cx2, cy2) in zip(clipper, clipper[1:] + clipper[:1]):
        out = []
        for (px, py), (qx, qy) in zip(subject, subject[1:] + subject[:1]):
            dp = (cx2 - cx1) * (py - cy1) - (cy2 - cy1) * (px - cx1)
            dq = (cx2 - cx1) * (qy - cy1) - (cy2 - cy1) * (qx - cx1)
            if dp >= 0.0:
                out.append((px, py))
            if (dp >= 0.0) != (dq >= 0.0):
                t = dp / (dp - dq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
        subject = out
        if not subject:
            break
    inter = abs(_shoelace(subject)) if len(subject) >= 3 else 0.0
    area_a = abs(_shoelace(positive(flat_a)))
    area_b = abs(_shoelace(positive(flat_b)))
    union = area_a + area_b - inter
    return inter / union if union > 0 else 1.0


def _random_convex_ring(rng, cx, cy):
    k = rng.randint(3, 9)
    step = 2.0 * math.pi / k
    base = rng.uniform(0.0, 2.0 * math.pi)
    sx, sy = rng.uniform(30.0, 140.0), rng.uniform(30.0, 140.0)
    rot = rng.uniform(0.0, math.pi)
    cr, sr = math.cos(rot), math.sin(rot)
    flat = []
    for i in range(k):
        a = base + i * step + rng.uniform(-0.35, 0.35) * step
        x, y = math.cos(a) * sx, math.sin(a) * sy
        flat += [cx + x * cr - y * sr, cy + x * sr + y * cr]
    return tuple(flat)


def test_criterion_01_rasterised_iou_tracks_exact_geometry(capsys):
    rng = random.Random(314159)
    started = time.monotonic()
    worst = 0.0
    for _ in range(200):
        cx, cy = rng.uniform(150.0, 362.0), rng.uniform(150.0, 362.0)
        ring_a = _random_convex_ring(rng, cx, cy)
        ring_b = _random_convex_ring(
            rng,
            min(362.0, max(150.0, cx + rng.uniform(-80.0, 80.0))),
            min(362.0, max(150.0, cy + rng.uniform(-80.0, 80.0))),
        )
        rastered = instance_iou(
            PolygonSet(rings=(ring_a,)), PolygonSet(rings=(ring_b,)), 512, 512
        )
        exact = _clip_iou_oracle(ring_a, ring_b)
        diff = abs(rastered - exact)
        worst = max(worst, diff)
        assert diff <= 0.02, f"pair diverged by {diff}"
    elapsed = time.monotonic() - started
    assert elapsed < 30.0
    verdict(
        capsys,
        1,
        f"200 convex pairs within 0.02 of exact IoU (max diff {worst:.4f}, {elapsed:.1f}s)",
    )


# ---------------------------------------------------------------------------
# 2. RLE codec identity on 1000 masks plus the column-major pin
# ---------------------------------------------------------------------------


def test_criterion_02_rle_roundtrip_identity(capsys):
    g = np.random.default_rng(202)
    for i in range(1000):
        h = int(g.integers(1, 65))
        w = int(g.integers(1, 65))
        if i % 50 == 0:
            density = 0.0
        elif i % 50 == 1:
            density = 1.0
        else:
            density = float(g.random())
        mask = g.random((h, w)) < density
        rle = rle_encode(mask)
        assert sum(rle.counts) == h * w
        assert np.array_equal(rle_decode(rle), mask)
    pinned = rle_decode(Rle(size=(2, 2), counts=(0, 1, 3)))
    assert np.array_equal(pinned, np.array([[True, False], [False, False]]))
    verdict(capsys, 2, "decode(encode(m)) exact on 1000 masks; [0,1,3] is pixel (0,0)")


# ---------------------------------------------------------------------------
# 3. Mask -> polygons -> mask keeps IoU >= 0.99 on 200 blobs
# ---------------------------------------------------------------------------


def test_criterion_03_mask_polygon_roundtrip(capsys):
    g = np.random.default_rng(110)
    worst = 1.0
    for _ in range(200):
        h = int(g.integers(24, 64))
        w = int(g.integers(24, 64))
        mask = np.zeros((h, w), dtype=bool)
        yy, xx = np.ogrid[:h, :w]
        for _ in range(int(g.integers(1, 4))):
            cy = float(g.uniform(4.0, h - 4.0))
            cx = float(g.uniform(4.0, w - 4.0))
            r = float(g.uniform(3.0, min(h, w) / 3.0))
            mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        mask = binary_fill_holes(mask)
        assert mask.sum() >= 20
        back = rasterize_polygons(mask_to_polygons(mask, simplify_eps=0.0), w, h)
        inter = float(np.logical_and(mask, back).sum())
        union = float(np.logical_or(mask, back).sum())
        iou = inter / union
        worst = min(worst, iou)
        assert iou >= 0.99, f"roundtrip IoU fell to {iou}"
    verdict(capsys, 3, f"200 blob roundtrips at IoU >= 0.99 (min {worst:.4f})")


# ---------------------------------------------------------------------------
# 4. Average precision equals the brute-force PR oracle to 1e-9
# ---------------------------------------------------------------------------


def _bounded_fixture(seed):
    """Up to 3 images, up to 6 detections per image, both categories."""
    rng = random.Random(seed)
    width, height = 24, 20
    images = tuple(
        ImageRecord(id=i + 1, file_name=f"im{i}.png", width=width, height=height)
        for i in range(rng.randint(1, 3))
    )
    categories = (
        CategoryRecord(id=1, name="pallet_body"),
        CategoryRecord(id=2, name="pallet_face"),
    )
    annotations = []
    predictions = []
    ann_id = 0
    for image in images:
        per_image = 0
        for _ in range(rng.randint(1, 3)):
            x, y = rng.randrange(0, width - 6), rng.randrange(0, height - 6)
            bw, bh = rng.randint(3, 6), rng.randint(3, 6)
            mask = np.zeros((height, width), dtype=bool)
            mask[y : y + bh, x : x + bw] = True
            ann_id += 1
            annotations.append(
                Annotation(
                    id=ann_id,
                    image_id=image.id,
                    category_id=rng.choice((1, 2)),
                    segmentation=rle_encode(mask),
                    bbox=mask_to_bbox(mask),
                    area=float(mask.sum()),
                    arrangement=rng.choice(("individual", "stacked", "racked")),
                )
            )
            for _ in range(rng.randint(0, 2)):
                if per_image >= 6:
                    break
                shifted = shift_mask(mask, rng.randint(-2, 2), rng.randint(-2, 2))
                if not shifted.any():
                    continue
                predictions.append(
                    PredictedInstance(
                        image_id=image.id,
                        category_id=rng.choice((1, 2)),
                        segmentation=rle_encode(shifted),
                        score=rng.choice((0.3, 0.6, 0.9)),
                    )
                )
                per_image += 1
    d = Dataset(images=images, categories=categories, annotations=tuple(annotations))
    return d, predictions


def test_criterion_04_ap_matches_brute_force_oracle(capsys):
    checked = 0
    for seed in range(12):
        d, predictions = _bounded_fixture(seed)
        dataset_obj = json.loads(serialize_dataset(d))
        predictions_obj = json.loads(serialize_predictions(predictions))
        thresholds = (0.5,) if seed % 2 else (0.4, 0.5, 0.75)
        for mode in ("mask", "bbox"):
            for grouping in ("by_class", "by_arrangement", "by_class_and_arrangement"):
                report = evaluate(
                    d,
                    predictions,
                    EvalConfig(
                        iou_thresholds=thresholds,
                        mode=mode,
                        grouping=grouping,
                        max_detections_per_image=6,
                    ),
                )
                oracle = brute_force_evaluate(
                    dataset_obj,
                    predictions_obj,
                    thresholds,
                    mode=mode,
                    grouping=grouping,
                    max_detections=6,
                )
                got_keys = {(g.group, g.threshold) for g in report.groups}
                want_keys = {k for k in oracle if k[0] != "__mean__"}
                assert got_keys == want_keys
                for g in report.groups:
                    assert abs(g.ap - oracle[(g.group, g.threshold)]) <= 1e-9
                for threshold, mean in report.mean_ap:
                    assert abs(mean - oracle[("__mean__", threshold)]) <= 1e-9
                checked += len(got_keys)

    # Hand-derived value: a false positive outscoring the only hit halves AP.
    gt = np.zeros((16, 16), dtype=bool)
    gt[2:6, 2:8] = True
    decoy = np.zeros((16, 16), dtype=bool)
    decoy[10:14, 10:16] = True
    d = Dataset(
        images=(ImageRecord(id=1, file_name="im.png", width=16, height=16),),
        categories=(CategoryRecord(id=1, name="pallet_body"),),
        annotations=(
            Annotation(
                id=1,
                image_id=1,
                category_id=1,
                segmentation=rle_encode(gt),
                bbox=mask_to_bbox(gt),
                area=float(gt.sum()),
            ),
        ),
    )
    predictions = [
        PredictedInstance(1, 1, rle_encode(decoy), 0.9),
        PredictedInstance(1, 1, rle_encode(gt), 0.8),
    ]
    report = evaluate(d, predictions, EvalConfig())
    assert report.group_ap("pallet_body", 0.5) == pytest.approx(0.5, abs=1e-12)
    oracle = brute_force_evaluate(
        json.loads(serialize_dataset(d)),
        json.loads(serialize_predictions(predictions)),
        (0.5,),
    )
    assert oracle[("pallet_body", 0.5)] == pytest.approx(0.5, abs=1e-12)
    verdict(capsys, 4, f"{checked} group APs within 1e-9 of oracle; FP-first case is 0.5")


# ---------------------------------------------------------------------------
# 5. Ground truth echoed as predictions scores mAP50 = 1.0 exactly
# ---------------------------------------------------------------------------


def test_criterion_05_perfect_predictions_score_unity(capsys, tmp_path):
    cfg = RandomisationConfig(
        pallet_count=(1, 3),
        occluder_count=(0, 2),
        camera_distance=(2.5, 6.0),
        width=96,
        height=72,
    )
    d = export_dataset(generate_batch(cfg, 6, 77), tmp_path)
    assert d.annotations, "fixture produced no annotations"
    assert validate_dataset(d, image_root=tmp_path).ok
    predictions = echo_predictions(d)
    for mode in ("mask", "bbox"):
        report = evaluate(d, predictions, EvalConfig(mode=mode))
        assert report.map50 == 1.0
        grouped = evaluate(
            d, predictions, EvalConfig(mode=mode, grouping="by_class_and_arrangement")
        )
        assert grouped.map50 == 1.0
    verdict(capsys, 5, "echoed truth yields mAP50 == 1.0 in mask and bbox modes")


# ---------------------------------------------------------------------------
# 6. Darkening: bit-exact transfer curve and the detection cliff at 80%
# ---------------------------------------------------------------------------


def test_criterion_06_darkening_exactness_and_cliff(capsys, tmp_path):
    started = time.monotonic()

    ramp = np.arange(256, dtype=np.uint8).reshape(1, 256, 1).repeat(3, axis=2)
    for d in range(101):
        darkened = darken_static(ramp, d)
        expected = np.array([darken_value(s, d) for s in range(256)], dtype=np.uint8)
        assert np.array_equal(darkened[0, :, 0], expected)

    cfg = RandomisationConfig(
        pallet_count=(1, 4),
        occluder_count=(0, 2),
        camera_distance=(2.5, 7.0),
        light_intensity=(9.0, 10.0),
        material_pool=1,
    )
    data_dir = tmp_path / "scenes"
    export_dataset(generate_batch(cfg, 50, 606), data_dir)
    table = darkening_sweep(
        data_dir,
        [0, 20, 40, 60, 80],
        MockDetectorConfig(),
        EvalConfig(),
        tmp_path / "sweep",
    )
    assert not any(row.failed for row in table.rows)
    curve = [row.map50 for row in table.rows]
    assert all(a >= b for a, b in zip(curve, curve[1:])), f"not monotone: {curve}"
    assert curve[0] > 0.5
    assert curve[-1] <= 0.5 * curve[0], f"no cliff: {curve}"
    assert (tmp_path / "sweep" / "curve.csv").is_file()
    elapsed = time.monotonic() - started
    assert elapsed < 60.0
    points = ", ".join(f"{v:.3f}" for v in curve)
    verdict(capsys, 6, f"exact transfer curve; sweep [{points}] in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7. Scene generation: byte determinism, 100 scenes under 10 s, clean export
# ---------------------------------------------------------------------------


def test_criterion_07_generation_determinism_and_throughput(capsys, tmp_path):
    cfg = RandomisationConfig()
    times = []
    datasets = []
    for name in ("first", "second"):
        started = time.monotonic()
        specs = generate_batch(cfg, 100, 2718)
        datasets.append(export_dataset(specs, tmp_path / name))
        times.append(time.monotonic() - started)
        assert times[-1] < 10.0, f"run took {times[-1]:.2f}s"
    assert tree_bytes(tmp_path / "first") == tree_bytes(tmp_path / "second")
    assert datasets[0] == datasets[1]
    report = validate_dataset(datasets[0], image_root=tmp_path / "first")
    assert report.ok and not report.defects
    verdict(
        capsys,
        7,
        f"100 scenes twice, byte-identical, clean, {max(times):.1f}s worst run",
    )


# ---------------------------------------------------------------------------
# 8. Z-buffer masks equal the ray-cast oracle exactly on 20 scenes
# ---------------------------------------------------------------------------


def test_criterion_08_rasteriser_matches_raycast_oracle(capsys):
    cfg = RandomisationConfig(
        pallet_count=(1, 4),
        occluder_count=(0, 2),
        camera_distance=(2.0, 8.0),
        width=64,
        height=48,
    )
    compared = 0
    for seed in seed_stream(9001, 20):
        spec = generate_scene(cfg, seed)
        render = rasterize_scene(spec)
        instances, masks, _ = raycast_scene(spec)
        assert [(i.id, i.kind) for i in render.instances] == instances
        for instance_id, expected in masks.items():
            assert np.array_equal(render.instance_masks[instance_id], expected)
            compared += 1
    verdict(capsys, 8, f"{compared} instance masks equal the ray-cast oracle exactly")


# ---------------------------------------------------------------------------
# 9. Validator recall: 6 defect codes x 20 fixtures, no false positives
# ---------------------------------------------------------------------------


def _lint_fixture(seed):
    rng = random.Random(seed)

    def rect_ann(ann_id, image, max_w, max_h):
        x = rng.randrange(0, max_w - 4)
        y = rng.randrange(0, max_h - 4)
        w = rng.randint(3, max_w - x - 1)
        h = rng.randint(3, max_h - y - 1)
        ring = (
            float(x), float(y),
            float(x + w), float(y),
            float(x + w), float(y + h),
            float(x), float(y + h),
        )
        return Annotation(
            id=ann_id,
            image_id=image,
            category_id=rng.choice((1, 2)),
            segmentation=PolygonSet(rings=(ring,)),
            bbox=(float(x), float(y), float(w), float(h)),
            area=float(w * h),
        )

    mask = np.zeros((24, 32), dtype=bool)
    x, y = rng.randrange(0, 24), rng.randrange(0, 16)
    mask[y : y + rng.randint(3, 8), x : x + rng.randint(3, 8)] = True
    rle_ann = Annotation(
        id=3,
        image_id=1,
        category_id=rng.choice((1, 2)),
        segmentation=rle_encode(mask),
        bbox=mask_to_bbox(mask),
        area=float(mask.sum()),
    )
    return Dataset(
        images=(
            ImageRecord(id=1, file_name="a.png", width=32, height=24),
            ImageRecord(id=2, file_name="b.png", width=40, height=30),
        ),
        categories=(
            CategoryRecord(id=1, name="pallet_body"),
            CategoryRecord(id=2, name="pallet_face"),
        ),
        annotations=(rect_ann(1, 1, 32, 24), rect_ann(2, 2, 40, 30), rle_ann),
    )


def _replace_ann(d, index, **changes):
    annotations = list(d.annotations)
    annotations[index] = dataclasses.replace(annotations[index], **changes)
    return dataclasses.replace(d, annotations=tuple(annotations))


def _inject(d, code):
    if code == "DANGLING_IMAGE_REF":
        return _replace_ann(d, 0, image_id=999), 1
    if code == "DANGLING_CATEGORY_REF":
        return _replace_ann(d, 0, category_id=999), 1
    if code == "DUP_ID":
        return _replace_ann(d, 1, id=d.annotations[0].id), d.annotations[0].id
    if code == "ODD_COORDS":
        ring = d.annotations[0].segmentation.rings[0]
        return _replace_ann(d, 0, segmentation=PolygonSet(rings=(ring[:-1],))), 1
    if code == "AREA_MISMATCH":
        return _replace_ann(d, 0, area=d.annotations[0].area * 2.0), 1
    if code == "RLE_LENGTH_MISMATCH":
        rle = d.annotations[2].segmentation
        broken = Rle(size=rle.size, counts=rle.counts + (5,))
        return _replace_ann(d, 2, segmentation=broken), 3
    raise AssertionError(code)


INJECTED_CODES = (
    "DANGLING_IMAGE_REF",
    "DANGLING_CATEGORY_REF",
    "DUP_ID",
    "ODD_COORDS",
    "AREA_MISMATCH",
    "RLE_LENGTH_MISMATCH",
)


def test_criterion_09_validator_recall_and_precision(capsys):
    caught = 0
    for seed in range(20):
        clean = _lint_fixture(1000 + seed)
        report = validate_dataset(clean)
        assert report.ok and not report.defects, f"false positive on seed {seed}"
        for code in INJECTED_CODES:
            broken, touched_id = _inject(clean, code)
            report = validate_dataset(broken)
            assert report.counts() == {code: 1}, (
                f"{code} seed {seed}: got {report.counts()}"
            )
            assert touched_id in report.defects[0].ids
            caught += 1
    verdict(capsys, 9, f"{caught}/120 injected defects caught exactly, 0 false alarms")


# ---------------------------------------------------------------------------
# 10. Grid search: product counts, model-axis sweep, stable tie-break
# ---------------------------------------------------------------------------


def test_criterion_10_grid_orchestration(capsys, tmp_path):
    for axes in range(1, 5):
        for n_values in range(1, 6):
            params = {f"p{i}": tuple(range(n_values)) for i in range(axes)}
            spec = GridSpec(params=params, command_template="run {run_dir}")
            manifest = expand_grid(spec, tmp_path / f"grid_{axes}_{n_values}")
            assert len(manifest.runs) == n_values**axes
            assert [r.run_id for r in manifest.runs] == list(range(n_values**axes))
            combos = {tuple(sorted(r.params.items())) for r in manifest.runs}
            assert len(combos) == n_values**axes

    model_axis = GridSpec(
        params={"model": ("n", "s", "m", "l", "x")},
        command_template="train --model {model} --out {run_dir}",
    )
    manifest = expand_grid(model_axis, tmp_path / "models")
    assert [r.params["model"] for r in manifest.runs] == ["n", "s", "m", "l", "x"]

    spec = GridSpec(
        params={"lr": (0.1, 0.01), "model": ("n", "s", "m")},
        command_template="run {run_dir}",
    )
    runs = expand_grid(spec, tmp_path / "tie").runs
    scores = {0: 0.7, 1: 0.9, 2: 0.8, 3: 0.9, 4: 0.6, 5: 0.5}
    rows = [
        ResultRow(run=r, metrics={"map50": scores[r.run_id]}, failed=False)
        for r in runs
    ]
    shuffled = rows[::-1]
    random.Random(5).shuffle(shuffled)
    for table in (ResultsTable(rows=tuple(rows)), ResultsTable(rows=tuple(shuffled))):
        assert select_best(table, "map50").run_id == 1
        assert select_best(table, "map50", direction="minimize").run_id == 5
    verdict(capsys, 10, "expansion counts are exact products; ties pick lowest run id")


# ---------------------------------------------------------------------------
# 11. Stability: identity gives 1.0/1.0, 2 px jitter keeps matches, lowers IoU
# ---------------------------------------------------------------------------


def test_criterion_11_stability_under_jitter(capsys, tmp_path):
    cfg = RandomisationConfig(
        pallet_count=(1, 2),
        arrangement_weights=(1.0, 0.0, 0.0),
        camera_distance=(2.5, 3.5),
        camera_elevation=(0.2, 0.5),
        light_intensity=(10.0, 10.0),
        occluder_count=(0, 0),
        material_pool=1,
        placement_extent=3.0,
        width=640,
        height=480,
    )
    d = export_dataset(generate_batch(cfg, 6, 428), tmp_path, min_visibility=0.4)
    steady = mock_detect(d, tmp_path, MockDetectorConfig(jitter_px=0, seed=99))
    jittered = mock_detect(d, tmp_path, MockDetectorConfig(jitter_px=2, seed=99))
    assert len(steady) == len(jittered) > 0

    identity = stability_compare(steady, list(steady), d)
    assert identity.matched_fraction == 1.0
    assert identity.mean_matched_iou == 1.0

    report = stability_compare(steady, jittered, d, iou_floor=0.5)
    assert report.matched_fraction == 1.0, f"lost matches: {report.matched_fraction}"
    assert report.mean_matched_iou < 1.0
    assert report.mean_matched_iou > 0.5
    verdict(
        capsys,
        11,
        f"jitter keeps all {len(steady)} matches, mean IoU {report.mean_matched_iou:.3f}",
    )
