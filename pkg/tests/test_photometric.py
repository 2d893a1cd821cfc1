"""Image I/O and darkening tests: exact integer scaling law, dataset-level
static and random variants, and the draw manifest."""

import json

import numpy as np
import pytest
from PIL import Image as PilImage

from palletbench.coco import CategoryRecord, Dataset, ImageRecord, serialize_dataset
from palletbench.photometric import (
    DATASET_FILENAME,
    MANIFEST_FILENAME,
    ImageFormatError,
    darken_dataset_random,
    darken_dataset_static,
    darken_static,
    load_image,
    mean_brightness,
    save_image,
)
from palletbench.rng import seed_stream

from oracles import darken_value


def rgb_gradient(height=6, width=8):
    img = np.zeros((height, width, 3), dtype=np.uint8)
    img[..., 0] = np.arange(width, dtype=np.uint8) * 30
    img[..., 1] = np.arange(height, dtype=np.uint8)[:, None] * 40
    img[..., 2] = 200
    return img


def write_image_dataset(root, arrays, dataset_filename=DATASET_FILENAME):
    """Write arrays as PNGs plus a dataset document listing them."""
    images = []
    for i, arr in enumerate(arrays):
        name = f"img_{i:05d}.png"
        save_image(arr, root / name)
        images.append(
            ImageRecord(
                id=i + 1, file_name=name, width=arr.shape[1], height=arr.shape[0]
            )
        )
    dataset = Dataset(
        images=tuple(images),
        categories=(CategoryRecord(id=1, name="pallet_body"),),
        annotations=(),
    )
    (root / dataset_filename).write_bytes(serialize_dataset(dataset))
    return dataset


# --- image I/O ---


def test_save_load_roundtrip(tmp_path):
    img = rgb_gradient()
    save_image(img, tmp_path / "x.png")
    assert np.array_equal(load_image(tmp_path / "x.png"), img)


def test_save_creates_parent_directories(tmp_path):
    save_image(rgb_gradient(), tmp_path / "a" / "b" / "x.png")
    assert (tmp_path / "a" / "b" / "x.png").is_file()


def test_load_expands_greyscale(tmp_path):
    grey = np.arange(24, dtype=np.uint8).reshape(4, 6) * 10
    PilImage.fromarray(grey, "L").save(tmp_path / "g.png", format="PNG")
    img = load_image(tmp_path / "g.png")
    assert img.shape == (4, 6, 3)
    for c in range(3):
        assert np.array_equal(img[..., c], grey)


def test_load_rejects_non_png(tmp_path):
    PilImage.fromarray(rgb_gradient(), "RGB").save(tmp_path / "x.jpg", format="JPEG")
    with pytest.raises(ImageFormatError, match="expected PNG"):
        load_image(tmp_path / "x.jpg")


def test_load_rejects_unsupported_mode(tmp_path):
    rgba = np.zeros((4, 4, 4), dtype=np.uint8)
    PilImage.fromarray(rgba, "RGBA").save(tmp_path / "x.png", format="PNG")
    with pytest.raises(ImageFormatError, match="mode"):
        load_image(tmp_path / "x.png")


def test_load_rejects_garbage_bytes(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not an image")
    with pytest.raises(ImageFormatError, match="unreadable"):
        load_image(tmp_path / "x.png")


@pytest.mark.parametrize(
    "bad",
    [
        np.zeros((4, 4), dtype=np.uint8),
        np.zeros((4, 4, 4), dtype=np.uint8),
        np.zeros((4, 4, 3), dtype=np.float64),
    ],
)
def test_save_rejects_non_rgb_arrays(tmp_path, bad):
    with pytest.raises(ValueError, match="uint8"):
        save_image(bad, tmp_path / "x.png")


def test_mean_brightness_hand_value():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[0, 0] = (12, 0, 0)
    assert mean_brightness(img) == 1.0


# --- sample scaling law ---


def test_darken_identity_at_zero():
    img = rgb_gradient()
    assert np.array_equal(darken_static(img, 0), img)


def test_darken_blackout_at_hundred():
    assert not darken_static(rgb_gradient(), 100).any()


def test_darken_hand_values():
    samples = np.array([200, 1, 255, 100], dtype=np.uint8)
    assert darken_static(samples, 25).tolist() == [150, 1, 191, 75]
    assert darken_static(samples, 50).tolist() == [100, 1, 128, 50]


def test_darken_matches_rounding_oracle_exhaustively():
    samples = np.arange(256, dtype=np.uint8)
    for d in range(101):
        expected = [darken_value(int(s), d) for s in range(256)]
        assert darken_static(samples, d).tolist() == expected, f"d={d}"


def test_darken_monotone_in_percent():
    samples = np.arange(256, dtype=np.uint8)
    table = np.stack([darken_static(samples, d) for d in range(101)]).astype(np.int16)
    assert (np.diff(table, axis=0) <= 0).all()


def test_darken_preserves_shape_and_dtype():
    out = darken_static(rgb_gradient(), 40)
    assert out.dtype == np.uint8
    assert out.shape == (6, 8, 3)


def test_darken_lowers_mean_brightness():
    img = rgb_gradient()
    assert mean_brightness(darken_static(img, 30)) < mean_brightness(img)


@pytest.mark.parametrize("d", [-1, 101])
def test_darken_rejects_out_of_range_percent(d):
    with pytest.raises(ValueError, match="percent"):
        darken_static(rgb_gradient(), d)


# --- dataset-level static variant ---


def test_static_dataset_darkens_every_image(tmp_path):
    src = tmp_path / "src"
    out = tmp_path / "out"
    src.mkdir()
    arrays = [rgb_gradient(), rgb_gradient(4, 4) ^ 255]
    write_image_dataset(src, arrays)
    darken_dataset_static(src, 40, out)
    for i, arr in enumerate(arrays):
        got = load_image(out / f"img_{i:05d}.png")
        assert np.array_equal(got, darken_static(arr, 40))


def test_static_dataset_copies_annotations_verbatim(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image_dataset(src, [rgb_gradient()])
    darken_dataset_static(src, 60, tmp_path / "out")
    assert (tmp_path / "out" / DATASET_FILENAME).read_bytes() == (
        src / DATASET_FILENAME
    ).read_bytes()


def test_static_dataset_zero_percent_is_byte_identical(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image_dataset(src, [rgb_gradient()])
    darken_dataset_static(src, 0, tmp_path / "out")
    assert (tmp_path / "out" / "img_00000.png").read_bytes() == (
        src / "img_00000.png"
    ).read_bytes()


def test_static_dataset_is_idempotent(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image_dataset(src, [rgb_gradient(), rgb_gradient(5, 5)])
    darken_dataset_static(src, 35, tmp_path / "out1")
    darken_dataset_static(src, 35, tmp_path / "out2")
    for name in ("img_00000.png", "img_00001.png", DATASET_FILENAME):
        assert (tmp_path / "out1" / name).read_bytes() == (
            tmp_path / "out2" / name
        ).read_bytes()


def test_static_dataset_leaves_source_untouched(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image_dataset(src, [rgb_gradient()])
    before = {p.name: p.read_bytes() for p in src.iterdir()}
    darken_dataset_static(src, 80, tmp_path / "out")
    after = {p.name: p.read_bytes() for p in src.iterdir()}
    assert after == before


def test_static_dataset_separate_images_root(tmp_path):
    meta = tmp_path / "meta"
    pixels = tmp_path / "pixels"
    meta.mkdir()
    pixels.mkdir()
    arrays = [rgb_gradient()]
    write_image_dataset(pixels, arrays)
    (meta / "d.json").write_bytes((pixels / DATASET_FILENAME).read_bytes())
    darken_dataset_static(
        meta, 50, tmp_path / "out", dataset_filename="d.json", images_root=pixels
    )
    got = load_image(tmp_path / "out" / "img_00000.png")
    assert np.array_equal(got, darken_static(arrays[0], 50))


def test_static_dataset_rejects_bad_percent_before_writing(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image_dataset(src, [rgb_gradient()])
    with pytest.raises(ValueError, match="percent"):
        darken_dataset_static(src, 120, tmp_path / "out")
    assert not (tmp_path / "out").exists()


# --- dataset-level random variant ---


def test_random_dataset_zero_max_is_identity(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    arrays = [rgb_gradient(), rgb_gradient(3, 7)]
    write_image_dataset(src, arrays)
    _, manifest = darken_dataset_random(src, 0, 7, tmp_path / "out")
    assert all(d == 0 for _, d in manifest.entries)
    for i, arr in enumerate(arrays):
        assert np.array_equal(load_image(tmp_path / "out" / f"img_{i:05d}.png"), arr)


def test_random_dataset_draws_follow_seeded_stream(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    arrays = [rgb_gradient() for _ in range(8)]
    write_image_dataset(src, arrays)
    _, manifest = darken_dataset_random(src, 55, 123, tmp_path / "out")
    expected = [v % 56 for v in seed_stream(123, 8)]
    assert [d for _, d in manifest.entries] == expected
    assert [f for f, _ in manifest.entries] == [f"img_{i:05d}.png" for i in range(8)]


def test_random_dataset_pixels_match_manifest(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    arrays = [rgb_gradient(), rgb_gradient(4, 4) ^ 255, rgb_gradient(2, 9)]
    write_image_dataset(src, arrays)
    _, manifest = darken_dataset_random(src, 90, 5, tmp_path / "out")
    for (name, d), arr in zip(manifest.entries, arrays):
        assert np.array_equal(load_image(tmp_path / "out" / name), darken_static(arr, d))


def test_random_dataset_same_seed_reproduces(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image_dataset(src, [rgb_gradient() for _ in range(4)])
    _, m1 = darken_dataset_random(src, 70, 99, tmp_path / "out1")
    _, m2 = darken_dataset_random(src, 70, 99, tmp_path / "out2")
    assert m1 == m2
    for name in [f"img_{i:05d}.png" for i in range(4)] + [MANIFEST_FILENAME]:
        assert (tmp_path / "out1" / name).read_bytes() == (
            tmp_path / "out2" / name
        ).read_bytes()


def test_random_dataset_seed_changes_draws(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image_dataset(src, [rgb_gradient() for _ in range(16)])
    _, m1 = darken_dataset_random(src, 100, 1, tmp_path / "out1")
    _, m2 = darken_dataset_random(src, 100, 2, tmp_path / "out2")
    assert m1.entries != m2.entries


def test_random_dataset_manifest_file_shape(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image_dataset(src, [rgb_gradient()])
    _, manifest = darken_dataset_random(src, 30, 11, tmp_path / "out")
    doc = json.loads((tmp_path / "out" / MANIFEST_FILENAME).read_text())
    assert doc == {
        "master_seed": 11,
        "d_max": 30,
        "entries": [{"file_name": f, "d": d} for f, d in manifest.entries],
    }


def test_random_dataset_rejects_bad_max(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image_dataset(src, [rgb_gradient()])
    with pytest.raises(ValueError, match="d_max"):
        darken_dataset_random(src, 101, 0, tmp_path / "out")


def test_random_draw_mean_near_half_max(tmp_path):
    """1000 single-pixel images, ceiling 60: the draw mean sits near 30."""
    src = tmp_path / "src"
    src.mkdir()
    pixel = np.full((1, 1, 3), 200, dtype=np.uint8)
    write_image_dataset(src, [pixel] * 1000)
    _, manifest = darken_dataset_random(src, 60, 42, tmp_path / "out")
    draws = [d for _, d in manifest.entries]
    assert len(draws) == 1000
    assert all(0 <= d <= 60 for d in draws)
    mean = sum(draws) / len(draws)
    assert 27.0 <= mean <= 33.0
