"""PNG I/O, brightness statistics, and the two darkening augmentations.

Darkening maps every 8-bit sample s to floor(s * (100 - d) / 100 + 0.5),
computed in integer arithmetic so outputs are bit-exact everywhere. The
static variant applies one d to a whole dataset; the random variant draws
a per-image d below a threshold from a seeded stream and records every
draw in a manifest.

Images are (height, width, 3) uint8 numpy arrays. Only 8-bit RGB and
greyscale PNGs are accepted; greyscale is expanded to RGB on load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PilImage

from .coco import Dataset, canonical_json_bytes, parse_dataset, serialize_dataset
from .rng import seed_stream

DATASET_FILENAME = "dataset.json"
MANIFEST_FILENAME = "darken_manifest.json"


class ImageFormatError(ValueError):
    """Input image is not an 8-bit RGB or greyscale PNG."""


@dataclass(frozen=True)
class DarkenManifest:
    """Record of every per-image darkening draw of one random-darkening run."""

    master_seed: int
    d_max: int
    entries: tuple[tuple[str, int], ...]  # (file_name, drawn d)

    def to_json_obj(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "d_max": self.d_max,
            "entries": [{"file_name": f, "d": d} for f, d in self.entries],
        }


def load_image(path: str | os.PathLike) -> np.ndarray:
    try:
        with PilImage.open(path) as img:
            if img.format != "PNG":
                raise ImageFormatError(f"{path}: expected PNG, got {img.format}")
            if img.mode == "L":
                grey = np.asarray(img, dtype=np.uint8)
                return np.repeat(grey[:, :, None], 3, axis=2)
            if img.mode == "RGB":
                return np.asarray(img, dtype=np.uint8).copy()
            raise ImageFormatError(
                f"{path}: unsupported PNG mode {img.mode!r} (need 8-bit RGB or L)"
            )
    except OSError as e:
        raise ImageFormatError(f"{path}: unreadable image ({e})") from e


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (h, w, 3) uint8, got {arr.dtype} {arr.shape}")
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    PilImage.fromarray(arr, "RGB").save(os.fspath(path), format="PNG")


def mean_brightness(img: np.ndarray) -> float:
    """Arithmetic mean over all samples of all channels."""
    return float(np.asarray(img).mean())


def darken_static(img: np.ndarray, d: int) -> np.ndarray:
    """Scale every sample to (100 - d) percent, rounding half up."""
    if not 0 <= d <= 100:
        raise ValueError(f"darkening percent must be in [0, 100], got {d}")
    arr = np.asarray(img)
    return ((arr.astype(np.uint32) * (100 - d) + 50) // 100).astype(np.uint8)


def _darken_dataset(
    dataset_dir: str,
    out_dir: str,
    d_for_index,
    dataset_filename: str,
    images_root: str,
) -> tuple[Dataset, tuple[tuple[str, int], ...]]:
    with open(os.path.join(dataset_dir, dataset_filename), "rb") as f:
        dataset = parse_dataset(f.read())
    os.makedirs(out_dir, exist_ok=True)
    draws = []
    for i, im in enumerate(dataset.images):
        d = d_for_index(i)
        pixels = load_image(os.path.join(images_root, im.file_name))
        save_image(darken_static(pixels, d), os.path.join(out_dir, im.file_name))
        draws.append((im.file_name, d))
    with open(os.path.join(out_dir, DATASET_FILENAME), "wb") as f:
        f.write(serialize_dataset(dataset))
    return dataset, tuple(draws)


def darken_dataset_static(
    dataset_dir: str | os.PathLike,
    d: int,
    out_dir: str | os.PathLike,
    dataset_filename: str = DATASET_FILENAME,
    images_root: str | os.PathLike | None = None,
) -> Dataset:
    """Darken every image of the dataset under dataset_dir by d percent;
    annotations are copied verbatim. Image paths resolve against
    images_root (default: dataset_dir) and are preserved relative to
    out_dir, which always receives a dataset.json."""
    if not 0 <= d <= 100:
        raise ValueError(f"darkening percent must be in [0, 100], got {d}")
    dataset_dir = os.fspath(dataset_dir)
    root = dataset_dir if images_root is None else os.fspath(images_root)
    dataset, _ = _darken_dataset(
        dataset_dir, os.fspath(out_dir), lambda i: d, dataset_filename, root
    )
    return dataset


def darken_dataset_random(
    dataset_dir: str | os.PathLike,
    d_max: int,
    master_seed: int,
    out_dir: str | os.PathLike,
    dataset_filename: str = DATASET_FILENAME,
    images_root: str | os.PathLike | None = None,
) -> tuple[Dataset, DarkenManifest]:
    """Darken image i by stream(master_seed)[i] mod (d_max + 1) percent and
    write a manifest of the draws beside the output dataset."""
    if not 0 <= d_max <= 100:
        raise ValueError(f"d_max must be in [0, 100], got {d_max}")
    dataset_dir = os.fspath(dataset_dir)
    root = dataset_dir if images_root is None else os.fspath(images_root)
    with open(os.path.join(dataset_dir, dataset_filename), "rb") as f:
        count = len(parse_dataset(f.read()).images)
    stream = seed_stream(master_seed, count)
    dataset, draws = _darken_dataset(
        dataset_dir,
        os.fspath(out_dir),
        lambda i: stream[i] % (d_max + 1),
        dataset_filename,
        root,
    )
    manifest = DarkenManifest(master_seed=master_seed, d_max=d_max, entries=draws)
    with open(os.path.join(os.fspath(out_dir), MANIFEST_FILENAME), "wb") as f:
        f.write(canonical_json_bytes(manifest.to_json_obj()))
    return dataset, manifest
