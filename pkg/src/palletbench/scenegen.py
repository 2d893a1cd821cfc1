"""Deterministic randomised warehouse scenes: generation, projection,
z-buffer rasterisation, and COCO export.

World frame: metres, Y up, pallets arranged around the origin. A scene is a
pure function of (config, seed): every random quantity is drawn from the
splitmix64 stream of the seed in this fixed order:

1. camera azimuth, camera distance, camera elevation
2. light intensity
3. pallet count
4. per pallet unit: arrangement, x, z, yaw, stack count (stacked units only)
5. rack (only if any unit is racked): x, z, yaw, then per racked unit in
   order: shelf level, lateral offset along the bay
6. occluder count, then per occluder: x, z, yaw, three extents, centre
   height; an occluder containing the camera is redrawn (all seven values)
   up to 100 times
7. materials: one id per pallet unit, then the rack, then each occluder

Surfaces are kept a millimetre or two apart (stack gaps, rack clearances,
per-unit ground offsets) so no two overlapping faces are ever coplanar and
visibility has a unique answer at every pixel.

Rendering is flat-shaded: each material has a base tone scaled by
light_intensity / 10; there is no floor plane, so the bright background
dominates image brightness and darkening sweeps degrade it predictably.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .coco import Annotation, CategoryRecord, Dataset, ImageRecord, serialize_dataset
from .maskgeom import mask_to_bbox, rle_encode
from .photometric import DATASET_FILENAME, save_image
from .rng import TWO_PI, SplitMix64, seed_stream

Z_NEAR = 0.01
STACK_GAP = 0.001
RACK_CLEARANCE = 0.002
RACK_DEPTH_STEP = 0.0007
GROUND_STEP = 0.0005
LOOK_AT = (0.0, 0.5, 0.0)
OCCLUDER_RETRIES = 100

BACKGROUND_TONE = (174, 172, 168)
PALETTE = (
    (156, 116, 82),
    (120, 120, 126),
    (90, 101, 118),
    (146, 134, 108),
    (104, 88, 72),
    (134, 148, 158),
    (166, 152, 122),
    (96, 112, 96),
    (142, 108, 96),
    (112, 124, 140),
    (150, 140, 130),
    (100, 96, 90),
)

CATEGORIES = (
    CategoryRecord(id=1, name="pallet_body", supercategory="pallet"),
    CategoryRecord(id=2, name="pallet_face", supercategory="pallet"),
)
BODY_CATEGORY_ID = 1
FACE_CATEGORY_ID = 2

# cuboid faces as (local axis, sign, side-face index or None for top/bottom)
_FACES = (
    (0, 1.0, 0),
    (0, -1.0, 1),
    (2, 1.0, 2),
    (2, -1.0, 3),
    (1, 1.0, None),
    (1, -1.0, None),
)


class RetryExhausted(RuntimeError):
    """Rejection sampling could not satisfy a scene constraint."""


def rot_y(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    vfov: float = 60.0
    width: int = 320
    height: int = 240

    def __post_init__(self):
        if tuple(self.position) == tuple(self.look_at):
            raise ValueError("camera position equals look_at")
        if not 10.0 <= self.vfov <= 170.0:
            raise ValueError(f"vfov {self.vfov} outside [10, 170]")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be positive")


@dataclass(frozen=True)
class Cuboid:
    center: tuple[float, float, float]
    extents: tuple[float, float, float]
    yaw: float

    def contains(self, p) -> bool:
        local = rot_y(-self.yaw) @ (np.asarray(p, dtype=float) - np.asarray(self.center))
        return bool(np.all(np.abs(local) <= np.asarray(self.extents) / 2.0))


@dataclass(frozen=True)
class PalletUnit:
    x: float
    y: float
    z: float
    yaw: float
    arrangement: str
    stack_count: int = 1
    dims: tuple[float, float, float] = (1.2, 1.0, 0.15)

    def __post_init__(self):
        if self.arrangement not in ("individual", "stacked", "racked"):
            raise ValueError(f"bad arrangement {self.arrangement!r}")
        if self.arrangement != "stacked" and self.stack_count != 1:
            raise ValueError("stack_count must be 1 unless arrangement is stacked")
        if not 1 <= self.stack_count <= 8:
            raise ValueError("stack_count must be in [1, 8]")

    def cuboids(self) -> list[Cuboid]:
        length, width, height = self.dims
        out = []
        for s in range(self.stack_count):
            cy = self.y + s * (height + STACK_GAP) + height / 2.0
            out.append(
                Cuboid(
                    center=(self.x, cy, self.z),
                    extents=(length, height, width),
                    yaw=self.yaw,
                )
            )
        return out


@dataclass(frozen=True)
class RackSpec:
    x: float
    z: float
    yaw: float
    bay_width: float = 2.7
    depth: float = 1.1
    shelf_heights: tuple[float, ...] = (0.0, 1.4)
    post_size: float = 0.1
    post_height: float = 2.4
    beam_height: float = 0.12
    beam_depth: float = 0.08

    def cuboids(self) -> list[Cuboid]:
        rot = rot_y(self.yaw)

        def world(local_x: float, local_z: float) -> tuple[float, float]:
            wx = rot[0, 0] * local_x + rot[0, 2] * local_z + self.x
            wz = rot[2, 0] * local_x + rot[2, 2] * local_z + self.z
            return wx, wz

        out = []
        for sx in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                wx, wz = world(sx * self.bay_width / 2.0, sz * self.depth / 2.0)
                out.append(
                    Cuboid(
                        center=(wx, self.post_height / 2.0, wz),
                        extents=(self.post_size, self.post_height, self.post_size),
                        yaw=self.yaw,
                    )
                )
        for h in self.shelf_heights:
            if h <= 0.0:
                continue
            for sz in (-1.0, 1.0):
                wx, wz = world(0.0, sz * self.depth / 2.0)
                out.append(
                    Cuboid(
                        center=(wx, h - self.beam_height / 2.0, wz),
                        extents=(self.bay_width, self.beam_height, self.beam_depth),
                        yaw=self.yaw,
                    )
                )
        return out


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    camera: Camera
    light_intensity: float
    pallets: tuple[PalletUnit, ...]
    rack: RackSpec | None
    occluders: tuple[Cuboid, ...]
    material_ids: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class RandomisationConfig:
    pallet_count: tuple[int, int] = (1, 6)
    stack_count: tuple[int, int] = (2, 5)
    arrangement_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    camera_distance: tuple[float, float] = (2.0, 10.0)
    camera_elevation: tuple[float, float] = (0.5, 3.0)
    light_intensity: tuple[float, float] = (5.0, 10.0)
    occluder_count: tuple[int, int] = (0, 4)
    occluder_size: tuple[float, float] = (0.3, 2.0)
    occluder_height: tuple[float, float] = (0.0, 2.5)
    material_pool: int = 8
    placement_extent: float = 2.0
    vfov: float = 60.0
    width: int = 320
    height: int = 240
    pallet_dims: tuple[float, float, float] = (1.2, 1.0, 0.15)

    def validate(self) -> None:
        def check_range(name, lo, hi, least, most):
            if not (least <= lo <= hi <= most):
                raise ValueError(f"{name} range ({lo}, {hi}) outside [{least}, {most}]")

        check_range("pallet_count", *self.pallet_count, 1, 64)
        check_range("stack_count", *self.stack_count, 1, 8)
        check_range("camera_distance", *self.camera_distance, 0.1, 50.0)
        check_range("camera_elevation", *self.camera_elevation, 0.0, 20.0)
        check_range("light_intensity", *self.light_intensity, 0.0, 10.0)
        check_range("occluder_count", *self.occluder_count, 0, 32)
        check_range("occluder_size", *self.occluder_size, 0.01, 10.0)
        check_range("occluder_height", *self.occluder_height, 0.0, 10.0)
        if len(self.arrangement_weights) != 3 or any(
            w < 0 for w in self.arrangement_weights
        ):
            raise ValueError("arrangement_weights needs 3 non-negative entries")
        if sum(self.arrangement_weights) <= 0:
            raise ValueError("arrangement_weights must not all be zero")
        if self.material_pool < 1:
            raise ValueError("material_pool must be >= 1")
        if not 0.0 < self.placement_extent <= 9.0:
            raise ValueError("placement_extent must be in (0, 9]")
        if not 10.0 <= self.vfov <= 170.0:
            raise ValueError("vfov outside [10, 170]")
        if self.width < 8 or self.height < 8:
            raise ValueError("resolution too small")
        if any(d <= 0 for d in self.pallet_dims):
            raise ValueError("pallet_dims must be positive")
        if self.pallet_dims[0] >= 2.7:
            raise ValueError("pallet length must fit the rack bay")


_CONFIG_TUPLE_FIELDS = {
    "pallet_count": 2,
    "stack_count": 2,
    "arrangement_weights": 3,
    "camera_distance": 2,
    "camera_elevation": 2,
    "light_intensity": 2,
    "occluder_count": 2,
    "occluder_size": 2,
    "occluder_height": 2,
    "pallet_dims": 3,
}
_CONFIG_SCALAR_FIELDS = {
    "material_pool",
    "placement_extent",
    "vfov",
    "width",
    "height",
}


def config_from_json_obj(obj: dict) -> RandomisationConfig:
    """Build a config from a JSON object; unknown keys are rejected."""
    if not isinstance(obj, dict):
        raise ValueError("config must be a JSON object")
    kwargs = {}
    for key, value in obj.items():
        if key in _CONFIG_TUPLE_FIELDS:
            n = _CONFIG_TUPLE_FIELDS[key]
            if not isinstance(value, list) or len(value) != n:
                raise ValueError(f"config {key} must be a list of {n} numbers")
            kwargs[key] = tuple(value)
        elif key in _CONFIG_SCALAR_FIELDS:
            kwargs[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    cfg = RandomisationConfig(**kwargs)
    cfg.validate()
    return cfg


def config_to_json_obj(cfg: RandomisationConfig) -> dict:
    out = {}
    for name in _CONFIG_TUPLE_FIELDS:
        out[name] = list(getattr(cfg, name))
    for name in sorted(_CONFIG_SCALAR_FIELDS):
        out[name] = getattr(cfg, name)
    return out


def generate_scene(cfg: RandomisationConfig, seed: int) -> SceneSpec:
    """Sample one scene; see the module docstring for the exact draw order."""
    cfg.validate()
    rng = SplitMix64(seed)

    azimuth = rng.next_uniform(0.0, TWO_PI)
    distance = rng.next_uniform(*cfg.camera_distance)
    elevation = rng.next_uniform(*cfg.camera_elevation)
    camera = Camera(
        position=(distance * math.cos(azimuth), elevation, distance * math.sin(azimuth)),
        look_at=LOOK_AT,
        vfov=cfg.vfov,
        width=cfg.width,
        height=cfg.height,
    )
    light = rng.next_uniform(*cfg.light_intensity)

    names = ("individual", "stacked", "racked")
    extent = cfg.placement_extent
    drafts = []
    for _ in range(rng.next_int(*cfg.pallet_count)):
        arrangement = names[rng.choice_weighted(cfg.arrangement_weights)]
        x = rng.next_uniform(-extent, extent)
        z = rng.next_uniform(-extent, extent)
        yaw = rng.next_uniform(0.0, TWO_PI)
        stack = rng.next_int(*cfg.stack_count) if arrangement == "stacked" else 1
        drafts.append((arrangement, x, z, yaw, stack))

    rack = None
    racked = [i for i, d in enumerate(drafts) if d[0] == "racked"]
    rack_slots: dict[int, tuple[int, float]] = {}
    if racked:
        rack = RackSpec(
            x=rng.next_uniform(-extent, extent),
            z=rng.next_uniform(-extent, extent),
            yaw=rng.next_uniform(0.0, TWO_PI),
        )
        lat_max = (rack.bay_width - cfg.pallet_dims[0]) / 2.0
        for i in racked:
            level = rng.next_below(len(rack.shelf_heights))
            rack_slots[i] = (level, rng.next_uniform(-lat_max, lat_max))

    pallets = []
    for u, (arrangement, x, z, yaw, stack) in enumerate(drafts):
        if arrangement == "racked":
            level, lateral = rack_slots[u]
            k = racked.index(u)
            rot = rot_y(rack.yaw)
            depth_off = RACK_DEPTH_STEP * (k + 1)
            pallets.append(
                PalletUnit(
                    x=rack.x + rot[0, 0] * lateral + rot[0, 2] * depth_off,
                    y=rack.shelf_heights[level] + RACK_CLEARANCE * (k + 1),
                    z=rack.z + rot[2, 0] * lateral + rot[2, 2] * depth_off,
                    yaw=rack.yaw,
                    arrangement="racked",
                    stack_count=1,
                    dims=cfg.pallet_dims,
                )
            )
        else:
            # a sub-millimetre per-unit lift keeps overlapping units from
            # sharing top-face planes
            pallets.append(
                PalletUnit(
                    x=x,
                    y=u * GROUND_STEP,
                    z=z,
                    yaw=yaw,
                    arrangement=arrangement,
                    stack_count=stack,
                    dims=cfg.pallet_dims,
                )
            )

    occluders = []
    cam_pos = camera.position
    for _ in range(rng.next_int(*cfg.occluder_count)):
        for attempt in range(OCCLUDER_RETRIES + 1):
            cub = Cuboid(
                center=(
                    rng.next_uniform(-extent - 1.0, extent + 1.0),
                    0.0,
                    rng.next_uniform(-extent - 1.0, extent + 1.0),
                ),
                extents=(0.0, 0.0, 0.0),
                yaw=rng.next_uniform(0.0, TWO_PI),
            )
            ex = rng.next_uniform(*cfg.occluder_size)
            ey = rng.next_uniform(*cfg.occluder_size)
            ez = rng.next_uniform(*cfg.occluder_size)
            cy = rng.next_uniform(*cfg.occluder_height)
            cub = replace(
                cub,
                center=(cub.center[0], cy, cub.center[2]),
                extents=(ex, ey, ez),
            )
            if not cub.contains(cam_pos):
                occluders.append(cub)
                break
        else:
            raise RetryExhausted(
                "could not place an occluder away from the camera; "
                "occluder ranges engulf the camera shell"
            )

    materials: dict[str, int] = {}
    for u in range(len(pallets)):
        materials[f"pallet_{u}"] = rng.next_below(cfg.material_pool)
    if rack is not None:
        materials["rack"] = rng.next_below(cfg.material_pool)
    for k in range(len(occluders)):
        materials[f"occluder_{k}"] = rng.next_below(cfg.material_pool)

    return SceneSpec(
        seed=seed,
        camera=camera,
        light_intensity=light,
        pallets=tuple(pallets),
        rack=rack,
        occluders=tuple(occluders),
        material_ids=materials,
    )


def generate_batch(
    cfg: RandomisationConfig, count: int, master_seed: int
) -> list[SceneSpec]:
    """Scene i uses the i-th seed of the master stream, so any subset can be
    regenerated independently and in any order."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate_scene(cfg, s) for s in seed_stream(master_seed, count)]


def camera_basis(cam: Camera):
    """Orthonormal (right, up, forward) rows plus focal length in pixels."""
    pos = np.asarray(cam.position, dtype=float)
    fwd = np.asarray(cam.look_at, dtype=float) - pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(np.asarray(cam.up, dtype=float), fwd)
    norm = np.linalg.norm(right)
    if norm == 0.0:
        raise ValueError("camera up vector is parallel to the view direction")
    right = right / norm
    up = np.cross(fwd, right)
    f = (cam.height / 2.0) / math.tan(math.radians(cam.vfov) / 2.0)
    return pos, right, up, fwd, f


def project_point(cam: Camera, p) -> tuple[float, float, float] | None:
    """Pixel (u, v) and camera depth of a world point, or None behind the
    camera. u grows rightward, v downward, origin at the top-left corner."""
    pos, right, up, fwd, f = camera_basis(cam)
    rel = np.asarray(p, dtype=float) - pos
    z = float(rel @ fwd)
    if z <= 0.0:
        return None
    u = cam.width / 2.0 + f * float(rel @ right) / z
    v = cam.height / 2.0 - f * float(rel @ up) / z
    return (u, v, z)


@dataclass(frozen=True)
class SceneBody:
    """One cuboid of the scene with its owner tag, in canonical draw order."""

    cuboid: Cuboid
    kind: str  # pallet | rack | occluder
    pallet_index: int | None
    stack_level: int | None
    material_id: int


def scene_cuboids(spec: SceneSpec) -> list[SceneBody]:
    out = []
    for u, unit in enumerate(spec.pallets):
        material = spec.material_ids.get(f"pallet_{u}", 0)
        for s, cub in enumerate(unit.cuboids()):
            out.append(
                SceneBody(
                    cuboid=cub,
                    kind="pallet",
                    pallet_index=u,
                    stack_level=s,
                    material_id=material,
                )
            )
    if spec.rack is not None:
        material = spec.material_ids.get("rack", 0)
        for cub in spec.rack.cuboids():
            out.append(
                SceneBody(
                    cuboid=cub,
                    kind="rack",
                    pallet_index=None,
                    stack_level=None,
                    material_id=material,
                )
            )
    for k, cub in enumerate(spec.occluders):
        out.append(
            SceneBody(
                cuboid=cub,
                kind="occluder",
                pallet_index=None,
                stack_level=None,
                material_id=spec.material_ids.get(f"occluder_{k}", 0),
            )
        )
    return out


@dataclass(frozen=True)
class InstanceInfo:
    id: int
    kind: str  # body | face
    pallet_index: int
    stack_level: int
    face_index: int | None
    arrangement: str


@dataclass
class RenderOutput:
    image: np.ndarray  # (h, w, 3) uint8
    depth: np.ndarray  # (h, w) float64, inf where empty
    instances: tuple[InstanceInfo, ...]
    instance_masks: dict[int, np.ndarray]
    solo_pixel_counts: dict[int, int]


def _cuboid_face_quads(cub: Cuboid):
    """(face_index_or_None, world 4x3 quad, outward world normal) per face."""
    rot = rot_y(cub.yaw)
    center = np.asarray(cub.center, dtype=float)
    half = np.asarray(cub.extents, dtype=float) / 2.0
    quads = []
    for axis, sign, face_idx in _FACES:
        b_axis, c_axis = [a for a in range(3) if a != axis]
        corners = []
        for sb, sc in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            local = np.zeros(3)
            local[axis] = sign * half[axis]
            local[b_axis] = sb * half[b_axis]
            local[c_axis] = sc * half[c_axis]
            corners.append(rot @ local + center)
        normal = rot[:, axis] * sign
        quads.append((face_idx, np.asarray(corners), normal))
    return quads


def _clip_near(poly_cam: np.ndarray) -> np.ndarray:
    """Clip a camera-space polygon to z >= Z_NEAR (Sutherland-Hodgman)."""
    out = []
    n = len(poly_cam)
    for i in range(n):
        a, b = poly_cam[i], poly_cam[(i + 1) % n]
        a_in, b_in = a[2] >= Z_NEAR, b[2] >= Z_NEAR
        if a_in:
            out.append(a)
        if a_in != b_in:
            t = (Z_NEAR - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.asarray(out)


def rasterize_scene(spec: SceneSpec) -> RenderOutput:
    """Render the scene and return the image, depth, and per-instance masks.

    Body instances are pallet cuboids; face instances are the camera-facing
    side rectangles of those cuboids. Visibility is z-buffered at pixel
    centres with a strict depth test, ties going to the earlier surface in
    draw order. solo_pixel_counts holds each instance's pixel count with
    all other geometry removed, the denominator of the visibility fraction.
    """
    cam = spec.camera
    w, h = cam.width, cam.height
    pos, right, up, fwd, focal = camera_basis(cam)
    bodies = scene_cuboids(spec)

    zbuf = np.full((h, w), np.inf)
    winner = np.full((h, w), -1, dtype=np.int32)

    instances: list[InstanceInfo] = []
    solo_masks: dict[int, np.ndarray] = {}
    surf_body: list[int] = []
    surf_face: list[int] = []
    surf_material: list[int] = []

    def new_instance(kind, body, face_idx):
        info = InstanceInfo(
            id=len(instances) + 1,
            kind=kind,
            pallet_index=body.pallet_index,
            stack_level=body.stack_level,
            face_index=face_idx,
            arrangement=spec.pallets[body.pallet_index].arrangement,
        )
        instances.append(info)
        solo_masks[info.id] = np.zeros((h, w), dtype=bool)
        return info.id

    def raster_triangle(p0, p1, p2, surf_idx, coverage):
        (u0, v0, z0), (u1, v1, z1), (u2, v2, z2) = p0, p1, p2
        area2 = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area2 == 0.0:
            return
        if area2 < 0.0:
            u1, v1, z1, u2, v2, z2 = u2, v2, z2, u1, v1, z1
            area2 = -area2
        j0 = max(0, math.ceil(min(u0, u1, u2) - 0.5))
        j1 = min(w - 1, math.floor(max(u0, u1, u2) - 0.5))
        i0 = max(0, math.ceil(min(v0, v1, v2) - 0.5))
        i1 = min(h - 1, math.floor(max(v0, v1, v2) - 0.5))
        if j0 > j1 or i0 > i1:
            return
        X = np.arange(j0, j1 + 1, dtype=float) + 0.5
        Y = (np.arange(i0, i1 + 1, dtype=float) + 0.5)[:, None]
        e01 = (u1 - u0) * (Y - v0) - (v1 - v0) * (X - u0)
        e12 = (u2 - u1) * (Y - v1) - (v2 - v1) * (X - u1)
        e20 = (u0 - u2) * (Y - v2) - (v0 - v2) * (X - u2)
        inside = (e01 >= 0.0) & (e12 >= 0.0) & (e20 >= 0.0)
        if not inside.any():
            return
        inv_z = (e12 * (1.0 / z0) + e20 * (1.0 / z1) + e01 * (1.0 / z2)) / area2
        with np.errstate(divide="ignore"):
            z = 1.0 / inv_z
        window_z = zbuf[i0 : i1 + 1, j0 : j1 + 1]
        window_win = winner[i0 : i1 + 1, j0 : j1 + 1]
        better = inside & (z < window_z)
        window_z[better] = z[better]
        window_win[better] = surf_idx
        for mask in coverage:
            mask[i0 : i1 + 1, j0 : j1 + 1] |= inside

    for body in bodies:
        body_instance = None
        if body.kind == "pallet":
            body_instance = new_instance("body", body, None)
        for face_idx, quad, normal in _cuboid_face_quads(body.cuboid):
            if float(normal @ (pos - quad[0])) <= 0.0:
                continue
            face_instance = None
            if body.kind == "pallet" and face_idx is not None:
                face_instance = new_instance("face", body, face_idx)
            cam_poly = (quad - pos) @ np.stack([right, up, fwd]).T
            cam_poly = _clip_near(cam_poly)
            if len(cam_poly) < 3:
                continue
            us = w / 2.0 + focal * cam_poly[:, 0] / cam_poly[:, 2]
            vs = h / 2.0 - focal * cam_poly[:, 1] / cam_poly[:, 2]
            pts = list(zip(us, vs, cam_poly[:, 2]))

            surf_idx = len(surf_material)
            surf_body.append(0 if body_instance is None else body_instance)
            surf_face.append(0 if face_instance is None else face_instance)
            surf_material.append(body.material_id)

            coverage = []
            if body_instance is not None:
                coverage.append(solo_masks[body_instance])
            if face_instance is not None:
                coverage.append(solo_masks[face_instance])
            for k in range(1, len(pts) - 1):
                raster_triangle(pts[0], pts[k], pts[k + 1], surf_idx, coverage)

    scale = spec.light_intensity / 10.0
    tones = np.asarray(
        [PALETTE[m % len(PALETTE)] for m in surf_material] or [(0, 0, 0)],
        dtype=float,
    )
    shaded = np.floor(tones * scale + 0.5).astype(np.uint8)
    background = np.floor(np.asarray(BACKGROUND_TONE, dtype=float) * scale + 0.5).astype(
        np.uint8
    )
    image = np.empty((h, w, 3), dtype=np.uint8)
    image[:] = background
    hit = winner >= 0
    if hit.any():
        image[hit] = shaded[winner[hit]]

    body_of = np.asarray(surf_body or [0], dtype=np.int32)
    face_of = np.asarray(surf_face or [0], dtype=np.int32)
    owner_body = np.where(hit, body_of[np.where(hit, winner, 0)], 0)
    owner_face = np.where(hit, face_of[np.where(hit, winner, 0)], 0)

    instance_masks = {}
    for info in instances:
        owner = owner_body if info.kind == "body" else owner_face
        instance_masks[info.id] = owner == info.id

    solo_counts = {i: int(np.count_nonzero(m)) for i, m in solo_masks.items()}
    return RenderOutput(
        image=image,
        depth=zbuf,
        instances=tuple(instances),
        instance_masks=instance_masks,
        solo_pixel_counts=solo_counts,
    )


def scene_to_annotations(
    spec: SceneSpec,
    render: RenderOutput,
    min_visibility: float,
    image_id: int = 1,
    file_name: str = "",
    ann_id_start: int = 1,
) -> tuple[ImageRecord, list[Annotation]]:
    """Annotate every instance whose visible fraction reaches min_visibility.

    The fraction is visible pixels over the instance's pixel count rendered
    alone; instances with no visible pixel are always dropped.
    """
    if not 0.0 <= min_visibility <= 1.0:
        raise ValueError("min_visibility must be in [0, 1]")
    record = ImageRecord(
        id=image_id,
        file_name=file_name,
        width=spec.camera.width,
        height=spec.camera.height,
    )
    annotations = []
    next_id = ann_id_start
    for info in render.instances:
        mask = render.instance_masks[info.id]
        visible = int(np.count_nonzero(mask))
        solo = render.solo_pixel_counts[info.id]
        if visible == 0 or solo == 0 or visible / solo < min_visibility:
            continue
        annotations.append(
            Annotation(
                id=next_id,
                image_id=image_id,
                category_id=BODY_CATEGORY_ID if info.kind == "body" else FACE_CATEGORY_ID,
                segmentation=rle_encode(mask),
                bbox=mask_to_bbox(mask),
                area=float(visible),
                iscrowd=0,
                arrangement=info.arrangement,
            )
        )
        next_id += 1
    return record, annotations


def export_dataset(
    specs: list[SceneSpec], out_dir: str | os.PathLike, min_visibility: float = 0.05
) -> Dataset:
    """Render every scene, write PNGs plus one dataset JSON, return the dataset."""
    out_dir = os.fspath(out_dir)
    images = []
    annotations: list[Annotation] = []
    for i, spec in enumerate(specs):
        render = rasterize_scene(spec)
        file_name = os.path.join("images", f"scene_{i:05d}.png")
        save_image(render.image, os.path.join(out_dir, file_name))
        record, anns = scene_to_annotations(
            spec,
            render,
            min_visibility,
            image_id=i + 1,
            file_name=file_name,
            ann_id_start=len(annotations) + 1,
        )
        images.append(record)
        annotations.extend(anns)
    dataset = Dataset(
        images=tuple(images),
        categories=CATEGORIES,
        annotations=tuple(annotations),
    )
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, DATASET_FILENAME), "wb") as f:
        f.write(serialize_dataset(dataset))
    return dataset


def scene_to_json_obj(spec: SceneSpec) -> dict:
    cam = spec.camera
    rack = None
    if spec.rack is not None:
        rack = {
            "x": spec.rack.x,
            "z": spec.rack.z,
            "yaw": spec.rack.yaw,
            "bay_width": spec.rack.bay_width,
            "depth": spec.rack.depth,
            "shelf_heights": list(spec.rack.shelf_heights),
            "post_size": spec.rack.post_size,
            "post_height": spec.rack.post_height,
            "beam_height": spec.rack.beam_height,
            "beam_depth": spec.rack.beam_depth,
        }
    return {
        "seed": spec.seed,
        "camera": {
            "position": list(cam.position),
            "look_at": list(cam.look_at),
            "up": list(cam.up),
            "vfov": cam.vfov,
            "width": cam.width,
            "height": cam.height,
        },
        "light_intensity": spec.light_intensity,
        "pallets": [
            {
                "x": p.x,
                "y": p.y,
                "z": p.z,
                "yaw": p.yaw,
                "arrangement": p.arrangement,
                "stack_count": p.stack_count,
                "dims": list(p.dims),
            }
            for p in spec.pallets
        ],
        "rack": rack,
        "occluders": [
            {"center": list(c.center), "extents": list(c.extents), "yaw": c.yaw}
            for c in spec.occluders
        ],
        "material_ids": dict(spec.material_ids),
    }
