"""Geometry kernel: polygons, binary masks, RLE, IoU, contour extraction.

Conventions used throughout the package:

* A mask is a ``numpy`` bool array of shape ``(height, width)``; pixel
  ``(row i, col j)`` covers the unit square ``[j, j+1] x [i, i+1]`` and its
  centre is ``(j + 0.5, i + 0.5)`` in (x, y) pixel coordinates.
* A polygon is an ``(n, 2)`` float array of (x, y) vertices.
* Rasterisation sets a pixel iff its centre lies inside the even-odd union
  of the rings; a scanline crossing exactly at a pixel centre counts.
* RLE is column-major with alternating run counts starting at the zero run
  (the first count may be 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class RleLengthMismatch(ValueError):
    """RLE counts do not sum to height*width."""


@dataclass(frozen=True)
class PolygonSet:
    """Segmentation as rings of flat [x1, y1, ..., xn, yn] pixel coordinates."""

    rings: tuple[tuple[float, ...], ...]

    def ring_arrays(self) -> list[np.ndarray]:
        return [np.asarray(r, dtype=float).reshape(-1, 2) for r in self.rings]


@dataclass(frozen=True)
class Rle:
    """Column-major run-length encoded bitmask; size is (height, width)."""

    size: tuple[int, int]
    counts: tuple[int, ...]


Segmentation = PolygonSet | Rle


def polygon_area(vertices) -> float:
    """Absolute shoelace area; orientation independent."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 2)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x, -1), np.roll(y, -1)
    return abs(float(np.sum(x * y2 - x2 * y))) / 2.0


def signed_polygon_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float).reshape(-1, 2)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x, -1), np.roll(y, -1)
    return float(np.sum(x * y2 - x2 * y)) / 2.0


def polygon_to_bbox(vertices) -> tuple[float, float, float, float]:
    """Tight axis-aligned (x, y, w, h) bounds of the vertices."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 2)
    x0, y0 = v.min(axis=0)
    x1, y1 = v.max(axis=0)
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def rasterize_polygons(rings, width: int, height: int) -> np.ndarray:
    """Scanline even-odd fill of a list of rings into a (height, width) mask.

    Pixel (i, j) is set iff its centre (j+0.5, i+0.5) is inside the even-odd
    union; geometry outside the image is clipped.
    """
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    # toggles[i, j] counts scanline crossings at row i strictly left of or at
    # pixel centre j; parity of the running sum gives membership.
    toggles = np.zeros((height, width + 1), dtype=np.int64)
    for ring in rings:
        v = np.asarray(ring, dtype=float).reshape(-1, 2)
        if len(v) < 3:
            continue
        xs, ys = v[:, 0], v[:, 1]
        xe, ye = np.roll(xs, -1), np.roll(ys, -1)
        for x1, y1, x2, y2 in zip(xs, ys, xe, ye):
            if y1 == y2:
                continue
            ylo, yhi = (y1, y2) if y1 < y2 else (y2, y1)
            # rows whose centre i+0.5 lies in [ylo, yhi)
            i_lo = max(0, math.ceil(ylo - 0.5))
            i_hi = min(height - 1, math.ceil(yhi - 0.5) - 1)
            if i_hi < i_lo:
                continue
            rows = np.arange(i_lo, i_hi + 1)
            yc = rows + 0.5
            xc = x1 + (yc - y1) * (x2 - x1) / (y2 - y1)
            j0 = np.ceil(xc - 0.5).astype(np.int64)
            keep = j0 < width
            j0 = np.clip(j0[keep], 0, width)
            np.add.at(toggles, (rows[keep], j0), 1)
    return (np.cumsum(toggles[:, :width], axis=1) % 2).astype(bool)


def rle_encode(mask: np.ndarray) -> Rle:
    """Encode a mask as column-major RLE starting with the zero run."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    flat = m.T.ravel()
    if flat.size == 0:
        return Rle(size=(h, w), counts=())
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return Rle(size=(h, w), counts=tuple(int(c) for c in counts))


def rle_decode(rle: Rle) -> np.ndarray:
    """Decode column-major RLE back into a mask; exact inverse of rle_encode."""
    h, w = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.sum() != h * w:
        raise RleLengthMismatch(
            f"RLE counts sum to {int(counts.sum())}, expected {h * w} for size {rle.size}"
        )
    values = np.resize(np.array([0, 1], dtype=np.uint8), len(counts))
    flat = np.repeat(values, counts).astype(bool)
    return flat.reshape(w, h).T


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two equal-size masks; 0 when both empty."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return inter / union if union else 0.0


def bbox_iou(a, b) -> float:
    """Rectangle IoU of two (x, y, w, h) boxes; 0 when the union is empty."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    inter = max(0.0, ix) * max(0.0, iy)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def segmentation_to_mask(seg: Segmentation, width: int, height: int) -> np.ndarray:
    """Materialise either segmentation form as a (height, width) mask."""
    if isinstance(seg, PolygonSet):
        return rasterize_polygons(seg.ring_arrays(), width, height)
    if isinstance(seg, Rle):
        if seg.size != (height, width):
            raise ValueError(
                f"RLE size {seg.size} disagrees with requested ({height}, {width})"
            )
        return rle_decode(seg)
    raise TypeError(f"not a segmentation: {type(seg).__name__}")


def segmentation_to_bbox(seg: Segmentation) -> tuple[float, float, float, float]:
    """(x, y, w, h) of a segmentation: vertex bounds for polygons, pixel bounds for RLE."""
    if isinstance(seg, PolygonSet):
        pts = np.concatenate(seg.ring_arrays()) if seg.rings else np.zeros((1, 2))
        return polygon_to_bbox(pts)
    return mask_to_bbox(rle_decode(seg))


def instance_iou(a: Segmentation, b: Segmentation, width: int, height: int) -> float:
    """IoU of two segmentations materialised on a (height, width) grid."""
    return mask_iou(
        segmentation_to_mask(a, width, height), segmentation_to_mask(b, width, height)
    )


def shift_mask(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate a mask by whole pixels (dx right, dy down), zero-filling."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    out = np.zeros_like(m)
    src_rows = slice(max(0, -dy), min(h, h - dy))
    src_cols = slice(max(0, -dx), min(w, w - dx))
    dst_rows = slice(max(0, dy), min(h, h + dy))
    dst_cols = slice(max(0, dx), min(w, w + dx))
    out[dst_rows, dst_cols] = m[src_rows, src_cols]
    return out


def mask_to_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight (x, y, w, h) covering the set pixels as unit squares; zeros if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (
        float(cols[0]),
        float(rows[0]),
        float(cols[-1] - cols[0] + 1),
        float(rows[-1] - rows[0] + 1),
    )


def _check_convex_positive(vertices: np.ndarray, name: str) -> None:
    n = len(vertices)
    if n < 3:
        raise ValueError(f"{name}: need >= 3 vertices")
    d = np.roll(vertices, -1, axis=0) - vertices
    cross = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
    if np.any(cross < 0):
        raise ValueError(f"{name}: polygon is not convex in positive orientation")


def convex_polygon_intersection_area(a, b) -> float:
    """Exact intersection area of two convex polygons.

    Both polygons must be ordered with positive signed area in image
    coordinates (x right, y down). Sutherland-Hodgman clipping of a
    against each edge of b, then shoelace. Serves as the analytic oracle
    for rasterised IoU checks.
    """
    pa = np.asarray(a, dtype=float).reshape(-1, 2)
    pb = np.asarray(b, dtype=float).reshape(-1, 2)
    _check_convex_positive(pa, "a")
    _check_convex_positive(pb, "b")

    subject = [tuple(p) for p in pa]
    for i in range(len(pb)):
        cx, cy = pb[i]
        nx, ny = pb[(i + 1) % len(pb)]
        ex, ey = nx - cx, ny - cy
        clipped: list[tuple[float, float]] = []
        for j in range(len(subject)):
            px, py = subject[j]
            qx, qy = subject[(j + 1) % len(subject)]
            # interior of a positive-orientation ring lies where the edge
            # cross product is non-negative
            p_in = ex * (py - cy) - ey * (px - cx) >= 0.0
            q_in = ex * (qy - cy) - ey * (qx - cx) >= 0.0
            if p_in:
                clipped.append((px, py))
            if p_in != q_in:
                denom = ex * (qy - py) - ey * (qx - px)
                t = (ex * (cy - py) - ey * (cx - px)) / denom
                clipped.append((px + t * (qx - px), py + t * (qy - py)))
        subject = clipped
        if not subject:
            return 0.0
    return polygon_area(np.asarray(subject))


# Directions for contour walking, (dx, dy) over corner lattice coordinates.
_EAST, _NORTH, _WEST, _SOUTH = (1, 0), (0, -1), (-1, 0), (0, 1)


def _component_outer_ring(comp: np.ndarray) -> np.ndarray:
    """Outer boundary of one 4-connected component, vertices at integer corners.

    Directed boundary edges keep the component on the walker's left; at
    pinch corners the leftmost available turn is taken so the outer ring and
    any hole rings stay separate loops. Holes are identified by orientation
    and dropped by the caller.
    """
    h, w = comp.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = comp
    inside = padded[1:-1, 1:-1]
    up = padded[:-2, 1:-1]
    down = padded[2:, 1:-1]
    left = padded[1:-1, :-2]
    right = padded[1:-1, 2:]

    # start vertex -> {direction: end vertex}
    edges: dict[tuple[int, int], dict[tuple[int, int], tuple[int, int]]] = {}

    def add(start, direction, end):
        edges.setdefault(start, {})[direction] = end

    for r, c in zip(*np.nonzero(inside & ~up)):
        add((int(c) + 1, int(r)), _WEST, (int(c), int(r)))
    for r, c in zip(*np.nonzero(inside & ~down)):
        add((int(c), int(r) + 1), _EAST, (int(c) + 1, int(r) + 1))
    for r, c in zip(*np.nonzero(inside & ~left)):
        add((int(c), int(r)), _SOUTH, (int(c), int(r) + 1))
    for r, c in zip(*np.nonzero(inside & ~right)):
        add((int(c) + 1, int(r) + 1), _NORTH, (int(c) + 1, int(r)))

    def left_of(d):
        return (d[1], -d[0])

    def right_of(d):
        return (-d[1], d[0])

    # Preferring the left turn keeps each loop hugging its own pixel at a
    # pinch corner, so loops stay simple and the successor of a directed
    # edge depends on geometry alone. Walking until the starting state
    # repeats therefore traces exactly one closed loop.
    used: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    best: np.ndarray | None = None
    best_area = 0.0
    for start in sorted(edges):
        for d0 in sorted(edges[start]):
            if (start, d0) in used:
                continue
            loop: list[tuple[int, int]] = []
            pos, d = start, d0
            while (pos, d) not in used:
                used.add((pos, d))
                loop.append(pos)
                nxt = edges[pos][d]
                for cand in (left_of(d), d, right_of(d)):
                    if cand in edges.get(nxt, ()):
                        pos, d = nxt, cand
                        break
                else:
                    raise RuntimeError("boundary walk hit a dead end")
            # collapse collinear runs
            pts = []
            n = len(loop)
            for k in range(n):
                prev, cur, nxt_pt = loop[k - 1], loop[k], loop[(k + 1) % n]
                if (cur[0] - prev[0], cur[1] - prev[1]) != (
                    nxt_pt[0] - cur[0],
                    nxt_pt[1] - cur[1],
                ):
                    pts.append(cur)
            ring = np.asarray(pts, dtype=float)
            area = signed_polygon_area(ring)
            # outer rings run clockwise in screen coordinates, giving a
            # negative shoelace sum; hole rings come out positive
            if area < best_area:
                best_area = area
                best = ring
    if best is None:
        raise RuntimeError("component produced no boundary ring")
    return best


def _perpendicular_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = math.hypot(ab[0], ab[1])
    if denom == 0.0:
        return np.hypot(pts[:, 0] - a[0], pts[:, 1] - a[1])
    return np.abs(ab[0] * (a[1] - pts[:, 1]) - ab[1] * (a[0] - pts[:, 0])) / denom


def rdp_simplify(points: np.ndarray, eps: float) -> np.ndarray:
    """Ramer-Douglas-Peucker reduction of an open polyline (endpoints kept)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3 or eps <= 0:
        return pts
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        seg = pts[lo + 1 : hi]
        dists = _perpendicular_distance(seg, pts[lo], pts[hi])
        k = int(np.argmax(dists))
        if dists[k] > eps:
            mid = lo + 1 + k
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return pts[keep]


def _simplify_ring(ring: np.ndarray, eps: float) -> np.ndarray:
    if eps <= 0 or len(ring) <= 3:
        return ring
    # anchor the ring at its first vertex and the vertex farthest from it,
    # then simplify the two open chains
    d = np.hypot(ring[:, 0] - ring[0, 0], ring[:, 1] - ring[0, 1])
    pivot = int(np.argmax(d))
    if pivot == 0:
        return ring
    first = rdp_simplify(ring[: pivot + 1], eps)
    second = rdp_simplify(np.concatenate([ring[pivot:], ring[:1]]), eps)
    out = np.concatenate([first[:-1], second[:-1]])
    if len(out) < 3:
        return ring
    return out


def mask_to_polygons(mask: np.ndarray, simplify_eps: float = 0.0) -> list[np.ndarray]:
    """Outer polygon of each 4-connected component; holes dropped.

    Vertices sit on integer pixel corners so rasterising the result
    reproduces the (hole-filled) component exactly. With simplify_eps > 0,
    each ring is reduced by Ramer-Douglas-Peucker at that tolerance.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return []
    labels, n = ndimage.label(m, structure=FOUR_CONNECTED)
    out = []
    for k in range(1, n + 1):
        ring = _component_outer_ring(labels == k)
        out.append(_simplify_ring(ring, simplify_eps))
    return out
