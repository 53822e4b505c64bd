"""Binary mask geometry: polygon rasterization, COCO RLE codec, overlap measures.

Masks are dense ``numpy`` boolean arrays of shape ``(height, width)``. Boxes use
the COCO ``(x, y, w, h)`` convention with a top-left origin, and a pixel
``(r, c)`` is considered inside a region when its center ``(c + 0.5, r + 0.5)``
is.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

__all__ = [
    "Box",
    "RleMask",
    "MaskError",
    "rasterize_polygon",
    "rasterize_polygons",
    "box_mask",
    "rle_encode",
    "rle_decode",
    "rle_to_string",
    "rle_from_string",
    "encode_coco",
    "decode_coco",
    "segmentation_to_mask",
    "area",
    "intersect",
    "union",
    "iou",
    "coverage_fraction",
]


class MaskError(ValueError):
    pass


class Box(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    def pixel_bounds(self, height: int, width: int) -> tuple[int, int, int, int]:
        """Row/column slice bounds of the pixels whose centers fall in the box.

        The box is half-open: ``x <= c + 0.5 < x + w``.
        """
        c0 = int(np.ceil(self.x - 0.5))
        c1 = int(np.ceil(self.x + self.w - 0.5))
        r0 = int(np.ceil(self.y - 0.5))
        r1 = int(np.ceil(self.y + self.h - 0.5))
        c0, c1 = max(c0, 0), min(c1, width)
        r0, r1 = max(r0, 0), min(r1, height)
        return r0, max(r0, r1), c0, max(c0, c1)


@dataclass(frozen=True)
class RleMask:
    """Uncompressed run-length mask.

    ``counts`` alternate zero-runs and one-runs over the column-major pixel
    order, starting with a (possibly empty) zero-run.
    """

    size: tuple[int, int]
    counts: tuple[int, ...]

    def __post_init__(self):
        h, w = self.size
        if any(c < 0 for c in self.counts):
            raise MaskError("RLE counts must be non-negative")
        if sum(self.counts) != h * w:
            raise MaskError(
                f"RLE counts sum to {sum(self.counts)}, expected {h}x{w}={h * w}"
            )

    @property
    def area(self) -> int:
        return sum(self.counts[1::2])


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MaskError(f"mask dimensions differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# rasterization


def rasterize_polygon(
    poly: Sequence[Sequence[float]], height: int, width: int
) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centers.

    ``poly`` is a sequence of ``(x, y)`` vertices; the closing edge is implied.
    Vertices may lie outside the canvas.
    """
    pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise MaskError(f"polygon needs at least 3 vertices, got {len(pts)}")
    if height <= 0 or width <= 0:
        raise MaskError(f"invalid canvas {height}x{width}")
    out = np.zeros((height, width), dtype=bool)

    xi, yi = pts[:, 0], pts[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    cx = np.arange(width, dtype=np.float64) + 0.5
    lo = max(int(np.floor(yi.min() - 0.5)), 0)
    hi = min(int(np.ceil(yi.max() + 0.5)), height)
    for r in range(lo, hi):
        y = r + 0.5
        crossing = (yi > y) != (yj > y)
        if not crossing.any():
            continue
        x0, y0, x1, y1 = xi[crossing], yi[crossing], xj[crossing], yj[crossing]
        xs = np.sort((x1 - x0) * (y - y0) / (y1 - y0) + x0)
        # pixel is inside iff an odd number of crossings lie strictly right of it
        right = len(xs) - np.searchsorted(xs, cx, side="right")
        out[r] = (right & 1).astype(bool)
    return out


def rasterize_polygons(
    polys: Iterable[Sequence[float]], height: int, width: int
) -> np.ndarray:
    """Union of several polygons given as flat COCO ``[x0, y0, x1, y1, ...]`` lists."""
    out = np.zeros((height, width), dtype=bool)
    for flat in polys:
        out |= rasterize_polygon(np.asarray(flat, dtype=np.float64).reshape(-1, 2), height, width)
    return out


def box_mask(box: Sequence[float], height: int, width: int) -> np.ndarray:
    r0, r1, c0, c1 = Box(*box).pixel_bounds(height, width)
    out = np.zeros((height, width), dtype=bool)
    out[r0:r1, c0:c1] = True
    return out


# ---------------------------------------------------------------------------
# RLE codec


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.ravel(order="F")
    if flat.size == 0:
        return RleMask((h, w), ())
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask((h, w), tuple(runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    h, w = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.sum() != h * w:
        raise MaskError(f"RLE counts sum to {counts.sum()}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((w, h)).T.copy()


def rle_to_string(counts: Sequence[int]) -> str:
    """COCO compressed counts string (LEB128-like 5-bit groups, offset 48)."""
    out = []
    for i, x in enumerate(counts):
        x = int(x)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = x != -1 if c & 0x10 else x != 0
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_from_string(s: Union[str, bytes]) -> list[int]:
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            if p >= len(s):
                raise MaskError("truncated RLE string")
            c = ord(s[p]) - 48
            if not 0 <= c < 64:
                raise MaskError(f"invalid RLE character {s[p]!r} at {p}")
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and c & 0x10:
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def encode_coco(mask: np.ndarray) -> dict:
    """Mask to a COCO compressed-RLE dict ``{"size": [h, w], "counts": str}``."""
    rle = rle_encode(mask)
    return {"size": list(rle.size), "counts": rle_to_string(rle.counts)}


def decode_coco(obj: dict) -> np.ndarray:
    h, w = (int(v) for v in obj["size"])
    counts = obj["counts"]
    if isinstance(counts, (str, bytes)):
        counts = rle_from_string(counts)
    return rle_decode(RleMask((h, w), tuple(int(c) for c in counts)))


def segmentation_to_mask(segmentation, height: int, width: int) -> np.ndarray:
    """Rasterize a COCO segmentation (polygon list or RLE dict) on an image canvas."""
    if isinstance(segmentation, dict):
        mask = decode_coco(segmentation)
        if mask.shape != (height, width):
            raise MaskError(
                f"RLE size {list(mask.shape)} does not match image {height}x{width}"
            )
        return mask
    if isinstance(segmentation, list):
        polys = [p for p in segmentation if len(p) >= 6]
        return rasterize_polygons(polys, height, width)
    raise MaskError(f"unsupported segmentation type {type(segmentation).__name__}")


# ---------------------------------------------------------------------------
# measures


def area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def intersect(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    return np.logical_and(a, b)


def union(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    return np.logical_or(a, b)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    _check_same_shape(a, b)
    inter = np.count_nonzero(a & b)
    uni = np.count_nonzero(a | b)
    return inter / uni if uni else 0.0


def coverage_fraction(mask: np.ndarray, box: Sequence[float]) -> float:
    """Share of the mask's pixels whose centers fall inside ``box``."""
    total = np.count_nonzero(mask)
    if total == 0:
        raise MaskError("coverage of an empty mask is undefined")
    r0, r1, c0, c1 = Box(*box).pixel_bounds(*mask.shape)
    return np.count_nonzero(mask[r0:r1, c0:c1]) / total
