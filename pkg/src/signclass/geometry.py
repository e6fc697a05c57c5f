"""Polygon-to-crop geometry, tablet grid binning, and normal-map decoding.

All functions are pure over immutable inputs and safe to call from parallel
data-loading workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import cv2
import numpy as np

CROP_SIZE = 224


class GeometryError(Exception):
    pass


@dataclass(frozen=True)
class SquareBox:
    """Axis-aligned square in pixel coordinates; may extend past image bounds."""

    x0: int
    y0: int
    side: int


def squarify(polygon: Sequence[tuple[float, float]]) -> SquareBox:
    """Square bounding box of a polygon's extreme points.

    The extreme-point rectangle (pixel-aligned via floor/ceil) is extended
    along its shorter axis to a square, splitting the extension symmetrically
    (the odd pixel goes to the right/bottom). The polygon must have nonzero
    extent in at least one axis.
    """
    if len(polygon) < 1:
        raise GeometryError("empty polygon")
    xs = [p[0] for p in polygon]
    ys = [p[1] for p in polygon]
    x_min, x_max = math.floor(min(xs)), math.ceil(max(xs))
    y_min, y_max = math.floor(min(ys)), math.ceil(max(ys))
    width = x_max - x_min
    height = y_max - y_min
    if width == 0 and height == 0:
        raise GeometryError("polygon has zero extent in both axes")
    side = max(width, height)
    x0 = x_min - (side - width) // 2
    y0 = y_min - (side - height) // 2
    return SquareBox(x0=x0, y0=y0, side=side)


def crop_region(image: np.ndarray, box: SquareBox) -> np.ndarray:
    """Cut ``box`` out of ``image``, zero-filling any part outside the image.

    Returns a side x side x C array of the image dtype. Raises if the box does
    not intersect the image at all.
    """
    if box.side <= 0:
        raise GeometryError(f"non-positive box side {box.side}")
    height, width = image.shape[:2]
    x0, y0 = box.x0, box.y0
    x1, y1 = x0 + box.side, y0 + box.side
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, width), min(y1, height)
    if cx0 >= cx1 or cy0 >= cy1:
        raise GeometryError(f"box {box} lies entirely outside the {width}x{height} image")
    out_shape = (box.side, box.side) + image.shape[2:]
    out = np.zeros(out_shape, dtype=image.dtype)
    out[cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0] = image[cy0:cy1, cx0:cx1]
    return out


def extract_crop(image: np.ndarray, box: SquareBox, size: int = CROP_SIZE) -> np.ndarray:
    """Clamped, zero-padded square crop resized to size x size (bilinear)."""
    region = crop_region(image, box)
    if region.shape[0] == size and region.shape[1] == size:
        return region.copy()
    return cv2.resize(region, (size, size), interpolation=cv2.INTER_LINEAR)


def polygon_centroid(polygon: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Arithmetic mean of the vertices (not the area centroid)."""
    n = len(polygon)
    return (sum(p[0] for p in polygon) / n, sum(p[1] for p in polygon) / n)


def normalized_centroid(
    polygon: Sequence[tuple[float, float]], width_px: int, height_px: int
) -> tuple[float, float]:
    cx, cy = polygon_centroid(polygon)
    return (cx / width_px, cy / height_px)


def grid_cell(centroid: tuple[float, float], grid: int) -> tuple[int, int]:
    """Map a normalized centroid (u, v) in [0,1]^2 to a (row, col) cell.

    Cells are half-open with the last row/column closed, so every point of the
    unit square lands in exactly one cell.
    """
    if grid not in (3, 5):
        raise GeometryError(f"unsupported grid size {grid} (expected 3 or 5)")
    u, v = centroid
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise GeometryError(f"centroid ({u}, {v}) outside the unit square")
    row = min(int(v * grid), grid - 1)
    col = min(int(u * grid), grid - 1)
    return row, col


def decode_normals(image: np.ndarray) -> np.ndarray:
    """Decode an 8-bit normal-map image to per-pixel vectors in [-1, 1]^3.

    x is stored in the red channel, y in green, z in blue; each channel value
    c maps to 2c/255 - 1.
    """
    if image.ndim != 3 or image.shape[2] < 3:
        raise GeometryError("normal map must be a 3-channel image")
    return image[..., :3].astype(np.float64) * (2.0 / 255.0) - 1.0


def encode_normals(vectors: np.ndarray) -> np.ndarray:
    """Inverse of decode_normals, rounding to the nearest 8-bit value."""
    return np.clip(np.rint((np.asarray(vectors, dtype=np.float64) + 1.0) * (255.0 / 2.0)), 0, 255).astype(np.uint8)


def polygon_mask(polygon: Sequence[tuple[float, float]], width_px: int, height_px: int) -> np.ndarray:
    pts = np.asarray(polygon, dtype=np.float64)
    mask = np.zeros((height_px, width_px), dtype=np.uint8)
    cv2.fillPoly(mask, [np.rint(pts).astype(np.int32)], 1)
    return mask.astype(bool)


def average_normal(
    normal_image: np.ndarray,
    region: np.ndarray | Sequence[tuple[float, float]],
) -> np.ndarray:
    """Unit-length mean surface normal over a region of a normal-map image.

    ``region`` is either a boolean mask of the image shape or a polygon in
    pixel coordinates. Raises on an empty region or a zero-length mean vector.
    """
    decoded = decode_normals(normal_image)
    if isinstance(region, np.ndarray) and region.dtype == bool:
        mask = region
    else:
        mask = polygon_mask(region, normal_image.shape[1], normal_image.shape[0])
    if not mask.any():
        raise GeometryError("region contains no pixels")
    mean = decoded[mask].mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise GeometryError("mean normal has zero length; region normals cancel out")
    return mean / norm


def cell_mask(width_px: int, height_px: int, row: int, col: int, grid: int) -> np.ndarray:
    """Boolean mask of one grid cell, consistent with grid_cell's binning."""
    ys = (np.arange(height_px) + 0.5) / height_px
    xs = (np.arange(width_px) + 0.5) / width_px
    row_sel = np.minimum((ys * grid).astype(int), grid - 1) == row
    col_sel = np.minimum((xs * grid).astype(int), grid - 1) == col
    return row_sel[:, None] & col_sel[None, :]
