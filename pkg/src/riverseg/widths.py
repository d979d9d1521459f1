"""River-width measurement along a centerline.

Widths come from perpendicular transects: at each centerline vertex the
local tangent is estimated by central differences, the binary water mask
is sampled every half pixel along the perpendicular in both directions,
and the width is the length of the contiguous water run containing the
vertex.  Vertices on land, or whose run leaves the search range, are
flagged invalid.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .labels import CenterlinePolyline
from .raster import GeoTransform

__all__ = [
    "WidthSeries",
    "resample_centerline",
    "widths_along_centerline",
    "widths_csv",
]


@dataclass(frozen=True)
class WidthSeries:
    """Width versus chainage (arc length along the centerline), meters."""

    chainage: np.ndarray
    width: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "chainage", np.asarray(self.chainage, dtype=np.float64))
        object.__setattr__(self, "width", np.asarray(self.width, dtype=np.float64))
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))
        if not len(self.chainage) == len(self.width) == len(self.valid):
            raise ArgumentError("series columns must have equal length")
        if np.any(np.diff(self.chainage) <= 0):
            raise ArgumentError("chainage must be strictly increasing")
        if np.any(self.width < 0):
            raise ArgumentError("widths must be non-negative")

    def __len__(self) -> int:
        return len(self.chainage)


def resample_centerline(c: CenterlinePolyline, spacing: float = 100.0) -> CenterlinePolyline:
    """Arc-length-uniform vertices by linear interpolation.

    The vertex count is ``round(length / spacing) + 1`` (at least two),
    so the actual spacing is the nearest uniform divisor of the total
    length; endpoints are always kept.
    """
    if spacing <= 0:
        raise ArgumentError(f"spacing must be positive, got {spacing}")
    pts = c.vertices
    seg = np.diff(pts, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    total = float(seglen.sum())
    if total <= 0:
        raise ArgumentError("degenerate centerline has zero length")
    n = max(1, int(round(total / spacing)))
    targets = np.linspace(0.0, total, n + 1)
    cum = np.concatenate(([0.0], np.cumsum(seglen)))
    xs = np.interp(targets, cum, pts[:, 0])
    ys = np.interp(targets, cum, pts[:, 1])
    return CenterlinePolyline(np.column_stack([xs, ys]), nominal_spacing=total / n)


def _unit_tangents(pts: np.ndarray) -> np.ndarray:
    """Per-vertex unit tangent by central differences (one-sided at ends)."""
    t = np.empty_like(pts)
    t[1:-1] = pts[2:] - pts[:-2]
    t[0] = pts[1] - pts[0]
    t[-1] = pts[-1] - pts[-2]
    norm = np.hypot(t[:, 0], t[:, 1])
    return t / norm[:, None]


def widths_along_centerline(mask: np.ndarray, geo: GeoTransform,
                            c: CenterlinePolyline,
                            max_search: float = 500.0) -> WidthSeries:
    """Measure the water width at every centerline vertex.

    ``mask`` is a boolean water grid, ``geo`` its world transform
    (square pixels required), ``max_search`` the per-direction search
    limit in meters.
    """
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        mask = mask != 0
    if mask.ndim != 2:
        raise ArgumentError("mask must be 2-D")
    px = abs(geo.pixel_size_x)
    if abs(abs(geo.pixel_size_y) - px) > 1e-9 * px:
        raise ArgumentError("width transects require square pixels")
    if max_search <= 0:
        raise ArgumentError(f"max_search must be positive, got {max_search}")
    h, w = mask.shape
    step_m = 0.5 * px
    max_steps = max(1, int(max_search / step_m))

    verts = np.array([geo.world_to_pixel(x, y) for x, y in c.vertices])
    tangents = _unit_tangents(verts)
    normals = np.column_stack([-tangents[:, 1], tangents[:, 0]])

    seg = np.diff(c.vertices, axis=0)
    chainage = np.concatenate(([0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))))

    def water_at(col: float, row: float) -> bool:
        i, j = int(np.floor(row)), int(np.floor(col))
        return 0 <= i < h and 0 <= j < w and bool(mask[i, j])

    widths = np.zeros(len(verts))
    valid = np.zeros(len(verts), dtype=bool)
    for v, ((col, row), (nx, ny)) in enumerate(zip(verts, normals)):
        if not water_at(col, row):
            continue
        runs = []
        truncated = False
        for sign in (1.0, -1.0):
            k = 0
            while k < max_steps and water_at(col + sign * (k + 1) * 0.5 * nx,
                                             row + sign * (k + 1) * 0.5 * ny):
                k += 1
            if k == max_steps:
                truncated = True
            runs.append(k)
        if truncated:
            continue
        widths[v] = (runs[0] + runs[1] + 1) * step_m
        valid[v] = True
    return WidthSeries(chainage, widths, valid)


def widths_csv(series: WidthSeries) -> str:
    """CSV report: chainage_m, width_m, valid."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["chainage_m", "width_m", "valid"])
    for cja, width, ok in zip(series.chainage, series.width, series.valid):
        writer.writerow([f"{cja:.3f}", f"{width:.3f}", "true" if ok else "false"])
    return out.getvalue()
