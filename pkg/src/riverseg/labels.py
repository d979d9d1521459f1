"""Water-label construction: NDWI thresholding, connected-component cleanup,
morphological denoising, and manual exclusions.

Soft labels encode per-pixel water likelihood in four 8-bit classes:
0 (land), 70 (maybe water), 170 (likely water), 255 (definitely water).
The full pipeline lives in :func:`forge_labels`; the individual steps are
exposed for interactive tuning and for the labeling service.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, IoError
from .raster import BandKind, GeoTransform, Raster, minmax_scale, toa_gain

LAND, MAYBE_WATER, LIKELY_WATER, DEFINITE_WATER = 0, 70, 170, 255
LABEL_VALUES = (LAND, MAYBE_WATER, LIKELY_WATER, DEFINITE_WATER)

_LABEL_LUT = np.zeros(256, dtype=bool)
_LABEL_LUT[list(LABEL_VALUES)] = True


def is_label_array(values: np.ndarray) -> bool:
    """True when every element is one of the four soft label values."""
    values = np.asarray(values)
    return values.dtype == np.uint8 and bool(_LABEL_LUT[values.ravel()].all())

# Soft labels at or above this value count as water for filtering and truth.
WATER_CUTOFF = 128


@dataclass(frozen=True)
class ThresholdTriple:
    """The three manually tuned NDWI cut points.

    When ``top_band_water`` is false the highest index band is treated as
    not-water and the middle band becomes definite water.
    """

    th1: float
    th2: float
    th3: float
    top_band_water: bool = True

    def __post_init__(self):
        if not (-1.0 <= self.th1 < self.th2 < self.th3 <= 1.0):
            raise ArgumentError(
                f"thresholds must satisfy -1 <= th1 < th2 < th3 <= 1, got "
                f"({self.th1}, {self.th2}, {self.th3})")


@dataclass
class LabelMask:
    """Soft water-probability grid plus a provenance record of how it was made."""

    values: np.ndarray  # uint8, (H, W)
    geo: GeoTransform = field(default_factory=GeoTransform)
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.uint8)
        if self.values.ndim != 2:
            raise ArgumentError("label mask must be 2-D")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def to_raster(self) -> Raster:
        return Raster(self.values[None], (BandKind.Label,), self.geo, dict(self.provenance))

    @classmethod
    def from_raster(cls, r: Raster) -> "LabelMask":
        if r.band_count != 1 or r.data.dtype != np.uint8:
            raise ArgumentError("label raster must be single-band uint8")
        return cls(r.data[0].copy(), r.geo, dict(r.meta))


@dataclass
class CenterlinePolyline:
    """Ordered world-coordinate river centerline vertices."""

    vertices: np.ndarray  # (N, 2) float64 world coordinates
    nominal_spacing: float = 0.0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(self.vertices) < 2:
            raise ArgumentError("centerline needs at least 2 vertices")
        seg = np.diff(self.vertices, axis=0)
        if np.any(np.all(seg == 0, axis=1)):
            raise ArgumentError("consecutive centerline vertices must be distinct")
        if self.nominal_spacing <= 0:
            self.nominal_spacing = float(np.mean(np.hypot(seg[:, 0], seg[:, 1])))

    def length(self) -> float:
        seg = np.diff(self.vertices, axis=0)
        return float(np.sum(np.hypot(seg[:, 0], seg[:, 1])))


def _segments_properly_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return d1 != d2 and d3 != d4 and 0 not in (d1, d2, d3, d4)


@dataclass
class ExclusionPolygon:
    """Closed world-coordinate ring marking pixels to force to land."""

    ring: np.ndarray  # (N, 2) float64, implicitly closed

    def __post_init__(self):
        self.ring = np.asarray(self.ring, dtype=np.float64).reshape(-1, 2)
        if len(self.ring) >= 2 and np.all(self.ring[0] == self.ring[-1]):
            self.ring = self.ring[:-1]
        if len(self.ring) < 3:
            raise ArgumentError("exclusion polygon needs at least 3 distinct vertices")
        n = len(self.ring)
        edges = [(self.ring[i], self.ring[(i + 1) % n]) for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue  # adjacent edges share an endpoint
                if _segments_properly_intersect(*edges[i], *edges[j]):
                    raise ArgumentError(f"polygon self-intersects between edges {i} and {j}")


# ---------------------------------------------------------------------------
# Index and thresholding
# ---------------------------------------------------------------------------

def ndwi(green: np.ndarray, nir: np.ndarray) -> np.ndarray:
    """(G - NIR) / (G + NIR) as float32; 0 where the denominator vanishes."""
    green = np.asarray(green, dtype=np.float32)
    nir = np.asarray(nir, dtype=np.float32)
    if green.shape != nir.shape:
        raise ArgumentError(f"band shapes differ: {green.shape} vs {nir.shape}")
    num = green - nir
    den = green + nir
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def soft_threshold_labels(idx: np.ndarray, t: ThresholdTriple) -> np.ndarray:
    """Bin an NDWI grid into the four soft label classes (uint8)."""
    idx = np.asarray(idx)
    mid, top = (LIKELY_WATER, DEFINITE_WATER) if t.top_band_water else (DEFINITE_WATER, LAND)
    out = np.full(idx.shape, top, dtype=np.uint8)
    out[idx < t.th3] = mid
    out[idx < t.th2] = MAYBE_WATER
    out[idx < t.th1] = LAND
    return out


# ---------------------------------------------------------------------------
# Auxiliary mask for connected-component seeding
# ---------------------------------------------------------------------------

def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ArgumentError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3 * sigma)
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return (w / w.sum()).astype(np.float32)


def gaussian_blur(m: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), edge-clamped."""
    kernel = gaussian_kernel_1d(sigma)
    radius = len(kernel) // 2
    x = np.asarray(m, dtype=np.float32)
    h, w = x.shape
    pad = np.pad(x, ((0, 0), (radius, radius)), mode="edge")
    horiz = np.zeros_like(x)
    for i, wk in enumerate(kernel):
        horiz += wk * pad[:, i:i + w]
    pad = np.pad(horiz, ((radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(x)
    for i, wk in enumerate(kernel):
        out += wk * pad[i:i + h, :]
    return out


def _bresenham_points(x0: int, y0: int, x1: int, y1: int):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        yield x, y
        if x == x1 and y == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def rasterize_centerline(c: CenterlinePolyline, geo: GeoTransform, w: int, h: int) -> np.ndarray:
    """Bresenham-rasterize a world polyline onto a (h, w) binary grid."""
    out = np.zeros((h, w), dtype=np.uint8)
    px = np.array([geo.world_to_pixel(x, y) for x, y in c.vertices])
    cols = np.rint(px[:, 0] - 0.5).astype(np.int64)
    rows = np.rint(px[:, 1] - 0.5).astype(np.int64)
    # generous margin so segments crossing the raster still rasterize
    lo, hi = -4 * max(w, h), 5 * max(w, h)
    for i in range(len(cols) - 1):
        x0, y0, x1, y1 = cols[i], rows[i], cols[i + 1], rows[i + 1]
        if max(x0, x1) < lo or min(x0, x1) > hi or max(y0, y1) < lo or min(y0, y1) > hi:
            continue
        for x, y in _bresenham_points(int(x0), int(y0), int(x1), int(y1)):
            if 0 <= x < w and 0 <= y < h:
                out[y, x] = 1
    return out


def build_aux_mask(labels: np.ndarray, centerline: np.ndarray, sigma: float) -> np.ndarray:
    """Blur the soft labels, union the centerline, binarize every nonzero pixel.

    The labels themselves are not altered; the result only seeds the
    largest-connected-component filter.
    """
    labels = np.asarray(labels)
    centerline = np.asarray(centerline)
    if labels.shape != centerline.shape:
        raise ArgumentError(f"shapes differ: {labels.shape} vs {centerline.shape}")
    blurred = gaussian_blur(labels.astype(np.float32), sigma)
    return ((blurred > 0) | (centerline > 0)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Connected components (run-based union-find)
# ---------------------------------------------------------------------------

def _check_binary(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.dtype == bool:
        return m.astype(np.uint8)
    if not np.isin(m, (0, 1)).all():
        raise ArgumentError("mask must be strictly binary (values 0/1)")
    return m.astype(np.uint8)


def _extract_runs(mask: np.ndarray):
    """Row-major horizontal runs of 1s as (row, x0, x1-exclusive) arrays."""
    h, w = mask.shape
    padded = np.zeros((h, w + 1), dtype=np.uint8)
    padded[:, :w] = mask
    flat = padded.ravel()
    d = np.diff(np.concatenate(([0], flat)))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    rows = starts // (w + 1)
    x0 = starts - rows * (w + 1)
    x1 = ends - rows * (w + 1)
    return rows.astype(np.int64), x0.astype(np.int64), x1.astype(np.int64)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        p = self.parent
        while p[i] != i:
            p[i] = p[p[i]]  # path halving
            i = p[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _run_components(mask: np.ndarray, connectivity: int):
    if connectivity not in (4, 8):
        raise ArgumentError(f"connectivity must be 4 or 8, got {connectivity}")
    rows, x0, x1 = _extract_runs(mask)
    n = len(rows)
    uf = _UnionFind(n)
    slack = 0 if connectivity == 4 else 1
    row_bounds = np.searchsorted(rows, np.arange(mask.shape[0] + 1))
    for r in range(1, mask.shape[0]):
        a, b = row_bounds[r - 1], row_bounds[r]
        c, d = row_bounds[r], row_bounds[r + 1]
        i, j = a, c
        while i < b and j < d:
            # runs [x0,x1) touch if they overlap (4-conn) or within one column (8-conn)
            if x0[i] < x1[j] + slack and x0[j] < x1[i] + slack:
                uf.union(i, j)
            # advance the run that ends first; it cannot touch anything later
            if x1[i] <= x1[j]:
                i += 1
            else:
                j += 1
    return rows, x0, x1, uf


def label_components(mask: np.ndarray, connectivity: int = 8):
    """Label 1-components with consecutive ids (row-major discovery order).

    Returns (labels int32 array with 0 background, populations array indexed
    by id-1).
    """
    m = _check_binary(mask)
    rows, x0, x1, uf = _run_components(m, connectivity)
    n = len(rows)
    labels = np.zeros(m.shape, dtype=np.int32)
    if n == 0:
        return labels, np.zeros(0, dtype=np.int64)
    roots = np.fromiter((uf.find(i) for i in range(n)), dtype=np.int64, count=n)
    # runs are in row-major order, so first occurrence of a root fixes its id
    order: dict[int, int] = {}
    ids = np.empty(n, dtype=np.int32)
    for i, r in enumerate(roots):
        if r not in order:
            order[r] = len(order) + 1
        ids[i] = order[r]
    pops = np.zeros(len(order), dtype=np.int64)
    np.add.at(pops, ids - 1, x1 - x0)
    for i in range(n):
        labels[rows[i], x0[i]:x1[i]] = ids[i]
    return labels, pops


def largest_connected_component(m: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Keep only the most populous component; ties break to the component
    containing the smallest row-major pixel index. Empty in, empty out."""
    mask = _check_binary(m)
    labels, pops = label_components(mask, connectivity)
    out = np.zeros_like(mask)
    if len(pops) == 0:
        return out
    # ids are assigned in row-major discovery order, so the smallest id among
    # the maximal populations is exactly the tie-break winner
    winner = int(np.argmax(pops)) + 1
    out[labels == winner] = 1
    return out


def apply_component_filter(labels: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Multiply soft labels by a binary keep mask (never raises a label)."""
    labels = np.asarray(labels)
    keep = _check_binary(keep)
    if labels.shape != keep.shape:
        raise ArgumentError(f"shapes differ: {labels.shape} vs {keep.shape}")
    return (labels * keep).astype(np.uint8)


# ---------------------------------------------------------------------------
# Morphology
# ---------------------------------------------------------------------------

def _sliding_bool(m: np.ndarray, radius: int, combine, border: bool) -> np.ndarray:
    h, w = m.shape
    size = 2 * radius + 1
    pad = np.pad(m, radius, constant_values=border)
    acc = pad[radius:radius + h, 0:w].copy()
    for k in range(1, size):
        combine(acc, pad[radius:radius + h, k:k + w], out=acc)
    pad = np.pad(acc, ((radius, radius), (0, 0)), constant_values=border)
    out = pad[0:h, :].copy()
    for k in range(1, size):
        combine(out, pad[k:k + h, :], out=out)
    return out


def erode(m: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion by a (2r+1)^2 square; pixels beyond the border count as 1."""
    if radius <= 0:
        return np.asarray(m, dtype=bool).copy()
    return _sliding_bool(np.asarray(m, dtype=bool), radius, np.logical_and, True)


def dilate(m: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a (2r+1)^2 square; pixels beyond the border count as 0."""
    if radius <= 0:
        return np.asarray(m, dtype=bool).copy()
    return _sliding_bool(np.asarray(m, dtype=bool), radius, np.logical_or, False)


def binary_open(m: np.ndarray, radius: int) -> np.ndarray:
    return dilate(erode(m, radius), radius)


def binary_close(m: np.ndarray, radius: int) -> np.ndarray:
    return erode(dilate(m, radius), radius)


def morph_denoise(labels: np.ndarray, open_radius: int = 1, close_radius: int = 1) -> np.ndarray:
    """Open-then-close the water support (label >= 70); restore soft values
    where the support survives, zero elsewhere."""
    if open_radius < 0 or close_radius < 0:
        raise ArgumentError("radii must be >= 0")
    labels = np.asarray(labels)
    support = labels >= MAYBE_WATER
    cleaned = binary_close(binary_open(support, open_radius), close_radius)
    return np.where(cleaned & support, labels, 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Exclusions
# ---------------------------------------------------------------------------

def _even_odd_inside(ring: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon for a grid of points (xs cols, ys rows)."""
    px, py = np.meshgrid(xs, ys)
    inside = np.zeros(px.shape, dtype=bool)
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xi)
    return inside


def apply_exclusions(labels: np.ndarray, polys, geo: GeoTransform) -> np.ndarray:
    """Zero every pixel whose center falls inside any exclusion polygon."""
    labels = np.asarray(labels, dtype=np.uint8).copy()
    h, w = labels.shape
    if not polys:
        return labels
    cols = np.arange(w)
    rows = np.arange(h)
    xs = geo.origin_x + (cols + 0.5) * geo.pixel_size_x
    ys = geo.origin_y + (rows + 0.5) * geo.pixel_size_y
    for poly in polys:
        if not isinstance(poly, ExclusionPolygon):
            poly = ExclusionPolygon(np.asarray(poly))
        ring = poly.ring
        # restrict the even-odd test to the polygon's pixel bounding box
        px = (ring[:, 0] - geo.origin_x) / geo.pixel_size_x
        py = (ring[:, 1] - geo.origin_y) / geo.pixel_size_y
        c0 = max(int(np.floor(px.min())) - 1, 0)
        c1 = min(int(np.ceil(px.max())) + 1, w)
        r0 = max(int(np.floor(py.min())) - 1, 0)
        r1 = min(int(np.ceil(py.max())) + 1, h)
        if c0 >= c1 or r0 >= r1:
            continue
        inside = _even_odd_inside(ring, xs[c0:c1], ys[r0:r1])
        region = labels[r0:r1, c0:c1]
        region[inside] = 0
    return labels


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

@dataclass
class ForgeParams:
    """Tunable knobs of the label pipeline beyond the threshold triple."""

    blur_sigma: float = 4.0
    open_radius: int = 1
    close_radius: int = 1
    connectivity: int = 8
    gains: np.ndarray | None = None
    offsets: np.ndarray | None = None
    exclusions: tuple = ()


def pick_ndwi_bands(r: Raster) -> tuple[np.ndarray, np.ndarray, BandKind]:
    """Green plus the preferred NIR band (NIR2 when available)."""
    if not r.has_band(BandKind.Green):
        raise ArgumentError("NDWI needs a Green band")
    nir_kind = BandKind.NIR2 if r.has_band(BandKind.NIR2) else BandKind.NIR1
    if not r.has_band(nir_kind):
        raise ArgumentError("NDWI needs a NIR1 or NIR2 band")
    return r.band(BandKind.Green), r.band(nir_kind), nir_kind


def forge_labels(r: Raster, t: ThresholdTriple, centerline: CenterlinePolyline | None,
                 params: ForgeParams | None = None) -> LabelMask:
    """Run the full label pipeline: radiometric gain, normalization, NDWI,
    soft thresholding, centerline-seeded component filtering, denoise,
    exclusions. Deterministic in all inputs."""
    params = params or ForgeParams()
    work = r
    if params.gains is not None:
        work = toa_gain(work, params.gains,
                        params.offsets if params.offsets is not None else np.zeros(r.band_count))
    norm = minmax_scale(work)
    green, nir, nir_kind = pick_ndwi_bands(norm)
    idx = ndwi(green, nir)
    soft = soft_threshold_labels(idx, t)

    if centerline is not None:
        cl = rasterize_centerline(centerline, r.geo, r.width, r.height)
    else:
        cl = np.zeros((r.height, r.width), dtype=np.uint8)
    aux = build_aux_mask(soft, cl, params.blur_sigma)
    keep = largest_connected_component(aux, params.connectivity)
    filtered = apply_component_filter(soft, keep)
    denoised = morph_denoise(filtered, params.open_radius, params.close_radius)
    final = apply_exclusions(denoised, params.exclusions, r.geo)

    provenance = {
        "th1": repr(t.th1), "th2": repr(t.th2), "th3": repr(t.th3),
        "top_band_water": str(t.top_band_water),
        "blur_sigma": repr(params.blur_sigma),
        "open_radius": str(params.open_radius),
        "close_radius": str(params.close_radius),
        "connectivity": str(params.connectivity),
        "nir_band": nir_kind.name,
        "toa_applied": str(params.gains is not None),
        "exclusion_count": str(len(params.exclusions)),
        "centerline_used": str(centerline is not None),
    }
    return LabelMask(final, r.geo, provenance)


# ---------------------------------------------------------------------------
# Text interchange for centerlines and exclusions
# ---------------------------------------------------------------------------

def save_centerline(c: CenterlinePolyline, path) -> None:
    lines = [f"{float(x)!r} {float(y)!r}" for x, y in c.vertices]
    Path(path).write_text("\n".join(lines) + "\n")


def load_centerline(path) -> CenterlinePolyline:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read centerline {path}: {e}") from e
    pts = [tuple(map(float, ln.split())) for ln in text.splitlines() if ln.strip()]
    return CenterlinePolyline(np.array(pts))


def save_exclusions(polys, path) -> None:
    lines = []
    for p in polys:
        ring = p.ring if isinstance(p, ExclusionPolygon) else np.asarray(p)
        lines.append(" ".join(f"{float(v)!r}" for v in ring.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_exclusions(path) -> list[ExclusionPolygon]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read exclusions {path}: {e}") from e
    polys = []
    for ln in text.splitlines():
        if not ln.strip():
            continue
        vals = np.array([float(v) for v in ln.split()])
        polys.append(ExclusionPolygon(vals.reshape(-1, 2)))
    return polys
