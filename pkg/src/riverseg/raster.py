"""Multi-band raster data model and primitive operations.

A :class:`Raster` is an immutable N-band pixel grid in band-planar, row-major
layout together with band semantics and an affine world transform.  Rasters
travel between tools in the RSRF binary container (see :func:`save_raster`)
and can be exchanged with other software as 16-bit PGM.

Digital Numbers from the supported satellites are 11-bit, so uint16 rasters
are validated against a 0..2047 range.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ArgumentError, BoundsError, FormatError, IoError

MAX_DN = 2047  # 11-bit sensor quantization

RSRF_MAGIC = b"RSRF"
RSRF_VERSION = 1

_DTYPE_CODES = {np.dtype(np.uint16): 0, np.dtype(np.float32): 1, np.dtype(np.uint8): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class BandKind(IntEnum):
    """Semantic role of one raster band."""

    Pan = 0
    Coastal = 1
    Blue = 2
    Green = 3
    Yellow = 4
    Red = 5
    RedEdge = 6
    NIR1 = 7
    NIR2 = 8
    Index = 9
    Label = 10
    Probability = 11


# Band orders of the supported sensor products.
MS4_BANDS = (BandKind.Blue, BandKind.Green, BandKind.Red, BandKind.NIR1)
MS8_BANDS = (
    BandKind.Coastal,
    BandKind.Blue,
    BandKind.Green,
    BandKind.Yellow,
    BandKind.Red,
    BandKind.RedEdge,
    BandKind.NIR1,
    BandKind.NIR2,
)


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel-to-world mapping in a planar CRS (meters).

    ``origin_x/origin_y`` locate the outer corner of pixel (0, 0);
    ``pixel_size_y`` is negative for north-up rasters.
    """

    origin_x: float = 0.0
    origin_y: float = 0.0
    pixel_size_x: float = 1.0
    pixel_size_y: float = -1.0

    def __post_init__(self):
        if self.pixel_size_x == 0 or self.pixel_size_y == 0:
            raise ArgumentError("pixel sizes must be nonzero")

    def pixel_to_world(self, col: float, row: float) -> tuple[float, float]:
        """World coordinates of the pixel-grid position (col, row).

        Integer+0.5 positions are pixel centers; integers are corners.
        """
        return (self.origin_x + col * self.pixel_size_x,
                self.origin_y + row * self.pixel_size_y)

    def world_to_pixel(self, x: float, y: float) -> tuple[float, float]:
        return ((x - self.origin_x) / self.pixel_size_x,
                (y - self.origin_y) / self.pixel_size_y)

    def shifted(self, x0: int, y0: int) -> "GeoTransform":
        """Transform of a sub-raster whose pixel (0,0) is this raster's (x0,y0)."""
        return GeoTransform(self.origin_x + x0 * self.pixel_size_x,
                            self.origin_y + y0 * self.pixel_size_y,
                            self.pixel_size_x, self.pixel_size_y)

    def scaled(self, fx: float, fy: float) -> "GeoTransform":
        """Transform after resampling by in/out dimension ratios fx, fy."""
        return GeoTransform(self.origin_x, self.origin_y,
                            self.pixel_size_x * fx, self.pixel_size_y * fy)


@dataclass(frozen=True)
class Window:
    """A rectangular pixel region, fully contained in its parent raster."""

    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ArgumentError(f"window dims must be positive, got {self.w}x{self.h}")

    def contained_in(self, width: int, height: int) -> bool:
        return 0 <= self.x0 and 0 <= self.y0 and self.x0 + self.w <= width and self.y0 + self.h <= height


@dataclass
class Raster:
    """N-band pixel grid with band semantics and a world transform.

    ``data`` has shape (bands, height, width); the object is treated as
    immutable after construction.
    """

    data: np.ndarray
    bands: tuple[BandKind, ...]
    geo: GeoTransform = field(default_factory=GeoTransform)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ArgumentError(f"raster data must be 2-D or 3-D, got ndim={self.data.ndim}")
        self.bands = tuple(BandKind(b) for b in self.bands)
        if len(self.bands) != self.data.shape[0]:
            raise ArgumentError(
                f"band list length {len(self.bands)} != data planes {self.data.shape[0]}")
        if self.data.dtype not in _DTYPE_CODES:
            raise ArgumentError(f"unsupported raster dtype {self.data.dtype}")
        if self.data.dtype == np.uint16 and self.data.size and int(self.data.max()) > MAX_DN:
            raise ArgumentError(f"uint16 DN exceeds {MAX_DN} (11-bit range)")

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def band_count(self) -> int:
        return self.data.shape[0]

    def band(self, kind: BandKind) -> np.ndarray:
        """The first plane with the given semantic kind."""
        for i, b in enumerate(self.bands):
            if b == kind:
                return self.data[i]
        raise ArgumentError(f"raster has no {kind.name} band")

    def has_band(self, kind: BandKind) -> bool:
        return kind in self.bands

    def __eq__(self, other) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return (self.bands == other.bands
                and self.geo == other.geo
                and self.meta == other.meta
                and self.data.dtype == other.data.dtype
                and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data, equal_nan=True))


# ---------------------------------------------------------------------------
# RSRF container
# ---------------------------------------------------------------------------

def _encode_meta(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ArgumentError(f"metadata key/value must not contain '=' in key or newlines: {k!r}")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_meta(raw: bytes) -> dict[str, str]:
    meta: dict[str, str] = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        meta[k] = v
    return meta


def _pack_header(width: int, height: int, bands: tuple[BandKind, ...], dtype,
                 compress: bool, geo: GeoTransform, meta: dict[str, str]) -> bytes:
    raw_meta = _encode_meta(meta)
    head = struct.pack(
        "<4sHIIHBB",
        RSRF_MAGIC, RSRF_VERSION, width, height, len(bands),
        _DTYPE_CODES[np.dtype(dtype)], 1 if compress else 0)
    head += bytes(int(b) for b in bands)
    head += struct.pack("<4d", geo.origin_x, geo.origin_y,
                        geo.pixel_size_x, geo.pixel_size_y)
    head += struct.pack("<I", len(raw_meta)) + raw_meta
    return head


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated RSRF: wanted {n} bytes, got {len(buf)}")
    return buf


def _parse_header(f) -> tuple[int, int, int, np.dtype, bool, tuple[BandKind, ...], GeoTransform, dict[str, str]]:
    magic, version, width, height, nbands, dtype_code, flag = struct.unpack(
        "<4sHIIHBB", _read_exact(f, 18))
    if magic != RSRF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, not an RSRF file")
    if version != RSRF_VERSION:
        raise FormatError(f"unsupported RSRF version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code}")
    if nbands == 0 or width == 0 or height == 0:
        raise FormatError("zero-sized raster header")
    try:
        kinds = tuple(BandKind(b) for b in _read_exact(f, nbands))
    except ValueError as e:
        raise FormatError(f"unknown band kind: {e}") from e
    gt = GeoTransform(*struct.unpack("<4d", _read_exact(f, 32)))
    (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
    meta = _decode_meta(_read_exact(f, meta_len))
    return width, height, nbands, _CODE_DTYPES[dtype_code], bool(flag), kinds, gt, meta


def raster_to_bytes(r: Raster, compress: bool = False) -> bytes:
    """Serialize to the RSRF container; lossless for all supported dtypes."""
    payload = r.data.tobytes()
    if compress:
        payload = zlib.compress(payload, 6)
    head = _pack_header(r.width, r.height, r.bands, r.data.dtype, compress, r.geo, r.meta)
    return head + payload


def raster_from_buffer(buf, offset: int = 0, length: int | None = None,
                       copy: bool = True) -> Raster:
    """Parse an RSRF blob out of a bytes-like buffer.

    With ``copy=False`` an uncompressed payload is aliased rather than
    copied; the caller must then treat the buffer as owned by the raster.
    """
    end = len(buf) if length is None else offset + length
    mv = memoryview(buf)[offset:end]

    def need(n, pos):
        if pos + n > len(mv):
            raise FormatError(f"truncated RSRF: wanted {n} bytes at {pos}")

    need(18, 0)
    magic, version, width, height, nbands, dtype_code, flag = struct.unpack_from(
        "<4sHIIHBB", mv, 0)
    if magic != RSRF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, not an RSRF blob")
    if version != RSRF_VERSION:
        raise FormatError(f"unsupported RSRF version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code}")
    if nbands == 0 or width == 0 or height == 0:
        raise FormatError("zero-sized raster header")
    dtype = _CODE_DTYPES[dtype_code]
    pos = 18
    need(nbands, pos)
    try:
        kinds = tuple(BandKind(b) for b in bytes(mv[pos:pos + nbands]))
    except ValueError as e:
        raise FormatError(f"unknown band kind: {e}") from e
    pos += nbands
    need(32 + 4, pos)
    gt = GeoTransform(*struct.unpack_from("<4d", mv, pos))
    pos += 32
    (meta_len,) = struct.unpack_from("<I", mv, pos)
    pos += 4
    need(meta_len, pos)
    meta = _decode_meta(bytes(mv[pos:pos + meta_len]))
    pos += meta_len

    expected = nbands * height * width * dtype.itemsize
    payload = mv[pos:]
    if flag:
        try:
            payload = zlib.decompress(payload)
        except zlib.error as e:
            raise FormatError(f"corrupt DEFLATE payload: {e}") from e
    if len(payload) != expected:
        raise FormatError(f"payload size {len(payload)} != expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(nbands, height, width)
    if copy:
        data = data.copy()
    return Raster(data, kinds, gt, meta)


def raster_from_bytes(buf: bytes) -> Raster:
    return raster_from_buffer(buf)


def save_raster(r: Raster, path, compress: bool = False) -> None:
    """Write an RSRF file such that ``load_raster`` reproduces ``r`` bit-exactly."""
    try:
        Path(path).write_bytes(raster_to_bytes(r, compress))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_raster(path) -> Raster:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    return raster_from_bytes(buf)


@dataclass(frozen=True)
class RasterHeader:
    width: int
    height: int
    band_count: int
    dtype: np.dtype
    compressed: bool
    bands: tuple[BandKind, ...]
    geo: GeoTransform
    meta: dict[str, str]
    payload_offset: int


def peek_raster(path) -> RasterHeader:
    """Read only the RSRF header (cheap; no payload I/O)."""
    try:
        with open(path, "rb") as f:
            width, height, nbands, dtype, compressed, kinds, gt, meta = _parse_header(f)
            off = f.tell()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    return RasterHeader(width, height, nbands, dtype, compressed, kinds, gt, meta, off)


def read_raster_window(path, win: Window, header: RasterHeader | None = None) -> Raster:
    """Read one window of an uncompressed RSRF file with O(window) memory."""
    h = header or peek_raster(path)
    if h.compressed:
        raise FormatError("windowed reads require an uncompressed RSRF file")
    if not win.contained_in(h.width, h.height):
        raise BoundsError(f"window {win} outside raster {h.width}x{h.height}")
    item = h.dtype.itemsize
    out = np.empty((h.band_count, win.h, win.w), dtype=h.dtype)
    with open(path, "rb") as f:
        for b in range(h.band_count):
            plane = h.payload_offset + b * h.height * h.width * item
            for j in range(win.h):
                f.seek(plane + ((win.y0 + j) * h.width + win.x0) * item)
                out[b, j] = np.frombuffer(f.read(win.w * item), dtype=h.dtype)
    return Raster(out, h.bands, h.geo.shifted(win.x0, win.y0), {})


class RasterWriter:
    """Incremental writer for large uncompressed RSRF outputs.

    The full file is sized up front; ``write_block`` may then fill disjoint
    regions in any order with O(block) memory.
    """

    def __init__(self, path, width: int, height: int, bands: tuple[BandKind, ...],
                 dtype, geo: GeoTransform, meta: dict[str, str] | None = None):
        self.width, self.height = width, height
        self.bands = tuple(BandKind(b) for b in bands)
        self.dtype = np.dtype(dtype)
        if self.dtype not in _DTYPE_CODES:
            raise ArgumentError(f"unsupported raster dtype {self.dtype}")
        header = _pack_header(width, height, self.bands, self.dtype, False, geo, meta or {})
        self._offset = len(header)
        try:
            self._f = open(path, "wb")
            self._f.write(header)
            total = self._offset + len(self.bands) * height * width * self.dtype.itemsize
            self._f.truncate(total)
        except OSError as e:
            raise IoError(f"cannot write {path}: {e}") from e

    def write_block(self, x0: int, y0: int, block: np.ndarray) -> None:
        """Write (bands, h, w) values at pixel offset (x0, y0)."""
        if block.ndim == 2:
            block = block[None]
        nb, bh, bw = block.shape
        if nb != len(self.bands):
            raise ArgumentError(f"block has {nb} bands, writer expects {len(self.bands)}")
        if not Window(x0, y0, bw, bh).contained_in(self.width, self.height):
            raise BoundsError("block outside output raster")
        block = np.ascontiguousarray(block, dtype=self.dtype)
        item = self.dtype.itemsize
        for b in range(nb):
            plane = self._offset + b * self.height * self.width * item
            for j in range(bh):
                self._f.seek(plane + ((y0 + j) * self.width + x0) * item)
                self._f.write(block[b, j].tobytes())

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# PGM interchange (16-bit grayscale, single band)
# ---------------------------------------------------------------------------

def save_pgm(r: Raster, path) -> None:
    """Export a single-band uint16 raster as binary PGM (P5, big-endian)."""
    if r.band_count != 1 or r.data.dtype != np.uint16:
        raise ArgumentError("PGM export requires a single uint16 band")
    header = f"P5\n{r.width} {r.height}\n65535\n".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(r.data[0].astype(">u2").tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_pgm(path, kind: BandKind = BandKind.Pan, geo: GeoTransform | None = None) -> Raster:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if not buf.startswith(b"P5"):
        raise FormatError("not a binary PGM (P5) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 65535:
        raise FormatError(f"PGM maxval {maxval} out of range")
    dtype = ">u2" if maxval > 255 else np.uint8
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    data = data.astype(np.uint16).reshape(height, width)
    return Raster(np.minimum(data, MAX_DN)[None], (kind,), geo or GeoTransform(), {})


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def crop(r: Raster, win: Window) -> Raster:
    """Copy a window out of ``r``, shifting the geo origin accordingly."""
    if not win.contained_in(r.width, r.height):
        raise BoundsError(f"window {win} outside raster {r.width}x{r.height}")
    data = r.data[:, win.y0:win.y0 + win.h, win.x0:win.x0 + win.w].copy()
    return Raster(data, r.bands, r.geo.shifted(win.x0, win.y0), dict(r.meta))


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # pixel-center alignment: output center i+0.5 maps to input coord scaled by n_in/n_out
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    lo = np.minimum(lo, n_in - 2) if n_in > 1 else np.zeros_like(lo)
    frac = src - lo
    return lo, lo + 1 if n_in > 1 else lo, frac


def resample_bilinear(r: Raster, out_w: int, out_h: int) -> Raster:
    """Bilinear resampling with pixel-center alignment and edge clamping."""
    if out_w < 1 or out_h < 1:
        raise ArgumentError(f"output dims must be >= 1, got {out_w}x{out_h}")
    x0, x1, fx = _bilinear_axis(r.width, out_w)
    y0, y1, fy = _bilinear_axis(r.height, out_h)
    src = r.data.astype(np.float32)
    fx = fx.astype(np.float32)[None, :]
    fy = fy.astype(np.float32)[:, None]
    out = np.empty((r.band_count, out_h, out_w), dtype=np.float32)
    for b in range(r.band_count):
        p = src[b]
        top = p[np.ix_(y0, x0)] * (1 - fx) + p[np.ix_(y0, x1)] * fx
        bot = p[np.ix_(y1, x0)] * (1 - fx) + p[np.ix_(y1, x1)] * fx
        out[b] = top * (1 - fy) + bot * fy
    if r.data.dtype == np.uint16:
        out_data = np.clip(np.rint(out), 0, MAX_DN).astype(np.uint16)
    elif r.data.dtype == np.uint8:
        out_data = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    else:
        out_data = out
    geo = r.geo.scaled(r.width / out_w, r.height / out_h)
    return Raster(out_data, r.bands, geo, dict(r.meta))


def minmax_scale(r: Raster) -> Raster:
    """Per-band (v-min)/(max-min) into [0,1]; constant bands map to zeros."""
    src = r.data.astype(np.float32)
    out = np.zeros_like(src)
    for b in range(r.band_count):
        lo = float(src[b].min())
        hi = float(src[b].max())
        if hi > lo:
            out[b] = (src[b] - lo) / (hi - lo)
    return Raster(out, r.bands, r.geo, dict(r.meta))


def toa_gain(r: Raster, gains, offsets) -> Raster:
    """Per-band affine radiometric correction: v' = gain*v + offset (float32)."""
    gains = np.asarray(gains, dtype=np.float32)
    offsets = np.asarray(offsets, dtype=np.float32)
    if gains.shape != (r.band_count,) or offsets.shape != (r.band_count,):
        raise ArgumentError(
            f"gains/offsets must have length {r.band_count}, got {gains.shape}/{offsets.shape}")
    out = r.data.astype(np.float32) * gains[:, None, None] + offsets[:, None, None]
    return Raster(out, r.bands, r.geo, dict(r.meta))


# ---------------------------------------------------------------------------
# Radiometric sidecar metadata
# ---------------------------------------------------------------------------

def parse_sidecar(path, band_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Read per-band TOA gains/offsets from a key=value sidecar file.

    Keys: ``abscal_<i>`` and ``offset_<i>`` per band plus ``solar_zenith_deg``;
    the effective gain is abscal / cos(solar zenith).
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read sidecar {path}: {e}") from e
    kv: dict[str, float] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        kv[k.strip()] = float(v)
    zen_deg = kv.get("solar_zenith_deg", 0.0)
    if not 0.0 <= zen_deg < 90.0:
        raise ArgumentError(f"solar zenith {zen_deg:.1f} deg has no daylight path")
    cosz = np.cos(np.deg2rad(zen_deg))
    gains = np.empty(band_count, np.float32)
    offsets = np.empty(band_count, np.float32)
    for i in range(band_count):
        try:
            gains[i] = kv[f"abscal_{i}"] / cosz
            offsets[i] = kv.get(f"offset_{i}", 0.0)
        except KeyError as e:
            raise ArgumentError(f"sidecar missing {e} for band {i}") from e
    return gains, offsets


def write_sidecar(path, abscal, offsets, solar_zenith_deg: float = 0.0) -> None:
    lines = [f"solar_zenith_deg={solar_zenith_deg}"]
    for i, (a, o) in enumerate(zip(abscal, offsets)):
        lines.append(f"abscal_{i}={a}")
        lines.append(f"offset_{i}={o}")
    Path(path).write_text("\n".join(lines) + "\n")
