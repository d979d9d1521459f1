"""Training-chip pipeline: tiling labeled rasters, panchromatic label
transfer, train/val splitting, and the RSCH binary record store.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ArgumentError, FormatError, IoError
from .labels import WATER_CUTOFF, LabelMask, is_label_array
from .raster import (
    GeoTransform,
    Raster,
    Window,
    crop,
    raster_from_buffer,
    raster_to_bytes,
    resample_bilinear,
)

CHIP_MAGIC = b"RSCH"
CHIP_VERSION = 1

TILE_SIZE = 732
MIN_WATER_FRAC = 0.001


@dataclass
class ChipRecord:
    """One training sample: an image chip, its label chip, and provenance."""

    image: Raster
    label: LabelMask
    source_id: str
    window: Window

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.label.height, self.label.width):
            raise ArgumentError(
                f"image {self.image.height}x{self.image.width} and label "
                f"{self.label.height}x{self.label.width} dims differ")
        if not is_label_array(self.label.values):
            raise ArgumentError("label values must be in {0, 70, 170, 255}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChipRecord):
            return NotImplemented
        return (self.source_id == other.source_id
                and self.window == other.window
                and self.image == other.image
                and np.array_equal(self.label.values, other.label.values)
                and self.label.geo == other.label.geo
                and self.label.provenance == other.label.provenance)


def water_fraction(label_values: np.ndarray) -> float:
    """Share of pixels labeled at least 'likely water'."""
    return float(np.mean(np.asarray(label_values) >= WATER_CUTOFF))


def tile_grid(width: int, height: int, tile: int) -> list[Window]:
    """Stride-``tile`` window grid with the last row/column anchored to the edge."""
    if tile > width or tile > height:
        raise ArgumentError(f"tile {tile} exceeds image dims {width}x{height}")
    xs = list(range(0, width - tile + 1, tile))
    if xs[-1] != width - tile:
        xs.append(width - tile)
    ys = list(range(0, height - tile + 1, tile))
    if ys[-1] != height - tile:
        ys.append(height - tile)
    return [Window(x, y, tile, tile) for y in ys for x in xs]


def tile_image(r: Raster, labels: LabelMask, tile: int = TILE_SIZE,
               min_water_frac: float = MIN_WATER_FRAC,
               source_id: str | None = None) -> list[ChipRecord]:
    """Cut a labeled raster into chips, dropping ones with too little water."""
    if (r.height, r.width) != (labels.height, labels.width):
        raise ArgumentError(
            f"raster {r.height}x{r.width} and labels {labels.height}x{labels.width} differ")
    if r.geo != labels.geo:
        raise ArgumentError("raster and labels disagree on geo transform")
    sid = source_id if source_id is not None else r.meta.get("source_id", "")
    out = []
    for win in tile_grid(r.width, r.height, tile):
        lab = labels.values[win.y0:win.y0 + win.h, win.x0:win.x0 + win.w]
        if water_fraction(lab) < min_water_frac:
            continue
        chip_label = LabelMask(lab.copy(), labels.geo.shifted(win.x0, win.y0),
                               dict(labels.provenance))
        out.append(ChipRecord(crop(r, win), chip_label, sid, win))
    return out


def pan_label_transfer(pan: Raster, ms_labels: LabelMask,
                       ms_geo: GeoTransform | None = None) -> tuple[Raster, LabelMask]:
    """Resample a panchromatic raster down onto the label grid.

    The label grid is reused unchanged; the pan raster must cover the same
    world extent within one label pixel.
    """
    if pan.band_count != 1:
        raise ArgumentError(f"pan raster must be single-band, got {pan.band_count}")
    geo = ms_geo or ms_labels.geo
    w, h = ms_labels.width, ms_labels.height
    tol_x, tol_y = abs(geo.pixel_size_x), abs(geo.pixel_size_y)
    p0 = pan.geo.pixel_to_world(0, 0)
    p1 = pan.geo.pixel_to_world(pan.width, pan.height)
    m0 = geo.pixel_to_world(0, 0)
    m1 = geo.pixel_to_world(w, h)
    for (px, py), (mx, my) in ((p0, m0), (p1, m1)):
        if abs(px - mx) > tol_x or abs(py - my) > tol_y:
            raise AlignmentError(
                f"pan extent corner ({px}, {py}) off label grid corner ({mx}, {my}) "
                f"by more than one label pixel")
    res = resample_bilinear(pan, w, h)
    return Raster(res.data, res.bands, geo, dict(pan.meta)), ms_labels


# ---------------------------------------------------------------------------
# Train/val split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetManifest:
    """Split assignment over source images plus the knobs that produced it."""

    assignment: dict[str, str]  # source_id -> "train" | "val"
    seed: int
    ratio: float
    n_train: int  # record counts, not source counts
    n_val: int
    min_water_frac: float = MIN_WATER_FRAC

    @property
    def train_sources(self) -> list[str]:
        return sorted(s for s, part in self.assignment.items() if part == "train")

    @property
    def val_sources(self) -> list[str]:
        return sorted(s for s, part in self.assignment.items() if part == "val")

    def partition(self, records) -> tuple[list, list]:
        train, val = [], []
        for rec in records:
            (train if self.assignment[rec.source_id] == "train" else val).append(rec)
        return train, val

    def to_json(self) -> str:
        return json.dumps({
            "assignment": self.assignment, "seed": self.seed, "ratio": self.ratio,
            "n_train": self.n_train, "n_val": self.n_val,
            "min_water_frac": self.min_water_frac,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            d = json.loads(text)
            return cls(d["assignment"], d["seed"], d["ratio"], d["n_train"],
                       d["n_val"], d.get("min_water_frac", MIN_WATER_FRAC))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad manifest: {e}") from e


def split_dataset(records, ratio: float = 0.8, seed: int = 0,
                  min_water_frac: float = MIN_WATER_FRAC) -> DatasetManifest:
    """Assign whole source images to train or val by seeded shuffle.

    The train share is floor(ratio * n_sources) clamped so that, when there
    are at least two sources, neither split is empty.
    """
    records = list(records)
    if not records:
        raise ArgumentError("cannot split an empty record list")
    if not 0.0 < ratio < 1.0:
        raise ArgumentError(f"ratio must be in (0,1), got {ratio}")
    sources = sorted({rec.source_id for rec in records})
    n = len(sources)
    n_train = min(max(math.floor(ratio * n), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_set = {sources[perm[i]] for i in range(n_train)}
    assignment = {s: ("train" if s in train_set else "val") for s in sources}
    n_train_rec = sum(1 for rec in records if assignment[rec.source_id] == "train")
    return DatasetManifest(assignment, seed, ratio, n_train_rec,
                           len(records) - n_train_rec, min_water_frac)


# ---------------------------------------------------------------------------
# RSCH record store
# ---------------------------------------------------------------------------

def _pack_record(rec: ChipRecord) -> bytes:
    sid = rec.source_id.encode("utf-8")
    img = raster_to_bytes(rec.image)
    lbl = raster_to_bytes(rec.label.to_raster())
    body = struct.pack("<H", len(sid)) + sid
    body += struct.pack("<4i", rec.window.x0, rec.window.y0, rec.window.w, rec.window.h)
    body += struct.pack("<I", len(img)) + img
    body += struct.pack("<I", len(lbl)) + lbl
    # the leading length lets the reader preallocate the exact buffer
    return zlib.compress(struct.pack("<I", len(body)) + body, 6)


def _unpack_record(inner) -> ChipRecord:
    """Decode one decompressed record; the image raster aliases ``inner``."""
    try:
        (sid_len,) = struct.unpack_from("<H", inner, 0)
        sid = bytes(inner[2:2 + sid_len]).decode("utf-8")
        off = 2 + sid_len
        x0, y0, w, h = struct.unpack_from("<4i", inner, off)
        off += 16
        (img_len,) = struct.unpack_from("<I", inner, off)
        off += 4
        image = raster_from_buffer(inner, off, img_len, copy=False)
        off += img_len
        (lbl_len,) = struct.unpack_from("<I", inner, off)
        off += 4
        label = LabelMask.from_raster(raster_from_buffer(inner, off, lbl_len, copy=False))
    except struct.error as e:
        raise FormatError(f"malformed record structure: {e}") from e
    return ChipRecord(image, label, sid, Window(x0, y0, w, h))


def write_records(records, path) -> None:
    """Write chips as a length-prefixed, checksummed, DEFLATE record stream."""
    try:
        with open(path, "wb") as f:
            f.write(CHIP_MAGIC + struct.pack("<H", CHIP_VERSION))
            for rec in records:
                payload = _pack_record(rec)
                f.write(struct.pack("<II", len(payload), zlib.crc32(payload)))
                f.write(payload)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def _read_record_body(f, length: int, want_crc: int) -> bytearray:
    """Decompress one record into an exactly sized buffer.

    Chunked CRC + bounded decompression keeps the transient footprint at one
    decoded record plus small constants, independent of file size.
    """
    dec = zlib.decompressobj()
    crc = 0
    head = bytearray()
    buf: bytearray | None = None
    pos = 0

    def absorb(piece):
        nonlocal buf, pos
        if not piece:
            return
        if buf is None:
            head.extend(piece)
            if len(head) < 4:
                return
            (total,) = struct.unpack_from("<I", head, 0)
            buf = bytearray(total)
            piece = memoryview(head)[4:]
        if pos + len(piece) > len(buf):
            raise FormatError("record body exceeds its declared length")
        buf[pos:pos + len(piece)] = piece
        pos += len(piece)

    remaining = length
    try:
        while remaining > 0:
            chunk = f.read(min(16384, remaining))
            if not chunk:
                raise FormatError("truncated record payload")
            remaining -= len(chunk)
            crc = zlib.crc32(chunk, crc)
            data = chunk
            while data:
                absorb(dec.decompress(data, 65536))
                data = dec.unconsumed_tail
        absorb(dec.flush())
    except zlib.error as e:
        raise FormatError(f"corrupt record payload: {e}") from e
    if crc != want_crc:
        raise FormatError("record checksum mismatch")
    if buf is None or pos != len(buf):
        raise FormatError("record body shorter than its declared length")
    return buf


def read_records(path):
    """Stream chips back one at a time with O(record) memory.

    Records before a corruption point are yielded; the broken record raises
    FormatError mid-iteration.
    """
    try:
        f = open(path, "rb")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    with f:
        head = f.read(6)
        if len(head) < 6 or head[:4] != CHIP_MAGIC:
            raise FormatError("not an RSCH record file")
        (version,) = struct.unpack_from("<H", head, 4)
        if version != CHIP_VERSION:
            raise FormatError(f"unsupported RSCH version {version}")
        while True:
            prefix = f.read(8)
            if not prefix:
                return
            if len(prefix) < 8:
                raise FormatError("truncated record prefix")
            length, want_crc = struct.unpack("<II", prefix)
            yield _unpack_record(_read_record_body(f, length, want_crc))


def load_records(path) -> list[ChipRecord]:
    return list(read_records(path))
