"""Memory-bounded tiled inference plus soft/hard thresholding.

Tiling scheme
-------------
The network reflect-pads inputs on the right/bottom to multiples of 16,
so both routes are defined on the same *virtual padded image*: core tiles
partition that padded grid exactly, and each tile's read window is the
core grown by the halo and clamped to the padded bounds.  Every window
dimension stays a multiple of 16, which means the per-tile forward pass
performs no padding of its own and tile-edge behaviour matches the
whole-image pass bit for bit at the padded borders.

Because inference-mode normalisation uses frozen statistics (a pure
per-pixel map) and every other layer has finite spatial support, a halo
of at least half the receptive field makes each core pixel's computation
identical in both routes; stitching the cores therefore reproduces the
whole-image output to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, FormatError
from .labels import label_components, largest_connected_component
from .nn.layers import Add, BatchNorm2d, Concat, Conv2d, ReLU, Sigmoid, Upsample2x
from .nn.models import Model, STRIDE_FACTOR
from .raster import (
    BandKind,
    Raster,
    RasterWriter,
    Window,
    load_raster,
    peek_raster,
    read_raster_window,
    save_raster,
)

__all__ = [
    "TilePlan",
    "TileWindow",
    "accumulate_rf",
    "receptive_field",
    "default_halo",
    "plan_tiles",
    "infer_full",
    "infer_to_file",
    "soft_sigmoid",
    "binarize",
    "postprocess",
]


def accumulate_rf(ops) -> int:
    """Receptive field of a chain of (kernel, stride) ops.

    Accumulation rule: ``rf += (k - 1) * jump`` then ``jump *= stride``.
    """
    rf, jump = 1, 1
    for kernel, stride in ops:
        rf += (kernel - 1) * jump
        jump *= stride
    return rf


def receptive_field(m: Model) -> int:
    """Receptive-field diameter (pixels) of a model's output units.

    Walks the whole graph — encoder and decoder, since decoder
    convolutions keep widening the field at reduced resolution — and
    tracks the left and right input reach separately: strided
    convolutions stay centred, but nearest upsampling maps fine position
    ``p`` to ``floor(p / 2)``, which shifts odd positions' source window
    by one coarse pixel and so adds an asymmetric ``jump / 2`` to the
    worst-case reach.  The returned diameter is ``2 * max(left, right)
    + 1``, the figure a correct tiling halo must be derived from.
    """
    # per node: (left reach, right reach, jump), all in input pixels
    states: dict[int, tuple[float, float, float]] = {-1: (0.0, 0.0, 1.0)}
    last = -1
    for i, (layer, ins) in enumerate(zip(m.layers, m.inputs)):
        left = max(states[j][0] for j in ins)
        right = max(states[j][1] for j in ins)
        jump = max(states[j][2] for j in ins)
        if isinstance(layer, Conv2d):
            half = layer.kernel // 2
            left += jump * half
            right += jump * half
            jump *= layer.stride
        elif isinstance(layer, Upsample2x):
            jump /= 2.0
            left += jump
        states[i] = (left, right, jump)
        last = i
    left, right, _ = states[last]
    return int(round(2 * max(left, right))) + 1


def _round_up(value: int, multiple: int) -> int:
    return -(-value // multiple) * multiple


def default_halo(m: Model) -> int:
    """Half the receptive field, rounded up to the downsampling factor."""
    return _round_up((receptive_field(m) + 1) // 2, STRIDE_FACTOR)


@dataclass(frozen=True)
class TileWindow:
    """One work item: ``read`` (core + halo, clamped) and ``core``, both
    in padded-image coordinates."""

    read: Window
    core: Window


@dataclass(frozen=True)
class TilePlan:
    """Tiling of a raster: cores partition the padded grid exactly."""

    core: int
    halo: int
    width: int
    height: int
    padded_width: int
    padded_height: int
    windows: tuple[TileWindow, ...]


def plan_tiles(height: int, width: int, core: int, halo: int) -> TilePlan:
    if height < STRIDE_FACTOR or width < STRIDE_FACTOR:
        raise ArgumentError(f"raster must be at least {STRIDE_FACTOR} px per side")
    if core < STRIDE_FACTOR or core % STRIDE_FACTOR:
        raise ArgumentError(f"core must be a positive multiple of {STRIDE_FACTOR}")
    if halo < 0 or halo % STRIDE_FACTOR:
        raise ArgumentError(f"halo must be a non-negative multiple of {STRIDE_FACTOR}")
    ph = _round_up(height, STRIDE_FACTOR)
    pw = _round_up(width, STRIDE_FACTOR)
    windows = []
    for cy in range(0, ph, core):
        ch = min(core, ph - cy)
        for cx in range(0, pw, core):
            cw = min(core, pw - cx)
            ry0 = max(0, cy - halo)
            rx0 = max(0, cx - halo)
            ry1 = min(ph, cy + ch + halo)
            rx1 = min(pw, cx + cw + halo)
            windows.append(TileWindow(Window(rx0, ry0, rx1 - rx0, ry1 - ry0),
                                      Window(cx, cy, cw, ch)))
    return TilePlan(core, halo, width, height, pw, ph, tuple(windows))


def _band_range(data: np.ndarray) -> list[tuple[float, float]]:
    # native-dtype reductions (no full-band float32 copy); the float32
    # round-trip matches the cast-then-reduce order used on chips
    return [(float(np.float32(b.min())), float(np.float32(b.max()))) for b in data]


def _normalize_window(block: np.ndarray, ranges) -> np.ndarray:
    """Apply the global per-band min-max map to one window."""
    out = np.zeros(block.shape, dtype=np.float32)
    for b, (lo, hi) in enumerate(ranges):
        if hi > lo:
            out[b] = (block[b].astype(np.float32) - lo) / (hi - lo)
    return out


def _pad_window(block: np.ndarray, h: int, w: int) -> np.ndarray:
    """Reflect-pad a window on the right/bottom to the planned size.

    Reflection is about the raster's last row/column, so the result
    equals the matching slice of the whole padded image.
    """
    dh, dw = h - block.shape[1], w - block.shape[2]
    if dh or dw:
        block = np.pad(block, ((0, 0), (0, dh), (0, dw)), mode="reflect")
    return block


def _check_halo(m: Model, halo: int | None) -> int:
    need = (receptive_field(m) + 1) // 2
    if halo is None:
        return _round_up(need, STRIDE_FACTOR)
    if halo < need:
        raise ArgumentError(
            f"halo {halo} is smaller than half the receptive field ({need})"
        )
    return _round_up(halo, STRIDE_FACTOR)


def infer_full(m: Model, r: Raster, core: int = 1024, halo: int | None = None,
               out: np.ndarray | None = None) -> Raster:
    """Classify a raster tile by tile; equals the whole-image forward.

    Peak working memory is governed by the window size ``core + 2*halo``
    and the model, not the raster dims.  ``out`` may supply a
    preallocated ``(H, W) float32`` buffer.
    """
    halo = _check_halo(m, halo)
    plan = plan_tiles(r.height, r.width, core, halo)
    if out is None:
        out = np.empty((r.height, r.width), dtype=np.float32)
    elif out.shape != (r.height, r.width) or out.dtype != np.float32:
        raise ArgumentError("out buffer must be float32 with the raster's dims")
    ranges = _band_range(r.data)
    for tile in plan.windows:
        read, corew = tile.read, tile.core
        src = r.data[:, read.y0 : min(read.y0 + read.h, r.height),
                     read.x0 : min(read.x0 + read.w, r.width)]
        block = _pad_window(_normalize_window(src, ranges), read.h, read.w)
        probs = m.forward(block[None], training=False)[0]
        cy = corew.y0 - read.y0
        cx = corew.x0 - read.x0
        oh = min(corew.y0 + corew.h, r.height) - corew.y0
        ow = min(corew.x0 + corew.w, r.width) - corew.x0
        out[corew.y0 : corew.y0 + oh, corew.x0 : corew.x0 + ow] = \
            probs[cy : cy + oh, cx : cx + ow]
    meta = dict(r.meta)
    meta["model_family"] = m.spec.family
    return Raster(out[None], (BandKind.Probability,), r.geo, meta)


def infer_to_file(m: Model, in_path, out_path, core: int = 1024,
                  halo: int | None = None) -> None:
    """File-to-file inference with bounded memory on both sides.

    Streams windows of an uncompressed RSRF input (two passes: one for
    the global per-band range, one for the tiles) and writes core regions
    through a :class:`RasterWriter`.  Compressed inputs fall back to an
    in-memory pass.
    """
    header = peek_raster(in_path)
    if header.compressed:
        r = load_raster(in_path)
        save_raster(infer_full(m, r, core=core, halo=halo), out_path)
        return
    halo = _check_halo(m, halo)
    plan = plan_tiles(header.height, header.width, core, halo)

    ranges: list[tuple[float, float]] = []
    strip = max(1, (1 << 22) // max(header.width * header.band_count, 1))
    lo = np.full(header.band_count, np.inf)
    hi = np.full(header.band_count, -np.inf)
    for y in range(0, header.height, strip):
        h = min(strip, header.height - y)
        block = read_raster_window(in_path, Window(0, y, header.width, h), header)
        as32 = block.data.astype(np.float32)
        lo = np.minimum(lo, as32.min(axis=(1, 2)))
        hi = np.maximum(hi, as32.max(axis=(1, 2)))
    ranges = list(zip(lo.tolist(), hi.tolist()))

    with RasterWriter(out_path, header.width, header.height, (BandKind.Probability,),
                      np.float32, header.geo, {"model_family": m.spec.family}) as writer:
        for tile in plan.windows:
            read, corew = tile.read, tile.core
            rw = min(read.x0 + read.w, header.width) - read.x0
            rh = min(read.y0 + read.h, header.height) - read.y0
            src = read_raster_window(in_path, Window(read.x0, read.y0, rw, rh), header)
            block = _pad_window(_normalize_window(src.data, ranges), read.h, read.w)
            probs = m.forward(block[None], training=False)[0]
            cy = corew.y0 - read.y0
            cx = corew.x0 - read.x0
            oh = min(corew.y0 + corew.h, header.height) - corew.y0
            ow = min(corew.x0 + corew.w, header.width) - corew.x0
            writer.write_block(corew.x0, corew.y0,
                               probs[cy : cy + oh, cx : cx + ow])


def soft_sigmoid(x: np.ndarray) -> np.ndarray:
    """The soft threshold 1 / (1 + e^(-16 (x - 0.5))); fixes x = 0.5."""
    x = np.asarray(x, dtype=np.float32)
    return 1.0 / (1.0 + np.exp(-16.0 * (x - 0.5)))


def binarize(x: np.ndarray, cut: float = 0.5) -> np.ndarray:
    """Hard threshold: True where ``x >= cut`` (ties go to water)."""
    return np.asarray(x) >= cut


def postprocess(mask: np.ndarray, mode: str = "largest", *,
                min_area: int | None = None, connectivity: int = 8) -> np.ndarray:
    """Clean a binary mask by connected-component analysis.

    ``largest`` keeps only the most populous component; ``min_area``
    removes components with fewer than ``min_area`` pixels.
    """
    mask = np.asarray(mask)
    if mode == "largest":
        return largest_connected_component(mask, connectivity).astype(bool)
    if mode == "min_area":
        if min_area is None or min_area < 1:
            raise ArgumentError("min_area mode needs min_area >= 1")
        labels, pops = label_components(mask, connectivity)
        if len(pops) == 0:
            return np.zeros(mask.shape, dtype=bool)
        keep = np.flatnonzero(pops >= min_area) + 1
        return np.isin(labels, keep)
    raise ArgumentError(f"unknown postprocess mode {mode!r}")
