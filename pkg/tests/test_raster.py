"""Raster container, geo transform, serialization, and resampling tests."""

import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riverseg.errors import ArgumentError, BoundsError, FormatError, IoError
from riverseg.raster import (
    MAX_DN,
    MS4_BANDS,
    MS8_BANDS,
    BandKind,
    GeoTransform,
    Raster,
    RasterWriter,
    Window,
    crop,
    load_pgm,
    load_raster,
    minmax_scale,
    parse_sidecar,
    peek_raster,
    raster_from_bytes,
    raster_to_bytes,
    read_raster_window,
    resample_bilinear,
    save_pgm,
    save_raster,
    toa_gain,
    write_sidecar,
)

RNG = np.random.default_rng(1234)


def _ms4(w=7, h=5, dtype=np.uint16, geo=None, meta=None, seed=0):
    rng = np.random.default_rng(seed)
    if dtype == np.uint16:
        data = rng.integers(0, MAX_DN + 1, size=(4, h, w), dtype=np.uint16)
    elif dtype == np.uint8:
        data = rng.integers(0, 256, size=(4, h, w), dtype=np.uint8)
    else:
        data = rng.normal(size=(4, h, w)).astype(np.float32)
    return Raster(data, MS4_BANDS, geo or GeoTransform(500.0, 7000.0, 2.0, -2.0),
                  meta or {"scene": "a"})


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------

def test_band_lookup_and_properties():
    r = _ms4(w=6, h=4)
    assert (r.width, r.height, r.band_count) == (6, 4, 4)
    assert np.array_equal(r.band(BandKind.Green), r.data[1])
    assert np.shares_memory(r.band(BandKind.Green), r.data)
    assert r.has_band(BandKind.NIR1) and not r.has_band(BandKind.NIR2)
    with pytest.raises(ArgumentError):
        r.band(BandKind.Yellow)


def test_uint16_dn_range_enforced():
    data = np.full((1, 2, 2), MAX_DN, dtype=np.uint16)
    Raster(data, (BandKind.Pan,))  # max legal DN is fine
    data = data.copy()
    data[0, 0, 0] = MAX_DN + 1
    with pytest.raises(ArgumentError):
        Raster(data, (BandKind.Pan,))


def test_band_count_mismatch_rejected():
    with pytest.raises(ArgumentError):
        Raster(np.zeros((3, 2, 2), np.uint8), MS4_BANDS)


def test_two_dim_data_promoted_to_single_band():
    r = Raster(np.zeros((3, 4), np.uint8), (BandKind.Label,))
    assert r.data.shape == (1, 3, 4)


def test_unsupported_dtype_rejected():
    with pytest.raises(ArgumentError):
        Raster(np.zeros((1, 2, 2), np.int64), (BandKind.Pan,))


# ---------------------------------------------------------------------------
# GeoTransform
# ---------------------------------------------------------------------------

def test_pixel_center_convention():
    g = GeoTransform(100.0, 200.0, 2.0, -2.0)
    # pixel (0,0) center sits half a pixel in from the origin corner
    assert g.pixel_to_world(0.5, 0.5) == (101.0, 199.0)
    assert g.pixel_to_world(0.0, 0.0) == (100.0, 200.0)


@given(
    col=st.floats(-1e4, 1e4), row=st.floats(-1e4, 1e4),
    ox=st.floats(-1e5, 1e5), oy=st.floats(-1e5, 1e5),
    px=st.floats(0.5, 50.0), py=st.floats(0.5, 50.0),
)
def test_geo_round_trip(col, row, ox, oy, px, py):
    g = GeoTransform(ox, oy, px, -py)
    x, y = g.pixel_to_world(col, row)
    c2, r2 = g.world_to_pixel(x, y)
    assert math.isclose(c2, col, rel_tol=0, abs_tol=1e-9 * max(1.0, abs(col)))
    assert math.isclose(r2, row, rel_tol=0, abs_tol=1e-9 * max(1.0, abs(row)))


def test_zero_pixel_size_rejected():
    with pytest.raises(ArgumentError):
        GeoTransform(0, 0, 0.0, 1.0)


def test_shifted_matches_crop_offsets():
    g = GeoTransform(10.0, 50.0, 3.0, -3.0)
    s = g.shifted(4, 2)
    assert s.pixel_to_world(0, 0) == g.pixel_to_world(4, 2)


def test_window_validation():
    with pytest.raises(ArgumentError):
        Window(0, 0, 0, 5)
    with pytest.raises(ArgumentError):
        Window(0, 0, 5, -1)
    assert Window(1, 1, 2, 2).contained_in(3, 3)
    assert not Window(1, 1, 3, 2).contained_in(3, 3)


# ---------------------------------------------------------------------------
# RSRF container
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("compress", [False, True])
@pytest.mark.parametrize("dtype", [np.uint16, np.float32, np.uint8])
def test_rsrf_round_trip_bit_exact(tmp_path, dtype, compress):
    r = _ms4(dtype=dtype, seed=7)
    p = tmp_path / "a.rsrf"
    save_raster(r, p, compress=compress)
    r2 = load_raster(p)
    assert r2 == r
    assert r2.data.dtype == np.dtype(dtype)


def test_rsrf_round_trip_with_nan():
    data = np.zeros((1, 2, 2), np.float32)
    data[0, 0, 0] = np.nan
    data[0, 1, 1] = -np.inf
    r = Raster(data, (BandKind.Probability,))
    r2 = raster_from_bytes(raster_to_bytes(r))
    assert np.isnan(r2.data[0, 0, 0]) and np.isneginf(r2.data[0, 1, 1])
    assert r2 == r


def test_rsrf_header_layout_golden():
    # independently unpack the header to pin the wire format
    geo = GeoTransform(500.0, 7000.0, 2.0, -2.0)
    r = Raster(np.arange(12, dtype=np.uint16).reshape(2, 2, 3),
               (BandKind.Green, BandKind.NIR1), geo, {"scene": "a"})
    buf = raster_to_bytes(r)
    magic, version, w, h, nb, dcode, flag = struct.unpack_from("<4sHIIHBB", buf, 0)
    assert (magic, version, w, h, nb, dcode, flag) == (b"RSRF", 1, 3, 2, 2, 0, 0)
    assert buf[18:20] == bytes([int(BandKind.Green), int(BandKind.NIR1)])
    assert struct.unpack_from("<4d", buf, 20) == (500.0, 7000.0, 2.0, -2.0)
    (mlen,) = struct.unpack_from("<I", buf, 52)
    assert buf[56:56 + mlen] == b"scene=a"
    payload = buf[56 + mlen:]
    assert payload == struct.pack("<12H", *range(12))


def test_rsrf_compressed_payload_is_deflate():
    r = _ms4(seed=3)
    buf = raster_to_bytes(r, compress=True)
    hdr = peek_raster_bytes_offset(buf)
    assert zlib.decompress(buf[hdr:]) == r.data.tobytes()


def peek_raster_bytes_offset(buf: bytes) -> int:
    (nb,) = struct.unpack_from("<H", buf, 14)
    (mlen,) = struct.unpack_from("<I", buf, 18 + nb + 32)
    return 18 + nb + 32 + 4 + mlen


def test_rsrf_rejects_bad_magic():
    buf = raster_to_bytes(_ms4())
    with pytest.raises(FormatError):
        raster_from_bytes(b"XXXX" + buf[4:])


def test_rsrf_rejects_bad_version():
    buf = bytearray(raster_to_bytes(_ms4()))
    buf[4] = 99
    with pytest.raises(FormatError):
        raster_from_bytes(bytes(buf))


def test_rsrf_rejects_truncation():
    buf = raster_to_bytes(_ms4())
    with pytest.raises(FormatError):
        raster_from_bytes(buf[:10])
    with pytest.raises(FormatError):
        raster_from_bytes(buf[:-3])


def test_rsrf_rejects_corrupt_deflate():
    buf = bytearray(raster_to_bytes(_ms4(), compress=True))
    buf[-5] ^= 0xFF
    with pytest.raises(FormatError):
        raster_from_bytes(bytes(buf))


def test_load_missing_file_raises_io_error(tmp_path):
    with pytest.raises(IoError):
        load_raster(tmp_path / "nope.rsrf")


def test_peek_reads_header_only(tmp_path):
    r = _ms4(w=9, h=6)
    p = tmp_path / "x.rsrf"
    save_raster(r, p)
    h = peek_raster(p)
    assert (h.width, h.height, h.band_count) == (9, 6, 4)
    assert h.bands == MS4_BANDS and not h.compressed
    assert h.dtype == np.dtype(np.uint16)
    assert h.meta == {"scene": "a"}
    assert h.payload_offset + 4 * 9 * 6 * 2 == p.stat().st_size


# ---------------------------------------------------------------------------
# Windowed access
# ---------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(data=st.data())
def test_windowed_read_equals_crop(tmp_path_factory, data):
    tmp = tmp_path_factory.mktemp("win")
    r = _ms4(w=11, h=8, seed=5)
    p = tmp / "r.rsrf"
    save_raster(r, p)
    x0 = data.draw(st.integers(0, 10))
    y0 = data.draw(st.integers(0, 7))
    w = data.draw(st.integers(1, 11 - x0))
    h = data.draw(st.integers(1, 8 - y0))
    win = Window(x0, y0, w, h)
    got = read_raster_window(p, win)
    want = crop(r, win)
    assert np.array_equal(got.data, want.data)
    assert got.geo == want.geo and got.bands == want.bands


def test_windowed_read_rejects_out_of_bounds(tmp_path):
    p = tmp_path / "r.rsrf"
    save_raster(_ms4(w=4, h=4), p)
    with pytest.raises(BoundsError):
        read_raster_window(p, Window(2, 2, 3, 3))


def test_windowed_read_rejects_compressed(tmp_path):
    p = tmp_path / "r.rsrf"
    save_raster(_ms4(), p, compress=True)
    with pytest.raises(FormatError):
        read_raster_window(p, Window(0, 0, 2, 2))


def test_raster_writer_blocks_assemble(tmp_path):
    rng = np.random.default_rng(9)
    full = rng.integers(0, 2000, size=(2, 6, 10), dtype=np.uint16)
    p = tmp_path / "w.rsrf"
    geo = GeoTransform(1.0, 2.0, 0.5, -0.5)
    with RasterWriter(p, 10, 6, (BandKind.Green, BandKind.NIR1), np.uint16, geo,
                      {"k": "v"}) as w:
        # out-of-order disjoint blocks covering the image
        w.write_block(4, 0, full[:, 0:6, 4:10])
        w.write_block(0, 3, full[:, 3:6, 0:4])
        w.write_block(0, 0, full[:, 0:3, 0:4])
    got = load_raster(p)
    assert np.array_equal(got.data, full)
    assert got.geo == geo and got.meta == {"k": "v"}


def test_raster_writer_unwritten_regions_are_zero(tmp_path):
    p = tmp_path / "w.rsrf"
    with RasterWriter(p, 4, 4, (BandKind.Pan,), np.uint16, GeoTransform()) as w:
        w.write_block(1, 1, np.full((1, 2, 2), 7, np.uint16))
    got = load_raster(p).data[0]
    want = np.zeros((4, 4), np.uint16)
    want[1:3, 1:3] = 7
    assert np.array_equal(got, want)


def test_raster_writer_rejects_out_of_bounds(tmp_path):
    with RasterWriter(tmp_path / "w.rsrf", 4, 4, (BandKind.Pan,), np.uint16,
                      GeoTransform()) as w:
        with pytest.raises(BoundsError):
            w.write_block(3, 3, np.ones((1, 2, 2), np.uint16))


# ---------------------------------------------------------------------------
# PGM interchange
# ---------------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    r = Raster(RNG.integers(0, MAX_DN + 1, (1, 3, 5), dtype=np.uint16), (BandKind.Pan,))
    p = tmp_path / "x.pgm"
    save_pgm(r, p)
    r2 = load_pgm(p)
    assert np.array_equal(r2.data, r.data)


def test_pgm_header_is_big_endian_p5(tmp_path):
    r = Raster(np.array([[[1, 515]]], np.uint16), (BandKind.Pan,))
    p = tmp_path / "x.pgm"
    save_pgm(r, p)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n2 1\n65535\n")
    assert raw[-4:] == bytes([0, 1, 2, 3])  # 1 and 515 big-endian


def test_pgm_load_handles_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 10, 20, 30]))
    r = load_pgm(p)
    assert np.array_equal(r.data[0], [[0, 10], [20, 30]])


def test_pgm_rejects_wrong_format(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 1 2 3")
    with pytest.raises(FormatError):
        load_pgm(p)
    with pytest.raises(ArgumentError):
        save_pgm(_ms4(), p)  # multi-band


# ---------------------------------------------------------------------------
# Crop
# ---------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_crop_composition(data):
    r = _ms4(w=12, h=9, seed=11)
    x0 = data.draw(st.integers(0, 8))
    y0 = data.draw(st.integers(0, 6))
    w1 = Window(x0, y0, data.draw(st.integers(2, 12 - x0)), data.draw(st.integers(2, 9 - y0)))
    a = crop(r, w1)
    x1 = data.draw(st.integers(0, w1.w - 1))
    y1 = data.draw(st.integers(0, w1.h - 1))
    w2 = Window(x1, y1, data.draw(st.integers(1, w1.w - x1)), data.draw(st.integers(1, w1.h - y1)))
    b = crop(a, w2)
    direct = crop(r, Window(w1.x0 + w2.x0, w1.y0 + w2.y0, w2.w, w2.h))
    assert b == direct


def test_crop_out_of_bounds():
    with pytest.raises(BoundsError):
        crop(_ms4(w=4, h=4), Window(0, 0, 5, 2))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def test_bilinear_constant_preserved():
    r = Raster(np.full((1, 5, 7), 123, np.uint16), (BandKind.Pan,))
    up = resample_bilinear(r, 28, 20)
    assert np.all(up.data == 123)


def test_bilinear_identity():
    r = _ms4(dtype=np.float32, seed=2)
    same = resample_bilinear(r, r.width, r.height)
    assert np.allclose(same.data, r.data, atol=1e-6)


def test_bilinear_ramp_matches_analytic():
    # linear input stays linear under bilinear resampling (with edge clamp)
    n_in, n_out = 6, 17
    ramp = (10.0 + 3.0 * np.arange(n_in, dtype=np.float32))[None, None, :]
    r = Raster(np.repeat(ramp, 2, axis=1), (BandKind.Pan,))
    out = resample_bilinear(r, n_out, 2)
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    want = 10.0 + 3.0 * src
    assert np.allclose(out.data[0, 0], want, atol=1e-5)


def test_bilinear_downsample_2x_is_pair_mean():
    rng = np.random.default_rng(21)
    data = rng.normal(size=(1, 8, 8)).astype(np.float32)
    r = Raster(data, (BandKind.Pan,))
    down = resample_bilinear(r, 4, 4)
    want = data.reshape(1, 4, 2, 4, 2).mean(axis=(2, 4))
    assert np.allclose(down.data, want, atol=1e-6)


def test_bilinear_uint16_rounds_and_scales_geo():
    r = Raster(np.array([[[0, 100], [200, 300]]], np.uint16), (BandKind.Pan,),
               GeoTransform(0, 0, 2.0, -2.0))
    down = resample_bilinear(r, 1, 1)
    assert down.data.dtype == np.uint16
    assert down.data[0, 0, 0] == 150
    assert down.geo.pixel_size_x == 4.0 and down.geo.pixel_size_y == -4.0


def test_bilinear_rejects_bad_dims():
    with pytest.raises(ArgumentError):
        resample_bilinear(_ms4(), 0, 5)


# ---------------------------------------------------------------------------
# Radiometry
# ---------------------------------------------------------------------------

def test_minmax_endpoints():
    r = Raster(np.array([[[100, 200], [250, 300]]], np.uint16), (BandKind.Pan,))
    s = minmax_scale(r)
    assert s.data.dtype == np.float32
    assert s.data[0, 0, 0] == 0.0 and s.data[0, 1, 1] == 1.0
    assert math.isclose(float(s.data[0, 0, 1]), 0.5)


def test_minmax_constant_band_maps_to_zero():
    r = Raster(np.full((2, 3, 3), 77, np.uint16), (BandKind.Pan, BandKind.Green))
    assert np.all(minmax_scale(r).data == 0.0)


def test_minmax_is_per_band():
    data = np.zeros((2, 1, 2), np.uint16)
    data[0] = [0, 100]
    data[1] = [500, 1500]
    s = minmax_scale(Raster(data, (BandKind.Green, BandKind.NIR1)))
    assert np.allclose(s.data[0], [[0.0, 1.0]])
    assert np.allclose(s.data[1], [[0.0, 1.0]])


def test_toa_gain_affine():
    r = Raster(np.array([[[10]], [[20]]], np.uint16), (BandKind.Green, BandKind.NIR1))
    out = toa_gain(r, [2.0, 0.5], [1.0, -3.0])
    assert out.data.dtype == np.float32
    assert out.data[0, 0, 0] == 21.0 and out.data[1, 0, 0] == 7.0
    with pytest.raises(ArgumentError):
        toa_gain(r, [1.0], [0.0])


def test_sidecar_round_trip_and_zenith(tmp_path):
    p = tmp_path / "scene.cal"
    write_sidecar(p, abscal=[0.05, 0.08], offsets=[1.5, -0.5], solar_zenith_deg=60.0)
    gains, offsets = parse_sidecar(p, 2)
    # cos(60 deg) = 0.5, so effective gain doubles the abscal factor
    assert np.allclose(gains, [0.1, 0.16], atol=1e-7)
    assert np.allclose(offsets, [1.5, -0.5])


def test_sidecar_missing_band_key(tmp_path):
    p = tmp_path / "bad.cal"
    p.write_text("solar_zenith_deg=10\nabscal_0=0.1\noffset_0=0\n")
    with pytest.raises(ArgumentError):
        parse_sidecar(p, 2)


def test_sidecar_night_zenith_rejected(tmp_path):
    p = tmp_path / "night.cal"
    write_sidecar(p, [0.1], [0.0], solar_zenith_deg=90.0)
    with pytest.raises(ArgumentError):
        parse_sidecar(p, 1)


def test_ms8_band_order():
    assert len(MS8_BANDS) == 8
    assert MS8_BANDS[2] == BandKind.Green and MS8_BANDS[7] == BandKind.NIR2
