"""Integration tests for the labeling HTTP service."""

import struct
import time
import zlib

import numpy as np
import pytest
from fastapi.testclient import TestClient

from riverseg.errors import ArgumentError
from riverseg.labels import (ExclusionPolygon, ForgeParams, ThresholdTriple,
                             forge_labels, ndwi, pick_ndwi_bands,
                             soft_threshold_labels)
from riverseg.raster import load_raster, minmax_scale, save_raster
from riverseg.server import PALETTE, TILE, create_app, max_level, png_encode
from riverseg.synth import SceneConfig, gen_scene


def _png_decode(data: bytes) -> np.ndarray:
    """Minimal decoder for the service's own PNGs (filter type 0 only)."""
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    pos, idat, header = 8, b"", None
    while pos < len(data):
        (length,) = struct.unpack_from(">I", data, pos)
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack_from(">I", data, pos + 8 + length)
        assert crc == zlib.crc32(tag + payload)
        if tag == b"IHDR":
            header = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        pos += 12 + length
    w, h, depth, ctype = header[0], header[1], header[2], header[3]
    assert depth == 8
    channels = {2: 3, 6: 4}[ctype]
    raw = zlib.decompress(idat)
    stride = 1 + w * channels
    rows = []
    for r in range(h):
        row = raw[r * stride:(r + 1) * stride]
        assert row[0] == 0
        rows.append(np.frombuffer(row[1:], dtype=np.uint8))
    return np.stack(rows).reshape(h, w, channels)


def _wait_job(client, job_id, timeout=30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        state = client.get(f"/api/jobs/{job_id}")
        assert state.status_code == 200
        body = state.json()
        if body["status"] in ("done", "failed"):
            return body
        time.sleep(0.02)
    raise AssertionError("commit job did not finish in time")


def _fetch_layer(client, layer_id, height, width):
    """Stitch every full-resolution tile of a preview layer."""
    ty_count = -(-height // TILE)
    tx_count = -(-width // TILE)
    full = np.zeros((ty_count * TILE, tx_count * TILE, 4), dtype=np.uint8)
    for ty in range(ty_count):
        for tx in range(tx_count):
            resp = client.get(f"/api/previews/{layer_id}/0/{tx}/{ty}.png")
            assert resp.status_code == 200
            full[ty * TILE:(ty + 1) * TILE,
                 tx * TILE:(tx + 1) * TILE] = _png_decode(resp.content)
    return full[:height, :width]


TRIANGLE = [500010.0, 7799990.0, 500050.0, 7799990.0, 500030.0, 7799950.0]
BOWTIE = [500010.0, 7799990.0, 500050.0, 7799950.0,
          500050.0, 7799990.0, 500010.0, 7799950.0]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("studio")
    alpha = gen_scene(SceneConfig(height=300, width=420), seed=31)
    save_raster(alpha[0], root / "alpha.rsrf")
    for name, seed in (("beta", 32), ("gamma", 33), ("delta", 34)):
        ms, _, _, _ = gen_scene(SceneConfig(height=128, width=128), seed=seed)
        save_raster(ms, root / f"{name}.rsrf")
    save_raster(alpha[1], root / "gray.rsrf")  # panchromatic, no NDWI bands
    return root


@pytest.fixture(scope="module")
def client(data_dir):
    return TestClient(create_app(data_dir))


class TestImages:
    def test_empty_store(self, tmp_path):
        empty = TestClient(create_app(tmp_path))
        assert empty.get("/api/images").json() == []

    def test_missing_data_dir_rejected(self, tmp_path):
        with pytest.raises(ArgumentError):
            create_app(tmp_path / "nope")

    def test_listing_sorted_with_dims_and_bands(self, client):
        entries = client.get("/api/images").json()
        ids = [e["id"] for e in entries]
        assert ids == sorted(ids)
        assert ids == ["alpha", "beta", "delta", "gamma", "gray"]
        alpha = entries[0]
        assert alpha["dims"] == {"width": 420, "height": 300}
        assert alpha["bands"] == ["Blue", "Green", "Red", "NIR1"]
        gray = entries[-1]
        assert gray["bands"] == ["Pan"]

    def test_thumbnails_resolve(self, client):
        for entry in client.get("/api/images").json():
            resp = client.get(entry["thumbnail_url"])
            assert resp.status_code == 200
            assert resp.headers["content-type"] == "image/png"
            tile = _png_decode(resp.content)
            assert tile.shape == (TILE, TILE, 3)
            assert tile.max() > 0


class TestTiles:
    def test_full_res_tile_matches_render(self, client):
        resp = client.get("/api/images/alpha/tiles/0/0/0.png")
        assert resp.status_code == 200
        tile = _png_decode(resp.content)
        rgb = client.app.state.studio.images["alpha"].rgb
        assert np.array_equal(tile, rgb[:TILE, :TILE])

    def test_edge_tiles_zero_padded(self, client):
        tile = _png_decode(client.get("/api/images/alpha/tiles/0/1/1.png").content)
        rgb = client.app.state.studio.images["alpha"].rgb  # 300 x 420
        assert np.array_equal(tile[:44, :164], rgb[256:300, 256:420])
        assert not tile[44:, :].any()
        assert not tile[:, 164:].any()

    def test_identical_bytes_and_strong_etag(self, client):
        a = client.get("/api/images/alpha/tiles/0/0/0.png")
        b = client.get("/api/images/alpha/tiles/0/0/0.png")
        assert a.content == b.content
        assert a.headers["etag"] == b.headers["etag"]
        assert a.headers["etag"].startswith('"')

    def test_if_none_match_returns_304(self, client):
        first = client.get("/api/images/alpha/tiles/0/0/0.png")
        again = client.get("/api/images/alpha/tiles/0/0/0.png",
                           headers={"If-None-Match": first.headers["etag"]})
        assert again.status_code == 304
        assert again.content == b""

    def test_downsampled_level_subsamples(self, client):
        tile = _png_decode(client.get("/api/images/alpha/tiles/1/0/0.png").content)
        rgb = client.app.state.studio.images["alpha"].rgb
        level = rgb[::2, ::2]  # 150 x 210
        assert np.array_equal(tile[:150, :210], level)
        assert not tile[150:, :].any()

    @pytest.mark.parametrize("path", [
        "/api/images/alpha/tiles/0/9/0.png",   # x outside level
        "/api/images/alpha/tiles/0/0/9.png",   # y outside level
        "/api/images/alpha/tiles/7/0/0.png",   # level too deep
        "/api/images/nosuch/tiles/0/0/0.png",  # unknown image
    ])
    def test_out_of_range_404(self, client, path):
        assert client.get(path).status_code == 404

    def test_non_integer_coordinates_422(self, client):
        assert client.get("/api/images/alpha/tiles/a/b/c.png").status_code == 422

    def test_gray_fallback_for_single_band(self, client):
        z = max_level(512, 512)
        tile = _png_decode(client.get(f"/api/images/gray/tiles/{z}/0/0.png").content)
        assert np.array_equal(tile[..., 0], tile[..., 1])
        assert np.array_equal(tile[..., 0], tile[..., 2])


class TestPreview:
    def test_layer_classes_match_library_call(self, client, data_dir):
        body = {"th1": 0.2, "th2": 0.4, "th3": 0.6}
        resp = client.post("/api/images/alpha/label-preview", json=body)
        assert resp.status_code == 200
        layer = resp.json()["preview_layer_id"]

        stitched = _fetch_layer(client, layer, 300, 420)
        r = load_raster(data_dir / "alpha.rsrf")
        green, nir, _ = pick_ndwi_bands(minmax_scale(r))
        soft = soft_threshold_labels(ndwi(green, nir),
                                     ThresholdTriple(0.2, 0.4, 0.6))
        lut = np.zeros((256, 4), dtype=np.uint8)
        for value, rgba in PALETTE.items():
            lut[value] = rgba
        assert np.array_equal(stitched, lut[soft])
        assert (soft == 255).any()  # the scene really exercises every color
        assert (soft == 0).any()

    def test_repeated_request_is_idempotent(self, client):
        body = {"th1": 0.2, "th2": 0.4, "th3": 0.6}
        a = client.post("/api/images/alpha/label-preview", json=body).json()
        b = client.post("/api/images/alpha/label-preview", json=body).json()
        assert a["preview_layer_id"] == b["preview_layer_id"]

    def test_different_thresholds_different_layer(self, client):
        a = client.post("/api/images/alpha/label-preview",
                        json={"th1": 0.2, "th2": 0.4, "th3": 0.6}).json()
        b = client.post("/api/images/alpha/label-preview",
                        json={"th1": 0.25, "th2": 0.4, "th3": 0.6}).json()
        assert a["preview_layer_id"] != b["preview_layer_id"]

    def test_non_increasing_thresholds_422(self, client):
        resp = client.post("/api/images/alpha/label-preview",
                           json={"th1": 0.5, "th2": 0.4, "th3": 0.7})
        assert resp.status_code == 422

    def test_missing_field_422(self, client):
        resp = client.post("/api/images/alpha/label-preview",
                           json={"th1": 0.3})
        assert resp.status_code == 422

    def test_unknown_image_404(self, client):
        resp = client.post("/api/images/nosuch/label-preview",
                           json={"th1": 0.3, "th2": 0.5, "th3": 0.7})
        assert resp.status_code == 404

    def test_image_without_ndwi_bands_422(self, client):
        resp = client.post("/api/images/gray/label-preview",
                           json={"th1": 0.3, "th2": 0.5, "th3": 0.7})
        assert resp.status_code == 422

    def test_unknown_layer_404(self, client):
        assert client.get("/api/previews/feedface/0/0/0.png").status_code == 404

    def test_session_tracks_last_thresholds(self, client):
        client.post("/api/images/alpha/label-preview",
                    json={"th1": 0.1, "th2": 0.45, "th3": 0.8,
                          "top_band_water": False})
        sess = client.get("/api/images/alpha/session")
        assert sess.status_code == 200
        body = sess.json()
        assert body["status"] == "editing"
        assert body["thresholds"] == {"th1": 0.1, "th2": 0.45, "th3": 0.8,
                                      "top_band_water": False}
        assert sess.headers["etag"] == f'"{body["version"]}"'


class TestExclusions:
    def test_roundtrip_via_get(self, client):
        resp = client.put("/api/images/beta/exclusions", json=[TRIANGLE])
        assert resp.status_code == 204
        got = client.get("/api/images/beta/exclusions").json()
        assert got == {"exclusions": [TRIANGLE]}

    def test_empty_list_clears(self, client):
        client.put("/api/images/beta/exclusions", json=[TRIANGLE])
        assert client.put("/api/images/beta/exclusions", json=[]).status_code == 204
        assert client.get("/api/images/beta/exclusions").json() == {"exclusions": []}

    def test_self_intersecting_polygon_422(self, client):
        resp = client.put("/api/images/beta/exclusions", json=[BOWTIE])
        assert resp.status_code == 422
        assert "polygon 0" in resp.json()["detail"]

    def test_too_few_coordinates_422(self, client):
        assert client.put("/api/images/beta/exclusions",
                          json=[[0.0, 0.0, 1.0, 1.0]]).status_code == 422

    def test_odd_coordinate_count_422(self, client):
        assert client.put("/api/images/beta/exclusions",
                          json=[[0.0, 0.0, 1.0, 1.0, 2.0]]).status_code == 422

    def test_if_match_mismatch_412(self, client):
        resp = client.put("/api/images/beta/exclusions", json=[TRIANGLE],
                          headers={"If-Match": '"999"'})
        assert resp.status_code == 412

    def test_if_match_current_version_accepted(self, client):
        etag = client.get("/api/images/beta/session").headers["etag"]
        resp = client.put("/api/images/beta/exclusions", json=[],
                          headers={"If-Match": etag})
        assert resp.status_code == 204

    def test_unknown_image_404(self, client):
        assert client.put("/api/images/nosuch/exclusions",
                          json=[]).status_code == 404


class TestCommit:
    def test_commit_without_thresholds_422(self, client):
        resp = client.post("/api/images/delta/commit")
        assert resp.status_code == 422

    def test_commit_produces_offline_identical_mask(self, client, data_dir):
        t = {"th1": 0.2, "th2": 0.4, "th3": 0.6}
        layer = client.post("/api/images/gamma/label-preview",
                            json=t).json()["preview_layer_id"]
        assert client.put("/api/images/gamma/exclusions",
                          json=[TRIANGLE]).status_code == 204
        resp = client.post("/api/images/gamma/commit")
        assert resp.status_code == 202
        job = _wait_job(client, resp.json()["job_id"])
        assert job["status"] == "done"
        assert 0.0 <= job["f1_preview"] <= 1.0

        sess = client.get("/api/images/gamma/session").json()
        assert sess["status"] == "done"
        mask = load_raster(data_dir / "labels" / "gamma.rsrf")

        poly = ExclusionPolygon(np.asarray(TRIANGLE).reshape(-1, 2))
        offline = forge_labels(load_raster(data_dir / "gamma.rsrf"),
                               ThresholdTriple(0.2, 0.4, 0.6), None,
                               ForgeParams(exclusions=(poly,)))
        assert np.array_equal(mask.data[0], offline.values)

        # Committed labels only ever restrict the soft-threshold preview:
        # every surviving pixel keeps its preview class.
        soft_rgba = _fetch_layer(client, layer, 128, 128)
        lut = np.zeros((256, 4), dtype=np.uint8)
        for value, rgba in PALETTE.items():
            lut[value] = rgba
        committed = mask.data[0]
        assert np.array_equal(lut[committed][committed != 0],
                              soft_rgba[committed != 0])

    def test_edits_after_commit_409(self, client):
        assert client.post("/api/images/gamma/label-preview",
                           json={"th1": 0.2, "th2": 0.4,
                                 "th3": 0.6}).status_code == 409
        assert client.put("/api/images/gamma/exclusions",
                          json=[]).status_code == 409
        assert client.post("/api/images/gamma/commit").status_code == 409

    def test_double_commit_409(self, client):
        client.post("/api/images/beta/label-preview",
                    json={"th1": 0.2, "th2": 0.4, "th3": 0.6})
        first = client.post("/api/images/beta/commit")
        assert first.status_code == 202
        second = client.post("/api/images/beta/commit")
        assert second.status_code == 409
        _wait_job(client, first.json()["job_id"])

    def test_unknown_job_404(self, client):
        assert client.get("/api/jobs/job-9999").status_code == 404

    def test_sessions_survive_restart(self, client, data_dir):
        reopened = TestClient(create_app(data_dir))
        sess = reopened.get("/api/images/gamma/session").json()
        assert sess["status"] == "done"
        assert sess["mask_path"].endswith("gamma.rsrf")
        listing = [e["id"] for e in reopened.get("/api/images").json()]
        assert listing == ["alpha", "beta", "delta", "gamma", "gray"]


class TestPngCodec:
    def test_rgb_roundtrip(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(50, 33, 3), dtype=np.uint8)
        assert np.array_equal(_png_decode(png_encode(img)), img)

    def test_rgba_roundtrip(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(17, 64, 4), dtype=np.uint8)
        assert np.array_equal(_png_decode(png_encode(img)), img)

    def test_deterministic_bytes(self):
        img = np.full((8, 8, 3), 200, dtype=np.uint8)
        assert png_encode(img) == png_encode(img)

    def test_bad_channel_count_rejected(self):
        with pytest.raises(ArgumentError):
            png_encode(np.zeros((4, 4, 2), dtype=np.uint8))
