"""HTTP service for interactive label tuning.

The service exposes the human loop of the labeling pipeline: browse
true-color tile pyramids of the registered images, re-apply the soft
threshold triple live (the fast path — no component analysis), sketch
exclusion polygons, then commit, which runs the full label pipeline in a
background job and persists the resulting mask.

State model: one :class:`LabelSession` per image, persisted as a JSON
file under the data directory.  Sessions carry a version counter used as
a strong ETag; mutating requests may send ``If-Match`` for optimistic
concurrency and receive 412 on mismatch.  Committed sessions are
immutable (further edits → 409).

All raster payloads are PNGs produced by a built-in encoder, so tile
bytes are deterministic and cacheable under a strong ETag.
"""

from __future__ import annotations

import hashlib
import json
import queue
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Header, HTTPException, Response

from .errors import ArgumentError
from .labels import (WATER_CUTOFF, ExclusionPolygon, ForgeParams,
                     ThresholdTriple, forge_labels, ndwi, pick_ndwi_bands,
                     soft_threshold_labels)
from .metrics import confusion, prf1
from .raster import BandKind, load_raster, minmax_scale, save_raster

__all__ = ["LabelSession", "Studio", "create_app", "serve", "png_encode",
           "PALETTE", "TILE"]

TILE = 256
GAMMA = 2.2
#: preview overlay palette: label value -> RGBA
PALETTE = {
    0: (0, 0, 0, 0),
    70: (255, 191, 0, 160),    # amber — outer halo
    170: (0, 229, 255, 180),   # cyan — likely water
    255: (41, 98, 255, 220),   # blue — definite water
}
#: upper bound on queued commit jobs
JOB_QUEUE_SIZE = 16


# ---------------------------------------------------------------------------
# PNG encoding
# ---------------------------------------------------------------------------

def png_encode(pixels: np.ndarray) -> bytes:
    """Encode an ``(H, W, 3|4)`` uint8 array as a PNG.

    Rows use filter type 0 and a fixed zlib level, so the bytes are a
    pure function of the pixels.
    """
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, channels = pixels.shape
    if channels not in (3, 4):
        raise ArgumentError(f"PNG payload needs 3 or 4 channels, got {channels}")
    color_type = 2 if channels == 3 else 6
    raw = np.hstack([np.zeros((h, 1), np.uint8),
                     pixels.reshape(h, w * channels)]).tobytes()

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (struct.pack(">I", len(data)) + tag + data
                + struct.pack(">I", zlib.crc32(tag + data)))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 6)) + chunk(b"IEND", b""))


# ---------------------------------------------------------------------------
# Tile pyramid
# ---------------------------------------------------------------------------

def max_level(width: int, height: int) -> int:
    """Smallest downsample exponent at which the image fits one tile."""
    z = 0
    while max(-(-width // (1 << z)), -(-height // (1 << z))) > TILE:
        z += 1
    return z


def grid_tile(a: np.ndarray, z: int, x: int, y: int) -> np.ndarray:
    """Cut tile (x, y) of pyramid level ``z`` from a 2-D or 3-D array.

    Level ``z`` subsamples the array by ``2**z``; partial edge tiles are
    zero-padded to the full tile size.  Raises 404 via HTTPException for
    coordinates outside the pyramid.
    """
    h, w = a.shape[:2]
    if not 0 <= z <= max_level(w, h):
        raise HTTPException(404, f"no pyramid level {z}")
    level = a[::1 << z, ::1 << z]
    lh, lw = level.shape[:2]
    if not (0 <= x < -(-lw // TILE) and 0 <= y < -(-lh // TILE)):
        raise HTTPException(404, f"tile ({x}, {y}) outside level {z}")
    cut = level[y * TILE:(y + 1) * TILE, x * TILE:(x + 1) * TILE]
    if cut.shape[:2] == (TILE, TILE):
        return cut
    out = np.zeros((TILE, TILE) + a.shape[2:], dtype=a.dtype)
    out[:cut.shape[0], :cut.shape[1]] = cut
    return out


def _stretch_band(band: np.ndarray) -> np.ndarray:
    """Percentile-normalized, gamma-corrected uint8 view of one band."""
    lo, hi = np.percentile(band, [2.0, 98.0])
    if hi <= lo:
        return np.zeros(band.shape, dtype=np.uint8)
    scaled = np.clip((band.astype(np.float32) - lo) / (hi - lo), 0.0, 1.0)
    return (scaled ** (1.0 / GAMMA) * 255.0).round().astype(np.uint8)


class _ImageEntry:
    """Lazy per-image caches: raster, true-color render, NDWI grid."""

    def __init__(self, image_id: str, path: Path):
        self.id = image_id
        self.path = path
        self._lock = threading.Lock()
        self._raster = None
        self._rgb = None
        self._index = None

    @property
    def raster(self):
        with self._lock:
            if self._raster is None:
                self._raster = load_raster(self.path)
            return self._raster

    @property
    def rgb(self) -> np.ndarray:
        r = self.raster
        with self._lock:
            if self._rgb is None:
                kinds = (BandKind.Red, BandKind.Green, BandKind.Blue)
                if all(r.has_band(k) for k in kinds):
                    planes = [_stretch_band(r.band(k)) for k in kinds]
                else:  # single-band imagery: replicate to gray
                    planes = [_stretch_band(r.data[0])] * 3
                self._rgb = np.stack(planes, axis=-1)
            return self._rgb

    @property
    def index(self) -> np.ndarray:
        r = self.raster
        with self._lock:
            if self._index is None:
                green, nir, _ = pick_ndwi_bands(minmax_scale(r))
                self._index = ndwi(green, nir)
            return self._index

    @property
    def zmax(self) -> int:
        r = self.raster
        return max_level(r.width, r.height)


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

@dataclass
class LabelSession:
    """Editing state of one image; survives restarts as a JSON file."""

    image_id: str
    thresholds: ThresholdTriple | None = None
    exclusions: list[ExclusionPolygon] = field(default_factory=list)
    status: str = "editing"  # editing | committing | done
    mask_path: str | None = None
    version: int = 0

    @property
    def etag(self) -> str:
        return f'"{self.version}"'

    def to_json(self) -> str:
        t = self.thresholds
        return json.dumps({
            "image_id": self.image_id,
            "thresholds": None if t is None else
                [t.th1, t.th2, t.th3, t.top_band_water],
            "exclusions": [p.ring.ravel().tolist() for p in self.exclusions],
            "status": self.status,
            "mask_path": self.mask_path,
            "version": self.version,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LabelSession":
        d = json.loads(text)
        t = d.get("thresholds")
        status = d.get("status", "editing")
        if status == "committing":  # an interrupted commit is abandoned
            status = "editing"
        return cls(
            image_id=d["image_id"],
            thresholds=None if t is None else
                ThresholdTriple(t[0], t[1], t[2], bool(t[3])),
            exclusions=[ExclusionPolygon(np.asarray(flat, float).reshape(-1, 2))
                        for flat in d.get("exclusions", [])],
            status=status,
            mask_path=d.get("mask_path"),
            version=int(d.get("version", 0)),
        )


def _layer_id(image_id: str, t: ThresholdTriple) -> str:
    key = f"{image_id}|{t.th1!r}|{t.th2!r}|{t.th3!r}|{t.top_band_water}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


class Studio:
    """All service state: images, sessions, preview layers, commit jobs."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        if not self.data_dir.is_dir():
            raise ArgumentError(f"data directory {self.data_dir} does not exist")
        self.sessions_dir = self.data_dir / "sessions"
        self.labels_dir = self.data_dir / "labels"
        self.sessions_dir.mkdir(exist_ok=True)
        self.labels_dir.mkdir(exist_ok=True)

        self.lock = threading.RLock()
        self.images: dict[str, _ImageEntry] = {}
        self.sessions: dict[str, LabelSession] = {}
        self.layers: dict[str, tuple[str, ThresholdTriple]] = {}
        self._layer_values: dict[str, np.ndarray] = {}
        self.jobs: dict[str, dict] = {}
        self._job_counter = 0
        self.job_queue: queue.Queue[str] = queue.Queue(maxsize=JOB_QUEUE_SIZE)
        self._worker = threading.Thread(target=self._work, daemon=True,
                                        name="riverseg-commit")
        self._worker.start()

        for f in self.sessions_dir.glob("*.json"):
            sess = LabelSession.from_json(f.read_text())
            self.sessions[sess.image_id] = sess

    # -- images ------------------------------------------------------------

    def scan(self) -> dict[str, _ImageEntry]:
        for path in sorted(self.data_dir.glob("*.rsrf")):
            self.images.setdefault(path.stem, _ImageEntry(path.stem, path))
        return self.images

    def image_or_404(self, image_id: str) -> _ImageEntry:
        entry = self.scan().get(image_id)
        if entry is None:
            raise HTTPException(404, f"unknown image {image_id!r}")
        return entry

    # -- sessions ----------------------------------------------------------

    def session(self, image_id: str) -> LabelSession:
        with self.lock:
            if image_id not in self.sessions:
                self.sessions[image_id] = LabelSession(image_id)
            return self.sessions[image_id]

    def persist(self, sess: LabelSession) -> None:
        (self.sessions_dir / f"{sess.image_id}.json").write_text(sess.to_json())

    # -- preview layers ----------------------------------------------------

    def ensure_layer(self, image_id: str, t: ThresholdTriple) -> str:
        layer = _layer_id(image_id, t)
        with self.lock:
            self.layers.setdefault(layer, (image_id, t))
        return layer

    def layer_values(self, layer: str) -> np.ndarray:
        with self.lock:
            ref = self.layers.get(layer)
        if ref is None:
            raise HTTPException(404, f"unknown preview layer {layer!r}")
        image_id, t = ref
        with self.lock:
            if layer not in self._layer_values:
                entry = self.image_or_404(image_id)
                self._layer_values[layer] = soft_threshold_labels(entry.index, t)
            return self._layer_values[layer]

    # -- commit jobs -------------------------------------------------------

    def submit(self, sess: LabelSession) -> str:
        """Queue a commit for an editing session; caller holds the lock."""
        self._job_counter += 1
        job_id = f"job-{self._job_counter:04d}"
        self.jobs[job_id] = {"job_id": job_id, "image_id": sess.image_id,
                             "status": "queued"}
        try:
            self.job_queue.put_nowait(job_id)
        except queue.Full:
            del self.jobs[job_id]
            raise HTTPException(503, "commit queue is full") from None
        sess.status = "committing"
        sess.version += 1
        self.persist(sess)
        return job_id

    def _work(self) -> None:
        while True:
            job_id = self.job_queue.get()
            with self.lock:
                job = self.jobs[job_id]
                job["status"] = "running"
                sess = self.sessions[job["image_id"]]
                t = sess.thresholds
                exclusions = tuple(sess.exclusions)
            try:
                entry = self.image_or_404(job["image_id"])
                mask = forge_labels(entry.raster, t, None,
                                    ForgeParams(exclusions=exclusions))
                out = self.labels_dir / f"{entry.id}.rsrf"
                save_raster(mask.to_raster(), out)
                soft = soft_threshold_labels(entry.index, t)
                _, _, f1 = prf1(confusion(mask.values >= WATER_CUTOFF,
                                          soft >= WATER_CUTOFF))
                with self.lock:
                    sess.status = "done"
                    sess.mask_path = str(out)
                    sess.version += 1
                    self.persist(sess)
                    job["status"] = "done"
                    job["f1_preview"] = f1
            except Exception as e:  # noqa: BLE001 — the job must record any failure
                with self.lock:
                    sess.status = "editing"
                    sess.version += 1
                    self.persist(sess)
                    job["status"] = "failed"
                    job["error"] = str(e)


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

def _png_response(pixels: np.ndarray, if_none_match: str | None) -> Response:
    body = png_encode(pixels)
    etag = f'"{hashlib.sha256(body).hexdigest()[:32]}"'
    headers = {"ETag": etag, "Cache-Control": "public, max-age=86400"}
    if if_none_match == etag:
        return Response(status_code=304, headers=headers)
    return Response(body, media_type="image/png", headers=headers)


def _check_if_match(sess: LabelSession, if_match: str | None) -> None:
    if if_match is not None and if_match != sess.etag:
        raise HTTPException(412, f"session version is {sess.etag}")


def _check_editable(sess: LabelSession) -> None:
    if sess.status == "committing":
        raise HTTPException(409, "a commit is running for this image")
    if sess.status == "done":
        raise HTTPException(409, "session is committed and immutable")


def _parse_thresholds(body: dict) -> ThresholdTriple:
    try:
        return ThresholdTriple(float(body["th1"]), float(body["th2"]),
                               float(body["th3"]),
                               bool(body.get("top_band_water", True)))
    except KeyError as e:
        raise HTTPException(422, f"missing threshold field {e}") from e
    except (TypeError, ValueError) as e:  # includes ordering violations
        raise HTTPException(422, str(e)) from e


def create_app(data_dir) -> FastAPI:
    """Build the service around one data directory of .rsrf images."""
    studio = Studio(data_dir)
    app = FastAPI(title="riverseg label studio", version="0.1.0")
    app.state.studio = studio

    @app.get("/api/images")
    def list_images():
        entries = studio.scan()
        return [{
            "id": image_id,
            "dims": {"width": e.raster.width, "height": e.raster.height},
            "bands": [b.name for b in e.raster.bands],
            "thumbnail_url": f"/api/images/{image_id}/tiles/{e.zmax}/0/0.png",
        } for image_id, e in sorted(entries.items())]

    @app.get("/api/images/{image_id}/tiles/{z}/{x}/{y}.png")
    def image_tile(image_id: str, z: int, x: int, y: int,
                   if_none_match: str | None = Header(None)):
        entry = studio.image_or_404(image_id)
        return _png_response(grid_tile(entry.rgb, z, x, y), if_none_match)

    @app.get("/api/images/{image_id}/session")
    def get_session(image_id: str, response: Response):
        studio.image_or_404(image_id)
        with studio.lock:
            sess = studio.session(image_id)
            response.headers["ETag"] = sess.etag
            t = sess.thresholds
            return {
                "image_id": image_id,
                "status": sess.status,
                "version": sess.version,
                "thresholds": None if t is None else {
                    "th1": t.th1, "th2": t.th2, "th3": t.th3,
                    "top_band_water": t.top_band_water,
                },
                "exclusions": [p.ring.ravel().tolist() for p in sess.exclusions],
                "mask_path": sess.mask_path,
            }

    @app.post("/api/images/{image_id}/label-preview")
    def label_preview(image_id: str, body: dict,
                      if_match: str | None = Header(None)):
        entry = studio.image_or_404(image_id)
        t = _parse_thresholds(body)
        try:
            entry.index  # warm the cached NDWI grid; fails for band-poor imagery
        except ArgumentError as e:
            raise HTTPException(422, str(e)) from e
        with studio.lock:
            sess = studio.session(image_id)
            _check_if_match(sess, if_match)
            _check_editable(sess)
            layer = studio.ensure_layer(image_id, t)
            sess.thresholds = t
            sess.version += 1
            studio.persist(sess)
        return {"preview_layer_id": layer}

    @app.get("/api/previews/{layer_id}/{z}/{x}/{y}.png")
    def preview_tile(layer_id: str, z: int, x: int, y: int,
                     if_none_match: str | None = Header(None)):
        values = studio.layer_values(layer_id)
        lut = np.zeros((256, 4), dtype=np.uint8)
        for value, rgba in PALETTE.items():
            lut[value] = rgba
        return _png_response(lut[grid_tile(values, z, x, y)], if_none_match)

    @app.get("/api/images/{image_id}/exclusions")
    def get_exclusions(image_id: str, response: Response):
        studio.image_or_404(image_id)
        with studio.lock:
            sess = studio.session(image_id)
            response.headers["ETag"] = sess.etag
            return {"exclusions": [p.ring.ravel().tolist()
                                   for p in sess.exclusions]}

    @app.put("/api/images/{image_id}/exclusions", status_code=204)
    def put_exclusions(image_id: str, polygons: list[list[float]],
                       if_match: str | None = Header(None)):
        studio.image_or_404(image_id)
        polys = []
        for i, flat in enumerate(polygons):
            if len(flat) < 6 or len(flat) % 2:
                raise HTTPException(
                    422, f"polygon {i} needs an even count of >= 6 coordinates")
            try:
                polys.append(ExclusionPolygon(
                    np.asarray(flat, dtype=float).reshape(-1, 2)))
            except ArgumentError as e:
                raise HTTPException(422, f"polygon {i}: {e}") from e
        with studio.lock:
            sess = studio.session(image_id)
            _check_if_match(sess, if_match)
            _check_editable(sess)
            sess.exclusions = polys
            sess.version += 1
            studio.persist(sess)
        return Response(status_code=204)

    @app.post("/api/images/{image_id}/commit", status_code=202)
    def commit(image_id: str, if_match: str | None = Header(None)):
        studio.image_or_404(image_id)
        with studio.lock:
            sess = studio.session(image_id)
            _check_if_match(sess, if_match)
            _check_editable(sess)
            if sess.thresholds is None:
                raise HTTPException(
                    422, "no thresholds set; post a label-preview first")
            job_id = studio.submit(sess)
        return {"job_id": job_id}

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str):
        with studio.lock:
            job = studio.jobs.get(job_id)
            if job is None:
                raise HTTPException(404, f"unknown job {job_id!r}")
            return dict(job)

    return app


def serve(data_dir, addr: str = "127.0.0.1", port: int = 8000) -> None:
    """Run the service until interrupted."""
    import uvicorn

    uvicorn.run(create_app(data_dir), host=addr, port=port,
                log_level="warning")
