"""Synthetic Arctic-river scene generator with exact ground truth.

Scenes carve a meandering river (optionally braided) into a land
background, add spectrally configurable distractors — lakes, shadows and
wet bogs that look like water to an NDWI rule, bright roads, clouds,
in-channel sandbars — and emit a multispectral raster, a
higher-resolution panchromatic companion, the exact water mask, and the
river centerline.
Each scene also draws its own radiometry (a per-band gain and haze
offset) and silt load (turbidity lifting water's NIR reflectance), the
way acquisition conditions and sediment vary between real images:
per-band normalisation cancels the affine map exactly and tolerates the
bounded turbidity, but a single raw-DN index threshold shared across
scenes survives neither.  Everything is a pure function of
(config, seed), which makes generated suites replayable byte for byte
from their manifests.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .chips import ChipRecord, pan_label_transfer, tile_image
from .errors import ArgumentError, FormatError
from .labels import (
    CenterlinePolyline,
    ForgeParams,
    ThresholdTriple,
    dilate,
    forge_labels,
)
from .raster import (
    MAX_DN,
    MS4_BANDS,
    MS8_BANDS,
    BandKind,
    GeoTransform,
    Raster,
)

__all__ = [
    "CLASS_NAMES",
    "SUITE_THRESHOLDS",
    "DistractorDensities",
    "SceneConfig",
    "Spectrum",
    "SuiteManifest",
    "default_spectra",
    "gen_scene",
    "gen_suite",
    "replay_suite",
    "silt_adjusted",
]

# class codes used in the internal paint map
_LAND, _WATER, _SHADOW, _CLOUD, _ROAD, _SANDBAR, _BOG = range(7)
CLASS_NAMES = ("land", "water", "shadow", "cloud", "road", "sandbar", "bog")

# label-forge thresholds matched to the default spectra after per-band
# min-max scaling (clear water index ~0.67, land mode 0.03-0.11 depending
# on scene composition, shadows broad)
SUITE_THRESHOLDS = ThresholdTriple(0.25, 0.4, 0.6)

# aux-mask blur for suite forging: synthetic rivers have no multi-pixel
# gaps to bridge, and the tighter support keeps stray single-pixel index
# hits from chaining distant features into the river component
_SUITE_BLUR_SIGMA = 2.0

#: how fast the middle index cut descends with the scene's silt draw, and
#: the floors that keep the cuts clear of the land noise mode even in
#: scenes whose band ranges compress (no bright cloud to anchor the top)
_SILT_SLOPE = 1.5
_SILT_TH2_FLOOR = 0.27
_SILT_TH1_FLOOR = 0.23


def silt_adjusted(base: ThresholdTriple, turbidity: float) -> ThresholdTriple:
    """The index cuts an analyst would dial in for a scene's silt load.

    Suspended sediment lifts water's NIR reflectance and drags the whole
    water mode of the normalized index downward, so the middle cut tracks
    the silt draw linearly while the outer cuts keep their offsets from
    it.  Both lower cuts are clamped to floors above the land noise mode:
    letting the maybe-water cut descend into land noise would speckle the
    soft labels so densely that the blurred auxiliary mask fuses every
    feature into one component and the filter stops filtering.  A zero
    draw returns ``base`` unchanged.
    """
    if turbidity < 0:
        raise ArgumentError(f"turbidity must be non-negative, got {turbidity}")
    th2 = max(_SILT_TH2_FLOOR, base.th2 - _SILT_SLOPE * turbidity)
    th1 = max(_SILT_TH1_FLOOR, th2 - (base.th2 - base.th1))
    return ThresholdTriple(th1, th2, th2 + (base.th3 - base.th2),
                           base.top_band_water)


@dataclass(frozen=True)
class Spectrum:
    """Per-class reflectance model: band means plus isotropic noise."""

    means: tuple[float, ...]
    sigma: float

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ArgumentError("spectral sigma must be non-negative")
        if any(not 0.0 <= m <= 1.0 for m in self.means):
            raise ArgumentError("band means must lie in [0, 1]")


def default_spectra(n_bands: int = 4) -> dict[str, Spectrum]:
    """Reflectance models per class.

    Water is green-bright and NIR-dark (high NDWI); land the reverse.
    Shadows are dark in every band, which leaves their NDWI dominated by
    noise — the classic index failure mode.  Clouds, roads and sandbars
    are bright with near-neutral NDWI.  Bogs (wet tundra) sit between:
    dim, NIR-suppressed vegetation whose index climbs toward water's as
    the scene gets wetter.
    """
    four = {
        "land": Spectrum((0.22, 0.28, 0.30, 0.21), 0.012),
        "water": Spectrum((0.30, 0.36, 0.20, 0.03), 0.015),
        "shadow": Spectrum((0.06, 0.085, 0.05, 0.015), 0.03),
        "cloud": Spectrum((0.92, 0.90, 0.88, 0.70), 0.02),
        "road": Spectrum((0.45, 0.48, 0.50, 0.40), 0.02),
        "sandbar": Spectrum((0.55, 0.58, 0.60, 0.50), 0.02),
        "bog": Spectrum((0.17, 0.21, 0.19, 0.135), 0.025),
    }
    if n_bands == 4:
        return four

    def widen(b, g, r, n, sigma):
        # coastal, blue, green, yellow, red, red-edge, nir1, nir2
        return Spectrum((b * 0.92, b, g, (g + r) / 2, r, (r + n) / 2, n, n * 0.9),
                        sigma)

    if n_bands == 8:
        return {name: widen(*s.means, s.sigma) for name, s in four.items()}
    raise ArgumentError(f"band count must be 4 or 8, got {n_bands}")


@dataclass(frozen=True)
class DistractorDensities:
    """Expected count of each distractor per scene (Poisson draws)."""

    lakes: float = 2.0
    roads: float = 2.0
    clouds: float = 1.0
    shadows: float = 8.0
    sandbars: float = 1.5
    bogs: float = 6.0

    def __post_init__(self) -> None:
        for name in ("lakes", "roads", "clouds", "shadows", "sandbars", "bogs"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"density {name} must be non-negative")

    @classmethod
    def none(cls) -> "DistractorDensities":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SceneConfig:
    """Geometry, spectra, radiometry and distractor mix of one scene.

    ``gain_range``/``haze_range`` bound the per-band affine map drawn
    once per scene (multiplicative gain, additive offset on reflectance);
    ``(1, 1)`` and ``(0, 0)`` disable the radiometric variation.  The
    default gain tops out at 1.0 so bright surfaces never saturate: a
    clipped band top would warp per-band normalization nonlinearly and
    shift every scaled index value.  ``turbidity_range`` bounds the
    per-scene silt load: suspended sediment lifts water's near-infrared
    reflectance, compressing the index contrast scene by scene the way
    glacial rivers do.
    """

    height: int = 512
    width: int = 512
    pixel_size: float = 1.2
    width_range: tuple[float, float] = (14.0, 26.0)
    meander_amplitude: float = 70.0
    meander_wavelength: float = 260.0
    braid_probability: float = 0.25
    distractors: DistractorDensities = field(default_factory=DistractorDensities)
    n_bands: int = 4
    spectra: dict[str, Spectrum] | None = None
    gain_range: tuple[float, float] = (0.75, 1.0)
    haze_range: tuple[float, float] = (0.0, 0.03)
    turbidity_range: tuple[float, float] = (0.0, 0.10)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 64 or self.width < 64:
            raise ArgumentError("scene dims must be at least 64 px")
        if self.pixel_size <= 0:
            raise ArgumentError("pixel size must be positive")
        wmin, wmax = self.width_range
        if not 0 < wmin <= wmax:
            raise ArgumentError("river width range must be positive with min <= max")
        if self.meander_amplitude < 0 or self.meander_wavelength <= 0:
            raise ArgumentError("meander parameters must be positive")
        if not 0.0 <= self.braid_probability <= 1.0:
            raise ArgumentError("braid probability must lie in [0, 1]")
        if self.n_bands not in (4, 8):
            raise ArgumentError(f"band count must be 4 or 8, got {self.n_bands}")
        glo, ghi = self.gain_range
        if not 0.0 < glo <= ghi:
            raise ArgumentError("gain range must be positive with lo <= hi")
        hlo, hhi = self.haze_range
        if not 0.0 <= hlo <= hhi:
            raise ArgumentError("haze range must satisfy 0 <= lo <= hi")
        tlo, thi = self.turbidity_range
        if not 0.0 <= tlo <= thi:
            raise ArgumentError("turbidity range must satisfy 0 <= lo <= hi")

    def resolved_spectra(self) -> dict[str, Spectrum]:
        spectra = self.spectra or default_spectra(self.n_bands)
        for name in CLASS_NAMES:
            if name not in spectra:
                raise ArgumentError(f"spectra missing class {name!r}")
            if len(spectra[name].means) != self.n_bands:
                raise ArgumentError(
                    f"spectrum for {name!r} has {len(spectra[name].means)} bands, "
                    f"expected {self.n_bands}")
        return spectra


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def _carve_tube(mask: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                radii: np.ndarray, lo: int = 0, hi: int | None = None) -> None:
    """Union of disks centred on (xs, ys) with per-point radii, in place.

    Centres are x-monotone with unit spacing, so each pixel column only
    needs the centreline points within the largest radius of it.
    """
    h, w = mask.shape
    hi = len(xs) if hi is None else hi
    reach = int(math.ceil(radii[lo:hi].max())) + 1
    rows = np.arange(h, dtype=np.float64) + 0.5
    r2 = radii * radii
    for j in range(w):
        x = j + 0.5
        k0 = max(lo, int(x - reach - xs[0]))
        k1 = min(hi, int(x + reach - xs[0]) + 1)
        if k0 >= k1:
            continue
        d2 = (rows[:, None] - ys[k0:k1]) ** 2 + (x - xs[k0:k1]) ** 2
        mask[:, j] |= (d2 <= r2[k0:k1]).any(axis=1)


def _ellipse(h: int, w: int, cy: float, cx: float, a: float, b: float,
             theta: float) -> np.ndarray:
    yy = np.arange(h, dtype=np.float64)[:, None] + 0.5 - cy
    xx = np.arange(w, dtype=np.float64)[None, :] + 0.5 - cx
    u = xx * math.cos(theta) + yy * math.sin(theta)
    v = -xx * math.sin(theta) + yy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place_ellipses(rng, count: int, size_range: tuple[float, float],
                    forbidden: np.ndarray, grow_forbidden: bool,
                    grow_margin: int = 3) -> np.ndarray:
    """Rejection-place ellipses that avoid ``forbidden``; returns their union.

    With ``grow_forbidden`` each placed ellipse (padded by ``grow_margin``)
    joins the forbidden set, spacing later placements away from it.
    """
    h, w = forbidden.shape
    out = np.zeros((h, w), dtype=bool)
    for _ in range(count):
        for _attempt in range(40):
            rc = rng.uniform(*size_range)
            a = rc * rng.uniform(1.0, 1.6)
            b = rc * rc / a
            theta = rng.uniform(0.0, math.pi)
            cy = rng.uniform(rc, h - rc)
            cx = rng.uniform(rc, w - rc)
            ell = _ellipse(h, w, cy, cx, a, b, theta)
            if not (ell & forbidden).any():
                out |= ell
                if grow_forbidden:
                    forbidden |= dilate(ell, grow_margin)
                break
    return out


def _road_mask(rng, h: int, w: int) -> np.ndarray:
    theta = rng.uniform(0.0, math.pi)
    py = rng.uniform(0.1 * h, 0.9 * h)
    px = rng.uniform(0.1 * w, 0.9 * w)
    half = rng.uniform(1.0, 2.0)
    yy = np.arange(h, dtype=np.float64)[:, None] + 0.5 - py
    xx = np.arange(w, dtype=np.float64)[None, :] + 0.5 - px
    dist = np.abs(xx * math.sin(theta) - yy * math.cos(theta))
    return dist <= half


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _centerline_path(cfg: SceneConfig, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense meandering path and per-point half-widths, in pixel coords."""
    h, w = cfg.height, cfg.width
    wmin, wmax = cfg.width_range
    xs = np.arange(w, dtype=np.float64) + 0.5
    margin = wmax / 2 + 4
    amp = min(cfg.meander_amplitude, max(0.0, h / 2 - margin - 2))
    lam = cfg.meander_wavelength
    phase = rng.uniform(0.0, 2 * math.pi, size=3)
    drift = rng.uniform(-0.06, 0.06)
    ys = (h / 2
          + 0.72 * amp * np.sin(2 * math.pi * xs / lam + phase[0])
          + 0.22 * amp * np.sin(2 * math.pi * xs / (0.41 * lam) + phase[1])
          + 0.10 * amp * np.sin(2 * math.pi * xs / (2.7 * lam) + phase[2])
          + drift * (xs - w / 2))
    ys = np.clip(ys, margin, h - margin)
    wphase = rng.uniform(0.0, 2 * math.pi)
    widths = wmin + (wmax - wmin) * (0.5 + 0.5 * np.sin(2 * math.pi * xs / (1.7 * lam) + wphase))
    return xs, ys, widths / 2.0


def gen_scene(cfg: SceneConfig, seed: int | None = None):
    """Generate one scene.

    Returns ``(ms, pan, truth, centerline)``: the multispectral raster,
    a panchromatic raster at 4x resolution, the exact boolean water mask
    (river plus any lakes, minus sandbars), and the river centerline in
    world coordinates.  Bit-identical for identical (cfg, seed).
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    spectra = cfg.resolved_spectra()
    h, w = cfg.height, cfg.width
    if cfg.width_range[1] >= min(h, w) - 8:
        raise ArgumentError("river width range does not fit the scene dims")

    xs, ys, radii = _centerline_path(cfg, rng)
    river = np.zeros((h, w), dtype=bool)
    _carve_tube(river, xs, ys, radii)

    if rng.random() < cfg.braid_probability:
        j0 = int(rng.uniform(0.12, 0.42) * w)
        j1 = min(w - 1, j0 + int(rng.uniform(0.25, 0.40) * w))
        side = 1.0 if rng.random() < 0.5 else -1.0
        off_amp = rng.uniform(1.6, 2.4) * cfg.width_range[1]
        t = np.zeros(w)
        t[j0:j1 + 1] = np.sin(np.pi * np.arange(j1 + 1 - j0) / max(1, j1 - j0))
        ys2 = np.clip(ys + side * off_amp * t, 2.0, h - 2.0)
        _carve_tube(river, xs, ys2, radii * 0.45, lo=j0, hi=j1 + 1)

    d = cfg.distractors
    n_sand = int(rng.poisson(d.sandbars))
    sandbars = np.zeros((h, w), dtype=bool)
    for _ in range(n_sand):
        j = int(rng.uniform(0.08, 0.92) * w)
        rb = radii[j] * rng.uniform(0.25, 0.5)
        if rb < 1.2:
            continue
        sandbars |= _ellipse(h, w, ys[j], xs[j], rb, rb, 0.0)
    sandbars &= river

    # distractors stay clear of the river so the truth mask stays exact.
    # Water-confusable ones (lakes, bogs, shadows) additionally get a wide
    # riparian standoff and mutual spacing: the forge's blurred aux mask
    # reaches a few pixels past every soft-labeled blob, so gaps must stay
    # wider than twice that reach or distinct features chain into one
    # component and the largest-component filter picks arbitrarily
    forbidden = dilate(river, 4)
    standoff = dilate(river, 40)
    lakes = _place_ellipses(rng, int(rng.poisson(d.lakes)), (6.0, 14.0),
                            standoff, grow_forbidden=True, grow_margin=13)
    bogs = _place_ellipses(rng, int(rng.poisson(d.bogs)), (18.0, 40.0),
                           standoff, grow_forbidden=True, grow_margin=13)
    n_roads = int(rng.poisson(d.roads))
    roads = np.zeros((h, w), dtype=bool)
    for _ in range(n_roads):
        roads |= _road_mask(rng, h, w)
    roads &= ~forbidden
    clouds = _place_ellipses(rng, int(rng.poisson(d.clouds)), (25.0, 45.0),
                             forbidden, grow_forbidden=False)
    shadows = _place_ellipses(rng, int(rng.poisson(d.shadows)), (20.0, 42.0),
                              standoff, grow_forbidden=True, grow_margin=13)

    classes = np.zeros((h, w), dtype=np.uint8)
    classes[bogs] = _BOG
    classes[roads] = _ROAD
    classes[clouds] = _CLOUD
    classes[shadows] = _SHADOW
    classes[sandbars] = _SANDBAR
    truth = (river & ~sandbars) | lakes
    classes[truth] = _WATER

    means = np.array([spectra[name].means for name in CLASS_NAMES])
    sigmas = np.array([spectra[name].sigma for name in CLASS_NAMES])
    bands = MS4_BANDS if cfg.n_bands == 4 else MS8_BANDS
    # silt load: one wetness draw per scene lifts water's NIR reflectance
    # (suspended sediment) while pulling the bogs' NIR down (saturation),
    # so the two index modes close on each other in wet scenes
    turb = rng.uniform(*cfg.turbidity_range)
    nir_cols = [i for i, k in enumerate(bands) if k in (BandKind.NIR1, BandKind.NIR2)]
    means[_WATER, nir_cols] = np.minimum(means[_WATER, nir_cols] + turb, 1.0)
    means[_BOG, nir_cols] = np.maximum(means[_BOG, nir_cols] - 0.35 * turb, 0.05)
    refl = means[classes] + rng.standard_normal((h, w, cfg.n_bands)) * sigmas[classes][..., None]
    # scene radiometry: one gain/haze pair per band for the whole scene
    gains = rng.uniform(*cfg.gain_range, size=cfg.n_bands)
    haze = rng.uniform(*cfg.haze_range, size=cfg.n_bands)
    refl = refl * gains + haze
    dn = np.round(np.clip(refl, 0.0, 1.0) * MAX_DN).astype(np.uint16)

    geo = GeoTransform(500000.0, 7800000.0, cfg.pixel_size, -cfg.pixel_size)
    sid = f"scene-{seed}"
    meta = {"source_id": sid, "scene_seed": str(seed), "turbidity": repr(turb)}
    ms = Raster(dn.transpose(2, 0, 1), bands, geo, dict(meta))

    nir_idx = bands.index(BandKind.NIR1)
    vis_idx = [bands.index(k) for k in (BandKind.Blue, BandKind.Green, BandKind.Red)]
    pan_means = (means[:, vis_idx].mean(axis=1) + 0.7 * means[:, nir_idx]) / 1.7
    classes4 = np.repeat(np.repeat(classes, 4, axis=0), 4, axis=1)
    pan_refl = pan_means[classes4] + rng.standard_normal(classes4.shape) * sigmas[classes4]
    pan_refl = pan_refl * rng.uniform(*cfg.gain_range) + rng.uniform(*cfg.haze_range)
    pan_dn = np.round(np.clip(pan_refl, 0.0, 1.0) * MAX_DN).astype(np.uint16)
    pan = Raster(pan_dn[None], (BandKind.Pan,), geo.scaled(0.25, 0.25),
                 dict(meta))

    step = 8
    idx = list(range(0, w, step))
    if idx[-1] != w - 1:
        idx.append(w - 1)
    world = [geo.pixel_to_world(xs[k], ys[k]) for k in idx]
    centerline = CenterlinePolyline(np.array(world))
    return ms, pan, truth, centerline


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteManifest:
    """Replay record of a generated suite: per-scene seeds and the
    forging knobs that turned scenes into chips."""

    kind: str
    tile: int
    base_seed: int
    thresholds: tuple[float, float, float]
    min_water_frac: float
    scenes: tuple[tuple[int, int, str, int], ...]  # (index, seed, source_id, n_chips)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(f"# kind={self.kind} tile={self.tile} seed={self.base_seed} "
                  f"th1={self.thresholds[0]!r} th2={self.thresholds[1]!r} "
                  f"th3={self.thresholds[2]!r} min_water_frac={self.min_water_frac!r}\n")
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["scene", "seed", "source_id", "n_chips"])
        for row in self.scenes:
            writer.writerow(list(row))
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SuiteManifest":
        lines = text.splitlines()
        try:
            meta = dict(part.split("=", 1) for part in lines[0].lstrip("# ").split())
            rows = list(csv.reader(lines[1:]))
            if rows[0] != ["scene", "seed", "source_id", "n_chips"]:
                raise ValueError(f"bad header {rows[0]}")
            scenes = tuple((int(a), int(b), c, int(d)) for a, b, c, d in rows[1:])
            return cls(meta["kind"], int(meta["tile"]), int(meta["seed"]),
                       (float(meta["th1"]), float(meta["th2"]), float(meta["th3"])),
                       float(meta["min_water_frac"]), scenes)
        except (IndexError, KeyError, ValueError) as e:
            raise FormatError(f"bad suite manifest: {e}") from e


def _scene_chips(cfg: SceneConfig, seed: int, sid: str, kind: str, tile: int,
                 thresholds: ThresholdTriple, forge_params: ForgeParams | None,
                 min_water_frac: float) -> list[ChipRecord]:
    ms, pan, _truth, centerline = gen_scene(cfg, seed)
    if forge_params is None:
        forge_params = ForgeParams(blur_sigma=_SUITE_BLUR_SIGMA)
    scene_t = silt_adjusted(thresholds, float(ms.meta["turbidity"]))
    labels = forge_labels(ms, scene_t, centerline, forge_params)
    if kind == "pan":
        image, labels = pan_label_transfer(pan, labels, ms.geo)
        image = Raster(image.data, image.bands, image.geo, dict(ms.meta))
    else:
        image = ms
    return tile_image(image, labels, tile=tile, min_water_frac=min_water_frac,
                      source_id=sid)


def gen_suite(n: int, cfg: SceneConfig, seed: int, *, kind: str = "ms",
              tile: int = 256, thresholds: ThresholdTriple = SUITE_THRESHOLDS,
              forge_params: ForgeParams | None = None,
              min_water_frac: float = 0.02):
    """Generate ``n`` scenes and forge them into training chips.

    ``kind`` selects the multispectral chips (``ms``) or the panchromatic
    companion resampled onto the label grid (``pan``).  Per-scene forge
    thresholds follow each scene's silt draw (:func:`silt_adjusted`);
    when ``forge_params`` is ``None`` the suite forges with a blur of
    ``_SUITE_BLUR_SIGMA`` instead of the field default.  Returns
    ``(records, manifest)``; the manifest holds per-scene seeds so
    :func:`replay_suite` can rebuild the identical record list.
    """
    if n < 1:
        raise ArgumentError("suite needs at least one scene")
    if kind not in ("ms", "pan"):
        raise ArgumentError(f"suite kind must be 'ms' or 'pan', got {kind!r}")
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2**31 - 1, size=n)
    records: list[ChipRecord] = []
    rows = []
    for i, s in enumerate(int(v) for v in scene_seeds):
        sid = f"scene{i:03d}-{s}"
        chips = _scene_chips(cfg, s, sid, kind, tile, thresholds, forge_params,
                             min_water_frac)
        records.extend(chips)
        rows.append((i, s, sid, len(chips)))
    manifest = SuiteManifest(kind, tile, seed,
                             (thresholds.th1, thresholds.th2, thresholds.th3),
                             min_water_frac, tuple(rows))
    return records, manifest


def replay_suite(cfg: SceneConfig, manifest: SuiteManifest,
                 forge_params: ForgeParams | None = None) -> list[ChipRecord]:
    """Rebuild the exact record list described by a manifest."""
    thresholds = ThresholdTriple(*manifest.thresholds)
    records: list[ChipRecord] = []
    for _i, s, sid, _n in manifest.scenes:
        records.extend(_scene_chips(cfg, s, sid, manifest.kind, manifest.tile,
                                    thresholds, forge_params,
                                    manifest.min_water_frac))
    return records
