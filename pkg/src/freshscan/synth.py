"""Seeded synthetic archive generator.

Builds a small planet patch with a smooth thermal-inertia (TI) field,
repeat observations of each cell on a fixed schedule, and impact blast
features injected uniformly in area and time. Blast contrast decreases
with local TI (bright dusty terrain shows high-contrast dark blast
zones), which is the observational bias the rest of the pipeline is
designed to measure and reduce.

Determinism contract: identical config + seed produce byte-identical
archives on disk and equal in-memory observations. All randomness flows
through one numpy Generator in a fixed draw order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import beta as beta_dist, rankdata

from .basemap import BasemapGrid, TIBasemap
from .raster import (
    GeoTransform,
    Observation,
    RasterError,
    format_utc,
    parse_utc,
    write_observation,
)


class SynthError(ValueError):
    """Invalid synthetic-world configuration."""


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """World layout, TI field, impact model, and observation schedule.

    Rates are expressed per pixel^2 per day; the expected number of injected
    impacts is impact_rate * world_area_px * span_days.
    """

    rng_seed: int = 7
    cells_x: int = 5
    cells_y: int = 5
    cell_px: int = 520
    deg_per_px: float = 1e-4
    origin_lat: float = 12.0
    origin_lon: float = 120.0
    # TI field: smooth random field mapped onto [ti_low, ti_high] tiu
    ti_cell_px: int = 20
    ti_low: float = 0.0
    ti_high: float = 1200.0
    ti_smoothness: float = 7.0   # gaussian sigma in TI-grid pixels
    ti_shape_a: float = 2.0      # Beta(a, b) value distribution (right-skewed, Mars-like)
    ti_shape_b: float = 4.0
    # impacts: sparse enough that most windows stay impact-free
    impact_rate: float = 2.5e-8
    impact_radius_px: float = 20.0
    ray_count: int = 7
    ray_len_px: float = 54.0
    ray_width_px: float = 3.0
    contrast_max: float = 0.45
    contrast_min: float = 0.035
    contrast_decay: float = 1.6
    # observation schedule
    visits: int = 3
    span_days: float = 600.0
    epoch: str = "2020-01-01T00:00:00+00:00"
    noise_sigma: float = 0.010
    texture_amp: float = 0.010

    def __post_init__(self):
        if self.cells_x < 1 or self.cells_y < 1 or self.cell_px < 1:
            raise SynthError("world dimensions must be positive")
        if self.ti_cell_px < 1 or self.cell_px % self.ti_cell_px != 0:
            raise SynthError("ti_cell_px must be positive and divide cell_px")
        if not 0 <= self.ti_low < self.ti_high:
            raise SynthError("require 0 <= ti_low < ti_high")
        if self.impact_rate < 0:
            raise SynthError("impact_rate must be >= 0")
        if not (0 <= self.contrast_min <= self.contrast_max <= 1):
            raise SynthError("require 0 <= contrast_min <= contrast_max <= 1")
        if self.visits < 1 or self.span_days <= 0:
            raise SynthError("schedule requires visits >= 1 and span_days > 0")
        if self.noise_sigma < 0 or self.texture_amp < 0:
            raise SynthError("noise/texture amplitudes must be >= 0")
        try:
            parse_utc(self.epoch)
        except RasterError as exc:
            raise SynthError(f"invalid epoch: {exc}") from None

    @property
    def world_width_px(self) -> int:
        return self.cells_x * self.cell_px

    @property
    def world_height_px(self) -> int:
        return self.cells_y * self.cell_px

    @property
    def expected_impacts(self) -> float:
        return self.impact_rate * self.world_width_px * self.world_height_px * self.span_days


@dataclass(frozen=True)
class ImpactTruth:
    """Ground-truth record for one injected impact."""

    lat: float
    lon: float
    time: datetime
    contrast: float  # signed: negative darkens, positive brightens
    ti: float

    def to_dict(self) -> dict:
        return {
            "lat": self.lat,
            "lon": self.lon,
            "time": format_utc(self.time),
            "contrast": self.contrast,
            "ti": self.ti,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImpactTruth":
        return cls(lat=float(d["lat"]), lon=float(d["lon"]), time=parse_utc(d["time"]),
                   contrast=float(d["contrast"]), ti=float(d["ti"]))


@dataclass
class SyntheticArchive:
    observations: list[Observation]
    truth: list[ImpactTruth]
    ti_map: TIBasemap
    config: SyntheticWorldConfig


@dataclass(frozen=True)
class _Impact:
    x: float            # world px (column)
    y: float            # world px (row)
    t_days: float
    contrast: float     # signed
    ti: float
    ray_angles: tuple[float, ...]


class _World:
    """Deterministic world state derived from one seeded Generator."""

    def __init__(self, cfg: SyntheticWorldConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.rng_seed)
        k = cfg.ti_cell_px
        th = cfg.world_height_px // k
        tw = cfg.world_width_px // k

        # 1. TI field: smooth noise, rank-uniformized, pushed through a Beta
        #    quantile map, quantized to whole tiu so disk round-trips exactly.
        raw = ndimage.gaussian_filter(rng.standard_normal((th, tw)), cfg.ti_smoothness,
                                      mode="wrap")
        u = (rankdata(raw.ravel(), method="average") - 0.5) / raw.size
        shaped = beta_dist.ppf(u, cfg.ti_shape_a, cfg.ti_shape_b).reshape(th, tw)
        self.ti_grid = np.rint(cfg.ti_low + (cfg.ti_high - cfg.ti_low) * shaped)

        # 2. static terrain texture (same coarse lattice as TI)
        tex = ndimage.gaussian_filter(rng.standard_normal((th, tw)), cfg.ti_smoothness,
                                      mode="wrap")
        std = tex.std()
        self.texture = tex / std if std > 0 else tex

        # 3. per-cell schedule phases
        self.phases = rng.uniform(0.0, 1.0, size=(cfg.cells_y, cfg.cells_x))

        # 4. impacts
        geo = self.world_geo()
        ti_map = self.ti_basemap()
        n = int(rng.poisson(cfg.expected_impacts)) if cfg.impact_rate > 0 else 0
        # uniform over the pixel-center domain so every impact has a nearest
        # TI pixel and lies inside every covering observation
        xs = rng.uniform(0.0, cfg.world_width_px - 1.0, size=n)
        ys = rng.uniform(0.0, cfg.world_height_px - 1.0, size=n)
        ts = rng.uniform(0.0, cfg.span_days, size=n)
        self.impacts: list[_Impact] = []
        for i in range(n):
            angles = tuple(float(a) for a in rng.uniform(0.0, 2 * math.pi, size=cfg.ray_count))
            lat, lon = geo.pixel_to_geo(ys[i], xs[i])
            ti, _ = ti_map.sample(lat, lon)
            assert ti is not None  # synthetic TI map has full coverage
            span = cfg.ti_high - cfg.ti_low
            frac = (cfg.ti_high - min(max(ti, cfg.ti_low), cfg.ti_high)) / span
            magnitude = cfg.contrast_min + (cfg.contrast_max - cfg.contrast_min) * frac ** cfg.contrast_decay
            sign = -1.0 if self._base_at(ys[i], xs[i]) > 0.5 else 1.0
            self.impacts.append(_Impact(
                x=float(xs[i]), y=float(ys[i]), t_days=float(ts[i]),
                contrast=float(sign * magnitude), ti=float(ti), ray_angles=angles,
            ))
        self._rng = rng  # position 5: per-observation noise, drawn in render order

    # -- geometry ---------------------------------------------------------

    def world_geo(self) -> GeoTransform:
        return GeoTransform(self.cfg.origin_lon, self.cfg.origin_lat, self.cfg.deg_per_px)

    def ti_basemap(self) -> TIBasemap:
        k = self.cfg.ti_cell_px
        geo = GeoTransform(
            origin_lon=self.cfg.origin_lon + (k - 1) / 2.0 * self.cfg.deg_per_px,
            origin_lat=self.cfg.origin_lat - (k - 1) / 2.0 * self.cfg.deg_per_px,
            deg_per_px=self.cfg.deg_per_px * k,
        )
        return TIBasemap(primary=BasemapGrid(geo=geo, values=self.ti_grid, nodata=None))

    def _coarse_coords(self, rows: np.ndarray, cols: np.ndarray) -> list[np.ndarray]:
        k = self.cfg.ti_cell_px
        return [(rows - (k - 1) / 2.0) / k, (cols - (k - 1) / 2.0) / k]

    def _base_at(self, y: float, x: float) -> float:
        return float(self._base_block(np.array([y]), np.array([x]))[0])

    def _base_block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Static terrain brightness (no sensor noise): bright at low TI."""
        coords = self._coarse_coords(rows, cols)
        ti = ndimage.map_coordinates(self.ti_grid, coords, order=1, mode="nearest")
        tex = ndimage.map_coordinates(self.texture, coords, order=1, mode="nearest")
        cfg = self.cfg
        base = 0.78 - 0.48 * (ti - cfg.ti_low) / (cfg.ti_high - cfg.ti_low)
        return np.clip(base + cfg.texture_amp * tex, 0.0, 1.0)

    # -- schedule ---------------------------------------------------------

    def cell_times(self, cy: int, cx: int) -> list[float]:
        cfg = self.cfg
        phase = self.phases[cy, cx]
        return [(v + phase) / cfg.visits * cfg.span_days for v in range(cfg.visits)]

    # -- rendering --------------------------------------------------------

    def render_cell(self, cy: int, cx: int, t_days: float) -> np.ndarray:
        cfg = self.cfg
        r0, c0 = cy * cfg.cell_px, cx * cfg.cell_px
        rows = np.arange(r0, r0 + cfg.cell_px, dtype=np.float64)
        cols = np.arange(c0, c0 + cfg.cell_px, dtype=np.float64)
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        img = self._base_block(rr.ravel(), cc.ravel()).reshape(cfg.cell_px, cfg.cell_px)

        reach = cfg.ray_len_px + 3.0
        for imp in self.impacts:
            if imp.t_days >= t_days:
                continue
            if (imp.y + reach < r0 or imp.y - reach >= r0 + cfg.cell_px
                    or imp.x + reach < c0 or imp.x - reach >= c0 + cfg.cell_px):
                continue
            _stamp_impact(img, imp, r0, c0, cfg)

        noise = self._rng.standard_normal(img.shape)
        return np.clip(img + cfg.noise_sigma * noise, 0.0, 1.0)


def _stamp_impact(img: np.ndarray, imp: _Impact, r0: int, c0: int,
                  cfg: SyntheticWorldConfig) -> None:
    reach = int(math.ceil(cfg.ray_len_px)) + 3
    yc, xc = imp.y - r0, imp.x - c0
    lo_r = max(0, int(math.floor(yc)) - reach)
    hi_r = min(img.shape[0], int(math.ceil(yc)) + reach + 1)
    lo_c = max(0, int(math.floor(xc)) - reach)
    hi_c = min(img.shape[1], int(math.ceil(xc)) + reach + 1)
    if lo_r >= hi_r or lo_c >= hi_c:
        return
    dy = np.arange(lo_r, hi_r, dtype=np.float64)[:, None] - yc
    dx = np.arange(lo_c, hi_c, dtype=np.float64)[None, :] - xc
    d2 = dy * dy + dx * dx
    mask = np.exp(-d2 / cfg.impact_radius_px ** 2)
    half_len = 0.5 * cfg.ray_len_px
    for theta in imp.ray_angles:
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        along = np.exp(-np.maximum(u, 0.0) / half_len)
        across = np.exp(-(v / cfg.ray_width_px) ** 2)
        ray = np.where((u >= 0) & (u <= cfg.ray_len_px), along * across, 0.0)
        mask = np.maximum(mask, 0.8 * ray)
    region = img[lo_r:hi_r, lo_c:hi_c]
    np.clip(region + imp.contrast * np.minimum(mask, 1.0), 0.0, 1.0, out=region)


def _iter_schedule(world: _World) -> Iterator[tuple[int, int, int, float]]:
    """Fixed render order: cells row-major, visits in time order."""
    cfg = world.cfg
    for cy in range(cfg.cells_y):
        for cx in range(cfg.cells_x):
            for v, t in enumerate(world.cell_times(cy, cx)):
                yield cy, cx, v, t


def _observation(world: _World, cy: int, cx: int, v: int, t_days: float) -> Observation:
    cfg = world.cfg
    epoch = parse_utc(cfg.epoch)
    pixels = world.render_cell(cy, cx, t_days)
    # Quantize exactly as the on-disk PGM will, so memory == reload.
    q = np.rint(pixels * 255.0).astype(np.uint8)
    geo = GeoTransform(
        origin_lon=cfg.origin_lon + cx * cfg.cell_px * cfg.deg_per_px,
        origin_lat=cfg.origin_lat - cy * cfg.cell_px * cfg.deg_per_px,
        deg_per_px=cfg.deg_per_px,
    )
    return Observation(
        id=f"syn-{cy:02d}{cx:02d}-v{v}",
        acquired_at=epoch + timedelta(days=t_days),
        geo=geo,
        pixels=q.astype(np.float32) / np.float32(255.0),
    )


def _truth_records(world: _World) -> list[ImpactTruth]:
    epoch = parse_utc(world.cfg.epoch)
    geo = world.world_geo()
    out = []
    for imp in world.impacts:
        lat, lon = geo.pixel_to_geo(imp.y, imp.x)
        out.append(ImpactTruth(lat=lat, lon=lon, time=epoch + timedelta(days=imp.t_days),
                               contrast=imp.contrast, ti=imp.ti))
    return out


def generate_synthetic_archive(cfg: SyntheticWorldConfig) -> SyntheticArchive:
    """Materialize the whole archive in memory (intended for desk-scale configs)."""
    world = _World(cfg)
    observations = [_observation(world, cy, cx, v, t) for cy, cx, v, t in _iter_schedule(world)]
    return SyntheticArchive(
        observations=observations,
        truth=_truth_records(world),
        ti_map=world.ti_basemap(),
        config=cfg,
    )


def write_synthetic_archive(cfg: SyntheticWorldConfig, out_dir: Path | str) -> dict:
    """Generate and persist the archive; streams one observation at a time.

    Layout: out_dir/archive/<id>.pgm+.json, out_dir/truth.jsonl,
    out_dir/ti_map.pgm + out_dir/ti_map.json.
    """
    out_dir = Path(out_dir)
    archive_dir = out_dir / "archive"
    archive_dir.mkdir(parents=True, exist_ok=True)
    world = _World(cfg)

    n_obs = 0
    for cy, cx, v, t in _iter_schedule(world):
        obs = _observation(world, cy, cx, v, t)
        write_observation(obs, archive_dir / f"{obs.id}.pgm", archive_dir / f"{obs.id}.json")
        n_obs += 1

    truth = _truth_records(world)
    truth_path = out_dir / "truth.jsonl"
    with truth_path.open("w") as fh:
        for rec in truth:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    ti_map = world.ti_basemap()
    grid = ti_map.primary
    from .raster import write_pgm

    write_pgm(out_dir / "ti_map.pgm", grid.values.astype(np.uint16), maxval=65535)
    (out_dir / "ti_map.json").write_text(json.dumps({
        "id": "ti_map",
        "origin_lon": grid.geo.origin_lon,
        "origin_lat": grid.geo.origin_lat,
        "deg_per_px": grid.geo.deg_per_px,
        "nodata": 65535,
    }, indent=2, sort_keys=True) + "\n")

    return {
        "archive_dir": str(archive_dir),
        "truth_path": str(truth_path),
        "ti_map_image": str(out_dir / "ti_map.pgm"),
        "ti_map_meta": str(out_dir / "ti_map.json"),
        "observations": n_obs,
        "impacts": len(truth),
    }


def read_truth(path: Path | str) -> list[ImpactTruth]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(ImpactTruth.from_dict(json.loads(line)))
    return out
