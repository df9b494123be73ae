"""Quantitative basemaps (thermal inertia and friends) with nearest-pixel sampling.

Unlike observations, basemap rasters carry physical values, not normalized
intensities: the sidecar may add {nodata, value_scale, value_offset} and the
loader applies value = raw * value_scale + value_offset. Negative values are
treated as no-data (physically invalid for TI).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import GeoTransform, RasterError, read_image

TI_PRIMARY = "primary"
TI_FALLBACK = "fallback"
TI_MISSING = "missing"


class BasemapError(ValueError):
    """Invalid basemap data or sampling request."""


@dataclass(frozen=True)
class BasemapGrid:
    """One gridded map: values on an equirectangular lattice plus a no-data sentinel."""

    geo: GeoTransform
    values: np.ndarray
    nodata: float | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.size == 0:
            raise BasemapError("basemap values must be a nonempty 2-D grid")
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid_mask(self) -> np.ndarray:
        mask = np.isfinite(self.values) & (self.values >= 0)
        if self.nodata is not None:
            mask &= self.values != self.nodata
        return mask

    def _is_valid(self, value: float) -> bool:
        if not np.isfinite(value) or value < 0:
            return False
        return self.nodata is None or value != self.nodata

    def nearest_value(self, lat: float, lon: float) -> float | None:
        """Value of the pixel whose center is closest; None outside coverage or no-data."""
        row_f, col_f = self.geo.geo_to_pixel(lat, lon)
        row, col = int(round(row_f)), int(round(col_f))
        if not (0 <= row < self.height and 0 <= col < self.width):
            return None
        value = float(self.values[row, col])
        return value if self._is_valid(value) else None


@dataclass(frozen=True)
class TIBasemap:
    """Fine primary grid with an optional coarse fallback for coverage gaps."""

    primary: BasemapGrid | None = None
    fallback: BasemapGrid | None = None

    def __post_init__(self):
        if self.primary is None and self.fallback is None:
            raise BasemapError("TIBasemap requires at least one grid")

    def sample(self, lat: float, lon: float) -> tuple[float | None, str]:
        if self.primary is not None:
            value = self.primary.nearest_value(lat, lon)
            if value is not None:
                return value, TI_PRIMARY
        if self.fallback is not None:
            value = self.fallback.nearest_value(lat, lon)
            if value is not None:
                return value, TI_FALLBACK
        return None, TI_MISSING


def sample_ti(ti_map: TIBasemap, lat: float, lon: float) -> tuple[float | None, str]:
    """Nearest-pixel TI at a point: primary first, fallback second, else missing."""
    return ti_map.sample(lat, lon)


def sample_footprint_mean(grid: BasemapGrid, rect: tuple[float, float, float, float]) -> float:
    """Unweighted mean of valid pixels whose centers fall inside an axis-aligned
    (lat_min, lat_max, lon_min, lon_max) rectangle. The rectangle must not cross
    the 0/360 meridian."""
    lat_min, lat_max, lon_min, lon_max = rect
    if lat_min >= lat_max or lon_min >= lon_max:
        raise BasemapError(f"footprint rectangle has nonpositive extent: {rect}")
    rows = np.arange(grid.height, dtype=np.float64)
    cols = np.arange(grid.width, dtype=np.float64)
    lats = grid.geo.origin_lat - rows * grid.geo.deg_per_px
    lons = (grid.geo.origin_lon + cols * grid.geo.deg_per_px) % 360.0
    row_sel = (lats >= lat_min) & (lats <= lat_max)
    col_sel = (lons >= lon_min % 360.0) & (lons <= lon_max % 360.0)
    if not row_sel.any() or not col_sel.any():
        raise BasemapError("footprint covers no valid pixels")
    sub = grid.values[np.ix_(row_sel, col_sel)]
    mask = np.isfinite(sub) & (sub >= 0)
    if grid.nodata is not None:
        mask &= sub != grid.nodata
    if not mask.any():
        raise BasemapError("footprint covers no valid pixels")
    return float(sub[mask].mean())


def load_basemap_grid(image_path: Path | str, meta_path: Path | str) -> BasemapGrid:
    """Read a raster + sidecar as raw physical values (no [0,1] normalization)."""
    try:
        meta = json.loads(Path(meta_path).read_text())
    except json.JSONDecodeError as exc:
        raise BasemapError(f"{meta_path}: invalid JSON sidecar") from exc
    for key in ("origin_lon", "origin_lat", "deg_per_px"):
        if key not in meta:
            raise BasemapError(f"{meta_path}: metadata missing field(s) {key}")
    raw, _ = read_image(image_path)
    scale = float(meta.get("value_scale", 1.0))
    offset = float(meta.get("value_offset", 0.0))
    values = raw.astype(np.float64) * scale + offset
    nodata = meta.get("nodata")
    if nodata is not None:
        nodata = float(nodata) * scale + offset
    geo = GeoTransform(float(meta["origin_lon"]), float(meta["origin_lat"]),
                       float(meta["deg_per_px"]))
    return BasemapGrid(geo=geo, values=values, nodata=nodata)


def load_ti_basemap(primary: tuple[Path, Path] | None,
                    fallback: tuple[Path, Path] | None = None) -> TIBasemap:
    return TIBasemap(
        primary=load_basemap_grid(*primary) if primary else None,
        fallback=load_basemap_grid(*fallback) if fallback else None,
    )
