"""Raster data model, window extraction, and observation ingestion.

Observations are grayscale images tied to an equirectangular geotransform:
pixel (0, 0) is centered at (origin_lat, origin_lon), latitude decreases
with row index and longitude increases with column index, with square
pixels of deg_per_px degrees.

Supported on-disk formats are binary PGM (P5, 8- or 16-bit) and grayscale
PNG, each paired with a JSON metadata sidecar
{id, acquired_at, origin_lon, origin_lat, deg_per_px}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

WINDOW_SIZE = 300
WINDOW_STRIDE = 75

IMAGE_SUFFIXES = (".pgm", ".png")


class RasterError(ValueError):
    """Invalid raster data, geometry, or metadata."""


def parse_utc(value: str) -> datetime:
    """Parse an ISO-8601 timestamp into a timezone-aware UTC datetime."""
    try:
        ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except (TypeError, ValueError) as exc:
        raise RasterError(f"invalid ISO-8601 timestamp: {value!r}") from exc
    if ts.tzinfo is None:
        raise RasterError(f"timestamp must carry a timezone offset: {value!r}")
    return ts.astimezone(timezone.utc)


def format_utc(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "+00:00")


@dataclass(frozen=True)
class GeoTransform:
    """Equirectangular pixel-to-geo mapping with square pixels.

    origin_lon / origin_lat locate the *center* of pixel (0, 0); longitude
    is normalized into [0, 360).
    """

    origin_lon: float
    origin_lat: float
    deg_per_px: float

    def __post_init__(self):
        if not np.isfinite(self.deg_per_px) or self.deg_per_px <= 0:
            raise RasterError(f"deg_per_px must be > 0, got {self.deg_per_px}")
        if not np.isfinite(self.origin_lat) or not -90.0 <= self.origin_lat <= 90.0:
            raise RasterError(f"origin_lat must be in [-90, 90], got {self.origin_lat}")
        if not np.isfinite(self.origin_lon):
            raise RasterError(f"origin_lon must be finite, got {self.origin_lon}")
        object.__setattr__(self, "origin_lon", float(self.origin_lon) % 360.0)
        object.__setattr__(self, "origin_lat", float(self.origin_lat))
        object.__setattr__(self, "deg_per_px", float(self.deg_per_px))

    def pixel_to_geo(self, row: float, col: float) -> tuple[float, float]:
        """Geographic coordinates of a (possibly fractional) pixel center."""
        lat = self.origin_lat - row * self.deg_per_px
        lon = (self.origin_lon + col * self.deg_per_px) % 360.0
        return lat, lon

    def geo_to_pixel(self, lat: float, lon: float) -> tuple[float, float]:
        """Inverse of pixel_to_geo; longitude wraps to the nearest image column.

        Assumes the raster spans less than 180 degrees of longitude, which
        holds for any survey observation."""
        row = (self.origin_lat - lat) / self.deg_per_px
        dlon = (lon - self.origin_lon) % 360.0
        if dlon > 180.0:
            dlon -= 360.0
        col = dlon / self.deg_per_px
        return row, col


@dataclass(frozen=True)
class ObservationMeta:
    """Observation identity and geometry without the pixel payload.

    Enough to place windows on the planet; used wherever pixel data is not
    needed (candidate building, scan indexes).
    """

    id: str
    acquired_at: datetime
    width: int
    height: int
    geo: GeoTransform

    def __post_init__(self):
        if not self.id:
            raise RasterError("observation id must be nonempty")
        if self.acquired_at.tzinfo is None:
            raise RasterError("acquired_at must be timezone-aware")
        if self.width < 1 or self.height < 1:
            raise RasterError(f"observation dimensions must be >= 1, got {self.width}x{self.height}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "acquired_at": format_utc(self.acquired_at),
            "width": self.width,
            "height": self.height,
            "origin_lon": self.geo.origin_lon,
            "origin_lat": self.geo.origin_lat,
            "deg_per_px": self.geo.deg_per_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationMeta":
        return cls(
            id=d["id"],
            acquired_at=parse_utc(d["acquired_at"]),
            width=int(d["width"]),
            height=int(d["height"]),
            geo=GeoTransform(d["origin_lon"], d["origin_lat"], d["deg_per_px"]),
        )


@dataclass(eq=False)
class Observation:
    """One archive image: pixels in [0, 1] plus acquisition time and geometry."""

    id: str
    acquired_at: datetime
    geo: GeoTransform
    pixels: np.ndarray  # float32, shape (height, width), values in [0, 1]

    def __post_init__(self):
        if not self.id:
            raise RasterError("observation id must be nonempty")
        if self.acquired_at.tzinfo is None:
            raise RasterError("acquired_at must be timezone-aware")
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise RasterError(f"pixels must be a 2-D grid, got shape {self.pixels.shape}")
        if not np.isfinite(px).all():
            raise RasterError("pixels must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise RasterError("pixel values must lie in [0, 1]")
        self.pixels = px
        self.acquired_at = self.acquired_at.astimezone(timezone.utc)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def meta(self) -> ObservationMeta:
        return ObservationMeta(
            id=self.id, acquired_at=self.acquired_at,
            width=self.width, height=self.height, geo=self.geo,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.id == other.id
            and self.acquired_at == other.acquired_at
            and self.geo == other.geo
            and self.pixels.shape == other.pixels.shape
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class WindowRef:
    """A square sub-image of one observation, addressed by pixel offsets."""

    observation_id: str
    row_off: int
    col_off: int
    size: int = WINDOW_SIZE

    def __post_init__(self):
        if self.size < 1:
            raise RasterError(f"window size must be >= 1, got {self.size}")
        if self.row_off < 0 or self.col_off < 0:
            raise RasterError("window offsets must be nonnegative")


def extract_windows(obs: Observation | ObservationMeta, size: int = WINDOW_SIZE,
                    stride: int = WINDOW_STRIDE) -> list[WindowRef]:
    """Enumerate windows at offsets {0, stride, 2*stride, ...} on both axes.

    Only windows entirely inside the image are returned; an image smaller
    than the window yields an empty list.
    """
    if size < 1:
        raise RasterError(f"size must be >= 1, got {size}")
    if stride < 1:
        raise RasterError(f"stride must be >= 1, got {stride}")
    if obs.height < size or obs.width < size:
        return []
    return [
        WindowRef(obs.id, r, c, size)
        for r in range(0, obs.height - size + 1, stride)
        for c in range(0, obs.width - size + 1, stride)
    ]


def window_count(width: int, height: int, size: int = WINDOW_SIZE,
                 stride: int = WINDOW_STRIDE) -> int:
    """Closed-form count matching extract_windows."""
    if width < size or height < size:
        return 0
    return ((width - size) // stride + 1) * ((height - size) // stride + 1)


def window_pixels(obs: Observation, w: WindowRef) -> np.ndarray:
    """View of the window's pixels; raises if the window is out of bounds."""
    _check_window(obs, w)
    return obs.pixels[w.row_off:w.row_off + w.size, w.col_off:w.col_off + w.size]


def window_center_geo(obs: Observation | ObservationMeta, w: WindowRef) -> tuple[float, float]:
    """(lat, lon) of the window's center pixel via the observation geotransform."""
    _check_window(obs, w)
    half = (w.size - 1) / 2.0
    return obs.geo.pixel_to_geo(w.row_off + half, w.col_off + half)


def _check_window(obs: Observation | ObservationMeta, w: WindowRef) -> None:
    if w.observation_id != obs.id:
        raise RasterError(f"window belongs to {w.observation_id!r}, not {obs.id!r}")
    if w.row_off + w.size > obs.height or w.col_off + w.size > obs.width:
        raise RasterError(
            f"window ({w.row_off},{w.col_off}) size {w.size} exceeds "
            f"{obs.height}x{obs.width} observation {obs.id!r}"
        )


# ---------------------------------------------------------------------------
# PGM (P5) read/write
# ---------------------------------------------------------------------------

def read_pgm(path: Path | str) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (array, maxval). 16-bit samples are big-endian."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise RasterError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise RasterError(f"{path}: malformed PGM header") from exc
    if maxval < 1 or maxval > 65535:
        raise RasterError(f"{path}: PGM maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    raw = data[pos:pos + expected]
    if len(raw) != expected:
        raise RasterError(f"{path}: PGM pixel payload truncated")
    arr = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path: Path | str, array: np.ndarray, maxval: int | None = None) -> None:
    """Write a binary PGM. Arrays of dtype uint16 are stored big-endian."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise RasterError("PGM array must be 2-D")
    if maxval is None:
        maxval = 255 if arr.dtype == np.uint8 else 65535
    if arr.max(initial=0) > maxval:
        raise RasterError(f"array exceeds maxval {maxval}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    payload = arr.astype(">u2" if maxval > 255 else "u1").tobytes()
    Path(path).write_bytes(header + payload)


def read_image(path: Path | str) -> tuple[np.ndarray, int]:
    """Read a grayscale raster as raw integer samples plus the format maxval."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode == "L":
                return np.asarray(im, dtype=np.uint8), 255
            if im.mode in ("I", "I;16", "I;16B"):
                arr = np.asarray(im.convert("I"), dtype=np.int64)
                if arr.min() < 0 or arr.max() > 65535:
                    raise RasterError(f"{path}: PNG sample range unsupported")
                return arr.astype(np.uint16), 65535
            raise RasterError(f"{path}: unsupported PNG mode {im.mode!r} (grayscale only)")
    raise RasterError(f"{path}: unsupported raster format (PGM or PNG expected)")


# ---------------------------------------------------------------------------
# Observation ingestion
# ---------------------------------------------------------------------------

_REQUIRED_META = ("id", "acquired_at", "origin_lon", "origin_lat", "deg_per_px")


def read_sidecar(metadata_path: Path | str) -> dict:
    try:
        meta = json.loads(Path(metadata_path).read_text())
    except json.JSONDecodeError as exc:
        raise RasterError(f"{metadata_path}: invalid JSON sidecar") from exc
    if not isinstance(meta, dict):
        raise RasterError(f"{metadata_path}: sidecar must be a JSON object")
    missing = [f for f in _REQUIRED_META if f not in meta]
    if missing:
        raise RasterError(f"{metadata_path}: metadata missing field(s) {', '.join(missing)}")
    return meta


def import_observation(image_path: Path | str, metadata_path: Path | str) -> Observation:
    """Load an image + JSON sidecar pair, normalizing pixels to [0, 1]."""
    meta = read_sidecar(metadata_path)
    raw, maxval = read_image(image_path)
    for dim_key, actual in (("width", raw.shape[1]), ("height", raw.shape[0])):
        if dim_key in meta and int(meta[dim_key]) != actual:
            raise RasterError(
                f"{metadata_path}: {dim_key} {meta[dim_key]} does not match image {actual}"
            )
    return Observation(
        id=str(meta["id"]),
        acquired_at=parse_utc(meta["acquired_at"]),
        geo=GeoTransform(float(meta["origin_lon"]), float(meta["origin_lat"]),
                         float(meta["deg_per_px"])),
        pixels=raw.astype(np.float32) / np.float32(maxval),
    )


def write_observation(obs: Observation, image_path: Path | str,
                      metadata_path: Path | str, maxval: int = 255) -> None:
    """Persist an observation as a PGM + sidecar pair (pixels quantized to maxval)."""
    q = np.rint(obs.pixels.astype(np.float64) * maxval).astype(np.uint16 if maxval > 255 else np.uint8)
    write_pgm(image_path, q, maxval)
    meta = obs.meta.to_dict()
    Path(metadata_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def list_archive(archive_dir: Path | str) -> list[tuple[Path, Path]]:
    """All (image, sidecar) pairs under a directory, sorted by image name."""
    archive_dir = Path(archive_dir)
    pairs = []
    for img in sorted(archive_dir.iterdir()) if archive_dir.is_dir() else []:
        if img.suffix.lower() in IMAGE_SUFFIXES:
            sidecar = img.with_suffix(".json")
            if not sidecar.exists():
                raise RasterError(f"{img}: missing metadata sidecar {sidecar.name}")
            pairs.append((img, sidecar))
    return pairs


def load_archive(archive_dir: Path | str) -> list[Observation]:
    """Load every observation in an archive directory; ids must be unique."""
    observations = []
    seen: set[str] = set()
    for img, sidecar in list_archive(archive_dir):
        obs = import_observation(img, sidecar)
        if obs.id in seen:
            raise RasterError(f"duplicate observation id {obs.id!r} in archive")
        seen.add(obs.id)
        observations.append(obs)
    return observations


def iter_archive_metas(archive_dir: Path | str) -> Iterator[tuple[ObservationMeta, Path, Path]]:
    """Observation metadata (without pixels) for each archive pair.

    Reads only sidecars plus the raster header, so it is cheap for large archives.
    """
    for img, sidecar in list_archive(archive_dir):
        meta = read_sidecar(sidecar)
        if "width" in meta and "height" in meta:
            width, height = int(meta["width"]), int(meta["height"])
        else:
            raw, _ = read_image(img)
            height, width = raw.shape
        yield ObservationMeta(
            id=str(meta["id"]),
            acquired_at=parse_utc(meta["acquired_at"]),
            width=width,
            height=height,
            geo=GeoTransform(float(meta["origin_lon"]), float(meta["origin_lat"]),
                             float(meta["deg_per_px"])),
        ), img, sidecar
