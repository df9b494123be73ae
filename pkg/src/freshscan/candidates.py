"""Deduplicated candidates from score grids: greedy seed-centered clustering,
date-constraint and latitude filters, and top-K / TI-stratified selection.

Clustering walks every window in descending posterior (ties broken by
observation id, then row, then column offset); each unassigned window seeds a
candidate and absorbs every still-unassigned window whose center lies within
the grouping radius of the seed center, across all observations and scores.
Every window therefore lands in exactly one candidate, and seed centers of
distinct candidates are farther apart than the radius.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .basemap import TI_MISSING, TIBasemap
from .raster import ObservationMeta, WindowRef, format_utc, parse_utc
from .scan import ScoreGrid

MARS_RADIUS_M = 3_389_500.0
GROUPING_RADIUS_M = 600.0
NONDETECT_THRESHOLD = 0.5
DETECTION_THRESHOLD = 0.95
DEFAULT_TI_BIN_EDGES = tuple(float(v) for v in range(0, 1001, 100))
CANDIDATE_SCHEMA_VERSION = 1


class CandidateError(ValueError):
    """Inconsistent grids, observations, or candidate data."""


def great_circle_distance(p1: tuple[float, float], p2: tuple[float, float],
                          radius_m: float = MARS_RADIUS_M) -> float:
    """Haversine distance in meters between two (lat, lon) points in degrees."""
    lat1, lon1 = math.radians(p1[0]), math.radians(p1[1])
    lat2, lon2 = math.radians(p2[0]), math.radians(p2[1])
    sin_dlat = math.sin((lat2 - lat1) / 2.0)
    sin_dlon = math.sin((lon2 - lon1) / 2.0)
    h = sin_dlat**2 + math.cos(lat1) * math.cos(lat2) * sin_dlon**2
    return 2.0 * radius_m * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class CandidateMember:
    window: WindowRef
    acquired_at: datetime
    p_pos: float
    lat: float
    lon: float


@dataclass(frozen=True)
class Candidate:
    id: str
    seed_lat: float
    seed_lon: float
    confidence: float
    members: tuple[CandidateMember, ...]
    ti_value: float | None = None
    ti_source: str = TI_MISSING
    before_time: datetime | None = None    # latest sub-threshold member preceding detection
    detected_time: datetime | None = None  # earliest member at/above the detection threshold

    def __post_init__(self):
        if not self.members:
            raise CandidateError("candidate must have at least one member window")
        best = max(m.p_pos for m in self.members)
        if abs(best - self.confidence) > 1e-9:
            raise CandidateError("confidence must equal the maximum member posterior")
        times = [(m.acquired_at, m.window.observation_id, m.window.row_off, m.window.col_off)
                 for m in self.members]
        if times != sorted(times):
            raise CandidateError("members must be sorted by acquisition time")


def candidate_id(seed: WindowRef) -> str:
    key = f"{seed.observation_id}:{seed.row_off}:{seed.col_off}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def _unit_vectors(lat_deg: np.ndarray, lon_deg: np.ndarray, radius_m: float) -> np.ndarray:
    lat = np.radians(lat_deg)
    lon = np.radians(lon_deg)
    return radius_m * np.column_stack([
        np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat),
    ])


def build_candidates(grids: Iterable[ScoreGrid],
                     observations: Sequence[ObservationMeta] | Mapping[str, ObservationMeta],
                     radius_m: float = GROUPING_RADIUS_M,
                     sphere_radius_m: float = MARS_RADIUS_M) -> list[Candidate]:
    """Greedy clustering of all windows into candidates, highest confidence first."""
    if isinstance(observations, Mapping):
        meta_by_id = dict(observations)
    else:
        meta_by_id = {m.id: m for m in observations}

    obs_ids: list[str] = []
    rows_off: list[np.ndarray] = []
    cols_off: list[np.ndarray] = []
    probs: list[np.ndarray] = []
    lats: list[np.ndarray] = []
    lons: list[np.ndarray] = []
    sizes: list[np.ndarray] = []
    for grid in sorted(grids, key=lambda g: g.observation_id):
        meta = meta_by_id.get(grid.observation_id)
        if meta is None:
            raise CandidateError(f"score grid references unknown observation {grid.observation_id!r}")
        if grid.rows == 0 or grid.cols == 0:
            continue
        ii, jj = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
        r_off = ii.ravel() * grid.stride
        c_off = jj.ravel() * grid.stride
        half = (grid.size - 1) / 2.0
        lat = meta.geo.origin_lat - (r_off + half) * meta.geo.deg_per_px
        lon = (meta.geo.origin_lon + (c_off + half) * meta.geo.deg_per_px) % 360.0
        obs_ids.extend([grid.observation_id] * r_off.size)
        rows_off.append(r_off)
        cols_off.append(c_off)
        probs.append(grid.probs.ravel().astype(np.float64))
        lats.append(lat)
        lons.append(lon)
        sizes.append(np.full(r_off.size, grid.size, dtype=np.int64))
    if not obs_ids:
        return []

    obs_arr = np.array(obs_ids)
    row_arr = np.concatenate(rows_off)
    col_arr = np.concatenate(cols_off)
    p_arr = np.concatenate(probs)
    lat_arr = np.concatenate(lats)
    lon_arr = np.concatenate(lons)
    size_arr = np.concatenate(sizes)

    order = np.lexsort((col_arr, row_arr, obs_arr, -p_arr))
    points = _unit_vectors(lat_arr, lon_arr, sphere_radius_m)
    tree = cKDTree(points)
    chord = 2.0 * sphere_radius_m * math.sin(radius_m / (2.0 * sphere_radius_m))

    times = {oid: meta_by_id[oid].acquired_at for oid in set(obs_ids)}
    assigned = np.zeros(len(p_arr), dtype=bool)
    candidates: list[Candidate] = []
    for idx in order:
        if assigned[idx]:
            continue
        neighbor_idx = tree.query_ball_point(points[idx], chord)
        member_idx = [n for n in neighbor_idx if not assigned[n]]
        assigned[member_idx] = True
        members = sorted(
            (CandidateMember(
                window=WindowRef(str(obs_arr[n]), int(row_arr[n]), int(col_arr[n]),
                                 int(size_arr[n])),
                acquired_at=times[str(obs_arr[n])],
                p_pos=float(p_arr[n]),
                lat=float(lat_arr[n]),
                lon=float(lon_arr[n]),
            ) for n in member_idx),
            key=lambda m: (m.acquired_at, m.window.observation_id,
                           m.window.row_off, m.window.col_off),
        )
        seed = WindowRef(str(obs_arr[idx]), int(row_arr[idx]), int(col_arr[idx]),
                         int(size_arr[idx]))
        candidates.append(Candidate(
            id=candidate_id(seed),
            seed_lat=float(lat_arr[idx]),
            seed_lon=float(lon_arr[idx]),
            confidence=float(p_arr[idx]),
            members=tuple(members),
        ))
    candidates.sort(key=lambda c: (-c.confidence, c.id))
    return candidates


def attach_ti(candidates: Sequence[Candidate], ti_map: TIBasemap) -> list[Candidate]:
    """Sample TI at each seed center (nearest pixel; primary, then fallback)."""
    out = []
    for cand in candidates:
        value, source = ti_map.sample(cand.seed_lat, cand.seed_lon)
        out.append(replace(cand, ti_value=value, ti_source=source))
    return out


def apply_filters(candidates: Sequence[Candidate],
                  lat_range: tuple[float, float] = (-60.0, 60.0),
                  nondetect_threshold: float = NONDETECT_THRESHOLD,
                  detection_threshold: float = DETECTION_THRESHOLD) -> list[Candidate]:
    """Keep candidates that are in the latitude band and date-constrained.

    Date constraint: some member reaches the detection threshold, and some
    other member scored below the non-detection threshold strictly earlier.
    The latest such earlier non-detection becomes the "before" bound; the
    earliest detection becomes the "after" bound.
    """
    kept = []
    for cand in candidates:
        if not lat_range[0] <= cand.seed_lat <= lat_range[1]:
            continue
        detections = [m for m in cand.members if m.p_pos >= detection_threshold]
        if not detections:
            continue
        first_det = min(m.acquired_at for m in detections)
        befores = [m.acquired_at for m in cand.members
                   if m.p_pos < nondetect_threshold and m.acquired_at < first_det]
        if not befores:
            continue
        kept.append(replace(cand, before_time=max(befores), detected_time=first_det))
    return kept


def top_k(candidates: Sequence[Candidate], k: int = 1000) -> list[Candidate]:
    """First k by descending confidence, candidate id as the tie-break."""
    if k < 0:
        raise CandidateError(f"k must be >= 0, got {k}")
    return sorted(candidates, key=lambda c: (-c.confidence, c.id))[:k]


def ti_bin_index(ti: float, bin_edges: Sequence[float] = DEFAULT_TI_BIN_EDGES) -> int | None:
    """Half-open bins [e0,e1), ..., [e_{n-2}, inf); None below the first edge."""
    if len(bin_edges) < 2:
        raise CandidateError("bin_edges needs at least two edges")
    if ti < bin_edges[0]:
        return None
    n_bins = len(bin_edges) - 1
    idx = int(np.searchsorted(bin_edges, ti, side="right")) - 1
    return min(idx, n_bins - 1)


def stratified_top(candidates: Sequence[Candidate],
                   bin_edges: Sequence[float] = DEFAULT_TI_BIN_EDGES,
                   per_bin: int = 100) -> dict[int, list[Candidate]]:
    """Top per_bin candidates by confidence within each TI bin.

    Candidates without a usable TI value (source "missing") are excluded.
    The final bin is open above, so values past the last edge stay selectable.
    """
    if per_bin < 0:
        raise CandidateError(f"per_bin must be >= 0, got {per_bin}")
    n_bins = len(bin_edges) - 1
    bins: dict[int, list[Candidate]] = {b: [] for b in range(n_bins)}
    for cand in candidates:
        if cand.ti_source == TI_MISSING or cand.ti_value is None:
            continue
        b = ti_bin_index(cand.ti_value, bin_edges)
        if b is not None:
            bins[b].append(cand)
    return {
        b: sorted(members, key=lambda c: (-c.confidence, c.id))[:per_bin]
        for b, members in bins.items()
    }


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

def candidate_to_dict(cand: Candidate) -> dict:
    return {
        "schema_version": CANDIDATE_SCHEMA_VERSION,
        "id": cand.id,
        "seed_lat": cand.seed_lat,
        "seed_lon": cand.seed_lon,
        "confidence": cand.confidence,
        "ti_value": cand.ti_value,
        "ti_source": cand.ti_source,
        "before_time": format_utc(cand.before_time) if cand.before_time else None,
        "detected_time": format_utc(cand.detected_time) if cand.detected_time else None,
        "members": [
            {
                "observation_id": m.window.observation_id,
                "row_off": m.window.row_off,
                "col_off": m.window.col_off,
                "size": m.window.size,
                "acquired_at": format_utc(m.acquired_at),
                "p_pos": m.p_pos,
                "lat": m.lat,
                "lon": m.lon,
            }
            for m in cand.members
        ],
    }


def candidate_from_dict(doc: dict) -> Candidate:
    if doc.get("schema_version") != CANDIDATE_SCHEMA_VERSION:
        raise CandidateError(f"unsupported candidate schema {doc.get('schema_version')!r}")
    members = tuple(
        CandidateMember(
            window=WindowRef(m["observation_id"], int(m["row_off"]), int(m["col_off"]),
                             int(m["size"])),
            acquired_at=parse_utc(m["acquired_at"]),
            p_pos=float(m["p_pos"]),
            lat=float(m["lat"]),
            lon=float(m["lon"]),
        )
        for m in doc["members"]
    )
    return Candidate(
        id=doc["id"],
        seed_lat=float(doc["seed_lat"]),
        seed_lon=float(doc["seed_lon"]),
        confidence=float(doc["confidence"]),
        members=members,
        ti_value=None if doc.get("ti_value") is None else float(doc["ti_value"]),
        ti_source=doc.get("ti_source", TI_MISSING),
        before_time=parse_utc(doc["before_time"]) if doc.get("before_time") else None,
        detected_time=parse_utc(doc["detected_time"]) if doc.get("detected_time") else None,
    )


def write_candidates(path: Path | str, candidates: Sequence[Candidate]) -> None:
    with Path(path).open("w") as fh:
        for cand in candidates:
            fh.write(json.dumps(candidate_to_dict(cand), sort_keys=True) + "\n")


def read_candidates(path: Path | str) -> list[Candidate]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(candidate_from_dict(json.loads(line)))
    return out
