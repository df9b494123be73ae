"""Persistent candidate catalog: review decisions, state machine, and
confirmed-impact entries.

The decision log is append-only JSON-lines; current statuses are a replay of
that log, so any crash that truncates a trailing record simply rolls back to
the last completed append. Triage decisions (the review categories) may
overwrite each other — conflicting reviewer calls are all retained in the
log and the last write wins — while the follow-up chain
(new_fresh -> followup_requested -> confirmed / rejected_after_followup)
is strict. Anything else requires an explicit supervisor override, which is
flagged in the audit record.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Sequence

from .analytics import effective_diameter
from .candidates import (
    Candidate,
    DEFAULT_TI_BIN_EDGES,
    candidate_from_dict,
    candidate_to_dict,
    great_circle_distance,
    ti_bin_index,
)
from .raster import format_utc, parse_utc

STORE_SCHEMA_VERSION = 1


class StoreError(ValueError):
    """Unknown candidate, illegal transition, or invalid catalog data."""


class UnknownCandidateError(StoreError):
    pass


class IllegalTransitionError(StoreError):
    pass


class ReviewStatus(str, Enum):
    UNREVIEWED = "unreviewed"
    NON_IMPACT = "non_impact"
    OLD_IMPACT = "old_impact"
    UNDATEABLE_FRESH = "undateable_fresh"
    KNOWN_FRESH = "known_fresh"
    NEW_FRESH = "new_fresh"
    DUPLICATE = "duplicate"
    FOLLOWUP_REQUESTED = "followup_requested"
    CONFIRMED = "confirmed"
    REJECTED_AFTER_FOLLOWUP = "rejected_after_followup"


TRIAGE_STATUSES = frozenset({
    ReviewStatus.NON_IMPACT,
    ReviewStatus.OLD_IMPACT,
    ReviewStatus.UNDATEABLE_FRESH,
    ReviewStatus.KNOWN_FRESH,
    ReviewStatus.NEW_FRESH,
    ReviewStatus.DUPLICATE,
})


def is_legal_transition(current: ReviewStatus, new: ReviewStatus) -> bool:
    if current == ReviewStatus.UNREVIEWED:
        return new in TRIAGE_STATUSES
    if current in TRIAGE_STATUSES and new in TRIAGE_STATUSES:
        return True  # re-triage: reviewer conflict resolution, last write wins
    if current == ReviewStatus.NEW_FRESH and new == ReviewStatus.FOLLOWUP_REQUESTED:
        return True
    if current == ReviewStatus.FOLLOWUP_REQUESTED:
        return new in (ReviewStatus.CONFIRMED, ReviewStatus.REJECTED_AFTER_FOLLOWUP)
    return False


@dataclass(frozen=True)
class ReviewDecision:
    decision_id: str
    candidate_id: str
    status: ReviewStatus
    reviewer: str
    notes: str
    timestamp: datetime
    override: bool = False

    def to_dict(self) -> dict:
        return {
            "schema_version": STORE_SCHEMA_VERSION,
            "decision_id": self.decision_id,
            "candidate_id": self.candidate_id,
            "status": self.status.value,
            "reviewer": self.reviewer,
            "notes": self.notes,
            "timestamp": format_utc(self.timestamp),
            "override": self.override,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ReviewDecision":
        return cls(
            decision_id=doc["decision_id"],
            candidate_id=doc["candidate_id"],
            status=ReviewStatus(doc["status"]),
            reviewer=doc["reviewer"],
            notes=doc.get("notes", ""),
            timestamp=parse_utc(doc["timestamp"]),
            override=bool(doc.get("override", False)),
        )


VALID_TONES = ("dark", "light", "dual")
VALID_TYPES = ("single", "cluster")


@dataclass(frozen=True)
class CatalogEntry:
    impact_id: str
    candidate_id: str
    lat: float
    lon: float
    type: str
    halo: bool
    rays: bool
    tone: str
    effective_diameter: float
    dust_cover_index: float | None
    thermal_inertia: float | None
    before_image_id: str
    before_date: datetime
    after_image_id: str
    after_date: datetime
    followup_image_id: str | None = None

    def __post_init__(self):
        if self.type not in VALID_TYPES:
            raise StoreError(f"type must be one of {VALID_TYPES}, got {self.type!r}")
        if self.tone not in VALID_TONES:
            raise StoreError(f"tone must be one of {VALID_TONES}, got {self.tone!r}")
        if self.effective_diameter is not None and self.effective_diameter <= 0:
            raise StoreError("effective_diameter must be positive")
        if self.before_date >= self.after_date:
            raise StoreError("before date must be strictly earlier than after date")

    def to_dict(self) -> dict:
        doc = {
            "schema_version": STORE_SCHEMA_VERSION,
            "impact_id": self.impact_id,
            "candidate_id": self.candidate_id,
            "lat": self.lat,
            "lon": self.lon,
            "type": self.type,
            "halo": self.halo,
            "rays": self.rays,
            "tone": self.tone,
            "effective_diameter": self.effective_diameter,
            "dust_cover_index": self.dust_cover_index,
            "thermal_inertia": self.thermal_inertia,
            "before_image_id": self.before_image_id,
            "before_date": format_utc(self.before_date),
            "after_image_id": self.after_image_id,
            "after_date": format_utc(self.after_date),
            "followup_image_id": self.followup_image_id,
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "CatalogEntry":
        return cls(
            impact_id=doc["impact_id"],
            candidate_id=doc["candidate_id"],
            lat=float(doc["lat"]),
            lon=float(doc["lon"]),
            type=doc["type"],
            halo=bool(doc["halo"]),
            rays=bool(doc["rays"]),
            tone=doc["tone"],
            effective_diameter=float(doc["effective_diameter"]),
            dust_cover_index=None if doc.get("dust_cover_index") is None
            else float(doc["dust_cover_index"]),
            thermal_inertia=None if doc.get("thermal_inertia") is None
            else float(doc["thermal_inertia"]),
            before_image_id=doc["before_image_id"],
            before_date=parse_utc(doc["before_date"]),
            after_image_id=doc["after_image_id"],
            after_date=parse_utc(doc["after_date"]),
            followup_image_id=doc.get("followup_image_id"),
        )


def _read_jsonl(path: Path) -> list[dict]:
    """Parse a JSON-lines file, dropping a truncated (crash-interrupted) tail."""
    if not path.exists():
        return []
    data = path.read_bytes()
    docs = []
    lines = data.split(b"\n")
    has_trailing_newline = data.endswith(b"\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        is_last = i == len(lines) - 1
        try:
            docs.append(json.loads(line))
        except json.JSONDecodeError:
            if is_last and not has_trailing_newline:
                break  # interrupted append; roll back to the last complete record
            raise StoreError(f"{path}: corrupt record at line {i + 1}")
    return docs


class CatalogStore:
    """Single-writer store rooted at a directory.

    Files: candidates.jsonl (imported pipeline output), decisions.jsonl
    (append-only audit log), catalog.jsonl (confirmed measurements).
    Reads are safe concurrently with writes; writes serialize on one lock.
    """

    def __init__(self, root: Path | str, bin_edges: Sequence[float] = DEFAULT_TI_BIN_EDGES):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.bin_edges = tuple(bin_edges)
        self._lock = threading.Lock()
        self._candidates: dict[str, Candidate] = {}
        self._statuses: dict[str, ReviewStatus] = {}
        self._decisions: list[ReviewDecision] = []
        self._catalog: dict[str, CatalogEntry] = {}
        self._load()

    # -- paths ------------------------------------------------------------

    @property
    def candidates_path(self) -> Path:
        return self.root / "candidates.jsonl"

    @property
    def decisions_path(self) -> Path:
        return self.root / "decisions.jsonl"

    @property
    def catalog_path(self) -> Path:
        return self.root / "catalog.jsonl"

    # -- load / replay ------------------------------------------------------

    def _load(self) -> None:
        for doc in _read_jsonl(self.candidates_path):
            cand = candidate_from_dict(doc)
            self._candidates[cand.id] = cand
            self._statuses[cand.id] = ReviewStatus.UNREVIEWED
        for doc in _read_jsonl(self.decisions_path):
            decision = ReviewDecision.from_dict(doc)
            self._decisions.append(decision)
            self._statuses[decision.candidate_id] = decision.status
        for doc in _read_jsonl(self.catalog_path):
            entry = CatalogEntry.from_dict(doc)
            self._catalog[entry.impact_id] = entry

    def _append(self, path: Path, doc: dict) -> None:
        with path.open("a") as fh:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
            fh.flush()

    # -- candidates ---------------------------------------------------------

    def add_candidates(self, candidates: Sequence[Candidate]) -> int:
        """Import pipeline candidates; already-known ids are skipped."""
        added = 0
        with self._lock:
            for cand in candidates:
                if cand.id in self._candidates:
                    continue
                self._append(self.candidates_path, candidate_to_dict(cand))
                self._candidates[cand.id] = cand
                self._statuses[cand.id] = ReviewStatus.UNREVIEWED
                added += 1
        return added

    def candidate(self, candidate_id: str) -> Candidate:
        try:
            return self._candidates[candidate_id]
        except KeyError:
            raise UnknownCandidateError(f"unknown candidate {candidate_id!r}") from None

    def __len__(self) -> int:
        return len(self._candidates)

    def status(self, candidate_id: str) -> ReviewStatus:
        if candidate_id not in self._statuses:
            raise UnknownCandidateError(f"unknown candidate {candidate_id!r}")
        return self._statuses[candidate_id]

    # -- decisions ----------------------------------------------------------

    def record_decision(self, candidate_id: str, status: ReviewStatus | str,
                        reviewer: str, notes: str = "", override: bool = False,
                        timestamp: datetime | None = None) -> ReviewDecision:
        try:
            status = ReviewStatus(status)
        except ValueError:
            raise StoreError(f"unknown review status {status!r}") from None
        with self._lock:
            if candidate_id not in self._candidates:
                raise UnknownCandidateError(f"unknown candidate {candidate_id!r}")
            current = self._statuses[candidate_id]
            if not is_legal_transition(current, status) and not override:
                raise IllegalTransitionError(
                    f"illegal transition {current.value} -> {status.value} "
                    f"for candidate {candidate_id}"
                )
            decision = ReviewDecision(
                decision_id=uuid.uuid4().hex,
                candidate_id=candidate_id,
                status=status,
                reviewer=reviewer,
                notes=notes,
                timestamp=timestamp or datetime.now(timezone.utc),
                override=override and not is_legal_transition(current, status),
            )
            self._append(self.decisions_path, decision.to_dict())
            self._decisions.append(decision)
            self._statuses[candidate_id] = status
            return decision

    def decision_log(self, candidate_id: str | None = None) -> list[ReviewDecision]:
        if candidate_id is None:
            return list(self._decisions)
        return [d for d in self._decisions if d.candidate_id == candidate_id]

    def replay_status(self, candidate_id: str) -> ReviewStatus:
        """Status derived purely from the log (audit check)."""
        if candidate_id not in self._candidates:
            raise UnknownCandidateError(f"unknown candidate {candidate_id!r}")
        status = ReviewStatus.UNREVIEWED
        for d in self._decisions:
            if d.candidate_id == candidate_id:
                status = d.status
        return status

    # -- catalog ------------------------------------------------------------

    def promote_to_catalog(self, candidate_id: str, measurements: dict) -> CatalogEntry:
        """Turn a confirmed candidate into a catalog entry with measurements.

        measurements requires: type, diameters (exactly one for 'single', two
        or more for 'cluster'), halo, rays, tone, before/after image ids and
        dates; optional: dust_cover_index, thermal_inertia, followup_image_id.
        """
        with self._lock:
            cand = self._candidates.get(candidate_id)
            if cand is None:
                raise UnknownCandidateError(f"unknown candidate {candidate_id!r}")
            if self._statuses[candidate_id] != ReviewStatus.CONFIRMED:
                raise StoreError(
                    f"candidate {candidate_id} has status "
                    f"{self._statuses[candidate_id].value!r}; only confirmed "
                    "candidates can be promoted"
                )
            try:
                kind = measurements["type"]
                diameters = list(measurements["diameters"])
            except KeyError as exc:
                raise StoreError(f"measurements missing field {exc}") from None
            if kind == "single" and len(diameters) != 1:
                raise StoreError("a single-crater entry requires exactly one diameter")
            if kind == "cluster" and len(diameters) < 2:
                raise StoreError("a cluster entry requires at least two diameters")
            entry = CatalogEntry(
                impact_id=measurements.get("impact_id", f"ml-{candidate_id[:8]}"),
                candidate_id=candidate_id,
                lat=cand.seed_lat,
                lon=cand.seed_lon,
                type=kind,
                halo=bool(measurements["halo"]),
                rays=bool(measurements["rays"]),
                tone=measurements["tone"],
                effective_diameter=effective_diameter(diameters),
                dust_cover_index=measurements.get("dust_cover_index"),
                thermal_inertia=measurements.get("thermal_inertia", cand.ti_value),
                before_image_id=measurements["before_image_id"],
                before_date=_as_utc(measurements["before_date"]),
                after_image_id=measurements["after_image_id"],
                after_date=_as_utc(measurements["after_date"]),
                followup_image_id=measurements.get("followup_image_id"),
            )
            if entry.impact_id in self._catalog:
                raise StoreError(f"impact id {entry.impact_id!r} already in catalog")
            self._append(self.catalog_path, entry.to_dict())
            self._catalog[entry.impact_id] = entry
            return entry

    def catalog_entries(self) -> list[CatalogEntry]:
        return [self._catalog[k] for k in sorted(self._catalog)]

    def nearest_catalog_hint(self, lat: float, lon: float,
                             max_m: float = 5000.0) -> tuple[str, float] | None:
        """Closest catalog entry within max_m, as (impact_id, distance_m)."""
        best: tuple[str, float] | None = None
        for entry in self._catalog.values():
            d = great_circle_distance((lat, lon), (entry.lat, entry.lon))
            if d <= max_m and (best is None or d < best[1]):
                best = (entry.impact_id, d)
        return best

    # -- queries ------------------------------------------------------------

    def query(self, status: ReviewStatus | str | None = None,
              ti_bin: int | None = None,
              lat_range: tuple[float, float] | None = None,
              confidence_range: tuple[float, float] | None = None,
              page: int = 1, page_size: int = 50) -> tuple[list[Candidate], int]:
        """Filtered, deterministically ordered page of candidates plus total count."""
        if page < 1:
            raise StoreError(f"page must be >= 1, got {page}")
        if page_size < 1:
            raise StoreError(f"page_size must be >= 1, got {page_size}")
        if status is not None:
            try:
                status = ReviewStatus(status)
            except ValueError:
                raise StoreError(f"unknown review status {status!r}") from None
        n_bins = len(self.bin_edges) - 1
        if ti_bin is not None and not 0 <= ti_bin < n_bins:
            raise StoreError(f"ti_bin must be in [0, {n_bins}), got {ti_bin}")

        matches = []
        for cand in self._candidates.values():
            if status is not None and self._statuses[cand.id] != status:
                continue
            if ti_bin is not None:
                if cand.ti_value is None:
                    continue
                if ti_bin_index(cand.ti_value, self.bin_edges) != ti_bin:
                    continue
            if lat_range is not None and not lat_range[0] <= cand.seed_lat <= lat_range[1]:
                continue
            if confidence_range is not None and not \
                    confidence_range[0] <= cand.confidence <= confidence_range[1]:
                continue
            matches.append(cand)
        matches.sort(key=lambda c: (-c.confidence, c.id))
        start = (page - 1) * page_size
        return matches[start:start + page_size], len(matches)

    # -- export ---------------------------------------------------------------

    def export_tables(self, out_dir: Path | str) -> tuple[Path, Path]:
        """CSV tables of confirmed impacts: properties and image provenance,
        both sorted by thermal inertia."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = sorted(self._catalog.values(),
                         key=lambda e: (e.thermal_inertia if e.thermal_inertia is not None
                                        else float("inf"), e.impact_id))
        props = out_dir / "impact_properties.csv"
        with props.open("w") as fh:
            fh.write("Id,Latitude (N),Longitude (E),Type,Halo?,Rays?,"
                     "Effective diameter (m),Dust cover index,Thermal inertia (tiu)\n")
            for e in entries:
                fh.write(
                    f"{e.impact_id},{e.lat:.4f},{e.lon:.4f},{e.type},"
                    f"{'yes' if e.halo else 'no'},{'yes' if e.rays else 'no'},"
                    f"{e.effective_diameter:.2f},"
                    f"{'' if e.dust_cover_index is None else f'{e.dust_cover_index:.4f}'},"
                    f"{'' if e.thermal_inertia is None else f'{e.thermal_inertia:.1f}'}\n"
                )
        images = out_dir / "impact_images.csv"
        with images.open("w") as fh:
            fh.write("Id,Latitude,Longitude,Before image,Before date,"
                     "After image,After date,Follow-up image\n")
            for e in entries:
                fh.write(
                    f"{e.impact_id},{e.lat:.4f},{e.lon:.4f},"
                    f"{e.before_image_id},{e.before_date.date().isoformat()},"
                    f"{e.after_image_id},{e.after_date.date().isoformat()},"
                    f"{e.followup_image_id or ''}\n"
                )
        return props, images


def _as_utc(value) -> datetime:
    if isinstance(value, datetime):
        if value.tzinfo is None:
            raise StoreError("dates must be timezone-aware")
        return value.astimezone(timezone.utc)
    return parse_utc(str(value))
