"""Parallel, checkpointable evaluation of the scorer over a whole archive.

The unit of parallelism is one observation: workers share nothing, so the
persisted score grids are byte-identical no matter how many workers ran.
Grids hold calibrated fresh-impact posteriors (p_pos), one per window
position, written atomically one file per observation alongside a JSON
index and a resume checkpoint keyed by a fingerprint of the scoring
configuration.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .calibration import CalibrationModel, calibrated_probs
from .raster import (
    Observation,
    ObservationMeta,
    import_observation,
    iter_archive_metas,
    window_count,
)
from .scorer import BaselineScorerModel, raw_logit_matrix, window_features

GRID_MAGIC = b"FSGR"
GRID_FORMAT_VERSION = 1
INDEX_NAME = "grids.json"
CHECKPOINT_NAME = "checkpoint.json"


class ScanError(RuntimeError):
    """Scan coordination failure (bad checkpoint, unreadable store)."""


@dataclass
class ScoreGrid:
    """Calibrated p_pos per window position of one observation."""

    observation_id: str
    size: int
    stride: int
    probs: np.ndarray  # float32, shape (rows, cols); may be empty

    def __post_init__(self):
        p = np.ascontiguousarray(self.probs, dtype=np.float32)
        if p.ndim != 2:
            raise ScanError(f"score grid must be 2-D, got shape {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ScanError("score grid entries must lie in [0, 1]")
        self.probs = p

    @property
    def rows(self) -> int:
        return self.probs.shape[0]

    @property
    def cols(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class ScanCheckpoint:
    fingerprint: str
    completed_ids: frozenset[str]


@dataclass
class ScanResult:
    out_dir: Path
    fingerprint: str
    grid_paths: dict[str, Path] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    scanned: int = 0
    skipped: int = 0


def config_fingerprint(model: BaselineScorerModel, calibration: CalibrationModel,
                       size: int, stride: int) -> str:
    doc = {
        "feature_set_version": model.feature_version,
        "weights": list(model.weights),
        "intercept": model.intercept,
        "temperature": calibration.temperature,
        "bias_neg": calibration.bias_neg,
        "bias_pos": calibration.bias_pos,
        "size": size,
        "stride": stride,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def score_observation(obs: Observation, model: BaselineScorerModel,
                      calibration: CalibrationModel, size: int = 300,
                      stride: int = 75) -> ScoreGrid:
    """Pure per-observation scoring; safe to call from any worker."""
    if obs.height < size or obs.width < size:
        return ScoreGrid(obs.id, size, stride, np.zeros((0, 0), dtype=np.float32))
    rows = (obs.height - size) // stride + 1
    cols = (obs.width - size) // stride + 1
    feats = np.empty((rows * cols, len(model.weights)), dtype=np.float64)
    k = 0
    for i in range(rows):
        for j in range(cols):
            r, c = i * stride, j * stride
            feats[k] = window_features(obs.pixels[r:r + size, c:c + size])
            k += 1
    z = raw_logit_matrix(model, feats)
    p_pos = calibrated_probs(calibration, z)[:, 1]
    grid = p_pos.astype(np.float32).reshape(rows, cols)
    assert grid.size == window_count(obs.width, obs.height, size, stride)
    return ScoreGrid(obs.id, size, stride, grid)


def scan_observations(observations: Sequence[Observation], model: BaselineScorerModel,
                      calibration: CalibrationModel, size: int = 300,
                      stride: int = 75) -> list[ScoreGrid]:
    """In-memory sequential scan, sorted by observation id."""
    ids = [o.id for o in observations]
    if len(set(ids)) != len(ids):
        raise ScanError("duplicate observation ids in archive")
    return [score_observation(o, model, calibration, size, stride)
            for o in sorted(observations, key=lambda o: o.id)]


# ---------------------------------------------------------------------------
# Grid file + index + checkpoint persistence
# ---------------------------------------------------------------------------

def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_grid(path: Path | str, grid: ScoreGrid) -> None:
    ident = grid.observation_id.encode()
    header = GRID_MAGIC + struct.pack(
        "<II", GRID_FORMAT_VERSION, len(ident)
    ) + ident + struct.pack("<IIII", grid.rows, grid.cols, grid.size, grid.stride)
    payload = header + grid.probs.astype("<f4").tobytes()
    _atomic_write_bytes(Path(path), payload)


def read_grid(path: Path | str) -> ScoreGrid:
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise ScanError(f"{path}: not a score-grid file")
    version, id_len = struct.unpack_from("<II", data, 4)
    if version != GRID_FORMAT_VERSION:
        raise ScanError(f"{path}: unsupported grid format version {version}")
    pos = 12
    ident = data[pos:pos + id_len].decode()
    pos += id_len
    rows, cols, size, stride = struct.unpack_from("<IIII", data, pos)
    pos += 16
    expected = rows * cols * 4
    raw = data[pos:pos + expected]
    if len(raw) != expected:
        raise ScanError(f"{path}: truncated score grid")
    probs = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()
    return ScoreGrid(ident, size, stride, probs)


def save_checkpoint(out_dir: Path, cp: ScanCheckpoint) -> None:
    doc = {"schema_version": 1, "fingerprint": cp.fingerprint,
           "completed_ids": sorted(cp.completed_ids)}
    _atomic_write_bytes(out_dir / CHECKPOINT_NAME,
                        (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def load_checkpoint(out_dir: Path) -> ScanCheckpoint | None:
    path = Path(out_dir) / CHECKPOINT_NAME
    if not path.exists():
        return None
    doc = json.loads(path.read_text())
    return ScanCheckpoint(fingerprint=doc["fingerprint"],
                          completed_ids=frozenset(doc["completed_ids"]))


def _grid_filename(observation_id: str) -> str:
    return f"{observation_id}.grid"


def write_index(out_dir: Path, fingerprint: str, size: int, stride: int,
                metas: dict[str, ObservationMeta], grids: dict[str, ScoreGrid],
                errors: dict[str, str]) -> None:
    entries = {}
    for oid in sorted(grids):
        g = grids[oid]
        entry = metas[oid].to_dict()
        entry.update({"file": _grid_filename(oid), "rows": g.rows, "cols": g.cols})
        entries[oid] = entry
    doc = {
        "schema_version": 1,
        "fingerprint": fingerprint,
        "size": size,
        "stride": stride,
        "grids": entries,
        "errors": dict(sorted(errors.items())),
    }
    _atomic_write_bytes(Path(out_dir) / INDEX_NAME,
                        (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def load_scan_output(out_dir: Path | str) -> tuple[list[ScoreGrid], list[ObservationMeta], dict[str, str]]:
    """Grids + observation metadata recorded by a completed scan."""
    out_dir = Path(out_dir)
    index_path = out_dir / INDEX_NAME
    if not index_path.exists():
        raise ScanError(f"{out_dir}: no scan index ({INDEX_NAME}); run the scan first")
    doc = json.loads(index_path.read_text())
    grids, metas = [], []
    for oid in sorted(doc["grids"]):
        entry = doc["grids"][oid]
        grids.append(read_grid(out_dir / entry["file"]))
        metas.append(ObservationMeta.from_dict(entry))
    return grids, metas, doc.get("errors", {})


# ---------------------------------------------------------------------------
# Archive scan
# ---------------------------------------------------------------------------

def _scan_worker(task) -> tuple[str, np.ndarray | None, tuple[int, int, int, int] | None, str | None]:
    img_path, meta_path, model, calibration, size, stride = task
    obs_id = Path(img_path).stem
    try:
        obs = import_observation(img_path, meta_path)
        obs_id = obs.id
        grid = score_observation(obs, model, calibration, size, stride)
        return obs_id, grid.probs, (grid.rows, grid.cols, size, stride), None
    except Exception as exc:  # contained: one observation's failure is recorded, not fatal
        return obs_id, None, None, f"{type(exc).__name__}: {exc}"


def scan_archive(archive_dir: Path | str, out_dir: Path | str,
                 model: BaselineScorerModel, calibration: CalibrationModel,
                 size: int = 300, stride: int = 75, parallelism: int = 1,
                 resume: bool = False,
                 after_commit: Callable[[str, int], None] | None = None) -> ScanResult:
    """Score every observation of an archive into per-observation grid files.

    Work is partitioned per observation and committed through this single
    writer, so results are identical for any parallelism. With resume=True a
    matching checkpoint skips completed observations; a checkpoint written
    under a different configuration is refused.
    """
    if parallelism < 1:
        raise ScanError(f"parallelism must be >= 1, got {parallelism}")
    archive_dir, out_dir = Path(archive_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    metas: dict[str, ObservationMeta] = {}
    paths: dict[str, tuple[Path, Path]] = {}
    for meta, img, sidecar in iter_archive_metas(archive_dir):
        if meta.id in metas:
            raise ScanError(f"duplicate observation id {meta.id!r} in archive")
        metas[meta.id] = meta
        paths[meta.id] = (img, sidecar)

    fingerprint = config_fingerprint(model, calibration, size, stride)
    completed: set[str] = set()
    if resume:
        cp = load_checkpoint(out_dir)
        if cp is None:
            raise ScanError(f"{out_dir}: cannot resume, no checkpoint found")
        if cp.fingerprint != fingerprint:
            raise ScanError(
                "checkpoint fingerprint mismatch: the checkpoint was written with a "
                "different scorer/calibration/window configuration; rerun without resume"
            )
        completed = {oid for oid in cp.completed_ids
                     if oid in metas and (out_dir / _grid_filename(oid)).exists()}
    save_checkpoint(out_dir, ScanCheckpoint(fingerprint, frozenset(completed)))

    result = ScanResult(out_dir=out_dir, fingerprint=fingerprint, skipped=len(completed))
    pending = [oid for oid in sorted(metas) if oid not in completed]
    tasks = [(paths[oid][0], paths[oid][1], model, calibration, size, stride)
             for oid in pending]

    def commit(oid: str, probs, dims, err) -> None:
        if err is not None:
            result.errors[oid] = err
        else:
            rows, cols, gsize, gstride = dims
            grid = ScoreGrid(oid, gsize, gstride, probs.reshape(rows, cols))
            write_grid(out_dir / _grid_filename(oid), grid)
            completed.add(oid)
            save_checkpoint(out_dir, ScanCheckpoint(fingerprint, frozenset(completed)))
            result.scanned += 1
        if after_commit is not None:
            after_commit(oid, result.scanned)

    if parallelism == 1 or not tasks:
        for task in tasks:
            commit(*_scan_worker(task))
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_scan_worker, task) for task in tasks]
            for fut in as_completed(futures):
                commit(*fut.result())

    grids = {oid: read_grid(out_dir / _grid_filename(oid)) for oid in completed}
    write_index(out_dir, fingerprint, size, stride, metas, grids, result.errors)
    result.grid_paths = {oid: out_dir / _grid_filename(oid) for oid in sorted(completed)}
    return result
