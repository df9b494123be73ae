"""HTTP review API: candidate queue, per-member imagery, decisions, bias reports.

Stateless between requests apart from the catalog store; decision writes go
through the store's single-writer path. Every JSON body carries
schema_version, and every error body is {code, message}.
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from . import analytics
from .candidates import DETECTION_THRESHOLD, Candidate, ti_bin_index
from .raster import format_utc, import_observation, read_sidecar
from .store import (
    CatalogStore,
    IllegalTransitionError,
    ReviewStatus,
    StoreError,
    UnknownCandidateError,
)

API_SCHEMA_VERSION = 1
IMAGE_MARGIN_PX = 50


class ApiError(Exception):
    def __init__(self, status_code: int, code: str, message: str):
        self.status_code = status_code
        self.code = code
        self.message = message


class DecisionRequest(BaseModel):
    status: str
    reviewer: str
    notes: str = ""


def _candidate_summary(store: CatalogStore, cand: Candidate) -> dict:
    ti_bin = None
    if cand.ti_value is not None:
        ti_bin = ti_bin_index(cand.ti_value, store.bin_edges)
    return {
        "id": cand.id,
        "seed_lat": cand.seed_lat,
        "seed_lon": cand.seed_lon,
        "confidence": cand.confidence,
        "status": store.status(cand.id).value,
        "ti_value": cand.ti_value,
        "ti_source": cand.ti_source,
        "ti_bin": ti_bin,
        "n_members": len(cand.members),
    }


def create_app(store: CatalogStore, archive_dir: Path | str | None = None,
               reports_dir: Path | str | None = None,
               cors_origins: list[str] | None = None,
               followup_url_template: str | None = None) -> FastAPI:
    app = FastAPI(title="freshscan review service")
    archive_dir = Path(archive_dir) if archive_dir else None
    reports_dir = Path(reports_dir) if reports_dir else None
    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_origins or ["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    image_paths: dict[str, Path] = {}
    obs_cache: dict[str, object] = {}

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status_code,
                            content={"code": exc.code, "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"code": "invalid_params", "message": str(exc.errors())})

    def _find_observation(observation_id: str):
        if observation_id in obs_cache:
            return obs_cache[observation_id]
        if archive_dir is None:
            raise ApiError(404, "no_archive", "service is running without an archive directory")
        if not image_paths:
            for sidecar in sorted(archive_dir.glob("*.json")):
                try:
                    meta = read_sidecar(sidecar)
                except Exception:
                    continue
                for suffix in (".pgm", ".png"):
                    img = sidecar.with_suffix(suffix)
                    if img.exists():
                        image_paths[str(meta["id"])] = img
                        break
        img = image_paths.get(observation_id)
        if img is None:
            raise ApiError(404, "unknown_observation",
                           f"no archive image for observation {observation_id!r}")
        obs = import_observation(img, img.with_suffix(".json"))
        if len(obs_cache) > 32:
            obs_cache.clear()
        obs_cache[observation_id] = obs
        return obs

    @app.get("/candidates")
    def list_candidates(
        status: Optional[str] = None,
        bin: Optional[int] = Query(default=None, ge=0),
        min_conf: Optional[float] = Query(default=None, ge=0.0, le=1.0),
        page: int = Query(default=1, ge=1),
        page_size: int = Query(default=50, ge=1, le=1000),
    ):
        conf_range = (min_conf, 1.0) if min_conf is not None else None
        try:
            items, total = store.query(status=status, ti_bin=bin,
                                       confidence_range=conf_range,
                                       page=page, page_size=page_size)
        except StoreError as exc:
            raise ApiError(400, "invalid_params", str(exc))
        return {
            "schema_version": API_SCHEMA_VERSION,
            "page": page,
            "page_size": page_size,
            "total": total,
            "items": [_candidate_summary(store, c) for c in items],
        }

    @app.get("/candidates/{candidate_id}")
    def candidate_detail(candidate_id: str):
        try:
            cand = store.candidate(candidate_id)
        except UnknownCandidateError as exc:
            raise ApiError(404, "unknown_candidate", str(exc))
        members = [
            {
                "index": k,
                "observation_id": m.window.observation_id,
                "acquired_at": format_utc(m.acquired_at),
                "p_pos": m.p_pos,
                "outlined": m.p_pos >= DETECTION_THRESHOLD,
                "image_url": f"/candidates/{cand.id}/members/{k}/image.png",
            }
            for k, m in enumerate(cand.members)
        ]
        formation_window = None
        if cand.before_time is not None and cand.detected_time is not None:
            formation_window = {
                "before": format_utc(cand.before_time),
                "after": format_utc(cand.detected_time),
            }
        hint = store.nearest_catalog_hint(cand.seed_lat, cand.seed_lon)
        followup_url = None
        for entry in store.catalog_entries():
            if entry.candidate_id == cand.id and entry.followup_image_id:
                if followup_url_template:
                    followup_url = followup_url_template.format(image_id=entry.followup_image_id)
                else:
                    followup_url = entry.followup_image_id
        detail = _candidate_summary(store, cand)
        detail.update({
            "schema_version": API_SCHEMA_VERSION,
            "members": members,
            "formation_window": formation_window,
            "nearest_catalog_hint": None if hint is None
            else {"impact_id": hint[0], "distance_m": hint[1]},
            "followup_image_url": followup_url,
        })
        return detail

    @app.post("/candidates/{candidate_id}/decision")
    def post_decision(candidate_id: str, body: DecisionRequest):
        try:
            decision = store.record_decision(candidate_id, body.status,
                                             reviewer=body.reviewer, notes=body.notes)
        except UnknownCandidateError as exc:
            raise ApiError(404, "unknown_candidate", str(exc))
        except IllegalTransitionError as exc:
            raise ApiError(409, "illegal_transition", str(exc))
        except StoreError as exc:
            raise ApiError(400, "invalid_params", str(exc))
        return {
            "schema_version": API_SCHEMA_VERSION,
            "candidate_id": candidate_id,
            "status": decision.status.value,
            "decision_id": decision.decision_id,
        }

    @app.get("/candidates/{candidate_id}/members/{member_index}/image.png")
    def member_image(candidate_id: str, member_index: int):
        from PIL import Image

        try:
            cand = store.candidate(candidate_id)
        except UnknownCandidateError as exc:
            raise ApiError(404, "unknown_candidate", str(exc))
        if not 0 <= member_index < len(cand.members):
            raise ApiError(404, "unknown_member",
                           f"candidate {candidate_id} has no member {member_index}")
        member = cand.members[member_index]
        obs = _find_observation(member.window.observation_id)
        w = member.window
        side = w.size + 2 * IMAGE_MARGIN_PX
        crop = np.zeros((side, side), dtype=np.float32)
        r0, c0 = w.row_off - IMAGE_MARGIN_PX, w.col_off - IMAGE_MARGIN_PX
        src_r0, src_c0 = max(0, r0), max(0, c0)
        src_r1, src_c1 = min(obs.height, r0 + side), min(obs.width, c0 + side)
        crop[src_r0 - r0:src_r1 - r0, src_c0 - c0:src_c1 - c0] = \
            obs.pixels[src_r0:src_r1, src_c0:src_c1]
        # normalized contrast: min-max stretch over the rendered crop
        lo, hi = float(crop.min()), float(crop.max())
        if hi > lo:
            crop = (crop - lo) / (hi - lo)
        else:
            crop = np.zeros_like(crop)
        img = Image.fromarray((crop * 255.0).round().astype(np.uint8), mode="L")
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/reports/bias")
    def bias(selection: str):
        if selection not in ("top_k", "stratified", "catalog"):
            raise ApiError(400, "invalid_params",
                           f"selection must be top_k, stratified, or catalog, got {selection!r}")
        if reports_dir is None:
            raise ApiError(409, "reports_missing", "service is running without a reports directory")
        if selection in ("top_k", "stratified"):
            path = reports_dir / f"bias_{selection}.json"
            if not path.exists():
                raise ApiError(409, "reports_missing",
                               f"no {selection} bias report found; run the report stage first")
            doc = json.loads(path.read_text())
            doc["schema_version"] = API_SCHEMA_VERSION
            return doc
        expected_path = reports_dir / "expected_distribution.json"
        if not expected_path.exists():
            raise ApiError(409, "reports_missing",
                           "no expected distribution found; run the report stage first")
        exp_doc = json.loads(expected_path.read_text())
        ti_values = [e.thermal_inertia for e in store.catalog_entries()
                     if e.thermal_inertia is not None]
        if not ti_values:
            raise ApiError(409, "catalog_empty",
                           "no confirmed catalog entries with TI values")
        report = analytics.bias_report(
            ti_values, label="catalog",
            expected=exp_doc["expected"], bin_edges=tuple(exp_doc["bin_edges"]),
        )
        doc = report.to_dict()
        doc["schema_version"] = API_SCHEMA_VERSION
        return doc

    return app
