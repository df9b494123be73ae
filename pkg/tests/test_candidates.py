import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from freshscan.basemap import TI_MISSING
from freshscan.candidates import (
    MARS_RADIUS_M,
    Candidate,
    CandidateError,
    CandidateMember,
    apply_filters,
    build_candidates,
    candidate_from_dict,
    candidate_to_dict,
    great_circle_distance,
    read_candidates,
    stratified_top,
    ti_bin_index,
    top_k,
    write_candidates,
)
from freshscan.raster import GeoTransform, ObservationMeta, WindowRef
from freshscan.scan import ScoreGrid

T0 = datetime(2020, 1, 1, tzinfo=timezone.utc)
M_PER_DEG = MARS_RADIUS_M * math.pi / 180.0


def meta(oid, lat=0.0, lon=30.0, t=T0, width=300, height=300, deg=1e-4):
    return ObservationMeta(id=oid, acquired_at=t, width=width, height=height,
                           geo=GeoTransform(lon, lat, deg))


def single_window_grid(oid, p):
    return ScoreGrid(oid, 300, 75, np.array([[p]], dtype=np.float32))


def member(oid, t, p, row=0, col=0, lat=0.0, lon=30.0):
    return CandidateMember(window=WindowRef(oid, row, col, 300), acquired_at=t,
                           p_pos=p, lat=lat, lon=lon)


def candidate(members, seed_lat=0.0, seed_lon=30.0, ti=None, source=TI_MISSING, cid="c1"):
    members = tuple(sorted(members, key=lambda m: (m.acquired_at, m.window.observation_id,
                                                   m.window.row_off, m.window.col_off)))
    return Candidate(id=cid, seed_lat=seed_lat, seed_lon=seed_lon,
                     confidence=max(m.p_pos for m in members), members=members,
                     ti_value=ti, ti_source=source)


# -- great-circle distance ------------------------------------------------------

def test_distance_identity_is_zero():
    assert great_circle_distance((12.0, 44.0), (12.0, 44.0)) == 0.0


def test_distance_one_degree_on_equator():
    d = great_circle_distance((0.0, 10.0), (0.0, 11.0))
    assert d == pytest.approx(MARS_RADIUS_M * math.pi / 180.0, rel=1e-9)


@settings(max_examples=300, deadline=None)
@given(st.floats(-89, 89), st.floats(0, 360), st.floats(-89, 89), st.floats(0, 360))
def test_distance_is_symmetric(lat1, lon1, lat2, lon2):
    a = great_circle_distance((lat1, lon1), (lat2, lon2))
    b = great_circle_distance((lat2, lon2), (lat1, lon1))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-9)
    assert a >= 0.0


# -- clustering -------------------------------------------------------------------

def offset_deg(meters):
    return meters / M_PER_DEG


def test_detections_500m_apart_merge_into_one_candidate():
    m1 = meta("obs-a", t=T0)
    m2 = meta("obs-b", t=T0 + timedelta(days=40), lon=30.0 + offset_deg(500.0))
    cands = build_candidates(
        [single_window_grid("obs-a", 0.99), single_window_grid("obs-b", 0.8)], [m1, m2])
    assert len(cands) == 1
    assert len(cands[0].members) == 2
    assert cands[0].confidence == pytest.approx(0.99, abs=1e-6)


def test_detections_700m_apart_stay_separate():
    m1 = meta("obs-a", t=T0)
    m2 = meta("obs-b", t=T0 + timedelta(days=40), lon=30.0 + offset_deg(700.0))
    cands = build_candidates(
        [single_window_grid("obs-a", 0.99), single_window_grid("obs-b", 0.8)], [m1, m2])
    assert len(cands) == 2


def test_singleton_candidate_confidence():
    cands = build_candidates([single_window_grid("obs-a", 0.42)], [meta("obs-a")])
    assert len(cands) == 1
    assert cands[0].confidence == pytest.approx(0.42, abs=1e-6)
    assert len(cands[0].members) == 1


def test_members_sorted_by_time_and_confidence_is_max():
    t1, t2, t3 = T0, T0 + timedelta(days=10), T0 + timedelta(days=20)
    metas = [meta("b", t=t2), meta("a", t=t3), meta("c", t=t1)]
    grids = [single_window_grid("b", 0.5), single_window_grid("a", 0.97),
             single_window_grid("c", 0.02)]
    cands = build_candidates(grids, metas)
    assert len(cands) == 1
    cand = cands[0]
    assert [m.window.observation_id for m in cand.members] == ["c", "b", "a"]
    assert cand.confidence == pytest.approx(max(m.p_pos for m in cand.members))


def test_grid_for_unknown_observation_rejected():
    with pytest.raises(CandidateError):
        build_candidates([single_window_grid("ghost", 0.9)], [meta("obs-a")])


def test_clustering_is_invariant_to_grid_order():
    rng = np.random.default_rng(0)
    metas, grids = [], []
    for i in range(6):
        oid = f"o{i}"
        metas.append(meta(oid, lat=0.5 * (i % 3), lon=30.0 + 0.4 * (i // 3),
                          t=T0 + timedelta(days=3 * i), width=600, height=450))
        grids.append(ScoreGrid(oid, 300, 75,
                               rng.random((3, 5)).astype(np.float32)))
    reference = [candidate_to_dict(c) for c in build_candidates(grids, metas)]
    for perm_seed in range(4):
        order = np.random.default_rng(perm_seed).permutation(len(grids))
        shuffled = [candidate_to_dict(c) for c in
                    build_candidates([grids[i] for i in order], metas)]
        assert shuffled == reference


def test_every_window_lands_in_exactly_one_candidate():
    rng = np.random.default_rng(1)
    metas, grids = [], []
    for i in range(4):
        oid = f"o{i}"
        metas.append(meta(oid, lat=0.02 * i, lon=30.0 + 0.015 * i, width=600, height=450,
                          t=T0 + timedelta(days=i)))
        grids.append(ScoreGrid(oid, 300, 75, rng.random((3, 5)).astype(np.float32)))
    cands = build_candidates(grids, metas)
    seen = set()
    for cand in cands:
        for m in cand.members:
            key = (m.window.observation_id, m.window.row_off, m.window.col_off)
            assert key not in seen
            seen.add(key)
    assert len(seen) == 4 * 15


def test_seed_centers_separated_by_more_than_radius():
    rng = np.random.default_rng(2)
    metas, grids = [], []
    for i in range(4):
        oid = f"o{i}"
        metas.append(meta(oid, lat=0.001 * i, lon=30.0 + 0.001 * i, width=600, height=450,
                          t=T0 + timedelta(days=i)))
        grids.append(ScoreGrid(oid, 300, 75, rng.random((3, 5)).astype(np.float32)))
    cands = build_candidates(grids, metas)
    for i, a in enumerate(cands):
        for b in cands[i + 1:]:
            d = great_circle_distance((a.seed_lat, a.seed_lon), (b.seed_lat, b.seed_lon))
            assert d > 600.0


# -- filters ------------------------------------------------------------------------

def test_filter_keeps_canonical_dateable_candidate():
    cand = candidate([member("a", T0, 0.02), member("b", T0 + timedelta(days=30), 0.99)])
    kept = apply_filters([cand])
    assert len(kept) == 1
    assert kept[0].before_time == T0
    assert kept[0].detected_time == T0 + timedelta(days=30)


def test_filter_drops_lone_detection():
    cand = candidate([member("a", T0, 0.99)])
    assert apply_filters([cand]) == []


def test_filter_drops_high_latitude():
    cand = candidate([member("a", T0, 0.02, lat=61.0),
                      member("b", T0 + timedelta(days=30), 0.99, lat=61.0)],
                     seed_lat=61.0)
    assert apply_filters([cand]) == []
    kept = apply_filters([cand], lat_range=(-70.0, 70.0))
    assert len(kept) == 1


def test_filter_requires_nondetection_strictly_before_detection():
    late_low = candidate([member("a", T0, 0.99), member("b", T0 + timedelta(days=9), 0.1)])
    assert apply_filters([late_low]) == []
    same_time = candidate([member("a", T0, 0.3), member("b", T0, 0.99)])
    assert apply_filters([same_time]) == []


def test_filter_uses_latest_before_and_earliest_detection():
    cand = candidate([
        member("a", T0, 0.05),
        member("b", T0 + timedelta(days=10), 0.2),
        member("c", T0 + timedelta(days=20), 0.97),
        member("d", T0 + timedelta(days=30), 0.99),
    ])
    kept = apply_filters([cand])
    assert kept[0].before_time == T0 + timedelta(days=10)
    assert kept[0].detected_time == T0 + timedelta(days=20)


def test_filter_midscore_members_are_not_before_evidence():
    cand = candidate([member("a", T0, 0.6), member("b", T0 + timedelta(days=5), 0.99)])
    assert apply_filters([cand]) == []


def test_filter_is_idempotent_and_subset(pipe7):
    once = apply_filters(pipe7["candidates"])
    twice = apply_filters(once)
    assert [c.id for c in twice] == [c.id for c in once]
    all_ids = {c.id for c in pipe7["candidates"]}
    assert all(c.id in all_ids for c in once)


# -- selection ------------------------------------------------------------------------

def test_top_k_orders_by_confidence_then_id():
    cands = [candidate([member("a", T0, 0.99)], cid="z"),
             candidate([member("b", T0, 0.98)], cid="m"),
             candidate([member("c", T0, 0.99)], cid="a")]
    picked = top_k(cands, 2)
    assert [c.id for c in picked] == ["a", "z"]
    assert len(top_k(cands, 50)) == 3
    assert top_k(cands, 0) == []


def test_ti_bin_edges_are_half_open_with_open_top():
    assert ti_bin_index(0.0) == 0
    assert ti_bin_index(99.999) == 0
    assert ti_bin_index(100.0) == 1
    assert ti_bin_index(899.99) == 8
    assert ti_bin_index(900.0) == 9
    assert ti_bin_index(1000.0) == 9
    assert ti_bin_index(1050.0) == 9  # values beyond the last edge stay selectable
    assert ti_bin_index(-5.0) is None


def test_stratified_top_respects_bins_and_per_bin():
    cands = [
        candidate([member("a", T0, 0.9)], ti=50.0, source="primary", cid="low1"),
        candidate([member("b", T0, 0.8)], ti=60.0, source="primary", cid="low2"),
        candidate([member("c", T0, 0.7)], ti=70.0, source="primary", cid="low3"),
        candidate([member("d", T0, 0.95)], ti=1050.0, source="fallback", cid="high"),
        candidate([member("e", T0, 0.99)], ti=None, source=TI_MISSING, cid="miss"),
    ]
    bins = stratified_top(cands, per_bin=2)
    assert [c.id for c in bins[0]] == ["low1", "low2"]
    assert [c.id for c in bins[9]] == ["high"]
    assert all(not members for b, members in bins.items() if b not in (0, 9))
    assert "miss" not in [c.id for members in bins.values() for c in members]


def test_stratified_underfull_bin_returns_everything():
    cands = [candidate([member("a", T0, 0.5)], ti=250.0, source="primary", cid="only")]
    bins = stratified_top(cands, per_bin=100)
    assert [c.id for c in bins[2]] == ["only"]


def test_stratified_bins_are_disjoint(pipe7):
    bins = pipe7["stratified_bins"]
    ids = [c.id for b in bins for c in bins[b]]
    assert len(ids) == len(set(ids))
    for b, members in bins.items():
        for c in members:
            assert ti_bin_index(c.ti_value) == b


# -- persistence -----------------------------------------------------------------------

def test_candidate_jsonl_roundtrip(tmp_path, pipe7):
    path = tmp_path / "cands.jsonl"
    write_candidates(path, pipe7["filtered"])
    back = read_candidates(path)
    assert back == pipe7["filtered"]


def test_candidate_validation():
    with pytest.raises(CandidateError):
        Candidate(id="x", seed_lat=0, seed_lon=0, confidence=0.5, members=())
    bad_conf = [member("a", T0, 0.3)]
    with pytest.raises(CandidateError):
        Candidate(id="x", seed_lat=0, seed_lon=0, confidence=0.9,
                  members=tuple(bad_conf))
    unsorted = (member("b", T0 + timedelta(days=1), 0.5), member("a", T0, 0.4))
    with pytest.raises(CandidateError):
        Candidate(id="x", seed_lat=0, seed_lon=0, confidence=0.5, members=unsorted)


def test_candidate_dict_schema_version_pinned(pipe7):
    doc = candidate_to_dict(pipe7["filtered"][0])
    assert doc["schema_version"] == 1
    doc["schema_version"] = 99
    with pytest.raises(CandidateError):
        candidate_from_dict(doc)
