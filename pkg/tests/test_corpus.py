import json
import math
import random
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vistrends.corpus import (
    EARTH_RADIUS_M,
    CapturePoint,
    ImageSequence,
    Location,
    Rejection,
    assemble_sequence,
    build_sequences,
    count_neighbors,
    format_time,
    haversine_m,
    ingest_manifest,
    parse_time,
    read_sequences,
    select_locations_nms,
    write_manifest,
    write_sequences,
)

T0 = datetime(2020, 5, 1, 12, tzinfo=timezone.utc)


def north(lat, lon, meters):
    """Point ``meters`` due north on the sphere (exact along a meridian)."""
    return lat + math.degrees(meters / EARTH_RADIUS_M), lon


def pt(pid, lat, lon, t=T0, heading=0.0):
    return CapturePoint(pid, lat, lon, t, f"file:///img/{pid}.jpg", heading)


def brute_haversine(lat1, lon1, lat2, lon2):
    # chord length between the two points on the sphere, converted to arc length;
    # an independent route to the same great-circle distance
    def xyz(lat, lon):
        p, l = math.radians(lat), math.radians(lon)
        return (math.cos(p) * math.cos(l), math.cos(p) * math.sin(l), math.sin(p))

    chord = math.dist(xyz(lat1, lon1), xyz(lat2, lon2))
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, chord / 2))


# ingest


def _line(**kw):
    d = {"id": "p1", "lat": 40.0, "lon": -74.0, "timestamp": "2020-01-01T00:00:00Z", "image_uri": "file:///a.jpg", "heading": 10.0}
    d.update(kw)
    return json.dumps(d)


def test_ingest_empty_file(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    res = ingest_manifest(p)
    assert res.points == [] and res.rejected == 0


def test_ingest_three_valid_one_malformed(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("\n".join([_line(id="a"), _line(id="b"), "{not json", _line(id="c")]) + "\n")
    res = ingest_manifest(p)
    assert [x.id for x in res.points] == ["a", "b", "c"]
    assert res.rejected == 1
    assert res.diagnostics[0].startswith("line 3")


@pytest.mark.parametrize(
    "bad",
    [
        {"lat": 91},
        {"lon": -180.5},
        {"timestamp": "yesterday"},
        {"timestamp": "2020-01-01T00:00:00"},  # no offset: not an instant
        {"id": ""},
        {"image_uri": ""},
        {"lat": float("nan")},
    ],
)
def test_ingest_rejects_invalid_records(tmp_path, bad):
    p = tmp_path / "m.jsonl"
    p.write_text(_line(**bad) + "\n")
    res = ingest_manifest(p)
    assert res.points == [] and res.rejected == 1


def test_ingest_duplicate_id_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(_line(id="a") + "\n" + _line(id="a", lat=41) + "\n")
    res = ingest_manifest(p)
    assert len(res.points) == 1 and res.points[0].lat == 40.0 and res.rejected == 1


def test_ingest_unreadable_file_is_fatal(tmp_path):
    with pytest.raises(OSError):
        ingest_manifest(tmp_path / "missing.jsonl")


def test_manifest_round_trip(tmp_path):
    pts = [pt("a", 1.0, 2.0, T0, 45.0), pt("b", -3.5, 170.25, T0 + timedelta(microseconds=5), 359.0)]
    write_manifest(tmp_path / "m.jsonl", pts)
    assert ingest_manifest(tmp_path / "m.jsonl").points == pts


def test_time_format_round_trip():
    ts = datetime(2021, 3, 4, 5, 6, 7, 890000, tzinfo=timezone.utc)
    assert parse_time(format_time(ts)) == ts
    assert format_time(T0) == "2020-05-01T12:00:00Z"
    assert parse_time("2020-05-01T14:00:00+02:00") == T0


# distances and neighbors


def test_haversine_matches_independent_formula():
    rng = random.Random(3)
    for _ in range(200):
        lat, lon = rng.uniform(-80, 80), rng.uniform(-179, 179)
        lat2, lon2 = lat + rng.uniform(-0.5, 0.5), lon + rng.uniform(-0.5, 0.5)
        assert haversine_m(lat, lon, lat2, lon2) == pytest.approx(brute_haversine(lat, lon, lat2, lon2), rel=1e-6, abs=1e-3)


def test_count_neighbors_single_point():
    assert count_neighbors([pt("a", 10, 10)], 1.8) == {"a": 0}


def test_count_neighbors_one_meter_apart():
    lat2, lon2 = north(40.0, -74.0, 1.0)
    assert haversine_m(40.0, -74.0, lat2, lon2) == pytest.approx(1.0, abs=1e-6)
    assert count_neighbors([pt("a", 40.0, -74.0), pt("b", lat2, lon2)], 1.8) == {"a": 1, "b": 1}


def test_count_neighbors_five_meters_apart():
    lat2, lon2 = north(40.0, -74.0, 5.0)
    assert count_neighbors([pt("a", 40.0, -74.0), pt("b", lat2, lon2)], 1.8) == {"a": 0, "b": 0}


def test_count_neighbors_rejects_bad_radius():
    with pytest.raises(ValueError):
        count_neighbors([pt("a", 0, 0)], 0)


def _cloud(seed, n=60, spread_m=8.0):
    rng = random.Random(seed)
    out = []
    for i in range(n):
        dn, de = rng.uniform(-spread_m, spread_m), rng.uniform(-spread_m, spread_m)
        lat = 40.0 + math.degrees(dn / EARTH_RADIUS_M)
        lon = -74.0 + math.degrees(de / (EARTH_RADIUS_M * math.cos(math.radians(40.0))))
        out.append(pt(f"p{i:03d}", lat, lon, T0 + timedelta(days=rng.randrange(1000))))
    return out


@given(st.integers(0, 10_000), st.floats(0.5, 5.0))
@settings(max_examples=40, deadline=None)
def test_count_neighbors_matches_brute_force(seed, radius):
    pts = _cloud(seed, n=40)
    expected = {
        p.id: sum(1 for q in pts if q.id != p.id and brute_haversine(p.lat, p.lon, q.lat, q.lon) <= radius) for p in pts
    }
    got = count_neighbors(pts, radius)
    # points within a micrometre of the boundary may legitimately differ between formulas
    for p in pts:
        if got[p.id] != expected[p.id]:
            near = [q for q in pts if abs(brute_haversine(p.lat, p.lon, q.lat, q.lon) - radius) < 1e-6]
            assert near, (p.id, got[p.id], expected[p.id])


# NMS


def test_nms_worked_example():
    a = pt("A", 40.0, -74.0)
    b = pt("B", *north(40.0, -74.0, 1.0))
    c = pt("C", *north(40.0, -74.0, 100.0))
    locs = select_locations_nms([b, c, a], 1.8, seed=0, counts={"A": 30, "B": 25, "C": 12})
    assert [loc.id for loc in locs] == ["A", "C"]
    assert [loc.neighbor_count for loc in locs] == [30, 12]


def test_nms_single_point():
    locs = select_locations_nms([pt("x", 1, 1)], 3.6)
    assert [loc.id for loc in locs] == ["x"]


def test_nms_coincident_points_pick_highest_count_then_lowest_id():
    pts = [pt(i, 5.0, 5.0) for i in ("d", "b", "c", "a")]
    assert [loc.id for loc in select_locations_nms(pts, 1.8)] == ["a"]
    counts = {"a": 1, "b": 7, "c": 7, "d": 2}
    assert [loc.id for loc in select_locations_nms(pts, 1.8, counts=counts)] == ["b"]


@given(st.integers(0, 10_000), st.floats(0.5, 6.0))
@settings(max_examples=40, deadline=None)
def test_nms_separation_and_determinism(seed, radius):
    pts = _cloud(seed)
    first = select_locations_nms(pts, radius, seed=seed)
    shuffled = list(pts)
    random.Random(seed + 1).shuffle(shuffled)
    again = select_locations_nms(shuffled, radius, seed=seed)
    assert first == again
    for i, p in enumerate(first):
        for q in first[i + 1 :]:
            assert haversine_m(p.lat, p.lon, q.lat, q.lon) > radius
    counts = count_neighbors(pts, radius)
    ranks = [(-counts[loc.id], loc.id) for loc in first]
    assert ranks == sorted(ranks)


def test_nms_sample_size_is_seeded():
    pts = _cloud(1, n=80, spread_m=40)
    a = select_locations_nms(pts, 3.6, seed=5, sample_size=30)
    b = select_locations_nms(pts, 3.6, seed=5, sample_size=30)
    c = select_locations_nms(pts, 3.6, seed=6, sample_size=30)
    assert a == b and a != c


# sequences


def test_assemble_sorts_shuffled_timestamps():
    loc = Location("L", 40.0, -74.0, 0.0, 11)
    times = [T0 + timedelta(days=d) for d in range(12)]
    random.Random(0).shuffle(times)
    pts = [pt(f"p{i}", 40.0, -74.0, t) for i, t in enumerate(times)]
    seq = assemble_sequence(loc, pts, 1.8, 10)
    assert isinstance(seq, ImageSequence)
    assert [im.timestamp for im in seq.images] == sorted(times)


def test_assemble_rejects_short_sequences():
    loc = Location("L", 40.0, -74.0, 0.0, 8)
    pts = [pt(f"p{i}", 40.0, -74.0, T0 + timedelta(days=i)) for i in range(9)]
    out = assemble_sequence(loc, pts, 1.8, 10)
    assert isinstance(out, Rejection) and out.n_images == 9


def test_assemble_equal_timestamps_ordered_by_id():
    loc = Location("L", 40.0, -74.0, 0.0, 0)
    pts = [pt(i, 40.0, -74.0, T0) for i in ("z", "m", "a")]
    seq = assemble_sequence(loc, pts, 1.8, 3)
    assert [im.point_id for im in seq.images] == ["a", "m", "z"]


def test_assemble_excludes_points_outside_radius():
    loc = Location("L", 40.0, -74.0, 0.0, 0)
    inside = [pt(f"i{k}", *north(40.0, -74.0, 1.7), T0 + timedelta(days=k)) for k in range(3)]
    outside = [pt("o", *north(40.0, -74.0, 1.9))]
    seq = assemble_sequence(loc, inside + outside, 1.8, 3)
    assert {im.point_id for im in seq.images} == {"i0", "i1", "i2"}


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_build_sequences_matches_per_location_assembly(seed):
    pts = _cloud(seed, n=80, spread_m=6)
    locs = select_locations_nms(pts, 3.6, seed=seed, counts=count_neighbors(pts, 1.8))
    seqs, rejected = build_sequences(pts, locs, 1.8, 3)
    assert len(seqs) + len(rejected) == len(locs)
    by_loc = {s.location_id: s for s in seqs}
    for loc in locs:
        ref = assemble_sequence(loc, pts, 1.8, 3)
        if isinstance(ref, ImageSequence):
            assert by_loc[loc.id] == ref
            stamps = [im.timestamp for im in ref.images]
            assert stamps == sorted(stamps)
            assert all(haversine_m(loc.lat, loc.lon, im.lat, im.lon) <= 1.8 for im in ref.images)


def test_sequence_store_round_trip(tmp_path):
    loc = Location("L", 40.0, -74.0, 0.0, 0)
    seq = assemble_sequence(loc, [pt(f"p{i}", 40.0, -74.0, T0 + timedelta(hours=i), 12.5) for i in range(4)], 1.8, 2)
    other = ImageSequence("A", 1.0, 2.0, seq.images)
    write_sequences(tmp_path / "s.jsonl", [seq, other])
    got = read_sequences(tmp_path / "s.jsonl")
    assert [s.location_id for s in got] == ["A", "L"]
    assert got[1] == seq
