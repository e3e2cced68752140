"""Capture-point ingestion, location sampling and per-location image sequences.

Capture points come from a newline-delimited manifest. Locations are picked
greedily by neighbor count with non-maximum suppression so that nearby
viewpoints are not analysed twice, and every surviving location collects the
images captured within the grouping radius into a chronological sequence.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .jsonl import iter_jsonl, write_jsonl

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
GROUPING_RADIUS_M = 1.8
MIN_IMAGES = 10


def parse_time(value: str) -> datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime."""
    if not isinstance(value, str):
        raise ValueError(f"timestamp must be a string, got {type(value).__name__}")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp {value!r} has no UTC offset")
    return ts.astimezone(timezone.utc)


def format_time(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ").replace(".000000Z", "Z")


@dataclass(frozen=True)
class CapturePoint:
    id: str
    lat: float
    lon: float
    timestamp: datetime
    image_uri: str
    heading: float = 0.0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "lat": self.lat,
            "lon": self.lon,
            "timestamp": format_time(self.timestamp),
            "image_uri": self.image_uri,
            "heading": self.heading,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CapturePoint":
        pid = d["id"]
        uri = d["image_uri"]
        if not isinstance(pid, str) or not pid:
            raise ValueError("id must be a non-empty string")
        if not isinstance(uri, str) or not uri:
            raise ValueError("image_uri must be a non-empty string")
        lat, lon = float(d["lat"]), float(d["lon"])
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"lat {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"lon {lon} outside [-180, 180]")
        heading = float(d.get("heading", 0.0)) % 360.0
        if not math.isfinite(heading):
            raise ValueError("heading must be finite")
        return cls(pid, lat, lon, parse_time(d["timestamp"]), uri, heading)


@dataclass(frozen=True)
class Location:
    id: str
    lat: float
    lon: float
    heading: float
    neighbor_count: int


@dataclass(frozen=True)
class ImageRef:
    point_id: str
    image_uri: str
    timestamp: datetime
    lat: float
    lon: float
    heading: float


@dataclass
class ImageSequence:
    location_id: str
    lat: float
    lon: float
    images: list[ImageRef]

    def __len__(self) -> int:
        return len(self.images)

    def to_dict(self) -> dict:
        return {
            "location_id": self.location_id,
            "lat": self.lat,
            "lon": self.lon,
            "images": [
                {
                    "point_id": im.point_id,
                    "image_uri": im.image_uri,
                    "timestamp": format_time(im.timestamp),
                    "pose": {"lat": im.lat, "lon": im.lon, "heading": im.heading},
                }
                for im in self.images
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageSequence":
        images = [
            ImageRef(
                im["point_id"],
                im["image_uri"],
                parse_time(im["timestamp"]),
                im["pose"]["lat"],
                im["pose"]["lon"],
                im["pose"]["heading"],
            )
            for im in d["images"]
        ]
        return cls(d["location_id"], d["lat"], d["lon"], images)


@dataclass(frozen=True)
class Rejection:
    location_id: str
    reason: str
    n_images: int


@dataclass
class IngestResult:
    points: list[CapturePoint] = field(default_factory=list)
    rejected: int = 0
    diagnostics: list[str] = field(default_factory=list)


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters. Works elementwise on numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def ingest_manifest(path: str | Path) -> IngestResult:
    """Load capture points from a manifest, skipping malformed lines.

    An unreadable file raises ``OSError``; bad lines are counted in
    ``rejected`` with one diagnostic each.
    """
    result = IngestResult()
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                point = CapturePoint.from_dict(json.loads(line))
                if point.id in seen:
                    raise ValueError(f"duplicate id {point.id!r}")
            except (ValueError, KeyError, TypeError) as exc:
                result.rejected += 1
                result.diagnostics.append(f"line {lineno}: {exc}")
                continue
            seen.add(point.id)
            result.points.append(point)
    if result.rejected:
        log.warning("%s: rejected %d malformed line(s)", path, result.rejected)
    return result


def _unit_xyz(lat, lon) -> np.ndarray:
    phi, lmb = np.radians(lat), np.radians(lon)
    return np.column_stack([np.cos(phi) * np.cos(lmb), np.cos(phi) * np.sin(lmb), np.sin(phi)]) * EARTH_RADIUS_M


class _SpatialIndex:
    """KD-tree on Earth-centred coordinates; candidates are re-checked with haversine."""

    def __init__(self, lats: np.ndarray, lons: np.ndarray):
        self.lats = np.asarray(lats, dtype=float)
        self.lons = np.asarray(lons, dtype=float)
        self.tree = cKDTree(_unit_xyz(self.lats, self.lons)) if len(self.lats) else None

    def within(self, lat: float, lon: float, radius_m: float) -> np.ndarray:
        if self.tree is None:
            return np.empty(0, dtype=int)
        # chord <= arc, so the chord ball is a superset of the great-circle ball
        cand = np.asarray(self.tree.query_ball_point(_unit_xyz([lat], [lon])[0], radius_m * 1.001 + 1e-6), dtype=int)
        if cand.size == 0:
            return cand
        d = haversine_m(lat, lon, self.lats[cand], self.lons[cand])
        return np.sort(cand[d <= radius_m])


def count_neighbors(points: Sequence[CapturePoint], radius_m: float = GROUPING_RADIUS_M) -> dict[str, int]:
    """Number of other capture points within ``radius_m`` of each point."""
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    idx = _SpatialIndex([p.lat for p in points], [p.lon for p in points])
    return {p.id: len(idx.within(p.lat, p.lon, radius_m)) - 1 for p in points}


def select_locations_nms(
    points: Sequence[CapturePoint],
    radius_m: float,
    seed: int = 0,
    counts: dict[str, int] | None = None,
    sample_size: int | None = None,
) -> list[Location]:
    """Greedy non-maximum suppression over capture points ranked by neighbor count.

    ``counts`` should come from :func:`count_neighbors` at the grouping radius;
    when omitted it is computed at ``radius_m``. ``sample_size`` optionally
    draws a seeded random subset of candidate seeds before ranking.
    """
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    if counts is None:
        counts = count_neighbors(points, radius_m)
    candidates = sorted(points, key=lambda p: p.id)
    if sample_size is not None and sample_size < len(candidates):
        candidates = sorted(random.Random(seed).sample(candidates, sample_size), key=lambda p: p.id)
    ranked = sorted(candidates, key=lambda p: (-counts[p.id], p.id))

    selected: list[Location] = []
    tree_pts = _SpatialIndex([p.lat for p in ranked], [p.lon for p in ranked])
    suppressed = np.zeros(len(ranked), dtype=bool)
    for i, p in enumerate(ranked):
        if suppressed[i]:
            continue
        selected.append(Location(p.id, p.lat, p.lon, p.heading, counts[p.id]))
        suppressed[tree_pts.within(p.lat, p.lon, radius_m)] = True
    return selected


def assemble_sequence(
    location: Location,
    points: Sequence[CapturePoint],
    radius_m: float = GROUPING_RADIUS_M,
    min_images: int = MIN_IMAGES,
) -> ImageSequence | Rejection:
    members = [p for p in points if haversine_m(location.lat, location.lon, p.lat, p.lon) <= radius_m]
    return _make_sequence(location, members, min_images)


def _make_sequence(location: Location, members: Iterable[CapturePoint], min_images: int) -> ImageSequence | Rejection:
    members = sorted(members, key=lambda p: (p.timestamp, p.id))
    if len(members) < min_images:
        return Rejection(location.id, f"only {len(members)} image(s), need {min_images}", len(members))
    images = [ImageRef(p.id, p.image_uri, p.timestamp, p.lat, p.lon, p.heading) for p in members]
    return ImageSequence(location.id, location.lat, location.lon, images)


def build_sequences(
    points: Sequence[CapturePoint],
    locations: Sequence[Location],
    radius_m: float = GROUPING_RADIUS_M,
    min_images: int = MIN_IMAGES,
) -> tuple[list[ImageSequence], list[Rejection]]:
    """Spatially indexed equivalent of calling :func:`assemble_sequence` per location."""
    idx = _SpatialIndex([p.lat for p in points], [p.lon for p in points])
    sequences, rejections = [], []
    for loc in locations:
        out = _make_sequence(loc, (points[i] for i in idx.within(loc.lat, loc.lon, radius_m)), min_images)
        (sequences if isinstance(out, ImageSequence) else rejections).append(out)
    return sequences, rejections


def write_sequences(path: str | Path, sequences: Iterable[ImageSequence]) -> int:
    return write_jsonl(path, (s.to_dict() for s in sorted(sequences, key=lambda s: s.location_id)))


def read_sequences(path: str | Path) -> list[ImageSequence]:
    return [ImageSequence.from_dict(d) for d in iter_jsonl(path)]


def write_manifest(path: str | Path, points: Iterable[CapturePoint]) -> int:
    return write_jsonl(path, (p.to_dict() for p in points))
