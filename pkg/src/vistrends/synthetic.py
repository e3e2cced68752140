"""Synthetic ground-truth worlds.

``build_city`` lays out a grid of street locations, each photographed 10-14
times, and plants recurring change motifs ("trends"), sub-threshold
distractor motifs, one-off background changes and optional hallucinations.
Everything the analyst could be asked is scripted into a
:class:`SyntheticOracle`, so the full pipeline has exact ground truth.

``make_verification_world`` builds labelled proposal/change pools directly
in embedding space for the verification benchmarks, with controlled
distance distributions (monotone, informative or noisy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .corpus import CapturePoint
from .gateway.oracle import PlantedChange, SyntheticOracle, change_text
from .index import FlatIndex

SUBJECTS = [
    "storefront", "corner deli", "parking lot", "apartment building", "bus shelter", "laundromat",
    "bank branch", "restaurant", "pharmacy", "church", "gas station", "office tower", "hardware store",
    "school entrance", "rowhouse", "bike rack", "overpass support", "bodega",
]

# (before state, after state, specific change, general change)
EVENTS = [
    ("had no camera above the door", "has a security camera mounted above the door",
     "had a security camera installed", "gained a surveillance device"),
    ("had an empty sidewalk frontage", "has tables and chairs set out on the sidewalk",
     "added outdoor tables and chairs", "expanded seating outdoors"),
    ("had a bare facade", "is covered by scaffolding", "was wrapped in scaffolding", "came under construction"),
    ("had a green awning", "has a red awning", "replaced its awning with a red one", "changed its awning"),
    ("had no fence", "is enclosed by a chain-link fence", "was fenced off with chain-link", "got a new enclosure"),
    ("had plain curb ramps", "has red tactile warning pads on the curb ramps",
     "received red tactile warning pads", "had its curb ramps upgraded"),
    ("showed a store name on the sign", "shows a for-lease banner", "put up a for-lease banner", "became vacant"),
    ("had a wooden door", "has a glass door", "swapped its wooden door for a glass one", "got a new door"),
    ("had no solar panels", "has solar panels on the roof", "installed rooftop solar panels", "added renewable power"),
    ("had no mural", "has a colorful mural painted on the wall", "gained a painted mural", "was decorated with art"),
    ("had pale green paint", "has bright blue paint", "was repainted bright blue", "was repainted"),
    ("had no bike lane marking", "has a painted bike lane in front", "got a painted bike lane", "had street markings added"),
    ("had no EV charger", "has an electric vehicle charger", "installed an EV charger", "added charging equipment"),
    ("had an open storefront grille", "has a graffiti-covered rolled-down grille",
     "closed behind a graffiti grille", "shut down"),
    ("had no planters", "has large planters along the front", "placed planters out front", "added greenery"),
    ("had no outdoor dining shed", "has a wooden outdoor dining shed", "built an outdoor dining shed",
     "built a street structure"),
]

STREETS = ["Elm St", "Oak Ave", "Market St", "Pine St", "Canal St", "Union Ave", "Mission St", "Park Row"]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass
class Motif:
    id: str
    kind: str  # "trend" | "distractor" | "unusual"
    subject: str
    event: tuple[str, str, str, str]
    topic: np.ndarray
    shared_texts: list[str]
    change_keys: list[tuple[str, str]] = field(default_factory=list)
    locations: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class SyntheticCity:
    points: list[CapturePoint]
    oracle: SyntheticOracle
    motifs: list[Motif]
    real_changes: list[PlantedChange]
    hallucinations: list[PlantedChange]
    background: list[PlantedChange]
    location_centers: dict[str, tuple[float, float]]

    @property
    def trends(self) -> list[Motif]:
        return [m for m in self.motifs if m.kind == "trend"]

    @property
    def distractors(self) -> list[Motif]:
        return [m for m in self.motifs if m.kind == "distractor"]

    def motif_of_text(self, text: str) -> str | None:
        return self.oracle.text_motif.get(text)


def _offset(lat: float, lon: float, north_m: float, east_m: float) -> tuple[float, float]:
    dlat = north_m / 111_320.0
    dlon = east_m / (111_320.0 * math.cos(math.radians(lat)))
    return lat + dlat, lon + dlon


def build_city(
    seed: int = 0,
    n_trends: int = 5,
    trend_instances: tuple[int, int] = (30, 40),
    n_distractors: int = 50,
    distractor_instances: tuple[int, int] = (2, 24),
    n_background: int = 60,
    hallucination_rate: float = 0.0,
    critic_miss_rate: float = 0.0,
    critic_leak_rate: float = 0.0,
    images_per_location: tuple[int, int] = (10, 14),
    changes_per_location: int = 3,
    n_sparse_locations: int = 0,
    unusual: dict[str, int] | None = None,
    spacing_m: float = 25.0,
    dim: int = 64,
    origin: tuple[float, float] = (40.7500, -73.9900),
    years: tuple[int, int] = (2011, 2023),
) -> SyntheticCity:
    """Generate a synthetic city and the oracle that knows everything about it.

    ``hallucination_rate`` is the fraction of *detected* changes that are
    hallucinations. The critic rejects hallucinations and accepts real changes,
    except for a ``critic_leak_rate`` share of hallucinations it wrongly keeps
    and a ``critic_miss_rate`` share of real changes it wrongly rejects.
    ``unusual`` maps a finding motif (e.g. "a large, abstract sculpture") to
    the number of single images that show it.
    """
    rng = np.random.default_rng(seed)
    oracle = SyntheticOracle(dim=dim, seed=seed)
    n_motifs = n_trends + n_distractors + len(unusual or {})
    combos = [(s, e) for s in range(len(SUBJECTS)) for e in range(len(EVENTS))]
    if n_motifs > len(combos):
        raise ValueError(f"at most {len(combos)} motifs supported")
    picks = rng.permutation(len(combos))[:n_motifs]

    motifs: list[Motif] = []
    for j, pick in enumerate(picks[: n_trends + n_distractors]):
        s, e = combos[pick]
        kind = "trend" if j < n_trends else "distractor"
        motifs.append(_make_motif(f"M{j:03d}", kind, SUBJECTS[s], EVENTS[e], rng, oracle))

    # one planned change per (motif instance); background changes have no motif
    plans: list[tuple[Motif | None, bool]] = []
    for m in motifs:
        lo, hi = trend_instances if m.kind == "trend" else distractor_instances
        plans += [(m, False)] * int(rng.integers(lo, hi + 1))
    plans += [(None, False)] * n_background
    n_real = len(plans)
    if hallucination_rate > 0:
        n_hall = int(round(hallucination_rate / (1 - hallucination_rate) * n_real))
        plans += [(None, True)] * n_hall
    order = rng.permutation(len(plans))
    plans = [plans[i] for i in order]

    points: list[CapturePoint] = []
    centers: dict[str, tuple[float, float]] = {}
    real, halluc, background = [], [], []
    t0 = datetime(years[0], 1, 1, tzinfo=timezone.utc)
    span_s = (datetime(years[1], 12, 31, tzinfo=timezone.utc) - t0).total_seconds()
    grid_w = max(1, int(math.ceil(math.sqrt(len(plans) / changes_per_location + n_sparse_locations + 1))))

    def new_location(idx: int, n_img: int):
        lat, lon = _offset(origin[0], origin[1], (idx // grid_w) * spacing_m, (idx % grid_w) * spacing_m)
        loc_id = f"L{idx:05d}"
        secs = np.sort(rng.choice(int(span_s // 86400), size=n_img, replace=False)) * 86400 + 15 * 3600
        heading = float(rng.uniform(0, 360))
        uris = []
        for j in range(n_img):
            r, th = 0.4 * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
            plat, plon = _offset(lat, lon, r * math.sin(th), r * math.cos(th))
            if j == 0:
                plat, plon = lat, lon
            uri = f"synth://city/{loc_id}/{j:02d}.jpg"
            points.append(CapturePoint(f"{loc_id}-{j:02d}", plat, plon, t0 + timedelta(seconds=int(secs[j])), uri, heading))
            uris.append(uri)
        centers[loc_id] = (lat, lon)
        return loc_id, lat, lon, uris

    loc_idx = 0
    cursor = 0
    while cursor < len(plans):
        n_img = int(rng.integers(images_per_location[0], images_per_location[1] + 1))
        loc_id, lat, lon, uris = new_location(loc_idx, n_img)
        loc_idx += 1
        take = plans[cursor : cursor + changes_per_location]
        cursor += len(take)
        slots = rng.choice(n_img - 1, size=len(take), replace=False)
        for (motif, is_hall), slot in zip(take, slots):
            addr = f"{int(rng.integers(1, 999))} {STREETS[int(rng.integers(len(STREETS)))]} ({loc_id})"
            pc = _plant(oracle, motif, is_hall, addr, uris[slot], uris[slot + 1], rng)
            if is_hall:
                pc.critic_keep = bool(rng.uniform() < critic_leak_rate)
                halluc.append(pc)
            else:
                pc.critic_keep = not bool(rng.uniform() < critic_miss_rate)
                (real if motif is not None else background).append(pc)
                if motif is not None:
                    motif.change_keys.append((pc.before, pc.after))
                    motif.locations.append((lat, lon))
            oracle.plant_change(pc)
    for _ in range(n_sparse_locations):
        new_location(loc_idx, int(rng.integers(3, 10)))
        loc_idx += 1

    for k, (finding, count) in enumerate(sorted((unusual or {}).items())):
        m = _make_unusual_motif(f"U{k:03d}", finding, rng, oracle)
        motifs.append(m)
        for pi in rng.choice(len(points), size=min(count, len(points)), replace=False):
            p = points[int(pi)]
            text = f"{finding[0].upper()}{finding[1:]} stands near image {p.id}"
            oracle.unusual.setdefault(p.image_uri, []).append(text)
            oracle.change_motif["", text] = m.id
            oracle.set_vector(text, m.topic + 0.9 * _unit(rng.standard_normal(dim)))
            places = [f"Near image {p.id}", "On the street", "Somewhere"]
            kinds = [f"{finding} stands ({p.id})", finding + " is present", "an unusual object is present"]
            grid = [[f"{pl}, {kd}." for kd in kinds] for pl in places]
            grid[0][0] = text
            for (i, j), shared in zip([(1, 1), (1, 2), (2, 1), (2, 2)], m.shared_texts):
                grid[i][j] = shared
            oracle.set_abstractions("", text, places, kinds, grid)
            m.change_keys.append(("", text))
            m.locations.append((p.lat, p.lon))

    return SyntheticCity(sorted(points, key=lambda p: p.id), oracle, motifs, real, halluc, background, centers)


def _shared_vectors(oracle: SyntheticOracle, texts: list[str], topic: np.ndarray, rng) -> None:
    for t in texts:
        oracle.set_vector(t, topic + 0.15 * _unit(rng.standard_normal(len(topic))))


def _make_motif(mid: str, kind: str, subject: str, event, rng, oracle: SyntheticOracle) -> Motif:
    _, _, specific, general = event
    topic = _unit(rng.standard_normal(oracle.dim))
    shared = [
        f"The {subject} {specific}.",
        f"The {subject} {general}.",
        f"A {subject} {specific}.",
        f"A {subject} {general}.",
    ]
    _shared_vectors(oracle, shared, topic, rng)
    for t in shared:
        oracle.assign_motif(t, mid)
    return Motif(mid, kind, subject, event, topic, shared)


def _make_unusual_motif(mid: str, finding: str, rng, oracle: SyntheticOracle) -> Motif:
    topic = _unit(rng.standard_normal(oracle.dim))
    shared = [
        f"On the street, {finding} is present.",
        f"On the street, an unusual object is present ({finding}).",
        f"Somewhere, {finding} is present.",
        f"Somewhere, an unusual object is present ({finding}).",
    ]
    _shared_vectors(oracle, shared, topic, rng)
    for t in shared:
        oracle.assign_motif(t, mid)
    return Motif(mid, "unusual", finding, ("", finding, finding, finding), topic, shared)


def _plant(oracle: SyntheticOracle, motif: Motif | None, hallucination: bool, addr: str, uri_a: str, uri_b: str, rng) -> PlantedChange:
    if motif is None:
        subject = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
        tag = "ghost" if hallucination else "one-off"
        before = f"The {subject} at {addr} showed a {tag} detail {int(rng.integers(1_000_000))}"
        after = f"The {subject} at {addr} shows a different {tag} detail"
        return PlantedChange(uri_a, uri_b, before, after, None, hallucination)
    before_state, after_state, specific, general = motif.event
    before = f"The {motif.subject} at {addr} {before_state}."
    after = f"The {motif.subject} at {addr} {after_state}."
    pc = PlantedChange(uri_a, uri_b, before, after, motif.id, hallucination)
    oracle.set_vector(change_text(before, after), motif.topic + 0.9 * _unit(rng.standard_normal(oracle.dim)))
    places = [f"The {motif.subject} at {addr}", f"The {motif.subject}", f"A {motif.subject}"]
    kinds = [f"{specific} beside the entrance of {addr}", specific, general]
    grid = [[f"{pl} {kd}." for kd in kinds] for pl in places]
    grid[0][0] = change_text(before, after)
    oracle.set_abstractions(before, after, places, kinds, grid)
    return pc


# labelled verification worlds


@dataclass
class WorldProposal:
    proposal_id: str
    query: np.ndarray
    index: FlatIndex
    positives: frozenset[str]

    def is_member(self, item_id: str) -> bool:
        return item_id in self.positives


@dataclass
class VerificationWorld:
    seed: int
    mode: str
    N: int
    proposals: list[WorldProposal]


WORLD_MODES = ("monotone", "informative", "noisy")


def _vectors_at(distances: np.ndarray, dim: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors whose cosine distance to ``e0`` equals ``distances``."""
    q = np.zeros(dim)
    q[0] = 1.0
    cos = 1.0 - np.clip(distances, 0.0, 2.0)
    w = rng.standard_normal((len(distances), dim - 1))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    vecs = np.empty((len(distances), dim))
    vecs[:, 0] = cos
    vecs[:, 1:] = w * np.sqrt(np.clip(1.0 - cos**2, 0.0, None))[:, None]
    return q, vecs


def make_verification_world(
    seed: int,
    N: int = 50,
    n_proposals: int = 20,
    mode: str = "informative",
    pool_size: tuple[int, int] = (1000, 5000),
    dim: int = 16,
) -> VerificationWorld:
    """Proposals with their own labelled change pools.

    Each proposal has between N/2 and 3N/2 true members, so roughly half of
    them are real trends at threshold N. Distances to the proposal:

    - ``monotone``: every member is strictly nearer than every non-member.
    - ``informative``: members nearer on average, but each proposal has its
      own random distance offset, so no single global threshold separates them.
    - ``noisy``: like informative with heavier overlap between the two groups.
    """
    if mode not in WORLD_MODES:
        raise ValueError(f"unknown world mode {mode!r}")
    rng = np.random.default_rng([seed, N, WORLD_MODES.index(mode)])
    proposals = []
    for j in range(n_proposals):
        m = int(rng.integers(max(pool_size[0], 3 * N), max(pool_size[1], 6 * N) + 1))
        n_pos = min(m, int(rng.integers(N // 2, (3 * N) // 2 + 1)))
        if mode == "monotone":
            pos = rng.uniform(0.05, 0.35, n_pos)
            neg = rng.uniform(0.40, 1.20, m - n_pos)
        else:
            offset = rng.uniform(0.0, 0.30)
            pos_mu, pos_sd, neg_mu, neg_sd = (0.15, 0.05, 0.50, 0.08) if mode == "informative" else (0.20, 0.08, 0.45, 0.10)
            pos = offset + rng.normal(pos_mu, pos_sd, n_pos)
            neg = offset + rng.normal(neg_mu, neg_sd, m - n_pos)
        d = np.concatenate([pos, neg])
        q, vecs = _vectors_at(d, dim, rng)
        ids = [f"c{i:05d}" for i in rng.permutation(m)]
        positives = frozenset(ids[:n_pos])
        proposals.append(WorldProposal(f"P{j:03d}", q, FlatIndex(ids, vecs), positives))
    return VerificationWorld(seed, mode, N, proposals)
