"""Stage 2: turn detected changes into verified trends.

Proposals come from abstracting every change into more general wordings,
embedding those texts and canopy-clustering them; a cluster large enough to
hold ``k`` members becomes a proposal named after its center text.

A proposal is then verified against the change pool: rank all changes by
embedding distance to the proposal text, ask the analyst about the ``k``
nearest only, and accept the proposal when at least ``N`` of them are
confirmed members. Only the embedding shortlist decides *which* changes are
asked about; only the analyst decides *whether* a change counts, so a
positive decision is always backed by ``N`` confirmed changes.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .change_detection import ChangeRecord, change_id
from .gateway import AnalystGateway, GatewayError
from .index import LOOSE, TIGHT, FlatIndex, canopy_cluster
from .jsonl import iter_jsonl, write_jsonl

log = logging.getLogger(__name__)

DEFAULT_N = 500
DEFAULT_K = 1500
POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class TrendProposal:
    proposal_id: str
    text: str
    source_change_ids: tuple[str, ...]
    member_count: int
    word_count: int

    @classmethod
    def from_text(cls, text: str, source_change_ids: Iterable[str] = (), member_count: int = 0) -> "TrendProposal":
        if not text.strip():
            raise ValueError("proposal text must be non-empty")
        pid = "T" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
        return cls(pid, text, tuple(sorted(set(source_change_ids))), member_count, len(text.split()))


@dataclass
class VerificationResult:
    proposal_id: str
    decision: str
    confirmed_change_ids: list[str]
    oracle_queries_used: int
    failed_queries: int = 0
    diagnostic: str = ""

    @property
    def positive(self) -> bool:
        return self.decision == POSITIVE


@dataclass(frozen=True)
class QueryCondition:
    time_window: tuple[datetime, datetime] | None = None
    subject: str | None = None
    pool_size: int | None = None

    def __post_init__(self):
        if self.time_window is not None and not self.time_window[0] < self.time_window[1]:
            raise ValueError("time window start must precede its end")
        if self.pool_size is not None and self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")


@dataclass
class ChangePool:
    """Change records plus a sealed index over their text embeddings."""

    records: dict[str, ChangeRecord]
    index: FlatIndex

    def __len__(self) -> int:
        return len(self.records)


def build_change_pool(changes: Sequence[ChangeRecord], gateway: AnalystGateway) -> ChangePool:
    changes = sorted(changes, key=lambda c: c.id)
    if not changes:
        return ChangePool({}, FlatIndex([], np.zeros((0, 0))))
    vectors = gateway.embed_texts([c.text for c in changes])
    return ChangePool({c.id: c for c in changes}, FlatIndex([c.id for c in changes], vectors))


# proposals


@dataclass
class ProposalRun:
    proposals: list[TrendProposal]
    n_items: int
    n_canopies: int
    dropped_small: int
    abstraction_failures: list[str] = field(default_factory=list)


def propose_trends(
    changes: Sequence[ChangeRecord],
    gateway: AnalystGateway,
    k: int,
    tight: float = TIGHT,
    loose: float = LOOSE,
    order_seed: int | None = 0,
) -> ProposalRun:
    """Abstract, embed and canopy-cluster changes; keep clusters with >= k members."""
    changes = sorted(changes, key=lambda c: c.id)

    def abstract(change):
        try:
            return gateway.derive_abstractions(change)
        except GatewayError:
            return None

    derived = gateway.map(abstract, changes)
    item_ids, texts, owner, failures = [], [], [], []
    for change, abstractions in zip(changes, derived):
        if abstractions is None:
            failures.append(change.id)
            continue
        for j, text in enumerate(abstractions):
            item_ids.append(f"{change.id}:{j}")
            texts.append(text)
            owner.append(change.id)
    if not texts:
        return ProposalRun([], 0, 0, 0, failures)

    vectors = gateway.embed_texts(texts)
    canopies = canopy_cluster(vectors, tight, loose, order_seed=order_seed, ids=item_ids)
    row = {item: i for i, item in enumerate(item_ids)}
    proposals, seen = [], set()
    dropped = 0
    for canopy in canopies:
        if len(canopy.member_item_ids) < k:
            dropped += 1
            continue
        text = texts[row[canopy.center_item_id]]
        if text in seen:
            continue
        seen.add(text)
        members = [owner[row[m]] for m in canopy.member_item_ids]
        proposals.append(TrendProposal.from_text(text, members, len(canopy.member_item_ids)))
    return ProposalRun(proposals, len(texts), len(canopies), dropped, failures)


# verification


def hybrid_verify(
    proposal_id: str,
    neighbors: Sequence[tuple[str, float]],
    is_member: Callable[[str], bool],
    k: int,
    N: int,
    early_exit: bool = True,
    fanout: Callable[[Callable, list], list] | None = None,
    batch_size: int = 1,
) -> VerificationResult:
    """Query ``is_member`` over the first ``k`` neighbors and decide against ``N``.

    ``is_member`` may raise :class:`GatewayError`; such neighbors count as
    failed, never as confirmed. With ``early_exit`` querying stops at the first
    batch boundary where ``N`` confirmations have been reached.
    """
    if not k >= N >= 1:
        raise ValueError(f"need k >= N >= 1, got k={k}, N={N}")
    shortlist = list(neighbors)[:k]
    confirmed: list[str] = []
    failed = used = 0

    def ask(item_id):
        try:
            return bool(is_member(item_id))
        except GatewayError:
            return None

    step = max(1, batch_size)
    for lo in range(0, len(shortlist), step):
        batch = [item for item, _ in shortlist[lo : lo + step]]
        answers = fanout(ask, batch) if fanout is not None and len(batch) > 1 else [ask(i) for i in batch]
        used += len(batch)
        for item, ans in zip(batch, answers):
            if ans is None:
                failed += 1
            elif ans:
                confirmed.append(item)
        if early_exit and len(confirmed) >= N:
            break

    diagnostic = ""
    if failed and failed > len(shortlist) - N:
        diagnostic = f"{failed} of {len(shortlist)} membership queries failed; cannot reach N={N}"
        log.warning("proposal %s: %s", proposal_id, diagnostic)
    decision = POSITIVE if len(confirmed) >= N else NEGATIVE
    return VerificationResult(proposal_id, decision, confirmed, used, failed, diagnostic)


def verify_trend(
    proposal: TrendProposal,
    pool: ChangePool,
    k: int = DEFAULT_K,
    N: int = DEFAULT_N,
    gateway: AnalystGateway | None = None,
    early_exit: bool = True,
) -> VerificationResult:
    if gateway is None:
        raise ValueError("verify_trend needs a gateway")
    if not k >= N >= 1:
        raise ValueError(f"need k >= N >= 1, got k={k}, N={N}")
    if len(pool) == 0:
        return VerificationResult(proposal.proposal_id, NEGATIVE, [], 0)
    neighbors = pool.index.knn(gateway.embed_text(proposal.text), k)
    return hybrid_verify(
        proposal.proposal_id,
        neighbors,
        lambda cid: gateway.verify_membership(pool.records[cid], proposal.text, strict=True),
        k,
        N,
        early_exit=early_exit,
        fanout=gateway.map,
        batch_size=gateway.max_in_flight,
    )


def verify_all(
    proposals: Sequence[TrendProposal],
    pool: ChangePool,
    k: int,
    N: int,
    gateway: AnalystGateway,
    early_exit: bool = True,
) -> list[VerificationResult]:
    return [verify_trend(p, pool, k, N, gateway, early_exit) for p in proposals]


def exhaustive_verify(item_ids: Iterable[str], is_member: Callable[[str], bool]) -> list[str]:
    """Ask about every item; the reference the hybrid decision is judged against."""
    return [i for i in item_ids if is_member(i)]


def query_budget(pool_size: int, k: int) -> dict:
    """Oracle calls per proposal for exhaustive vs hybrid verification."""
    hybrid = min(k, pool_size)
    return {
        "pool_size": pool_size,
        "k": k,
        "exhaustive_queries": pool_size,
        "hybrid_queries": hybrid,
        "reduction_factor": pool_size / hybrid if hybrid else float("inf"),
    }


# conditioning


def filter_time(changes: Iterable[ChangeRecord], window: tuple[datetime, datetime]) -> list[ChangeRecord]:
    """Keep changes whose before and after images both fall inside ``window``."""
    start, end = window
    if not start < end:
        raise ValueError("time window start must precede its end")
    return [c for c in changes if c.before_time >= start and c.after_time <= end]


def filter_subject(
    changes: Sequence[ChangeRecord],
    subject: str,
    pool_size: int | None,
    gateway: AnalystGateway,
) -> list[ChangeRecord]:
    """Shortlist the ``pool_size`` changes nearest to ``subject``, keep analyst-confirmed ones."""
    if not changes:
        return []
    size = len(changes) if pool_size is None else pool_size
    if size > len(changes):
        log.info("subject pool_size %d exceeds %d changes; using all", size, len(changes))
        size = len(changes)
    pool = build_change_pool(changes, gateway)
    shortlist = [cid for cid, _ in pool.index.knn(gateway.embed_text(subject), size)]
    keep = gateway.map(lambda cid: gateway.verify_membership(pool.records[cid], subject), shortlist)
    kept = {cid for cid, ok in zip(shortlist, keep) if ok}
    return [c for c in sorted(changes, key=lambda c: c.id) if c.id in kept]


def apply_condition(changes: Sequence[ChangeRecord], condition: QueryCondition, gateway: AnalystGateway) -> list[ChangeRecord]:
    """Time window first, then subject; the subject shortlist is order-sensitive."""
    out = list(changes)
    if condition.time_window is not None:
        out = filter_time(out, condition.time_window)
    if condition.subject:
        out = filter_subject(out, condition.subject, condition.pool_size, gateway)
    return out


# ranking

RANK_MODES = ("most_detailed", "period_delta", "stratified_by_word_count")


def window_member_count(proposal: TrendProposal, changes_by_id: Mapping[str, ChangeRecord], window) -> int:
    start, end = window
    return sum(
        1
        for cid in proposal.source_change_ids
        if (c := changes_by_id.get(cid)) is not None and c.before_time >= start and c.after_time <= end
    )


def rank_proposals(
    proposals: Sequence[TrendProposal],
    mode: str = "most_detailed",
    changes_by_id: Mapping[str, ChangeRecord] | None = None,
    pre_window=None,
    post_window=None,
    window_counts: Mapping[str, tuple[int, int]] | None = None,
    n_buckets: int = 2,
) -> list[TrendProposal]:
    """Order proposals for verification.

    ``most_detailed``: word count descending. ``period_delta``: members in
    ``post_window`` minus members in ``pre_window``, descending; counts come
    from ``window_counts`` (proposal_id -> (pre, post)) or are computed from
    ``changes_by_id``. ``stratified_by_word_count``: proposals split into
    ``n_buckets`` equal word-count bands, taken round-robin from the longest
    band. Ties always fall back to proposal_id.
    """
    if mode == "most_detailed":
        return sorted(proposals, key=lambda p: (-p.word_count, p.proposal_id))
    if mode == "period_delta":
        if window_counts is None:
            if changes_by_id is None or pre_window is None or post_window is None:
                raise ValueError("period_delta needs window_counts or changes plus both windows")
            window_counts = {
                p.proposal_id: (
                    window_member_count(p, changes_by_id, pre_window),
                    window_member_count(p, changes_by_id, post_window),
                )
                for p in proposals
            }
        delta = {pid: post - pre for pid, (pre, post) in window_counts.items()}
        return sorted(proposals, key=lambda p: (-delta[p.proposal_id], p.proposal_id))
    if mode == "stratified_by_word_count":
        if n_buckets < 1:
            raise ValueError("n_buckets must be >= 1")
        by_length = sorted(proposals, key=lambda p: (-p.word_count, p.proposal_id))
        bands = [list(b) for b in np.array_split(np.arange(len(by_length)), n_buckets) if len(b)]
        queues = [[by_length[i] for i in band] for band in bands]
        out = []
        while any(queues):
            for q in queues:
                if q:
                    out.append(q.pop(0))
        return out
    raise ValueError(f"unknown ranking mode {mode!r}; expected one of {RANK_MODES}")


# single-image queries


def unusual_query(images: Sequence, gateway: AnalystGateway) -> list[ChangeRecord]:
    """Run the single-image "unusual things" query and store findings as pseudo-changes.

    ``images`` are capture points (or image refs) with ``image_uri``,
    ``timestamp``, ``lat`` and ``lon``. Each finding becomes a record with an
    empty before description and ``after_index`` 0, so stage 2 runs on it
    unchanged.
    """

    def ask(im):
        try:
            return gateway.unusual_things(im.image_uri)
        except GatewayError:
            return []

    records = {}
    for im, findings in zip(images, gateway.map(ask, images)):
        key = getattr(im, "id", None) or getattr(im, "point_id")
        for finding in findings:
            rec = ChangeRecord(
                id=change_id(key, 0, "", finding),
                location_id=key,
                before_desc="",
                after_desc=finding,
                after_index=0,
                before_time=im.timestamp,
                after_time=im.timestamp,
                critic_passed=False,
                lat=im.lat,
                lon=im.lon,
                before_image="",
                after_image=im.image_uri,
            )
            records[rec.id] = rec
    return sorted(records.values(), key=lambda r: r.id)


# trend store


def write_trend_store(path, proposals: Sequence[TrendProposal], results: Sequence[VerificationResult]) -> int:
    by_id = {p.proposal_id: p for p in proposals}
    rows = []
    for r in sorted(results, key=lambda r: r.proposal_id):
        p = by_id[r.proposal_id]
        rows.append(
            {
                "proposal_id": r.proposal_id,
                "text": p.text,
                "word_count": p.word_count,
                "member_count": p.member_count,
                "decision": r.decision,
                "confirmed_change_ids": list(r.confirmed_change_ids),
                "oracle_queries_used": r.oracle_queries_used,
                "failed_queries": r.failed_queries,
                "diagnostic": r.diagnostic,
            }
        )
    return write_jsonl(path, rows)


def read_trend_store(path) -> list[tuple[TrendProposal, VerificationResult]]:
    out = []
    for d in iter_jsonl(path):
        p = TrendProposal(d["proposal_id"], d["text"], (), d["member_count"], d["word_count"])
        r = VerificationResult(
            d["proposal_id"], d["decision"], list(d["confirmed_change_ids"]),
            d["oracle_queries_used"], d.get("failed_queries", 0), d.get("diagnostic", ""),
        )
        out.append((p, r))
    return out


def write_proposals(path, proposals: Sequence[TrendProposal]) -> int:
    return write_jsonl(
        path,
        (
            {
                "proposal_id": p.proposal_id,
                "text": p.text,
                "source_change_ids": list(p.source_change_ids),
                "member_count": p.member_count,
                "word_count": p.word_count,
            }
            for p in proposals
        ),
    )


def read_proposals(path) -> list[TrendProposal]:
    return [
        TrendProposal(d["proposal_id"], d["text"], tuple(d["source_change_ids"]), d["member_count"], d["word_count"])
        for d in iter_jsonl(path)
    ]

