"""Metrics and benchmark harness.

Average precision for per-pair change detection and for trend membership,
accuracy of trend decisions against an exhaustive analyst pass, and the
ablations over the shortlist size ``k`` and the self-critic.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .change_detection import ChangeRecord, pairs_with_changes, run_stage1
from .corpus import ImageSequence
from .jsonl import iter_jsonl, write_jsonl
from .trends import exhaustive_verify, hybrid_verify

COMPARATORS = ("AllTrue", "EmbThreshold", "RandMLLM", "Hybrid")
N_GRID = 1000


# average precision


def average_precision(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mean precision at the rank of each positive.

    Items are ranked by score descending; equal scores keep their input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    if not labels.any():
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def subset_ap_spread(
    scores: Sequence[float],
    labels: Sequence[bool],
    n_subsets: int = 1000,
    fraction: float = 0.75,
    seed: int = 0,
) -> dict:
    """AP over random subsets drawn without replacement; reports mean and std.

    Subsets that happen to contain no positive are redrawn from the same stream.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        raise ValueError("average precision needs at least one positive label")
    size = max(1, int(round(fraction * len(scores))))
    rng = np.random.default_rng(seed)
    aps = []
    while len(aps) < n_subsets:
        idx = np.sort(rng.choice(len(scores), size=size, replace=False))
        if labels[idx].any():
            aps.append(average_precision(scores[idx], labels[idx]))
    aps = np.asarray(aps)
    return {
        "ap_full": average_precision(scores, labels),
        "ap_mean": float(aps.mean()),
        "ap_std": float(aps.std()),
        "n_subsets": n_subsets,
        "fraction": fraction,
        "seed": seed,
    }


# labels


@dataclass(frozen=True)
class LabeledPair:
    location_id: str
    pair_index: int  # 1-based: images pair_index and pair_index + 1
    has_change: bool


@dataclass(frozen=True)
class LabeledMembership:
    trend_id: str
    change_id: str
    belongs: bool


def write_labels(path, labels: Iterable[LabeledPair | LabeledMembership]) -> int:
    return write_jsonl(path, (asdict(x) for x in labels))


def read_pair_labels(path) -> list[LabeledPair]:
    return [LabeledPair(d["location_id"], int(d["pair_index"]), bool(d["has_change"])) for d in iter_jsonl(path)]


def read_membership_labels(path) -> list[LabeledMembership]:
    return [LabeledMembership(d["trend_id"], d["change_id"], bool(d["belongs"])) for d in iter_jsonl(path)]


def _unique(labels, key) -> dict:
    out = {}
    for lab in labels:
        k = key(lab)
        if k in out and out[k] != lab:
            raise ValueError(f"conflicting labels for {k}")
        out[k] = lab
    return out


# change detection


def eval_change_detection(
    detector: Callable[[str, str], float] | Iterable[ChangeRecord],
    sequences: Sequence[ImageSequence],
    labels: Iterable[LabeledPair],
) -> float:
    """AP over every consecutive image pair of ``sequences``.

    ``detector`` is either a pair scorer ``(uri_a, uri_b) -> distance`` or a
    change store; a store scores a pair 1 when any change lands on it, however
    many changes do.
    """
    by_pair = _unique(labels, lambda lab: (lab.location_id, lab.pair_index))
    pairs = [(s, i) for s in sorted(sequences, key=lambda s: s.location_id) for i in range(1, len(s.images))]
    missing = [(s.location_id, i) for s, i in pairs if (s.location_id, i) not in by_pair]
    if missing:
        shown = ", ".join(f"{loc}#{i}" for loc, i in missing[:20])
        more = f" and {len(missing) - 20} more" if len(missing) > 20 else ""
        raise ValueError(f"{len(missing)} unlabeled pair(s): {shown}{more}")

    if callable(detector):
        scores = [detector(s.images[i - 1].image_uri, s.images[i].image_uri) for s, i in pairs]
    else:
        hit = pairs_with_changes(detector)
        scores = [1.0 if (s.location_id, i) in hit else 0.0 for s, i in pairs]
    truth = [by_pair[s.location_id, i].has_change for s, i in pairs]
    return average_precision(scores, truth)


def city_pair_labels(city, sequences: Sequence[ImageSequence]) -> list[LabeledPair]:
    """Ground-truth pair labels of a synthetic city: real planted changes only."""
    real = {(pc.before_uri, pc.after_uri) for pc in city.real_changes + city.background}
    return [
        LabeledPair(s.location_id, i, (s.images[i - 1].image_uri, s.images[i].image_uri) in real)
        for s in sequences
        for i in range(1, len(s.images))
    ]


# trend membership


def eval_membership(
    classifier: Callable[[str, str], float] | Mapping[tuple[str, str], float],
    labels: Iterable[LabeledMembership],
) -> float:
    """AP of ``classifier(trend_id, change_id)`` scores over all labeled pairs."""
    labels = list(_unique(labels, lambda lab: (lab.trend_id, lab.change_id)).values())
    score = classifier if callable(classifier) else (lambda t, c: classifier[t, c])
    return average_precision([score(lab.trend_id, lab.change_id) for lab in labels], [lab.belongs for lab in labels])


def membership_benchmark(world, per_proposal: int = 40) -> tuple[list[LabeledMembership], dict[tuple[str, str], float]]:
    """Labeled (proposal, candidate) pairs and embedding similarity scores.

    Candidates are each proposal's ``per_proposal`` nearest changes, labeled
    with the world's true membership.
    """
    labels, scores = [], {}
    for p in world.proposals:
        for cid, d in p.index.knn(p.query, per_proposal):
            labels.append(LabeledMembership(p.proposal_id, cid, p.is_member(cid)))
            scores[p.proposal_id, cid] = 1.0 - d
    return labels, scores


# trend decisions


@dataclass
class AccuracyRow:
    comparator: str
    N: int
    k: int
    accuracy: float
    n_proposals: int
    oracle_queries: int = 0
    detail: str = ""


def threshold_grid_search(distance_lists: Sequence[np.ndarray], truth: Sequence[bool], N: int, n_grid: int = N_GRID):
    """Best global distance threshold ``t``: predict a trend when ``N`` changes lie within ``t``.

    The grid is ``n_grid`` points evenly spaced between the smallest and
    largest observed distance. Returns ``(best_t, best_accuracy, grid, accuracies)``;
    the first threshold reaching the maximum wins.
    """
    flat = np.concatenate([np.asarray(d, dtype=np.float64) for d in distance_lists])
    grid = np.linspace(flat.min(), flat.max(), n_grid)
    truth = np.asarray(truth, dtype=bool)
    counts = np.stack([np.searchsorted(np.sort(d), grid, side="right") for d in distance_lists])
    acc = ((counts >= N) == truth[:, None]).mean(axis=0)
    best = int(np.argmax(acc))
    return float(grid[best]), float(acc[best]), grid, acc


def eval_hybrid_accuracy(
    proposals: Sequence,
    N_values: Iterable[int],
    k: int | None = None,
    k_multiple: int = 3,
    seed: int = 0,
) -> list[AccuracyRow]:
    """Accuracy of each comparator against the exhaustive analyst decision.

    Each proposal must expose ``proposal_id``, ``query``, ``index`` (its change
    pool) and ``is_member``. Ground truth asks the analyst about every change
    in the pool. ``k`` defaults to ``k_multiple * N``.
    """
    proposals = list(proposals)
    truth_counts = [len(exhaustive_verify(p.index.ids, p.is_member)) for p in proposals]
    distances = [p.index.distances(p.query) for p in proposals]
    rows = []
    for N in N_values:
        kk = k if k is not None else k_multiple * N
        truth = [c >= N for c in truth_counts]
        n = len(proposals)

        def acc(pred):
            return sum(a == b for a, b in zip(pred, truth)) / n

        rows.append(AccuracyRow("AllTrue", N, kk, acc([True] * n), n))

        t, best, _, _ = threshold_grid_search(distances, truth, N)
        rows.append(AccuracyRow("EmbThreshold", N, kk, best, n, detail=f"threshold={t:.6f}"))

        rand_pred, rand_q = [], 0
        for j, p in enumerate(proposals):
            rng = np.random.default_rng([seed, N, kk, j])
            picks = rng.choice(len(p.index), size=min(kk, len(p.index)), replace=False)
            rand_q += len(picks)
            rand_pred.append(sum(p.is_member(p.index.ids[i]) for i in picks) >= N)
        rows.append(AccuracyRow("RandMLLM", N, kk, acc(rand_pred), n, rand_q))

        hyb_pred, hyb_q = [], 0
        for p in proposals:
            r = hybrid_verify(p.proposal_id, p.index.knn(p.query, kk), p.is_member, kk, N, early_exit=False)
            hyb_q += r.oracle_queries_used
            hyb_pred.append(r.positive)
        rows.append(AccuracyRow("Hybrid", N, kk, acc(hyb_pred), n, hyb_q))
    return rows


def ablate_k(proposals: Sequence, N: int, k_multiples: Iterable[int] = (2, 3, 4, 5)) -> dict[int, float]:
    """Hybrid accuracy at ``k = m * N`` for each multiple ``m``."""
    out = {}
    for m in k_multiples:
        rows = eval_hybrid_accuracy(proposals, [N], k_multiple=m)
        out[m] = next(r.accuracy for r in rows if r.comparator == "Hybrid")
    return out


@dataclass
class CriticAblation:
    critic: bool
    records: int
    true_positives: int
    real_total: int

    @property
    def precision(self) -> float:
        return self.true_positives / self.records if self.records else 0.0

    @property
    def recall(self) -> float:
        return self.true_positives / self.real_total if self.real_total else 0.0


def score_stage1(city, changes: Iterable[ChangeRecord], critic: bool) -> CriticAblation:
    """Precision and recall of detected changes against a city's real planted changes."""
    real = {(pc.before, pc.after) for pc in city.real_changes + city.background}
    changes = list(changes)
    tp = sum((c.before_desc, c.after_desc) in real for c in changes)
    return CriticAblation(critic, len(changes), tp, len(real))


def ablate_critic(city, sequences: Sequence[ImageSequence], gateway) -> dict[bool, CriticAblation]:
    out = {}
    for critic in (False, True):
        changes, _ = run_stage1(sequences, gateway, critic_enabled=critic)
        out[critic] = score_stage1(city, changes, critic)
    return out


# reports


def aggregate_rows(rows: Iterable[AccuracyRow]) -> list[AccuracyRow]:
    """Pool rows of several worlds: accuracy weighted by proposal count."""
    groups: dict[tuple[str, int, int], list[AccuracyRow]] = defaultdict(list)
    for r in rows:
        groups[r.comparator, r.N, r.k].append(r)
    out = []
    for (comp, N, k), rs in groups.items():
        n = sum(r.n_proposals for r in rs)
        acc = sum(r.accuracy * r.n_proposals for r in rs) / n
        out.append(AccuracyRow(comp, N, k, acc, n, sum(r.oracle_queries for r in rs)))
    order = {c: i for i, c in enumerate(COMPARATORS)}
    return sorted(out, key=lambda r: (r.N, r.k, order.get(r.comparator, len(order)), r.comparator))


def render_table(rows: Sequence[AccuracyRow]) -> str:
    lines = [f"{'comparator':<14}{'N':>6}{'k':>7}{'accuracy':>10}{'proposals':>11}{'queries':>10}"]
    for r in rows:
        lines.append(f"{r.comparator:<14}{r.N:>6}{r.k:>7}{r.accuracy:>10.4f}{r.n_proposals:>11}{r.oracle_queries:>10}")
    return "\n".join(lines) + "\n"


def write_report(path, rows: Sequence[AccuracyRow], extra: Mapping | None = None) -> None:
    """Machine-readable JSON report plus a ``.txt`` rendering next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"rows": [asdict(r) for r in rows], **(dict(extra) if extra else {})}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    text = render_table(rows) if rows else ""
    for key in sorted(extra or {}):
        text += f"\n{key}:\n" + json.dumps(extra[key], indent=1, sort_keys=True) + "\n"
    path.with_suffix(".txt").write_text(text, encoding="utf-8")
