import json

import numpy as np
import pytest
from conftest import make_gateway
from hypothesis import given, settings
from hypothesis import strategies as st

from vistrends.change_detection import run_stage1
from vistrends.corpus import build_sequences, count_neighbors, select_locations_nms
from vistrends.evaluation import (
    AccuracyRow,
    LabeledMembership,
    LabeledPair,
    ablate_critic,
    ablate_k,
    aggregate_rows,
    average_precision,
    city_pair_labels,
    eval_change_detection,
    eval_hybrid_accuracy,
    eval_membership,
    membership_benchmark,
    read_membership_labels,
    read_pair_labels,
    render_table,
    subset_ap_spread,
    threshold_grid_search,
    write_labels,
    write_report,
)
from vistrends.gateway import AnalystGateway
from vistrends.synthetic import build_city, make_verification_world


def brute_ap(scores, labels):
    """Precision at every positive's rank, ranks by (score desc, index asc)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / hits


# average precision


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-12)
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.3], [1]) == 1.0
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [1])


@given(st.integers(0, 2**31), st.integers(1, 20))
@settings(max_examples=300, deadline=None)
def test_ap_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, n).astype(float) if seed % 2 else rng.random(n)
    labels = rng.random(n) < 0.5
    labels[rng.integers(n)] = True
    ap = average_precision(scores, labels)
    assert abs(ap - brute_ap(list(scores), list(labels))) <= 1e-12
    assert 0.0 <= ap <= 1.0


def test_ap_ties_follow_input_order():
    # with every score equal the ranking is the input order
    assert average_precision([0.5] * 4, [0, 0, 0, 1]) == pytest.approx(0.25)
    assert average_precision([0.5] * 4, [1, 0, 0, 0]) == 1.0
    labels = [0, 1, 0, 1, 1, 0]
    assert average_precision([0.0] * 6, labels) == pytest.approx(brute_ap([0.0] * 6, labels))


def test_ap_permutation_invariant_without_ties():
    rng = np.random.default_rng(1)
    s, y = rng.random(30), rng.random(30) < 0.4
    perm = rng.permutation(30)
    assert average_precision(s, y) == pytest.approx(average_precision(s[perm], y[perm]), abs=1e-15)


def test_random_scorer_ap_near_positive_rate():
    rng = np.random.default_rng(7)
    labels = np.array([True, False] * 100)
    aps = [average_precision(rng.random(200), labels) for _ in range(1000)]
    assert abs(np.mean(aps) - 0.5) <= 0.05


def test_subset_spread_is_deterministic():
    rng = np.random.default_rng(2)
    s, y = rng.random(100), rng.random(100) < 0.3
    a = subset_ap_spread(s, y, n_subsets=200, seed=3)
    assert a == subset_ap_spread(s, y, n_subsets=200, seed=3)
    assert a["ap_std"] > 0 and a["n_subsets"] == 200
    assert a["ap_full"] == average_precision(s, y)


# labels and detection AP


def test_label_files_round_trip(tmp_path):
    pairs = [LabeledPair("L1", 1, True), LabeledPair("L1", 2, False)]
    mems = [LabeledMembership("T1", "c1", True)]
    write_labels(tmp_path / "p.jsonl", pairs)
    write_labels(tmp_path / "m.jsonl", mems)
    assert read_pair_labels(tmp_path / "p.jsonl") == pairs
    assert read_membership_labels(tmp_path / "m.jsonl") == mems


def small_city_sequences(city, radius=1.8):
    counts = count_neighbors(city.points, radius)
    locs = select_locations_nms(city.points, 2 * radius, 0, counts)
    return build_sequences(city.points, locs, radius, 10)[0]


@pytest.fixture(scope="module")
def small_city():
    city = build_city(seed=3, n_trends=2, n_distractors=4, n_background=10, trend_instances=(8, 10), distractor_instances=(2, 4))
    return city, small_city_sequences(city)


def test_oracle_detector_scores_perfect_ap(small_city):
    city, seqs = small_city
    labels = city_pair_labels(city, seqs)
    changes, _ = run_stage1(seqs, AnalystGateway(city.oracle))
    assert eval_change_detection(changes, seqs, labels) == 1.0


def test_scorer_detector_and_missing_labels(small_city):
    city, seqs = small_city
    labels = city_pair_labels(city, seqs)
    gw = AnalystGateway(city.oracle)
    ap = eval_change_detection(lambda a, b: float(np.linalg.norm(gw.embed_image(a) - gw.embed_image(b))), seqs, labels)
    assert 0 < ap <= 1
    with pytest.raises(ValueError, match=r"1 unlabeled pair\(s\): " + seqs[0].location_id + "#1"):
        eval_change_detection(lambda a, b: 0.0, seqs, labels[1:])


def test_conflicting_labels_rejected(small_city):
    _, seqs = small_city
    labels = [LabeledPair(seqs[0].location_id, 1, True), LabeledPair(seqs[0].location_id, 1, False)]
    with pytest.raises(ValueError, match="conflicting"):
        eval_change_detection(lambda a, b: 0.0, seqs[:1], labels)


# membership AP


def test_membership_ap():
    labels = [LabeledMembership("T", f"c{i}", b) for i, b in enumerate([True, False, True, False])]
    scores = {("T", f"c{i}"): s for i, s in enumerate([0.9, 0.8, 0.7, 0.6])}
    assert eval_membership(scores, labels) == pytest.approx(5 / 6)
    assert eval_membership(lambda t, c: float(c in ("c0", "c2")), labels) == 1.0


def test_membership_benchmark_shape():
    world = make_verification_world(0, N=20, mode="noisy", n_proposals=5, pool_size=(200, 400))
    labels, scores = membership_benchmark(world, per_proposal=40)
    assert len(labels) == 200 and len(scores) == 200
    oracle_ap = eval_membership({(x.trend_id, x.change_id): float(x.belongs) for x in labels}, labels)
    assert oracle_ap == 1.0
    assert 0.5 < eval_membership(scores, labels) <= 1.0


# trend decisions


def test_grid_search_picks_the_best_threshold():
    rng = np.random.default_rng(0)
    dists = [rng.random(50) for _ in range(12)]
    truth = rng.random(12) < 0.5
    t, best, grid, acc = threshold_grid_search(dists, truth, N=20)
    assert len(grid) == 1000 and best == acc.max() and t == grid[np.argmax(acc)]
    for g in grid[::97]:
        pred = [int((d <= g).sum()) >= 20 for d in dists]
        assert np.mean(np.array(pred) == truth) <= best


def test_monotone_world_hybrid_is_exact():
    for seed in range(3):
        world = make_verification_world(seed, N=30, n_proposals=10, mode="monotone", pool_size=(200, 400))
        rows = eval_hybrid_accuracy(world.proposals, [30])
        assert next(r for r in rows if r.comparator == "Hybrid").accuracy == 1.0


def test_all_true_world_alltrue_is_exact():
    world = make_verification_world(1, N=10, n_proposals=6, pool_size=(100, 200))
    for p in world.proposals:
        p.positives = frozenset(p.index.ids)
    rows = eval_hybrid_accuracy(world.proposals, [10])
    acc = {r.comparator: r.accuracy for r in rows}
    assert acc["AllTrue"] == 1.0 and acc["Hybrid"] == 1.0


def test_comparators_and_budgets():
    world = make_verification_world(2, N=20, n_proposals=8, pool_size=(200, 300))
    rows = eval_hybrid_accuracy(world.proposals, [20, 40], k_multiple=3, seed=5)
    assert [r.comparator for r in rows] == ["AllTrue", "EmbThreshold", "RandMLLM", "Hybrid"] * 2
    for r in rows:
        assert 0 <= r.accuracy <= 1 and r.k == 3 * r.N
        if r.comparator in ("RandMLLM", "Hybrid"):
            assert r.oracle_queries <= r.k * r.n_proposals
    assert rows == eval_hybrid_accuracy(world.proposals, [20, 40], k_multiple=3, seed=5)


def test_k_ablation_is_monotone():
    world = make_verification_world(4, N=20, n_proposals=10, mode="noisy", pool_size=(200, 400))
    acc = ablate_k(world.proposals, 20)
    assert list(acc) == [2, 3, 4, 5]
    assert acc[2] <= acc[3] <= acc[4] <= acc[5]


def test_critic_ablation_directions():
    city = build_city(seed=5, n_trends=3, n_distractors=6, hallucination_rate=0.3, critic_leak_rate=0.15, critic_miss_rate=0.02)
    seqs = small_city_sequences(city)
    res = ablate_critic(city, seqs, AnalystGateway(city.oracle))
    assert res[True].precision > res[False].precision
    assert res[True].recall >= 0.95 * res[False].recall


def test_critic_ablation_identical_without_hallucinations(small_city):
    city, seqs = small_city
    res = ablate_critic(city, seqs, AnalystGateway(city.oracle))
    assert (res[True].records, res[True].true_positives) == (res[False].records, res[False].true_positives)


# reports


def test_report_files(tmp_path):
    rows = [AccuracyRow("Hybrid", 50, 150, 0.9, 10, 1500), AccuracyRow("Hybrid", 50, 150, 0.7, 10, 1400)]
    agg = aggregate_rows(rows)
    assert len(agg) == 1 and agg[0].accuracy == pytest.approx(0.8) and agg[0].n_proposals == 20
    write_report(tmp_path / "r.json", agg, {"note": {"a": 1}})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["rows"][0]["comparator"] == "Hybrid" and doc["note"] == {"a": 1}
    txt = (tmp_path / "r.txt").read_text()
    assert txt.startswith(render_table(agg)) and "note:" in txt
