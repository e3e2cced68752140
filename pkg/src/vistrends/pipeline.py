"""Stage orchestration over an output directory.

Every stage reads its inputs from the run directory, writes its outputs
atomically and records a stamp: a hash of the stage parameters and the
bytes of every input file. A stage whose stamp matches and whose outputs
exist is skipped, so re-running a command without changes is a no-op.

Layout of ``output_dir``::

    locations.jsonl  sequences.jsonl  ingest_report.json
    changes.jsonl    stage1/          stage1_report.json   poison.jsonl
    proposals.jsonl  proposal_report.json
    trends.jsonl     trends.geojson   report.html
    query/           eval/            .stamps/
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .baselines import make_pair_scorer
from .change_detection import ChangeRecord, read_changes, run_stage1, write_changes
from .config import RunConfig
from .corpus import (
    build_sequences,
    count_neighbors,
    ingest_manifest,
    parse_time,
    read_sequences,
    select_locations_nms,
    write_manifest,
    write_sequences,
)
from .evaluation import (
    ablate_critic,
    ablate_k,
    aggregate_rows,
    average_precision,
    city_pair_labels,
    eval_change_detection,
    eval_hybrid_accuracy,
    eval_membership,
    membership_benchmark,
    read_pair_labels,
    subset_ap_spread,
    write_report,
)
from .export import render_report, trends_geojson, write_geojson
from .gateway import AnalystGateway, RemoteBackend, RetryPolicy
from .jsonl import write_jsonl
from .synthetic import build_city, make_verification_world
from .trends import (
    QueryCondition,
    apply_condition,
    build_change_pool,
    propose_trends,
    rank_proposals,
    read_proposals,
    read_trend_store,
    unusual_query,
    verify_all,
    write_proposals,
    write_trend_store,
)

log = logging.getLogger(__name__)

STAMP_DIR = ".stamps"


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, hint: str = ""):
        self.path = Path(path)
        super().__init__(f"missing input {self.path}" + (f" ({hint})" if hint else ""))


@dataclass
class StageResult:
    stage: str
    skipped: bool = False
    outputs: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    poison_added: int = 0
    violations: list[str] = field(default_factory=list)


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    tmp.replace(path)


def _count_lines(path: Path) -> int:
    if not path.exists():
        return 0
    with open(path, "rb") as fh:
        return sum(1 for _ in fh)


class Run:
    """One output directory driven by one :class:`RunConfig`."""

    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.force = force
        self._gateway: AnalystGateway | None = None
        self._city = None

    # paths

    def path(self, name: str) -> Path:
        return self.root / name

    @property
    def poison_path(self) -> Path:
        return self.path("poison.jsonl")

    def manifest_path(self) -> Path:
        if self.cfg.manifest:
            return Path(self.cfg.manifest)
        return self.path("manifest.jsonl")

    def require(self, *names: str) -> list[Path]:
        out = []
        for name in names:
            p = self.path(name) if not Path(name).is_absolute() else Path(name)
            if not p.exists():
                raise MissingArtifact(p, "run the upstream command first")
            out.append(p)
        return out

    # backend

    def city_params(self) -> dict:
        params = dict(self.cfg.backend.city)
        params.setdefault("seed", self.cfg.seed)
        return params

    def city(self):
        if self._city is None:
            self._city = build_city(**self.city_params())
        return self._city

    def gateway(self) -> AnalystGateway:
        if self._gateway is None:
            b = self.cfg.backend
            if b.kind == "synthetic":
                backend = self.city().oracle
            else:
                backend = RemoteBackend(b.endpoint, b.model, b.api_key_env, b.timeout_s, b.embed_model)
            retry = RetryPolicy(b.retry.attempts, b.retry.base_delay_s, b.retry.factor)
            self.root.mkdir(parents=True, exist_ok=True)
            self._gateway = AnalystGateway(backend, max_in_flight=b.max_in_flight, retry=retry, poison_path=self.poison_path)
        return self._gateway

    def backend_identity(self) -> dict:
        b = asdict(self.cfg.backend)
        for volatile in ("max_in_flight", "timeout_s", "retry"):
            b.pop(volatile)
        if self.cfg.backend.kind == "synthetic":
            b["city"] = self.city_params()
        return b

    # stamps

    def _stamp_key(self, stage: str, params: dict, inputs: list[Path]) -> str:
        doc = {
            "version": __version__,
            "stage": stage,
            "params": params,
            "inputs": [file_digest(p) for p in inputs],
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode("utf-8")).hexdigest()

    def _fresh(self, stage: str, key: str, outputs: list[Path]) -> bool:
        stamp = self.path(STAMP_DIR) / f"{stage}.json"
        if self.force or not stamp.exists():
            return False
        try:
            recorded = json.loads(stamp.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return False
        return recorded.get("key") == key and all(p.exists() for p in outputs)

    def _stamp(self, stage: str, key: str, outputs: list[Path], summary: dict) -> None:
        _write_json(self.path(STAMP_DIR) / f"{stage}.json", {"key": key, "outputs": [p.name for p in outputs], "summary": summary})

    def _stage(self, stage: str, params: dict, inputs: list[Path], outputs: list[Path], body: Callable[[], dict]) -> StageResult:
        key = self._stamp_key(stage, params, inputs)
        if self._fresh(stage, key, outputs):
            recorded = json.loads((self.path(STAMP_DIR) / f"{stage}.json").read_text(encoding="utf-8"))
            return StageResult(stage, True, [str(p) for p in outputs], recorded.get("summary", {}))
        before = _count_lines(self.poison_path)
        summary = body()
        violations = summary.pop("_violations", [])
        result = StageResult(stage, False, [str(p) for p in outputs], summary, _count_lines(self.poison_path) - before, violations)
        if not violations:
            self._stamp(stage, key, outputs, summary)
        return result

    # stages

    def synth(self) -> StageResult:
        """Write the synthetic city's manifest and its planted ground truth."""
        if self.cfg.backend.kind != "synthetic":
            raise ValueError("synth needs backend.kind = synthetic")
        manifest = self.manifest_path()
        truth = self.path("planted.json")
        params = {"city": self.city_params()}

        def body():
            city = self.city()
            write_manifest(manifest, city.points)
            _write_json(
                truth,
                {
                    "motifs": [
                        {
                            "id": m.id,
                            "kind": m.kind,
                            "texts": m.shared_texts,
                            "instances": len(m.change_keys),
                            "locations": [list(x) for x in m.locations],
                        }
                        for m in city.motifs
                    ],
                    "hallucinations": len(city.hallucinations),
                },
            )
            return {"points": len(city.points), "motifs": len(city.motifs)}

        return self._stage("synth", params, [], [manifest, truth], body)

    def ingest(self) -> StageResult:
        manifest = self.manifest_path()
        if not manifest.exists():
            raise MissingArtifact(manifest, "set manifest in the config or run synth")
        cfg = self.cfg
        params = {
            "radius_m": cfg.radius_m,
            "suppression_m": cfg.effective_suppression_m,
            "min_images": cfg.min_images,
            "seed": cfg.seed,
            "sample": cfg.nms_sample_size,
        }
        outs = [self.path("locations.jsonl"), self.path("sequences.jsonl"), self.path("ingest_report.json")]

        def body():
            ing = ingest_manifest(manifest)
            counts = count_neighbors(ing.points, cfg.radius_m)
            locs = select_locations_nms(ing.points, cfg.effective_suppression_m, cfg.seed, counts, cfg.nms_sample_size)
            seqs, rejected = build_sequences(ing.points, locs, cfg.radius_m, cfg.min_images)
            write_jsonl(outs[0], (asdict(loc) for loc in locs))
            write_sequences(outs[1], seqs)
            summary = {
                "points": len(ing.points),
                "rejected_lines": ing.rejected,
                "locations": len(locs),
                "sequences": len(seqs),
                "rejected_locations": len(rejected),
            }
            _write_json(outs[2], {**summary, "line_diagnostics": ing.diagnostics[:1000]})
            violations = []
            if any(n for n in count_neighbors(locs, cfg.effective_suppression_m).values()):
                violations.append("selected locations closer than the suppression radius")
            if any(a.timestamp > b.timestamp for s in seqs for a, b in zip(s.images, s.images[1:])):
                violations.append("sequence timestamps not sorted")
            summary["_violations"] = violations
            return summary

        return self._stage("ingest", params, [manifest], outs, body)

    def detect(self) -> StageResult:
        (seq_path,) = self.require("sequences.jsonl")
        cfg = self.cfg
        params = {"critic": cfg.critic_enabled, "backend": self.backend_identity()}
        outs = [self.path("changes.jsonl"), self.path("stage1_report.json")]
        key = self._stamp_key("detect", params, [seq_path])
        work = self.path("stage1")
        # a checkpoint left by a run over different inputs is discarded
        key_file = work / "inputs.key"
        if work.exists() and (not key_file.exists() or key_file.read_text().strip() != key):
            shutil.rmtree(work)
        work.mkdir(parents=True, exist_ok=True)
        key_file.write_text(key + "\n")

        def body():
            seqs = read_sequences(seq_path)
            gw = self.gateway()
            changes, report = run_stage1(seqs, gw, cfg.critic_enabled, work, batch_size=cfg.backend.max_in_flight)
            write_changes(outs[0], changes)
            summary = {**asdict(report), "changes": len(changes)}
            _write_json(outs[1], summary)
            summary["poisoned"] = len(report.poisoned)
            by_loc = {s.location_id: s for s in seqs}
            bad = [
                c.id
                for c in changes
                if not (
                    c.before_time <= c.after_time
                    and c.critic_passed == cfg.critic_enabled
                    and 1 <= c.after_index < len(by_loc[c.location_id].images)
                    and by_loc[c.location_id].images[c.after_index - 1].timestamp == c.before_time
                    and by_loc[c.location_id].images[c.after_index].timestamp == c.after_time
                )
            ]
            summary["_violations"] = [f"{len(bad)} change record(s) not grounded in their sequence"] if bad else []
            return summary

        return self._stage("detect", params, [seq_path], outs, body)

    def _propose_and_verify(self, changes: list[ChangeRecord], prefix: str) -> tuple[dict, list[str]]:
        cfg = self.cfg
        k = cfg.effective_k
        gw = self.gateway()
        run = propose_trends(changes, gw, k, cfg.tight, cfg.loose, order_seed=cfg.seed)
        write_proposals(self.path(prefix + "proposals.jsonl"), run.proposals)
        results = self._verify(run.proposals, changes)
        write_trend_store(self.path(prefix + "trends.jsonl"), run.proposals, results)
        summary = {
            "changes": len(changes),
            "proposals": len(run.proposals),
            "positive": sum(r.positive for r in results),
        }
        return summary, self._result_violations(run.proposals, results)

    def _verify(self, proposals, changes):
        cfg = self.cfg
        rk = cfg.ranking
        ranked = rank_proposals(
            proposals,
            rk.mode,
            changes_by_id={c.id: c for c in changes},
            pre_window=_window(rk.pre_window),
            post_window=_window(rk.post_window),
            n_buckets=rk.n_buckets,
        )
        if rk.max_proposals is not None:
            ranked = ranked[: rk.max_proposals]
        gw = self.gateway()
        pool = build_change_pool(changes, gw)
        return verify_all(ranked, pool, cfg.effective_k, cfg.N, gw, early_exit=cfg.early_exit)

    def _result_violations(self, proposals, results) -> list[str]:
        k, N = self.cfg.effective_k, self.cfg.N
        out = []
        if any(p.member_count < k for p in proposals):
            out.append("proposal with fewer than k cluster members")
        for r in results:
            if r.oracle_queries_used > k:
                out.append(f"{r.proposal_id}: {r.oracle_queries_used} queries exceed k={k}")
            if r.positive != (len(r.confirmed_change_ids) >= N):
                out.append(f"{r.proposal_id}: decision disagrees with confirmed count")
        return out

    def propose(self) -> StageResult:
        (changes_path,) = self.require("changes.jsonl")
        cfg = self.cfg
        params = {"k": cfg.effective_k, "tight": cfg.tight, "loose": cfg.loose, "seed": cfg.seed, "backend": self.backend_identity()}
        outs = [self.path("proposals.jsonl"), self.path("proposal_report.json")]

        def body():
            changes = read_changes(changes_path)
            run = propose_trends(changes, self.gateway(), cfg.effective_k, cfg.tight, cfg.loose, order_seed=cfg.seed)
            write_proposals(outs[0], run.proposals)
            summary = {
                "changes": len(changes),
                "abstraction_items": run.n_items,
                "canopies": run.n_canopies,
                "dropped_small": run.dropped_small,
                "proposals": len(run.proposals),
                "abstraction_failures": len(run.abstraction_failures),
            }
            _write_json(outs[1], summary)
            summary["_violations"] = self._result_violations(run.proposals, [])
            return summary

        return self._stage("propose", params, [changes_path], outs, body)

    def verify(self) -> StageResult:
        prop_path, changes_path = self.require("proposals.jsonl", "changes.jsonl")
        cfg = self.cfg
        params = {
            "k": cfg.effective_k,
            "N": cfg.N,
            "early_exit": cfg.early_exit,
            "ranking": asdict(cfg.ranking),
            "backend": self.backend_identity(),
        }
        outs = [self.path("trends.jsonl")]

        def body():
            proposals = read_proposals(prop_path)
            changes = read_changes(changes_path)
            results = self._verify(proposals, changes)
            write_trend_store(outs[0], proposals, results)
            return {
                "verified": len(results),
                "positive": sum(r.positive for r in results),
                "oracle_queries": sum(r.oracle_queries_used for r in results),
                "_violations": self._result_violations([], results),
            }

        return self._stage("verify", params, [prop_path, changes_path], outs, body)

    def query(self, unusual: bool = False) -> StageResult:
        """Conditioned discovery: time window and/or subject filter, or the single-image query."""
        cfg = self.cfg
        cond = QueryCondition(cfg.condition.window(), cfg.condition.subject, cfg.condition.pool_size)
        if not unusual and cond.time_window is None and not cond.subject:
            raise ValueError("query needs a time window, a subject or the unusual mode")
        inputs = self.require("sequences.jsonl") if unusual else self.require("changes.jsonl")
        params = {
            "unusual": unusual,
            "condition": asdict(cfg.condition),
            "k": cfg.effective_k,
            "N": cfg.N,
            "tight": cfg.tight,
            "loose": cfg.loose,
            "seed": cfg.seed,
            "early_exit": cfg.early_exit,
            "ranking": asdict(cfg.ranking),
            "backend": self.backend_identity(),
        }
        qdir = "query/"
        outs = [self.path(qdir + n) for n in ("changes.jsonl", "proposals.jsonl", "trends.jsonl", "query_report.json")]

        def body():
            gw = self.gateway()
            if unusual:
                seen, images = set(), []
                for s in read_sequences(inputs[0]):
                    for im in s.images:
                        if im.point_id not in seen:
                            seen.add(im.point_id)
                            images.append(im)
                changes = unusual_query(images, gw)
                if cond.time_window is not None or cond.subject:
                    changes = apply_condition(changes, cond, gw)
            else:
                changes = apply_condition(read_changes(inputs[0]), cond, gw)
            write_changes(outs[0], changes)
            summary, violations = self._propose_and_verify(changes, qdir)
            _write_json(outs[3], summary)
            summary["_violations"] = violations
            return summary

        return self._stage("query", params, inputs, outs, body)

    def export(self, from_query: bool = False) -> StageResult:
        prefix = "query/" if from_query else ""
        trends_path, changes_path = self.require(prefix + "trends.jsonl", prefix + "changes.jsonl")
        outs = [self.path(prefix + "trends.geojson"), self.path(prefix + "report.html")]

        def body():
            pairs = read_trend_store(trends_path)
            by_id = {c.id: c for c in read_changes(changes_path)}
            collection = trends_geojson(pairs, by_id)
            write_geojson(outs[0], collection)
            outs[1].write_text(render_report(pairs, by_id), encoding="utf-8")
            return {"trends": sum(r.positive for _, r in pairs), "features": len(collection["features"])}

        return self._stage("export" + ("_query" if from_query else ""), {}, [trends_path, changes_path], outs, body)

    def evaluate(self, suites: list[str], pair_labels: str | None = None) -> StageResult:
        cfg = self.cfg
        ev = cfg.eval
        inputs = []
        if "detection" in suites:
            inputs = self.require("sequences.jsonl", "changes.jsonl")
            if pair_labels:
                inputs.append(Path(pair_labels))
                if not inputs[-1].exists():
                    raise MissingArtifact(inputs[-1])
            elif cfg.backend.kind != "synthetic":
                raise ValueError("detection evaluation needs --pair-labels with a remote backend")
        params = {"suites": sorted(suites), "eval": asdict(ev), "seed": cfg.seed, "backend": self.backend_identity()}
        outs = [self.path("eval/report.json"), self.path("eval/report.txt")]

        def body():
            doc: dict = {}
            rows = []
            if "hybrid" in suites:
                per_world, wins = [], 0
                for N in ev.N_values:
                    for w in range(ev.worlds):
                        world = make_verification_world(cfg.seed + w, N=N, mode="informative")
                        r = eval_hybrid_accuracy(world.proposals, [N], k_multiple=cfg.k_multiple, seed=cfg.seed)
                        acc = {x.comparator: x.accuracy for x in r}
                        wins += all(acc["Hybrid"] >= v for v in acc.values())
                        per_world += r
                rows = aggregate_rows(per_world)
                doc["hybrid_wins"] = {"worlds": ev.worlds * len(ev.N_values), "hybrid_best_or_tied": wins}
            if "ablation" in suites:
                k_acc = {}
                for N in ev.N_values:
                    totals = {m: 0.0 for m in ev.k_multiples}
                    for w in range(ev.worlds):
                        world = make_verification_world(cfg.seed + w, N=N, mode="noisy")
                        for m, a in ablate_k(world.proposals, N, ev.k_multiples).items():
                            totals[m] += a / ev.worlds
                    k_acc[str(N)] = {f"{m}N": round(a, 12) for m, a in totals.items()}
                doc["k_ablation"] = k_acc
                city = build_city(cfg.seed, hallucination_rate=0.3, critic_leak_rate=0.15, critic_miss_rate=0.02)
                seqs = _city_sequences(city, cfg)
                gw = AnalystGateway(city.oracle, max_in_flight=cfg.backend.max_in_flight)
                doc["critic_ablation"] = {
                    ("on" if on else "off"): {"precision": a.precision, "recall": a.recall, "records": a.records}
                    for on, a in ablate_critic(city, seqs, gw).items()
                }
            if "membership" in suites:
                world = make_verification_world(cfg.seed, N=20, mode="noisy", pool_size=(200, 400))
                labels, scores = membership_benchmark(world, per_proposal=40)
                truth = [lab.belongs for lab in labels]
                emb = [scores[lab.trend_id, lab.change_id] for lab in labels]
                rng = np.random.default_rng(cfg.seed)
                doc["membership"] = {
                    "pairs": len(labels),
                    "positive_rate": sum(truth) / len(truth),
                    "ap_embedding": eval_membership(scores, labels),
                    "ap_oracle": eval_membership({(x.trend_id, x.change_id): float(x.belongs) for x in labels}, labels),
                    "ap_random": average_precision(rng.uniform(size=len(labels)), truth),
                    "embedding_subsets": subset_ap_spread(emb, truth, ev.n_subsets, ev.subset_fraction, cfg.seed),
                }
            if "detection" in suites:
                seqs = read_sequences(inputs[0])
                changes = read_changes(inputs[1])
                labels = read_pair_labels(inputs[2]) if pair_labels else city_pair_labels(self.city(), seqs)
                doc["detection"] = {
                    "analyst": eval_change_detection(changes, seqs, labels),
                    "embedding": eval_change_detection(make_pair_scorer("embedding", self.gateway()), seqs, labels),
                }
            write_report(outs[0], rows, doc)
            return {"suites": sorted(suites)}

        return self._stage("eval", params, inputs, outs, body)


def _window(win):
    if win is None:
        return None
    return parse_time(win[0]), parse_time(win[1])


def _city_sequences(city, cfg: RunConfig):
    counts = count_neighbors(city.points, cfg.radius_m)
    locs = select_locations_nms(city.points, cfg.effective_suppression_m, cfg.seed, counts)
    seqs, _ = build_sequences(city.points, locs, cfg.radius_m, cfg.min_images)
    return seqs
