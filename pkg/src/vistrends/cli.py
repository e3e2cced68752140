"""Command-line entry point: ``vistrends <command> [--config run.yaml] [flags]``.

Exit status: 0 success, 2 usage or configuration error, 3 missing upstream
artifact, 4 poison store grew under ``--fail-on-poison``, 5 a stage invariant
failed, 1 any other runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .gateway import BackendError, GatewayError
from .pipeline import MissingArtifact, Run, StageResult

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_POISON = 4
EXIT_INVARIANT = 5

SUITES = ("hybrid", "ablation", "membership", "detection")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=("remote", "synthetic"), dest="backend_kind")
    p.add_argument("--max-in-flight", type=int, dest="max_in_flight")
    p.add_argument("--N", type=int, dest="N", help="minimum confirmed changes for a trend (default 500)")
    p.add_argument("--k", type=int, dest="k", help="verification shortlist size (default k-multiple * N)")
    p.add_argument("--k-multiple", type=int, dest="k_multiple")
    p.add_argument("--force", action="store_true", help="ignore stamps and recompute")
    p.add_argument("--fail-on-poison", action="store_true", default=None, help="exit 4 if any request was poisoned")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vistrends", description="Discover recurring visual changes in geotagged image sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic city manifest (synthetic backend)")
    _common(p)
    p.add_argument("--manifest")

    p = sub.add_parser("ingest", help="sample locations and build image sequences")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--radius-m", type=float, dest="radius_m")
    p.add_argument("--min-images", type=int, dest="min_images")

    p = sub.add_parser("detect", help="detect changes in every sequence")
    _common(p)
    p.add_argument("--no-critic", action="store_true", help="keep detections without the second check")

    p = sub.add_parser("propose", help="abstract and cluster changes into trend proposals")
    _common(p)
    p.add_argument("--tight", type=float)
    p.add_argument("--loose", type=float)

    p = sub.add_parser("verify", help="verify proposals against the change pool")
    _common(p)
    p.add_argument("--rank-mode", dest="rank_mode")
    p.add_argument("--max-proposals", type=int, dest="max_proposals")
    p.add_argument("--strict", action="store_true", help="query all k neighbors instead of stopping at N")

    p = sub.add_parser("query", help="conditioned discovery over a filtered or re-queried pool")
    _common(p)
    p.add_argument("--time-window", nargs=2, metavar=("START", "END"), dest="time_window")
    p.add_argument("--subject")
    p.add_argument("--pool-size", type=int, dest="pool_size")
    p.add_argument("--unusual", action="store_true", help="run the single-image unusual-things query")
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("eval", help="run the evaluation harness")
    _common(p)
    p.add_argument("--suite", action="append", choices=SUITES, help="repeatable; default hybrid, ablation, membership")
    p.add_argument("--pair-labels", dest="pair_labels", help="newline-delimited pair labels for the detection suite")
    p.add_argument("--worlds", type=int)

    p = sub.add_parser("export", help="write GeoJSON and an HTML report of verified trends")
    _common(p)
    p.add_argument("--from-query", action="store_true", dest="from_query")

    p = sub.add_parser("run", help="ingest, detect, propose, verify and export in one go")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--no-critic", action="store_true")
    return parser


def overrides_from(args: argparse.Namespace) -> dict:
    a = vars(args)
    o = {
        "output_dir": a.get("output_dir"),
        "seed": a.get("seed"),
        "backend.kind": a.get("backend_kind"),
        "backend.max_in_flight": a.get("max_in_flight"),
        "N": a.get("N"),
        "k": a.get("k"),
        "k_multiple": a.get("k_multiple"),
        "fail_on_poison": a.get("fail_on_poison"),
        "manifest": a.get("manifest"),
        "radius_m": a.get("radius_m"),
        "min_images": a.get("min_images"),
        "tight": a.get("tight"),
        "loose": a.get("loose"),
        "ranking.mode": a.get("rank_mode"),
        "ranking.max_proposals": a.get("max_proposals"),
        "condition.time_window": a.get("time_window"),
        "condition.subject": a.get("subject"),
        "condition.pool_size": a.get("pool_size"),
        "eval.worlds": a.get("worlds"),
    }
    if a.get("no_critic"):
        o["critic_enabled"] = False
    if a.get("strict"):
        o["early_exit"] = False
    return {k: v for k, v in o.items() if v is not None}


def _report(res: StageResult) -> None:
    state = "up to date" if res.skipped else "done"
    print(f"{res.stage}: {state} {json.dumps(res.summary, sort_keys=True)}")
    if res.poison_added:
        print(f"{res.stage}: {res.poison_added} request(s) added to the poison store", file=sys.stderr)
    for v in res.violations:
        print(f"{res.stage}: invariant violated: {v}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides_from(args))
    except (ConfigError, OSError) as exc:
        parser.error(str(exc))

    run = Run(cfg, force=args.force)
    steps = {
        "synth": [run.synth],
        "ingest": [run.ingest],
        "detect": [run.detect],
        "propose": [run.propose],
        "verify": [run.verify],
        "query": [lambda: run.query(unusual=args.unusual)],
        "eval": [lambda: run.evaluate(list(args.suite or SUITES[:3]), args.pair_labels)],
        "export": [lambda: run.export(from_query=args.from_query)],
        "run": [run.ingest, run.detect, run.propose, run.verify, run.export],
    }[args.command]

    status = 0
    try:
        for step in steps:
            res = step()
            _report(res)
            if res.violations:
                return EXIT_INVARIANT
            if res.poison_added and cfg.fail_on_poison:
                status = EXIT_POISON
                break
    except MissingArtifact as exc:
        print(f"error: missing input {exc.path}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, GatewayError) as exc:
        print(f"error: backend failure: {exc}", file=sys.stderr)
        return 1
    return status


if __name__ == "__main__":
    sys.exit(main())
