"""Stage 1: per-location change detection with self-critique and checkpointing."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import ImageSequence, format_time, parse_time
from .gateway import AnalystGateway, GatewayError, change_text
from .jsonl import append_jsonl, iter_jsonl, write_jsonl

log = logging.getLogger(__name__)

PARTIAL_NAME = "stage1.partial.jsonl"
CHECKPOINT_NAME = "stage1.checkpoint"


def normalize_desc(text: str) -> str:
    return " ".join(text.split()).casefold()


def change_id(location_id: str, after_index: int, before: str, after: str) -> str:
    key = "\x1f".join([location_id, str(after_index), normalize_desc(before), normalize_desc(after)])
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:20]


@dataclass(frozen=True)
class ChangeRecord:
    id: str
    location_id: str
    before_desc: str
    after_desc: str
    after_index: int
    before_time: datetime
    after_time: datetime
    critic_passed: bool
    lat: float
    lon: float
    before_image: str = ""
    after_image: str = ""

    @property
    def text(self) -> str:
        return change_text(self.before_desc, self.after_desc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["before_time"] = format_time(self.before_time)
        d["after_time"] = format_time(self.after_time)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChangeRecord":
        d = dict(d)
        d["before_time"] = parse_time(d["before_time"])
        d["after_time"] = parse_time(d["after_time"])
        return cls(**d)


@dataclass
class Stage1Report:
    sequences: int = 0
    skipped_checkpointed: int = 0
    poisoned: list[str] = field(default_factory=list)
    raw_changes: int = 0
    critic_rejected: int = 0
    duplicates: int = 0
    parse_errors: int = 0


def _process_sequence(seq: ImageSequence, gateway: AnalystGateway, critic_enabled: bool):
    detection = gateway.detect_changes(seq)
    records, rejected = [], 0
    for raw in detection.changes:
        i = raw.after_index  # 1-based: the change lies between images i and i+1
        a, b = seq.images[i - 1], seq.images[i]
        if critic_enabled and not gateway.self_critic(raw, (a.image_uri, b.image_uri)):
            rejected += 1
            continue
        records.append(
            ChangeRecord(
                id=change_id(seq.location_id, i, raw.before_desc, raw.after_desc),
                location_id=seq.location_id,
                before_desc=raw.before_desc,
                after_desc=raw.after_desc,
                after_index=i,
                before_time=a.timestamp,
                after_time=b.timestamp,
                critic_passed=critic_enabled,
                lat=seq.lat,
                lon=seq.lon,
                before_image=a.image_uri,
                after_image=b.image_uri,
            )
        )
    return records, len(detection.changes), rejected, len(detection.errors)


def _read_checkpoint(path: Path) -> set[str]:
    if not path.exists():
        return set()
    return {line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()}


def _mark_done(path: Path, location_ids: Iterable[str]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for loc in location_ids:
            fh.write(loc + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def run_stage1(
    sequences: Sequence[ImageSequence],
    gateway: AnalystGateway,
    critic_enabled: bool = True,
    work_dir: str | Path | None = None,
    batch_size: int = 64,
    stop_after: int | None = None,
) -> tuple[list[ChangeRecord], Stage1Report]:
    """Detect changes in every sequence once and return the deduplicated store.

    With ``work_dir`` the run is resumable: records are appended to a partial
    store before their location is added to the fsynced checkpoint, and on
    restart any partial records from unfinished locations are dropped.
    ``stop_after`` processes at most that many new sequences, which simulates
    an interrupted run.
    """
    report = Stage1Report(sequences=len(sequences))
    done: set[str] = set()
    partial: list[ChangeRecord] = []
    ckpt = part = None
    if work_dir is not None:
        work_dir = Path(work_dir)
        work_dir.mkdir(parents=True, exist_ok=True)
        ckpt, part = work_dir / CHECKPOINT_NAME, work_dir / PARTIAL_NAME
        done = _read_checkpoint(ckpt)
        if part.exists():
            partial = [r for r in map(ChangeRecord.from_dict, iter_jsonl(part)) if r.location_id in done]
            write_jsonl(part, (r.to_dict() for r in partial))

    todo = [s for s in sorted(sequences, key=lambda s: s.location_id) if s.location_id not in done]
    report.skipped_checkpointed = len(sequences) - len(todo)
    if stop_after is not None:
        todo = todo[:stop_after]

    def work(seq):
        try:
            return seq, _process_sequence(seq, gateway, critic_enabled)
        except GatewayError as exc:
            log.warning("sequence %s poisoned: %s", seq.location_id, exc)
            return seq, None

    collected = list(partial)
    for lo in range(0, len(todo), batch_size):
        batch = gateway.map(work, todo[lo : lo + batch_size])
        finished = []
        for seq, out in batch:
            if out is None:
                report.poisoned.append(seq.location_id)
                continue
            records, n_raw, n_rej, n_err = out
            report.raw_changes += n_raw
            report.critic_rejected += n_rej
            report.parse_errors += n_err
            collected.extend(records)
            finished.append(seq.location_id)
            if part is not None:
                append_jsonl(part, (r.to_dict() for r in records), fsync=False)
        if ckpt is not None:
            append_jsonl(part, [], fsync=True)
            _mark_done(ckpt, finished)

    store: dict[str, ChangeRecord] = {}
    for rec in collected:
        if rec.id in store:
            report.duplicates += 1
        else:
            store[rec.id] = rec
    return sorted(store.values(), key=lambda r: r.id), report


def pairs_with_changes(changes: Iterable[ChangeRecord]) -> set[tuple[str, int]]:
    """Consecutive image pairs holding at least one change; multiplicity dropped."""
    return {(c.location_id, c.after_index) for c in changes}


def write_changes(path: str | Path, changes: Iterable[ChangeRecord]) -> int:
    return write_jsonl(path, (c.to_dict() for c in sorted(changes, key=lambda c: c.id)))


def read_changes(path: str | Path) -> list[ChangeRecord]:
    return [ChangeRecord.from_dict(d) for d in iter_jsonl(path)]
