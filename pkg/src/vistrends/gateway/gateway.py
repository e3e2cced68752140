from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from ..jsonl import append_jsonl
from .backends import AnalystRequest, Backend, BackendError
from .parsing import AnswerParseError, RawChange, parse_abstractions, parse_change_answer, parse_unusual, parse_yes_no
from .templates import PromptTemplates

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    base_delay_s: float = 1.0
    factor: float = 2.0

    def delay(self, attempt: int) -> float:
        return self.base_delay_s * self.factor ** (attempt - 1)


class GatewayError(RuntimeError):
    """Raised after a request exhausted its retries and was poisoned."""

    def __init__(self, request_id: str, kind: str, attempts: int, last_error: str):
        super().__init__(f"{kind} request {request_id} failed after {attempts} attempt(s): {last_error}")
        self.request_id = request_id
        self.kind = kind
        self.attempts = attempts
        self.last_error = last_error


@dataclass
class Detection:
    changes: list[RawChange] = field(default_factory=list)
    errors: list[AnswerParseError] = field(default_factory=list)


def _month_year(ts) -> str:
    return ts.strftime("%B %Y")


class AnalystGateway:
    """Single entry point to the analyst and embedding backends.

    Safe to share between worker threads: one semaphore bounds in-flight
    backend calls and one lock guards the counters and the poison store.
    """

    def __init__(
        self,
        backend: Backend,
        templates: PromptTemplates | None = None,
        max_in_flight: int = 64,
        retry: RetryPolicy | None = None,
        poison_path: str | Path | None = None,
        role: str = "urban analyst",
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.backend = backend
        self.templates = templates or PromptTemplates()
        self.max_in_flight = max_in_flight
        self.retry = retry or RetryPolicy()
        self.poison_path = Path(poison_path) if poison_path else None
        self.role = role
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._in_flight = 0
        self.peak_in_flight = 0
        self.stats: Counter[str] = Counter()
        self.poisoned: list[dict] = []
        self._embed_cache: dict[str, np.ndarray] = {}
        self._image_cache: dict[str, np.ndarray] = {}

    # plumbing

    def count(self, key: str, n: int = 1) -> None:
        with self._lock:
            self.stats[key] += n

    @contextmanager
    def _slot(self):
        with self._slots:
            with self._lock:
                self._in_flight += 1
                self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
            try:
                yield
            finally:
                with self._lock:
                    self._in_flight -= 1

    def _request(self, kind: str, bindings: dict, images: Sequence[str] = ()) -> AnalystRequest:
        key = json.dumps([kind, bindings, list(images)], sort_keys=True, ensure_ascii=False)
        rid = hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]
        prompt = self.templates.render(kind, **bindings)
        return AnalystRequest(rid, kind, kind, dict(bindings), tuple(images), prompt)

    def _call(self, request_id: str, kind: str, fn: Callable[[], T]) -> T:
        last = ""
        attempt = 0
        for attempt in range(1, self.retry.attempts + 1):
            try:
                with self._slot():
                    self.count("requests")
                    return fn()
            except BackendError as exc:
                last = str(exc)
                self.count("backend_errors")
                if not exc.retryable:
                    break
                if attempt < self.retry.attempts:
                    self.count("retries")
                    self._sleep(self.retry.delay(attempt))
        self._poison(request_id, kind, attempt, last)
        raise GatewayError(request_id, kind, attempt, last)

    def _poison(self, request_id: str, kind: str, attempts: int, last_error: str) -> None:
        rec = {"request_id": request_id, "kind": kind, "attempts": attempts, "last_error": last_error}
        with self._lock:
            self.poisoned.append(rec)
            self.stats["poisoned"] += 1
            if self.poison_path is not None:
                append_jsonl(self.poison_path, [rec])
        log.warning("poisoned %s request %s: %s", kind, request_id, last_error)

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Order-preserving concurrent map sized to the in-flight limit."""
        items = list(items)
        if self.max_in_flight == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(fn, items))

    def _complete(self, kind: str, bindings: dict, images: Sequence[str] = ()) -> str:
        req = self._request(kind, bindings, images)
        return self._call(req.id, kind, lambda: self.backend.complete(req))

    # analyst operations

    def detect_changes(self, sequence) -> Detection:
        """Ask for the changes along a chronological image sequence.

        Changes whose index does not point at a real consecutive pair are
        reported as parse errors, not returned.
        """
        images = sequence.images
        captions = "\n".join(
            f"This is image No. {i}, taken in {_month_year(im.timestamp)}." for i, im in enumerate(images, 1)
        )
        text = self._complete(
            "detect_changes",
            {"role": self.role, "image_captions": captions},
            [im.image_uri for im in images],
        )
        changes, errors = parse_change_answer(text)
        out = Detection(errors=errors)
        for ch in changes:
            if 1 <= ch.after_index <= len(images) - 1:
                out.changes.append(ch)
            else:
                out.errors.append(AnswerParseError(f"index {ch.after_index} out of range", f"{ch}"))
        if out.errors:
            self.count("parse_errors", len(out.errors))
        return out

    def self_critic(self, change: RawChange, evidence: Sequence[str]) -> bool:
        """One critique round over the two evidence images. Failures discard."""
        if len(evidence) != 2:
            raise ValueError("self_critic needs exactly two evidence images")
        try:
            text = self._complete(
                "self_critic",
                {"before": change.before_desc, "after": change.after_desc, "index": change.after_index},
                evidence,
            )
            return parse_yes_no(text)
        except GatewayError:
            self.count("critic_failures")
        except AnswerParseError as exc:
            self.count("critic_unparsed")
            log.info("unparseable critic answer: %s", exc)
        return False

    def derive_abstractions(self, change) -> list[str]:
        text = self._complete("derive_abstractions", {"before": change.before_desc, "after": change.after_desc})
        try:
            return parse_abstractions(text)
        except AnswerParseError as exc:
            self.count("abstraction_unparsed")
            log.info("unparseable abstraction answer for %s: %s", getattr(change, "id", "?"), exc)
            return []

    def verify_membership(self, change, trend_text: str, strict: bool = False) -> bool:
        """Y/N membership of ``change`` in the trend described by ``trend_text``.

        Backend failures and unparseable answers count as "no". With
        ``strict`` a backend failure re-raises instead, so callers can count it.
        """
        if not trend_text or not change.after_desc:
            raise ValueError("membership needs non-empty change and trend texts")
        try:
            text = self._complete(
                "verify_membership",
                {"before": change.before_desc, "after": change.after_desc, "group": trend_text},
            )
        except GatewayError:
            self.count("membership_failures")
            if strict:
                raise
            return False
        try:
            return parse_yes_no(text)
        except AnswerParseError:
            self.count("membership_unparsed")
            return False

    def unusual_things(self, image_uri: str) -> list[str]:
        return parse_unusual(self._complete("unusual_things", {}, [image_uri]))

    def caption_image(self, image_uri: str) -> str:
        return self._complete("caption_image", {}, [image_uri]).strip()

    # embeddings

    def _normalize(self, raw, what: str) -> np.ndarray:
        v = np.asarray(raw, dtype=np.float64)
        norm = np.linalg.norm(v)
        if v.ndim != 1 or not np.all(np.isfinite(v)) or norm == 0:
            raise BackendError(f"degenerate embedding for {what}", retryable=False)
        return v / norm

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        cached = self._embed_cache.get(text)
        if cached is not None:
            return cached
        rid = hashlib.sha256(("embed:" + text).encode("utf-8")).hexdigest()[:16]
        vec = self._call(rid, "embed", lambda: self._normalize(self.backend.embed(text), "text"))
        with self._lock:
            self._embed_cache[text] = vec
        return vec

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        unique = list(dict.fromkeys(t for t in texts if t not in self._embed_cache))
        self.map(self.embed_text, unique)
        if not texts:
            return np.zeros((0, 0))
        return np.stack([self._embed_cache[t] for t in texts])

    def embed_image(self, image_uri: str) -> np.ndarray:
        cached = self._image_cache.get(image_uri)
        if cached is not None:
            return cached
        rid = hashlib.sha256(("embed_image:" + image_uri).encode("utf-8")).hexdigest()[:16]
        vec = self._call(rid, "embed_image", lambda: self._normalize(self.backend.embed_image(image_uri), image_uri))
        with self._lock:
            self._image_cache[image_uri] = vec
        return vec
