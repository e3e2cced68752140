"""Deterministic scripted stand-in for the vision-language analyst.

The oracle holds a small world model: which changes exist between which
pairs of images, which of them are hallucinations the critic should reject,
how each change abstracts, which trend (motif) every text belongs to, and the
embedding vector of every scripted text. It answers requests in the same
plain-text formats a remote model would, so the gateway's parsers are
exercised identically under both backends.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .backends import AnalystRequest, BackendError, hash_embedding
from .parsing import RawChange, format_abstractions, format_change_line


def change_text(before: str, after: str) -> str:
    """Canonical single-string form of a change, used for embedding and identity."""
    return f"{before} → {after}" if before else after


@dataclass
class PlantedChange:
    before_uri: str
    after_uri: str
    before: str
    after: str
    motif: str | None = None
    hallucination: bool = False
    critic_keep: bool | None = None  # None: the critic keeps exactly the real changes


class SyntheticOracle:
    name = "synthetic"

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.pair_changes: dict[tuple[str, str], list[PlantedChange]] = defaultdict(list)
        self.abstractions: dict[tuple[str, str], tuple[list[str], list[str], list[list[str]]]] = {}
        self.change_motif: dict[tuple[str, str], str] = {}
        self.text_motif: dict[str, str] = {}
        self.memberships: dict[tuple[tuple[str, str], str], bool] = {}
        self.text_vectors: dict[str, np.ndarray] = {}
        self.image_vectors: dict[str, np.ndarray] = {}
        self.captions: dict[str, str] = {}
        self.unusual: dict[str, list[str]] = {}
        self.extra_lines: dict[str, list[str]] = {}
        self.always_fail: set[str] = set()
        self.fail_images: set[str] = set()
        self._transient: dict[str, int] = {}
        self._lock = threading.Lock()
        self.calls: dict[str, int] = defaultdict(int)

    # world construction

    def plant_change(self, change: PlantedChange) -> None:
        self.pair_changes[change.before_uri, change.after_uri].append(change)
        if change.motif is not None:
            self.change_motif[change.before, change.after] = change.motif

    def set_abstractions(self, before: str, after: str, places: list[str], kinds: list[str], grid: list[list[str]]) -> None:
        if len(grid) != len(places) or any(len(row) != len(kinds) for row in grid):
            raise ValueError("abstraction grid shape must be len(places) x len(kinds)")
        self.abstractions[before, after] = (places, kinds, grid)

    def assign_motif(self, text: str, motif: str) -> None:
        self.text_motif[text] = motif

    def set_vector(self, text: str, vector) -> None:
        v = np.asarray(vector, dtype=float)
        self.text_vectors[text] = v / np.linalg.norm(v)

    def fail_next(self, kind: str, times: int) -> None:
        """Make the next ``times`` calls of ``kind`` raise a retryable error."""
        self._transient[kind] = self._transient.get(kind, 0) + times

    # backend protocol

    def _maybe_fail(self, kind: str, images=()) -> None:
        with self._lock:
            self.calls[kind] += 1
            if kind in self.always_fail or any(u in self.fail_images for u in images):
                raise BackendError(f"synthetic failure for {kind}")
            if self._transient.get(kind, 0) > 0:
                self._transient[kind] -= 1
                raise BackendError(f"synthetic transient failure for {kind}")

    def complete(self, request: AnalystRequest) -> str:
        self._maybe_fail(request.kind, request.images)
        handler = getattr(self, "_answer_" + request.kind)
        return handler(request)

    def embed(self, text: str) -> np.ndarray:
        self._maybe_fail("embed")
        vec = self.text_vectors.get(text)
        return vec if vec is not None else hash_embedding(text, self.dim, self.seed)

    def embed_image(self, image_uri: str) -> np.ndarray:
        self._maybe_fail("embed_image", (image_uri,))
        vec = self.image_vectors.get(image_uri)
        return vec if vec is not None else hash_embedding("image:" + image_uri, self.dim, self.seed)

    # answers

    def _answer_detect_changes(self, req: AnalystRequest) -> str:
        images = req.images
        lines = []
        for i in range(len(images) - 1):
            for pc in self.pair_changes.get((images[i], images[i + 1]), ()):
                lines.append(format_change_line(RawChange(pc.before, pc.after, i + 1)))
        lines += self.extra_lines.get(images[0], [])
        return "\n".join(lines)

    def _answer_self_critic(self, req: AnalystRequest) -> str:
        before, after = req.bindings["before"], req.bindings["after"]
        pair = tuple(req.images[:2])
        for pc in self.pair_changes.get(pair, ()):
            if pc.before == before and pc.after == after:
                keep = not pc.hallucination if pc.critic_keep is None else pc.critic_keep
                return "Answer: Y.\nReason: visible." if keep else "Answer: N.\nReason: not visible."
        return "Answer: N.\nReason: cannot be confirmed from the evidence."

    def _answer_derive_abstractions(self, req: AnalystRequest) -> str:
        before, after = req.bindings["before"], req.bindings["after"]
        table = self.abstractions.get((before, after))
        if table is None:
            table = (["the original place"], ["the original change"], [[change_text(before, after)]])
        return format_abstractions(*table)

    def _answer_verify_membership(self, req: AnalystRequest) -> str:
        before, after, group = req.bindings["before"], req.bindings["after"], req.bindings["group"]
        key = (before, after)
        verdict = self.memberships.get((key, group))
        if verdict is None:
            if group in (after, change_text(before, after)):
                verdict = True
            else:
                motif = self.change_motif.get(key)
                verdict = motif is not None and self.text_motif.get(group) == motif
        return "Answer: Y.\nReason: scripted." if verdict else "Answer: N.\nReason: scripted."

    def _answer_unusual_things(self, req: AnalystRequest) -> str:
        return "\n".join(f"Unusual: {t}" for t in self.unusual.get(req.images[0], []))

    def _answer_caption_image(self, req: AnalystRequest) -> str:
        return self.captions.get(req.images[0], "")
