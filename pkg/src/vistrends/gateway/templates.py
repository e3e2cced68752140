"""Prompt templates are plain text assets with ``${name}`` placeholders."""

from __future__ import annotations

import string
from importlib import resources
from pathlib import Path

TEMPLATE_IDS = (
    "detect_changes",
    "self_critic",
    "derive_abstractions",
    "verify_membership",
    "unusual_things",
    "caption_image",
)


class TemplateError(KeyError):
    pass


class PromptTemplates:
    """Loads the packaged templates, optionally overridden file-by-file from a directory."""

    def __init__(self, override_dir: str | Path | None = None):
        self._texts: dict[str, str] = {}
        pkg = resources.files("vistrends.gateway") / "prompts"
        for tid in TEMPLATE_IDS:
            self._texts[tid] = (pkg / f"{tid}.txt").read_text(encoding="utf-8")
        if override_dir is not None:
            for path in Path(override_dir).glob("*.txt"):
                self._texts[path.stem] = path.read_text(encoding="utf-8")

    def __contains__(self, tid: str) -> bool:
        return tid in self._texts

    def placeholders(self, tid: str) -> set[str]:
        pattern = string.Template.pattern
        return {m.group("named") or m.group("braced") for m in pattern.finditer(self.raw(tid))} - {None}

    def raw(self, tid: str) -> str:
        try:
            return self._texts[tid]
        except KeyError:
            raise TemplateError(f"unknown prompt template {tid!r}") from None

    def render(self, tid: str, **bindings: object) -> str:
        missing = self.placeholders(tid) - bindings.keys()
        if missing:
            raise TemplateError(f"template {tid!r} missing bindings {sorted(missing)}")
        return string.Template(self.raw(tid)).substitute(bindings)
