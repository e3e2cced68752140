"""Analyst backends: the remote HTTP client and the hash-embedding primitive."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import httpx
import numpy as np

REQUEST_KINDS = (
    "detect_changes",
    "self_critic",
    "derive_abstractions",
    "verify_membership",
    "unusual_things",
    "caption_image",
)
IMAGE_KINDS = {"detect_changes", "self_critic", "unusual_things", "caption_image"}


class BackendError(RuntimeError):
    """A failed backend call. ``retryable`` False means retrying is pointless."""

    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


@dataclass(frozen=True)
class AnalystRequest:
    id: str
    kind: str
    template: str
    bindings: dict = field(default_factory=dict)
    images: tuple[str, ...] = ()
    prompt: str = ""

    def __post_init__(self):
        if self.kind not in REQUEST_KINDS:
            raise ValueError(f"unknown request kind {self.kind!r}")
        if self.kind in IMAGE_KINDS and not self.images:
            raise ValueError(f"{self.kind} request needs at least one image")


class Backend(Protocol):
    name: str

    def complete(self, request: AnalystRequest) -> str: ...

    def embed(self, text: str) -> Sequence[float]: ...

    def embed_image(self, image_uri: str) -> Sequence[float]: ...


def hash_embedding(text: str, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-random unit vector for ``text``.

    The first 8 bytes of sha256("<seed>:<text>") seed a PCG64 generator whose
    ``standard_normal(dim)`` draw is L2-normalized.
    """
    digest = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class HashEmbeddingBackend:
    """Text embeddings only; every analyst question is answered with nothing."""

    name = "hash"

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim, self.seed = dim, seed

    def complete(self, request: AnalystRequest) -> str:
        return ""

    def embed(self, text: str) -> np.ndarray:
        return hash_embedding(text, self.dim, self.seed)

    def embed_image(self, image_uri: str) -> np.ndarray:
        return hash_embedding("image:" + image_uri, self.dim, self.seed)


class RemoteBackend:
    """JSON-over-HTTP client.

    Wire format, relative to ``endpoint``::

        POST /generate  {"model", "kind", "prompt", "images": [uri, ...]} -> {"text": str}
        POST /embed     {"model", "input": str}                          -> {"embedding": [float, ...]}
        POST /embed_image {"model", "image": uri}                         -> {"embedding": [float, ...]}

    The bearer token is read from the environment variable named by
    ``api_key_env``; it is never stored in configuration.
    """

    name = "remote"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str | None = None,
        timeout_s: float = 120.0,
        embed_model: str | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        headers = {}
        if api_key_env:
            token = os.environ.get(api_key_env)
            if not token:
                raise BackendError(f"environment variable {api_key_env} is not set", retryable=False)
            headers["Authorization"] = f"Bearer {token}"
        self.model = model
        self.embed_model = embed_model or model
        self._client = httpx.Client(base_url=endpoint, headers=headers, timeout=timeout_s, transport=transport)

    def _post(self, path: str, payload: dict) -> dict:
        try:
            resp = self._client.post(path, json=payload)
        except httpx.TimeoutException as exc:
            raise BackendError(f"timeout calling {path}: {exc}") from exc
        except httpx.HTTPError as exc:
            raise BackendError(f"transport error calling {path}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise BackendError(f"{path} returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"{path} returned HTTP {resp.status_code}: {resp.text[:200]}", retryable=False)
        try:
            return resp.json()
        except ValueError as exc:
            raise BackendError(f"{path} returned invalid JSON") from exc

    def complete(self, request: AnalystRequest) -> str:
        body = self._post(
            "/generate",
            {"model": self.model, "kind": request.kind, "prompt": request.prompt, "images": list(request.images)},
        )
        text = body.get("text")
        if not isinstance(text, str):
            raise BackendError("response has no 'text' field")
        return text

    def _embedding(self, path: str, payload: dict) -> list[float]:
        vec = self._post(path, payload).get("embedding")
        if not isinstance(vec, list) or not vec:
            raise BackendError(f"{path} response has no 'embedding' list")
        return vec

    def embed(self, text: str) -> list[float]:
        return self._embedding("/embed", {"model": self.embed_model, "input": text})

    def embed_image(self, image_uri: str) -> list[float]:
        return self._embedding("/embed_image", {"model": self.embed_model, "image": image_uri})

    def close(self) -> None:
        self._client.close()
