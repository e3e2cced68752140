"""Flat vector index with exact k-nearest-neighbour search, plus canopy clustering.

Vectors are unit-normalized and compared by cosine distance ``1 - a.b``.
Search is an exact blocked linear scan; results are ordered by
``(distance, item_id)`` so ties are resolved the same way on every run.

On disk an index is two files: ``<stem>.vec`` holds a 20-byte header
(magic ``VTIX``, uint32 version, uint32 dim, uint64 count, little-endian)
followed by ``count * dim`` little-endian float32 values, and ``<stem>.ids``
lists one item id per line in row order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAGIC = b"VTIX"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
BLOCK_ROWS = 1 << 18

TIGHT = 0.15
LOOSE = 0.2


def distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(1.0 - a @ b, 0.0, 2.0))


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(m)):
        raise ValueError("cannot normalize zero or non-finite vectors")
    return m / norms


class FlatIndex:
    """Sealed, read-only collection of unit vectors keyed by item id."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        ids = list(ids)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 and len(ids) == 0:
            vectors = vectors.reshape(0, 0)
        if len(ids) != len(vectors):
            raise ValueError(f"{len(ids)} ids for {len(vectors)} vectors")
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique")
        self.ids = ids
        self.vectors = vectors
        self.dim = vectors.shape[1] if vectors.ndim == 2 else 0
        # rank of each row in ascending item-id order, used as the tie-breaker
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(ids))
        self._row = {item: i for i, item in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def vector(self, item_id: str) -> np.ndarray:
        return self.vectors[self._row[item_id]]

    def distances(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query dim {q.shape} does not match index dim {self.dim}")
        out = np.empty(len(self), dtype=np.float64)
        for lo in range(0, len(self), BLOCK_ROWS):
            hi = min(lo + BLOCK_ROWS, len(self))
            out[lo:hi] = 1.0 - self.vectors[lo:hi].astype(np.float64) @ q
        return np.clip(out, 0.0, 2.0)

    def knn(self, query, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if len(self) == 0:
            return []
        d = self.distances(query)
        if k < len(d):
            # keep every row tied with the k-th distance so the id tie-break is exact
            kth = np.partition(d, k - 1)[k - 1]
            cand = np.flatnonzero(d <= kth)
        else:
            cand = np.arange(len(d))
        cand = cand[np.lexsort((self._id_rank[cand], d[cand]))][:k]
        return [(self.ids[i], float(d[i])) for i in cand]

    def save(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        with open(stem.with_suffix(".vec"), "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, self.dim, len(self)))
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())
        with open(stem.with_suffix(".ids"), "w", encoding="utf-8") as fh:
            for item in self.ids:
                fh.write(item + "\n")

    @classmethod
    def load(cls, stem: str | Path, mmap: bool = True) -> "FlatIndex":
        stem = Path(stem)
        vec_path = stem.with_suffix(".vec")
        with open(vec_path, "rb") as fh:
            magic, version, dim, count = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != MAGIC or version != VERSION:
            raise ValueError(f"{vec_path} is not a version-{VERSION} vector file")
        ids = stem.with_suffix(".ids").read_text(encoding="utf-8").splitlines()
        if len(ids) != count:
            raise ValueError(f"{vec_path}: header says {count} rows, id map has {len(ids)}")
        if mmap and count:
            data = np.memmap(vec_path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(count, dim))
        else:
            raw = vec_path.read_bytes()[_HEADER.size:]
            data = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
        return cls(ids, data)


@dataclass(frozen=True)
class Canopy:
    center_item_id: str
    member_item_ids: tuple[str, ...]


def canopy_cluster(
    items,
    tight: float = TIGHT,
    loose: float = LOOSE,
    order_seed: int | None = None,
    ids: Sequence[str] | None = None,
    metric: Callable[[object, object], float] | None = None,
) -> list[Canopy]:
    """Single-pass canopy clustering.

    Candidates are visited in input order, or in a permutation drawn from
    ``order_seed``. The first remaining candidate becomes a center; its canopy
    holds every item (already consumed ones included) within ``loose``; every
    candidate within ``tight`` leaves the pool. ``items`` are unit vectors
    compared by cosine distance unless ``metric`` is given.
    """
    if not (0 < tight <= loose):
        raise ValueError(f"need 0 < tight <= loose, got tight={tight}, loose={loose}")
    n = len(items)
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    if len(ids) != n:
        raise ValueError("ids and items differ in length")
    if n == 0:
        return []

    if metric is None:
        mat = np.asarray(items, dtype=np.float64)

        def dist_from(i: int) -> np.ndarray:
            return 1.0 - mat @ mat[i]
    else:
        seq = list(items)

        def dist_from(i: int) -> np.ndarray:
            return np.array([metric(seq[i], other) for other in seq], dtype=np.float64)

    order = np.arange(n) if order_seed is None else np.random.default_rng(order_seed).permutation(n)
    alive = np.ones(n, dtype=bool)
    canopies = []
    cursor = 0
    while cursor < n:
        center = order[cursor]
        if not alive[center]:
            cursor += 1
            continue
        d = dist_from(center)
        members = np.flatnonzero(d <= loose)
        alive[d <= tight] = False
        alive[center] = False
        canopies.append(Canopy(ids[center], tuple(ids[m] for m in members)))
        cursor += 1
    return canopies
