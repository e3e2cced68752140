"""Classical per-pair change scores used as evaluation baselines.

Each scorer maps two images to a non-negative distance; a larger value means
the pair more likely contains a change.
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable
from urllib.parse import unquote, urlparse

import numpy as np
from PIL import Image, UnidentifiedImageError

from .index import distance

HOG_SIZE = 128
HOG_CELL = 8
HOG_BINS = 9
HOG_BLOCK = 2
HOG_EPS = 1e-5
HIST_BINS = 8


class ImageDecodeError(ValueError):
    pass


def load_image(image) -> Image.Image:
    """Accept a PIL image, an HxW / HxWx3 array, a file path or a ``file://`` URI."""
    if isinstance(image, Image.Image):
        return image
    if isinstance(image, np.ndarray):
        arr = image if image.dtype == np.uint8 else np.clip(image, 0, 255).astype(np.uint8)
        return Image.fromarray(arr)
    uri = str(image)
    parsed = urlparse(uri)
    if parsed.scheme == "file":
        path = Path(unquote(parsed.path))
    elif parsed.scheme == "":
        path = Path(uri)
    else:
        raise ImageDecodeError(f"cannot decode image {uri}: unsupported scheme {parsed.scheme!r}")
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageDecodeError(f"cannot decode image {uri}: {exc}") from exc


def hog_descriptor(gray: np.ndarray) -> np.ndarray:
    """HoG of a grayscale array: central-difference gradients (zero on the border),
    8x8-pixel cells, 9 unsigned orientation bins with magnitude votes, 2x2-cell
    blocks at one-cell stride, each block L2-normalized, concatenated row-major."""
    g = np.asarray(gray, dtype=np.float64)
    h, w = (g.shape[0] // HOG_CELL) * HOG_CELL, (g.shape[1] // HOG_CELL) * HOG_CELL
    g = g[:h, :w]
    gx = np.zeros_like(g)
    gy = np.zeros_like(g)
    gx[:, 1:-1] = g[:, 2:] - g[:, :-2]
    gy[1:-1, :] = g[2:, :] - g[:-2, :]
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.minimum((ang // (180.0 / HOG_BINS)).astype(int), HOG_BINS - 1)

    ncy, ncx = h // HOG_CELL, w // HOG_CELL
    cell_of = (np.arange(h)[:, None] // HOG_CELL) * ncx + np.arange(w)[None, :] // HOG_CELL
    flat = (cell_of * HOG_BINS + bins).ravel()
    hist = np.bincount(flat, weights=mag.ravel(), minlength=ncy * ncx * HOG_BINS).reshape(ncy, ncx, HOG_BINS)

    blocks = []
    for by in range(ncy - HOG_BLOCK + 1):
        for bx in range(ncx - HOG_BLOCK + 1):
            v = hist[by : by + HOG_BLOCK, bx : bx + HOG_BLOCK].ravel()
            blocks.append(v / np.sqrt(v @ v + HOG_EPS**2))
    return np.concatenate(blocks) if blocks else np.zeros(0)


def _grayscale(image) -> np.ndarray:
    im = load_image(image).convert("L").resize((HOG_SIZE, HOG_SIZE), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return 1.0
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def hog_pair_score(img_a, img_b) -> float:
    return cosine_distance(hog_descriptor(_grayscale(img_a)), hog_descriptor(_grayscale(img_b)))


def color_histogram(image) -> np.ndarray:
    rgb = np.asarray(load_image(image).convert("RGB"), dtype=np.int64).reshape(-1, 3)
    step = 256 // HIST_BINS
    idx = (rgb[:, 0] // step) * HIST_BINS * HIST_BINS + (rgb[:, 1] // step) * HIST_BINS + rgb[:, 2] // step
    hist = np.bincount(idx, minlength=HIST_BINS**3).astype(np.float64)
    return hist / hist.sum()


def color_hist_pair_score(img_a, img_b) -> float:
    return float(np.abs(color_histogram(img_a) - color_histogram(img_b)).sum())


def embedding_pair_score(img_a: str, img_b: str, gateway, mode: str = "image") -> float:
    """Cosine distance between per-image vectors.

    ``mode="image"`` asks the backend for image embeddings directly;
    ``mode="caption"`` captions each image and embeds the caption text.
    """
    if mode == "image":
        va, vb = gateway.embed_image(img_a), gateway.embed_image(img_b)
    elif mode == "caption":
        va = gateway.embed_text(gateway.caption_image(img_a))
        vb = gateway.embed_text(gateway.caption_image(img_b))
    else:
        raise ValueError(f"unknown embedding mode {mode!r}")
    return distance(va, vb)


def make_pair_scorer(name: str, gateway=None) -> Callable[[str, str], float]:
    if name == "hog":
        return hog_pair_score
    if name == "color_hist":
        return color_hist_pair_score
    if name in ("embedding", "caption"):
        if gateway is None:
            raise ValueError(f"{name} scorer needs a gateway")
        mode = "image" if name == "embedding" else "caption"
        return lambda a, b: embedding_pair_score(a, b, gateway, mode)
    raise ValueError(f"unknown pair scorer {name!r}")
