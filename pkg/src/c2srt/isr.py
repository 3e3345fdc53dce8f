"""Adaptive per-category patch selection and pooling.

For one image and one category the patches are scored against the category
text embedding (cosine, scaled, softmax), sorted, and the shortest prefix
whose score mass reaches ``mass_threshold`` is kept (capped at
``max_patches``). The kept patches are mean-pooled into a local feature.
Selection is a hard choice: in the backward pass it is a constant.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class IsrConfig:
    mass_threshold: float = 0.5
    max_patches: int = 32
    inverse_temperature: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.mass_threshold <= 1.0:
            raise ValueError("mass_threshold must lie in (0, 1]")
        if self.max_patches < 1:
            raise ValueError("max_patches must be positive")
        if self.inverse_temperature <= 0:
            raise ValueError("inverse_temperature must be positive")


@dataclass
class IsrSelection:
    category: int
    indices: List[int]
    scores: np.ndarray
    local_feature: np.ndarray
    zero_norm_patches: int = 0


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def cosine_rows(rows: np.ndarray, vec: np.ndarray) -> tuple:
    """Cosine of every row against ``vec``; zero-norm rows score 0.

    Returns ``(cosines, n_zero_rows)``.
    """
    vnorm = np.linalg.norm(vec)
    if vnorm == 0:
        raise ValueError("text embedding has zero norm")
    rnorm = np.linalg.norm(rows, axis=-1)
    zero = rnorm == 0
    cos = (rows @ vec) / (np.where(zero, 1.0, rnorm) * vnorm)
    cos[zero] = 0.0
    return cos, int(zero.sum())


def patch_scores(patches: np.ndarray, text: np.ndarray, cfg: IsrConfig) -> np.ndarray:
    cos, n_zero = cosine_rows(np.asarray(patches, dtype=np.float64), np.asarray(text, dtype=np.float64))
    if n_zero:
        logger.debug("%d zero-norm patches scored as orthogonal", n_zero)
    return _softmax(cfg.inverse_temperature * cos)


def select_patches(scores: Sequence[float], cfg: IsrConfig) -> List[int]:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score vector")
    order = np.argsort(-scores, kind="stable")
    cum = np.cumsum(scores[order])
    hits = np.nonzero(cum >= cfg.mass_threshold)[0]
    n = hits[0] + 1 if hits.size else scores.size
    n = max(1, min(n, cfg.max_patches, scores.size))
    return order[:n].tolist()


def pool_local(patches: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    if len(indices) == 0:
        raise ValueError("cannot pool an empty selection")
    return np.asarray(patches, dtype=np.float64)[list(indices)].mean(axis=0)


def refine(patches: np.ndarray, text: np.ndarray, cfg: IsrConfig, category: int = 0) -> IsrSelection:
    patches = np.asarray(patches, dtype=np.float64)
    _, n_zero = cosine_rows(patches, np.asarray(text, dtype=np.float64))
    scores = patch_scores(patches, text, cfg)
    idx = select_patches(scores, cfg)
    return IsrSelection(category, idx, scores, pool_local(patches, idx), n_zero)


# -- batched path used by the model -------------------------------------------

def batch_selection_weights(patches: np.ndarray, texts: np.ndarray, cfg: IsrConfig) -> np.ndarray:
    """Pooling weights for every (image, category) pair.

    ``patches`` is ``(B, P, D)``, ``texts`` is ``(C, D)``. Returns ``(B, C, P)``
    with ``1/n`` on the selected patches and 0 elsewhere, so the local
    features are ``einsum('bcp,bpd->bcd', weights, patches)``.
    """
    P = patches.shape[1]
    pn = np.linalg.norm(patches, axis=-1)                    # (B, P)
    tn = np.linalg.norm(texts, axis=-1)                      # (C,)
    if np.any(tn == 0):
        raise ValueError("text embedding has zero norm")
    cos = np.matmul(texts, patches.transpose(0, 2, 1))
    cos /= np.where(pn == 0, 1.0, pn)[:, None, :] * tn[None, :, None]
    cos[np.broadcast_to((pn == 0)[:, None, :], cos.shape)] = 0.0
    scores = _softmax(cfg.inverse_temperature * cos, axis=-1)

    order = np.argsort(-scores, axis=-1, kind="stable")
    cum = np.cumsum(np.take_along_axis(scores, order, axis=-1), axis=-1)
    reached = cum >= cfg.mass_threshold
    first = np.where(reached.any(axis=-1), reached.argmax(axis=-1) + 1, P)
    n = np.clip(first, 1, min(cfg.max_patches, P))          # (B, C)

    rank = np.argsort(order, axis=-1)
    mask = rank < n[..., None]
    return mask / n[..., None]


def selection_counts(weights: np.ndarray) -> np.ndarray:
    """Number of selected patches per (image, category)."""
    return (weights > 0).sum(axis=-1)


def write_selection_csv(path, names: Sequence[str], weights: np.ndarray) -> None:
    """Per-category mean selection size, one row per category."""
    counts = selection_counts(weights).mean(axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "mean_n"])
        for name, c in zip(names, counts):
            w.writerow([name, f"{c:.6f}"])
