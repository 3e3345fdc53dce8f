"""Dataset model, binary dataset format, text ensembling and synthetic data.

A dataset holds frozen teacher embeddings per image (patch matrix and
global vector), multi-hot labels over ``seen + unseen`` categories (training
images never carry unseen labels) and one ensembled text embedding per
category.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

DATASET_MAGIC = b"C2DS01"
DATASET_VERSION = 1
_PROVENANCE = {"ingested": 0, "synthetic": 1}


class DatasetFormatError(ValueError):
    code = "format"


class BadMagicError(DatasetFormatError):
    code = "magic"


class VersionError(DatasetFormatError):
    code = "version"


class DimensionError(DatasetFormatError):
    code = "dimension"


class TruncatedError(DatasetFormatError):
    code = "truncated"


class DegenerateInputError(ValueError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


@dataclass
class CategorySpace:
    seen: List[str]
    unseen: List[str] = field(default_factory=list)

    def __post_init__(self):
        names = self.names
        if len(set(names)) != len(names):
            raise ValueError("category names must be unique across seen and unseen")
        if any(not n for n in names):
            raise ValueError("empty category name")

    @property
    def names(self) -> List[str]:
        return list(self.seen) + list(self.unseen)

    @property
    def n_seen(self) -> int:
        return len(self.seen)

    @property
    def n_unseen(self) -> int:
        return len(self.unseen)

    def __len__(self) -> int:
        return len(self.seen) + len(self.unseen)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class DatasetManifest:
    dim: int
    patches: int
    n_train: int
    n_test: int
    categories: CategorySpace
    provenance: str = "synthetic"
    seed: Optional[int] = None
    templates: int = 1


@dataclass
class SampleEmbeddings:
    image_id: str
    teacher_patches: np.ndarray
    teacher_global: np.ndarray
    labels: np.ndarray


@dataclass
class Split:
    """Samples of one split stored as stacked arrays."""

    ids: List[str]
    patches: np.ndarray   # (N, P, D)
    globals: np.ndarray   # (N, D)
    labels: np.ndarray    # (N, C) uint8 over seen + unseen

    def __len__(self) -> int:
        return len(self.ids)

    def sample(self, i: int) -> SampleEmbeddings:
        return SampleEmbeddings(self.ids[i], self.patches[i], self.globals[i], self.labels[i])


@dataclass
class Dataset:
    manifest: DatasetManifest
    train: Split
    test: Split
    text: np.ndarray      # (C, D) TextBank, rows seen then unseen

    @property
    def categories(self) -> CategorySpace:
        return self.manifest.categories

    def validate(self) -> None:
        man = self.manifest
        C = len(man.categories)
        if self.text.shape != (C, man.dim):
            raise DimensionError(f"text bank shape {self.text.shape} != ({C}, {man.dim})")
        for split, expected in ((self.train, man.n_train), (self.test, man.n_test)):
            if len(split) != expected:
                raise DimensionError(f"split holds {len(split)} samples, manifest says {expected}")
            if len(split) and split.patches.shape[1:] != (man.patches, man.dim):
                raise DimensionError(f"patch block shape {split.patches.shape[1:]} disagrees with manifest")
        if man.n_train and self.train.labels[:, man.categories.n_seen:].any():
            raise ValueError("training labels must be restricted to seen categories")


def ensemble_text(per_template: np.ndarray) -> np.ndarray:
    """Sum template embeddings of one category and L2-normalize."""
    per_template = np.atleast_2d(np.asarray(per_template, dtype=np.float64))
    if per_template.shape[0] < 1:
        raise ValueError("need at least one template embedding")
    if not np.all(np.isfinite(per_template)):
        raise ValueError("template embeddings must be finite")
    total = per_template.sum(axis=0)
    norm = np.linalg.norm(total)
    if norm == 0:
        raise DegenerateInputError("template embeddings sum to the zero vector")
    return total / norm


def from_arrays(categories: CategorySpace, train_patches, train_globals, train_labels,
                test_patches, test_globals, test_labels, template_embeddings,
                train_ids: Optional[Sequence[str]] = None,
                test_ids: Optional[Sequence[str]] = None) -> Dataset:
    """Build a dataset from precomputed embeddings.

    ``template_embeddings`` is ``(C, T, D)``: T prompt-template embeddings per
    category, ensembled here.
    """
    tmpl = np.asarray(template_embeddings, dtype=np.float64)
    text = np.stack([ensemble_text(t) for t in tmpl])
    tr_p = np.asarray(train_patches, dtype=np.float64)
    te_p = np.asarray(test_patches, dtype=np.float64)
    dim = text.shape[1]
    n_p = tr_p.shape[1] if len(tr_p) else te_p.shape[1]
    train = Split(list(train_ids or [f"train-{i:06d}" for i in range(len(tr_p))]), tr_p,
                  np.asarray(train_globals, dtype=np.float64), np.asarray(train_labels, dtype=np.uint8))
    test = Split(list(test_ids or [f"test-{i:06d}" for i in range(len(te_p))]), te_p,
                 np.asarray(test_globals, dtype=np.float64), np.asarray(test_labels, dtype=np.uint8))
    man = DatasetManifest(dim, n_p, len(train), len(test), categories, "ingested", None, tmpl.shape[1])
    ds = Dataset(man, train, test, text)
    ds.validate()
    return ds


# -- binary format ----------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dataset_bytes(ds: Dataset) -> bytes:
    man = ds.manifest
    cats = man.categories
    C = len(cats)
    out = [DATASET_MAGIC, struct.pack("<I", DATASET_VERSION)]
    out.append(struct.pack("<7I", man.dim, man.patches, man.n_train, man.n_test,
                           cats.n_seen, cats.n_unseen, man.templates))
    out.append(struct.pack("<IQ", _PROVENANCE[man.provenance], man.seed or 0))
    out.extend(_pack_str(n) for n in cats.names)
    for split in (ds.train, ds.test):
        for i, sid in enumerate(split.ids):
            out.append(_pack_str(sid))
            p = split.patches[i]
            out.append(struct.pack("<II", *p.shape))
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(split.globals[i], dtype="<f8").tobytes())
            out.append(np.packbits(split.labels[i][:C].astype(np.uint8), bitorder="little").tobytes())
    out.append(struct.pack("<II", *ds.text.shape))
    out.append(np.ascontiguousarray(ds.text, dtype="<f8").tobytes())
    return b"".join(out)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedError(f"file truncated at byte {len(self.buf)} (needed {self.off + n})")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def parse_dataset(buf: bytes) -> Dataset:
    r = _Reader(buf)
    if len(buf) < len(DATASET_MAGIC) or r.take(len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise BadMagicError("not a C2DS01 dataset file")
    (version,) = r.unpack("<I")
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    dim, n_patch, n_train, n_test, n_seen, n_unseen, templates = r.unpack("<7I")
    prov_code, seed = r.unpack("<IQ")
    provenance = {v: k for k, v in _PROVENANCE.items()}.get(prov_code)
    if provenance is None:
        raise DatasetFormatError(f"unknown provenance code {prov_code}")
    names = [r.string() for _ in range(n_seen + n_unseen)]
    cats = CategorySpace(names[:n_seen], names[n_seen:])
    C = len(names)
    nbytes = (C + 7) // 8

    def read_split(n):
        ids, patches, globs, labels = [], np.empty((n, n_patch, dim)), np.empty((n, dim)), np.zeros((n, C), np.uint8)
        for i in range(n):
            sid = r.string()
            rows, cols = r.unpack("<II")
            if (rows, cols) != (n_patch, dim):
                raise DimensionError(
                    f"sample {sid!r} has a {rows}x{cols} patch block, manifest expects {n_patch}x{dim}")
            ids.append(sid)
            patches[i] = r.f64(rows * cols).reshape(rows, cols)
            globs[i] = r.f64(dim)
            labels[i] = np.unpackbits(np.frombuffer(r.take(nbytes), np.uint8), bitorder="little")[:C]
        return Split(ids, patches, globs, labels)

    train = read_split(n_train)
    test = read_split(n_test)
    rows, cols = r.unpack("<II")
    if (rows, cols) != (C, dim):
        raise DimensionError(f"text bank is {rows}x{cols}, expected {C}x{dim}")
    text = r.f64(rows * cols).reshape(rows, cols)
    if r.off != len(buf):
        raise DatasetFormatError("trailing bytes after text bank")
    man = DatasetManifest(dim, n_patch, n_train, n_test, cats, provenance,
                          seed if provenance == "synthetic" else None, templates)
    ds = Dataset(man, train, test, text)
    ds.validate()
    return ds


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


# -- synthetic generator ----------------------------------------------------

@dataclass
class SyntheticConfig:
    seed: int
    dim: int = 32
    patches: int = 16
    n_seen: int = 40
    n_unseen: int = 10
    n_train: int = 2000
    n_test: int = 500
    labels_per_image: int = 3
    n_adj: int = 4
    patch_noise: float = 0.6
    text_noise: float = 0.6
    text_noise_spread: float = 0.0
    background: float = 0.25
    cooccur: float = 0.8
    parents: int = 2
    parent_mix: float = 0.8
    unseen_first: float = 0.5

    def check(self) -> None:
        if self.n_seen < 1 or self.labels_per_image < 1 or self.n_seen < self.labels_per_image:
            raise ValueError("need n_seen >= labels_per_image >= 1")
        if self.n_unseen > 0 and self.n_test == 0:
            raise ValueError("unseen categories need test images (n_test = 0 with n_unseen > 0)")
        if self.dim < 1 or self.patches < 1:
            raise ValueError("dim and patches must be positive")
        if self.patches < self.labels_per_image + int(round(self.background * self.patches)):
            raise ValueError("too few patches for the requested labels and background share")
        if self.n_adj < 1:
            raise ValueError("n_adj must be positive")
        if not 0.0 <= self.text_noise_spread <= 1.0:
            raise ValueError("text_noise_spread must lie in [0, 1]")
        if self.n_unseen and self.parents > self.n_seen:
            raise ValueError("more parents than seen categories")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def top_similar_seen(protos: np.ndarray, n_seen: int, n_adj: int) -> List[List[int]]:
    """For every row, the ``n_adj`` most cosine-similar seen rows other than itself.

    Ties go to the lower index.
    """
    unit = _unit(protos)
    sims = unit @ unit[:n_seen].T
    out = []
    for c in range(len(protos)):
        cand = [j for j in range(n_seen) if j != c]
        order = sorted(cand, key=lambda j: (-sims[c, j], j))
        out.append(order[:min(n_adj, len(cand))])
    return out


def _allocate(weights: np.ndarray, total: int) -> np.ndarray:
    """Split ``total`` slots proportional to ``weights`` with at least one each."""
    k = len(weights)
    counts = np.ones(k, dtype=int)
    rest = total - k
    if rest > 0:
        share = weights / weights.sum() * rest
        base = np.floor(share).astype(int)
        counts += base
        left = rest - base.sum()
        frac_order = np.argsort(-(share - base), kind="stable")
        counts[frac_order[:left]] += 1
    return counts


def generate_synthetic(cfg: SyntheticConfig):
    """Seeded stand-in for CLIP features of a multi-label dataset.

    Returns ``(dataset, truth_neighbors)`` where ``truth_neighbors[c]`` lists the
    seen categories most similar to category c by prototype cosine.
    Unseen prototypes are mixed from a few seen "parents", and later labels of
    an image are drawn from the first label's true neighbours with
    probability ``cooccur``, so relations carry transferable signal.
    """
    cfg.check()
    rng = rng_stream(cfg.seed, "data")
    D, P, S, U = cfg.dim, cfg.patches, cfg.n_seen, cfg.n_unseen
    C = S + U

    protos = _unit(rng.standard_normal((C, D)))
    for u in range(S, C):
        parents = rng.choice(S, size=cfg.parents, replace=False)
        mix = _unit(protos[parents].mean(axis=0))
        protos[u] = _unit(cfg.parent_mix * mix + (1 - cfg.parent_mix) * protos[u])
    truth = top_similar_seen(protos, S, cfg.n_adj)

    # per-category text/image misalignment: text_noise * U[1 - spread, 1 + spread]
    t_noise = cfg.text_noise * (1.0 + cfg.text_noise_spread * rng.uniform(-1.0, 1.0, size=(C, 1)))
    text = _unit(protos + t_noise * rng.standard_normal((C, D)) / np.sqrt(D))
    size_w = rng.uniform(0.5, 1.5, size=C)
    n_bg = int(round(cfg.background * P))

    def draw_labels(pool: np.ndarray, test: bool) -> List[int]:
        if test and U and rng.random() < cfg.unseen_first:
            first = int(rng.integers(S, C))
        else:
            first = int(rng.choice(pool))
        chosen = [first]
        while len(chosen) < cfg.labels_per_image:
            nbrs = [j for j in truth[first] if j not in chosen]
            if nbrs and rng.random() < cfg.cooccur:
                chosen.append(int(rng.choice(nbrs)))
            else:
                rest = [j for j in pool if j not in chosen]
                chosen.append(int(rng.choice(rest)))
        return chosen

    def make_split(n: int, prefix: str, test: bool) -> Split:
        pool = np.arange(C if test else S)
        patches = np.empty((n, P, D))
        globs = np.empty((n, D))
        labels = np.zeros((n, C), np.uint8)
        for i in range(n):
            chosen = draw_labels(pool, test)
            labels[i, chosen] = 1
            counts = _allocate(size_w[chosen], P - n_bg)
            rows = []
            for c, k in zip(chosen, counts):
                rows.append(protos[c] + cfg.patch_noise * rng.standard_normal((k, D)) / np.sqrt(D))
            if n_bg:
                rows.append(rng.standard_normal((n_bg, D)) / np.sqrt(D))
            block = np.concatenate(rows)[rng.permutation(P)]
            patches[i] = block
            globs[i] = _unit(block.mean(axis=0))
        return Split([f"{prefix}-{i:06d}" for i in range(n)], patches, globs, labels)

    train = make_split(cfg.n_train, "train", False)
    test = make_split(cfg.n_test, "test", True)
    cats = CategorySpace([f"seen{i:03d}" for i in range(S)], [f"unseen{i:03d}" for i in range(U)])
    man = DatasetManifest(D, P, cfg.n_train, cfg.n_test, cats, "synthetic", cfg.seed, 1)
    ds = Dataset(man, train, test, text)
    ds.validate()
    return ds, truth, protos
