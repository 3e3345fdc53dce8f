"""Ranking and distillation losses, the combined objective and training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .dataio import Dataset, rng_stream
from .diffcore import NumericalError, OptimConfig, ParamStore, adamw_step, zero_grads
from .isr import IsrConfig
from .istgat import Flags, GraphIndex, ModelConfig, backward, forward, init_params
from .relgraph import RelationGraph

logger = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lam: float = 0.5
    margin: float = 1.0
    enable_isr: bool = True
    enable_ist: bool = True
    enable_dist: bool = True
    form: str = "prose"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.form not in ("prose", "printed"):
            raise ValueError("loss form must be 'prose' or 'printed'")

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.enable_dist else 0.0

    @property
    def flags(self) -> Flags:
        return Flags(isr=self.enable_isr, ist=self.enable_ist)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)


def _check_labels(labels: np.ndarray) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")


def ranking_loss(scores: np.ndarray, labels: np.ndarray, margin: float = 1.0, form: str = "prose"):
    """Pairwise hinge over (positive, negative) pairs of every row.

    ``prose`` penalizes ``max(s_neg - s_pos + margin, 0)`` (positives must
    beat negatives by the margin); ``printed`` swaps the orientation. Rows
    without both a positive and a negative contribute 0. Returns per-row
    losses ``(B,)`` and their gradient ``(B, C)`` w.r.t. the scores; the
    subgradient at the hinge corner is 0.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels))
    _check_labels(labels)
    pos = labels.astype(bool)
    pair = pos[:, :, None] & ~pos[:, None, :]               # [b, p, n]
    diff = scores[:, None, :] - scores[:, :, None]          # s_n - s_p
    if form == "printed":
        diff = -diff
    viol = diff + margin
    active = pair & (viol > 0)
    loss = np.where(active, viol, 0.0).sum(axis=(1, 2))
    act = active.astype(np.float64)
    sign = 1.0 if form == "prose" else -1.0
    grad = sign * (act.sum(axis=1) - act.sum(axis=2))
    return loss, grad


def distillation_loss(student: np.ndarray, teacher: np.ndarray):
    """L1 distance per row and its subgradient (0 at exact ties)."""
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if student.shape != teacher.shape:
        raise ValueError("student and teacher features differ in shape")
    d = student - teacher
    return np.abs(d).sum(axis=-1), np.sign(d)


@dataclass
class Model:
    """Parameters plus the static configuration needed to run them."""

    store: ParamStore
    cfg: ModelConfig
    isr: IsrConfig
    loss: LossConfig

    def scores(self, patches, globals_, text, graph: Optional[RelationGraph], batch: int = 256):
        gi = GraphIndex(graph) if (self.loss.enable_ist and graph is not None) else None
        out = []
        for i in range(0, len(patches), batch):
            s, _, _ = forward(self.store, self.cfg, self.isr, patches[i:i + batch], globals_[i:i + batch],
                              text, gi, self.loss.flags)
            out.append(s)
        return np.concatenate(out) if out else np.zeros((0, len(text)))

    def student_global(self, globals_):
        return globals_ @ self.store["adapter.A"].T + self.store["adapter.b"][0]


@dataclass
class LossParts:
    total: float
    cls: float
    dist: float


def total_loss(model: Model, patches, globals_, labels, text, gi: Optional[GraphIndex],
               backward_pass: bool = True) -> LossParts:
    """Batch mean of ``L_cls + lambda * L_dist``; accumulates gradients if asked."""
    lc = model.loss
    scores, G, cache = forward(model.store, model.cfg, model.isr, patches, globals_, text, gi, lc.flags)
    cls, dscores = ranking_loss(scores, labels, lc.margin, lc.form)
    dist, dG = distillation_loss(G, globals_)
    B = len(patches)
    lam = lc.effective_lambda
    total = float(cls.mean() + lam * dist.mean())
    if not np.isfinite(total):
        raise NumericalError(f"non-finite loss (cls={cls.mean()}, dist={dist.mean()})")
    if backward_pass:
        backward(model.store, cache, dscores / B, dG * (lam / B) if lam else None)
    return LossParts(total, float(cls.mean()), float(dist.mean()))


@dataclass
class EpochLog:
    epoch: int
    mean_cls: float
    mean_dist: float
    total: float


def new_model(mcfg: ModelConfig, isr_cfg: IsrConfig, loss_cfg: LossConfig, seed: int) -> Model:
    return Model(init_params(mcfg, rng_stream(seed, "init")), mcfg, isr_cfg, loss_cfg)


def train(dataset: Dataset, graph: Optional[RelationGraph], tcfg: TrainConfig, model: Model,
          progress=None) -> List[EpochLog]:
    """Train on seen categories only; deterministic given ``tcfg.seed``."""
    S = dataset.categories.n_seen
    text = dataset.text[:S]
    split = dataset.train
    labels = split.labels[:, :S]
    gi = None
    if model.loss.enable_ist:
        if graph is None:
            raise ValueError("IST enabled but no relation graph given")
        gi = GraphIndex(graph.restrict(S))
    rng = rng_stream(tcfg.seed, "shuffle")
    logs = []
    n = len(split)
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        tot = cls = dist = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = np.sort(order[start:start + tcfg.batch_size])
            zero_grads(model.store)
            parts = total_loss(model, split.patches[idx], split.globals[idx], labels[idx], text, gi)
            adamw_step(model.store, tcfg.optim)
            w = len(idx) / n
            tot += parts.total * w
            cls += parts.cls * w
            dist += parts.dist * w
        logs.append(EpochLog(epoch + 1, cls, dist, tot))
        logger.info("epoch %d: cls %.4f dist %.4f total %.4f", epoch + 1, cls, dist, tot)
        if progress:
            progress(logs[-1])
    return logs


def write_loss_log(path, logs: List[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_cls", "mean_dist", "total"])
        for e in logs:
            w.writerow([e.epoch, repr(e.mean_cls), repr(e.mean_dist), repr(e.total)])
