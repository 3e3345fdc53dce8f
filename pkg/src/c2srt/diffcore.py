"""Dense double-precision parameter storage, AdamW and gradient checking.

Parameters are plain 2-D ``float64`` numpy arrays (vectors are stored as
``1 x n`` rows). Gradients are accumulated by hand-written backward passes in
the model modules; this module only owns storage, the optimizer update, the
binary checkpoint format and the finite-difference harness that verifies
those backward passes.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"C2SRT01"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when two arrays that must agree in shape do not."""


class ConfigurationError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class CheckpointError(ValueError):
    pass


def tensor2(data, rows: Optional[int] = None, cols: Optional[int] = None) -> np.ndarray:
    """Validate and return ``data`` as a finite 2-D float64 array."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 1 and rows is None:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError("tensor contains non-finite entries")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch between {what}: {a.shape} vs {b.shape}")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("betas must lie in (0, 1)")
        if self.beta1 >= self.beta2:
            raise ConfigurationError("beta1 must be smaller than beta2")
        if self.eps <= 0:
            raise ConfigurationError("epsilon must be positive")


@dataclass
class ParamStore:
    """Named parameters with gradient accumulators and AdamW moments.

    Insertion order is significant: it fixes the checkpoint layout.
    """

    params: Dict[str, np.ndarray] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        arr = tensor2(value)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list:
        return list(self.params)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        g = self.grads[name]
        grad = np.asarray(grad, dtype=np.float64)
        if grad.ndim == 1 and g.shape[0] == 1:
            grad = grad.reshape(1, -1)
        check_same_shape(g, grad, f"gradient for {name!r}")
        g += grad

    def copy(self) -> "ParamStore":
        out = ParamStore(step=self.step)
        for name in self.params:
            out.params[name] = self.params[name].copy()
            out.grads[name] = self.grads[name].copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        return out

    def num_values(self) -> int:
        return sum(p.size for p in self.params.values())


def zero_grads(store: ParamStore) -> ParamStore:
    for g in store.grads.values():
        g.fill(0.0)
    return store


def adamw_step(store: ParamStore, cfg: OptimConfig) -> ParamStore:
    """One decoupled-weight-decay Adam update with bias correction.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    t = store.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, theta in store.params.items():
        g = store.grads[name]
        if g.shape != theta.shape:
            raise ConfigurationError(
                f"gradient shape {g.shape} does not match parameter {name!r} {theta.shape}")
        m = cfg.beta1 * store.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * store.v[name] + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * theta
        store.params[name] = theta - cfg.lr * update
        store.m[name] = m
        store.v[name] = v
    store.step = t
    return store


# -- checkpoints -------------------------------------------------------------

def checkpoint_bytes(store: ParamStore) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(store.params))]
    for name, arr in store.params.items():
        raw = name.encode("utf-8")
        rows, cols = arr.shape
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(store: ParamStore, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(store))


def parse_checkpoint(buf: bytes) -> ParamStore:
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[off:off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(8 * rows * cols), dtype="<f8").astype(np.float64)
        store.add(name, data.reshape(rows, cols))
    if off != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return store


def load_checkpoint(path) -> ParamStore:
    return parse_checkpoint(Path(path).read_bytes())


# -- finite differences ------------------------------------------------------

@dataclass
class GradCheckReport:
    eps: float
    tol: float
    max_rel_err: Dict[str, float]
    skipped: Dict[str, int]
    checked: int

    @property
    def worst(self) -> tuple:
        if not self.max_rel_err:
            return ("", 0.0)
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]

    @property
    def passed(self) -> bool:
        return all(err < self.tol for err in self.max_rel_err.values())

    def failing(self) -> list:
        return [n for n, e in self.max_rel_err.items() if not e < self.tol]


LossFn = Callable[[ParamStore, bool], float]


def finite_diff_check(loss_fn: LossFn, store: ParamStore, eps: float = 1e-5,
                      tol: float = 1e-4, names: Optional[Iterable[str]] = None,
                      kink_ratio: float = 1e-2) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(store, backward)`` must return the loss and, when ``backward``
    is true, accumulate analytic gradients into ``store.grads``.

    An entry sits on a kink (and is skipped with a warning) when the loss is
    visibly non-smooth within ``eps`` of it: either the second difference is
    large, or, for an entry that would otherwise fail, the central difference
    at ``eps`` disagrees with the one at ``eps / 10`` by more than ``tol``.
    Discrepancies no larger than the rounding noise of the central difference
    itself (a few ulps of the loss divided by ``2 eps``) count as zero;
    without this, entries whose true gradient vanishes report one ulp of
    noise divided by the 1e-8 floor.
    """
    zero_grads(store)
    base = loss_fn(store, True)
    if not np.isfinite(base):
        raise NumericalError("loss is not finite at the base point")
    analytic = {n: g.copy() for n, g in store.grads.items()}

    max_err: Dict[str, float] = {}
    skipped: Dict[str, int] = {}
    checked = 0
    def central(idx, theta, h):
        orig = theta[idx]
        theta[idx] = orig + h
        f_plus = loss_fn(store, False)
        theta[idx] = orig - h
        f_minus = loss_fn(store, False)
        theta[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError(f"non-finite loss while perturbing {name}{list(idx)}")
        return f_plus, f_minus, (f_plus - f_minus) / (2 * h)

    for name in (names if names is not None else store.names()):
        theta = store.params[name]
        worst = 0.0
        n_skip = 0
        for idx in np.ndindex(theta.shape):
            f_plus, f_minus, g_central = central(idx, theta, eps)
            second = f_plus - 2 * base + f_minus
            if abs(second) > kink_ratio * eps * max(1.0, abs(g_central)):
                n_skip += 1
                continue
            noise = 8 * np.finfo(np.float64).eps * max(abs(f_plus), abs(f_minus), 1.0) / (2 * eps)
            diff = abs(analytic[name][idx] - g_central)
            err = 0.0 if diff <= noise else diff / max(abs(g_central), 1e-8)
            if err >= tol:
                g_fine = central(idx, theta, eps / 10)[2]
                if abs(g_fine - g_central) / max(abs(g_central), 1e-8) > tol:
                    n_skip += 1
                    continue
            worst = max(worst, err)
            checked += 1
        max_err[name] = worst
        if n_skip:
            skipped[name] = n_skip
            logger.warning("%s: %d entries at non-differentiable points skipped", name, n_skip)
    return GradCheckReport(eps=eps, tol=tol, max_rel_err=max_err, skipped=skipped, checked=checked)
