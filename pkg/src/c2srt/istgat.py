"""Vision adapter, node initialization, multi-head GATv2 and prediction.

Shapes used throughout (batched over images):

    B images, P patches, D embedding width, C graph nodes (categories),
    M heads, E edges (sorted by target, self-edge first per target).

All matrices are stored ``(out, in)`` and applied as ``x @ W.T``. Every
forward function returns a cache consumed by its backward counterpart;
backwards accumulate into ``ParamStore.grads``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .diffcore import ConfigurationError, ParamStore, ShapeError
from .isr import IsrConfig, batch_selection_weights
from .relgraph import RelationGraph


@dataclass
class ModelConfig:
    dim: int
    layers: int = 2
    heads: int = 2
    hidden: Optional[int] = None
    leaky_slope: float = 0.2

    def widths(self) -> List[tuple]:
        """``(in, out)`` width of every GAT layer; the last one outputs ``dim``."""
        hid = self.hidden or self.dim
        dims = [self.dim] + [hid] * (self.layers - 1) + [self.dim]
        return list(zip(dims[:-1], dims[1:]))

    def check(self) -> None:
        if self.layers < 1 or self.heads < 1:
            raise ConfigurationError("need at least one layer and one head")
        for _, d_out in self.widths():
            if d_out % self.heads:
                raise ConfigurationError(f"{self.heads} heads do not divide layer width {d_out}")

    def to_dict(self) -> dict:
        return {"dim": self.dim, "layers": self.layers, "heads": self.heads,
                "hidden": self.hidden or self.dim, "leaky_slope": self.leaky_slope}


def _glorot(rng, rows, cols, scale=1.0):
    lim = scale * np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-lim, lim, size=(rows, cols))


def _eye_block(rows, cols, offset=0):
    out = np.zeros((rows, cols))
    for r in range(rows):
        c = r + offset
        if c < cols:
            out[r, c] = 1.0
    return out


def init_params(cfg: ModelConfig, rng: np.random.Generator, noise: float = 0.1) -> ParamStore:
    """Fresh parameters: identity adapter, near-identity feature maps.

    The GAT output maps start as identity blocks so an untrained layer passes
    attention-weighted neighbour features through.
    """
    cfg.check()
    D, M = cfg.dim, cfg.heads
    store = ParamStore()
    store.add("adapter.A", np.eye(D))
    store.add("adapter.b", np.zeros((1, D)))
    store.add("ffn_in.W", 0.5 * np.hstack([np.eye(D), np.eye(D)]) + noise * _glorot(rng, D, 2 * D))
    store.add("ffn_in.b", np.zeros((1, D)))
    for l, (d_in, d_out) in enumerate(cfg.widths()):
        dh = d_out // M
        if M > 1:
            store.add(f"gat{l}.head.W", np.vstack([np.eye(d_in)] * M) + noise * _glorot(rng, M * d_in, d_in))
            store.add(f"gat{l}.head.b", np.zeros((1, M * d_in)))
        for m in range(M):
            p = f"gat{l}.h{m}."
            store.add(p + "W_left", _glorot(rng, dh, d_in))
            store.add(p + "W_right", _glorot(rng, dh, d_in))
            store.add(p + "a", _glorot(rng, 1, dh))
            store.add(p + "W_out", _eye_block(dh, d_in, m * dh) + noise * _glorot(rng, dh, d_in))
    return store


def layer_params(store: ParamStore, layer: int, heads: int) -> Dict[str, np.ndarray]:
    p = f"gat{layer}."
    out = {
        "W_left": np.stack([store[f"{p}h{m}.W_left"] for m in range(heads)]),
        "W_right": np.stack([store[f"{p}h{m}.W_right"] for m in range(heads)]),
        "W_out": np.stack([store[f"{p}h{m}.W_out"] for m in range(heads)]),
        "a": np.stack([store[f"{p}h{m}.a"][0] for m in range(heads)]),
    }
    if heads > 1:
        out["head_W"] = store[p + "head.W"]
        out["head_b"] = store[p + "head.b"][0]
    return out


# -- small differentiable pieces --------------------------------------------------

def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def cosine(h: np.ndarray, t: np.ndarray):
    """Row-wise cosine of ``h (..., D)`` against ``t`` broadcastable to it.

    Returns ``(y, cache)``; zero-norm rows of ``h`` give 0.
    """
    hn = np.linalg.norm(h, axis=-1)
    tn = np.linalg.norm(t, axis=-1)
    zero = hn == 0
    safe = np.where(zero, 1.0, hn)
    y = np.where(zero, 0.0, (h * t).sum(-1) / (safe * tn))
    return y, (h, t, safe, tn, y, zero)


def cosine_backward(dy, cache):
    h, t, hn, tn, y, zero = cache
    dh = (t / (hn * tn)[..., None] - y[..., None] * h / (hn ** 2)[..., None]) * dy[..., None]
    dh[zero] = 0.0
    return dh


def attention_logits(h_i, h_j, W_left, W_right, a, slope: float = 0.2) -> float:
    """GATv2 score of neighbour j for query i under one head."""
    return float(np.asarray(a).ravel() @ leaky_relu(W_left @ h_i + W_right @ h_j, slope))


def attention_normalize(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    ex = np.exp(logits - logits.max())
    return ex / ex.sum()


def init_nodes(f_local: np.ndarray, f_global: np.ndarray, text: np.ndarray,
               W_in: np.ndarray, b_in: np.ndarray) -> np.ndarray:
    """Layer-0 node features for one image: affine map of ``[f_img || f_txt]``."""
    if f_local.shape != text.shape or f_global.shape != text.shape[1:]:
        raise ShapeError("local, global and text features disagree in shape")
    f_img = (f_local + f_global[None, :]) / 2.0
    X = np.concatenate([f_img, text], axis=1)
    if W_in.shape[1] != X.shape[1]:
        raise ShapeError(f"FFN_in expects width {W_in.shape[1]}, got {X.shape[1]}")
    return X @ W_in.T + np.ravel(b_in)


# -- batched GATv2 layer ----------------------------------------------------------

class GraphIndex:
    """Padded in-neighbour table of a fixed graph.

    ``nbr[c]`` lists the sources feeding node c (self first), padded to the
    largest in-degree; ``mask`` marks real entries. ``inc`` scatters per-edge
    values back onto their source nodes with one matmul.
    """

    def __init__(self, graph: RelationGraph):
        self.graph = graph
        hoods = [graph.in_neighborhood(c) for c in range(len(graph.categories))]
        self.n_nodes = C = len(hoods)
        self.width = K = max(len(h) for h in hoods)
        self.nbr = np.zeros((C, K), dtype=np.intp)
        self.mask = np.zeros((C, K), dtype=bool)
        for c, h in enumerate(hoods):
            self.nbr[c, :len(h)] = h
            self.nbr[c, len(h):] = c
            self.mask[c, :len(h)] = True
        self.inc = np.zeros((C, C * K))
        for c in range(C):
            for k in range(K):
                if self.mask[c, k]:
                    self.inc[self.nbr[c, k], c * K + k] = 1.0

    def scatter_src(self, x: np.ndarray) -> np.ndarray:
        """Sum ``(..., C, K, d)`` edge values into ``(..., C, d)`` source nodes."""
        *lead, C, K, d = x.shape
        return self.inc @ x.reshape(*lead, C * K, d)


def gat_layer_forward(H: np.ndarray, lp: Dict[str, np.ndarray], gi: GraphIndex,
                      slope: float, final: bool):
    """Multi-head GATv2 layer on ``H (B, C, d_in)``; internals are head-major."""
    B, C, d_in = H.shape
    M, dh, _ = lp["W_left"].shape
    if M > 1:
        Hh = (H @ lp["head_W"].T + lp["head_b"]).reshape(B, C, M, d_in).transpose(2, 0, 1, 3)
    else:
        Hh = H[None]
    W3 = np.concatenate([lp["W_left"], lp["W_right"], lp["W_out"]], axis=1)    # (M, 3dh, d_in)
    LRV = np.matmul(Hh.reshape(M, B * C, d_in), W3.transpose(0, 2, 1)).reshape(M, B, C, 3 * dh)
    L, R, V = LRV[..., :dh], LRV[..., dh:2 * dh], LRV[..., 2 * dh:]
    Z = L[:, :, :, None, :] + R[:, :, gi.nbr]                                   # (M, B, C, K, dh)
    A = leaky_relu(Z, slope)
    e = np.matmul(A, lp["a"][:, None, None, :, None])[..., 0]                  # (M, B, C, K)
    e = np.where(gi.mask, e, -np.inf)
    ex = np.exp(e - e.max(axis=-1, keepdims=True))
    alpha = ex / ex.sum(axis=-1, keepdims=True)
    Vn = V[:, :, gi.nbr]
    agg = np.matmul(alpha[..., None, :], Vn)[..., 0, :]                        # (M, B, C, dh)
    act = agg if final else elu(agg)
    out = act.transpose(1, 2, 0, 3).reshape(B, C, M * dh)
    cache = dict(H=H, Hh=Hh, W3=W3, Z=Z, A=A, alpha=alpha, Vn=Vn, agg=agg, final=final, slope=slope)
    return out, cache


def gat_layer_backward(dout: np.ndarray, lp: Dict[str, np.ndarray], gi: GraphIndex, cache):
    """Returns ``(dH, grads)`` with grads keyed like ``layer_params``."""
    H, Hh, W3, Z, A, alpha, Vn, agg = (cache[k] for k in ("H", "Hh", "W3", "Z", "A", "alpha", "Vn", "agg"))
    B, C, d_in = H.shape
    M, dh, _ = lp["W_left"].shape

    dagg = dout.reshape(B, C, M, dh).transpose(2, 0, 1, 3)
    if not cache["final"]:
        dagg = dagg * np.where(agg > 0, 1.0, np.exp(np.minimum(agg, 0)))
    dalpha = np.matmul(Vn, dagg[..., None])[..., 0]                           # (M, B, C, K)
    dV = gi.scatter_src(alpha[..., None] * dagg[:, :, :, None, :])
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
    grads = {"a": np.einsum("mbckd,mbck->md", A, de, optimize=True)}
    dZ = de[..., None] * lp["a"][:, None, None, None, :] * np.where(Z > 0, 1.0, cache["slope"])
    dL = dZ.sum(axis=3)
    dR = gi.scatter_src(dZ)
    dLRV = np.concatenate([dL, dR, dV], axis=-1).reshape(M, B * C, 3 * dh)
    dW3 = np.matmul(dLRV.transpose(0, 2, 1), Hh.reshape(M, B * C, d_in))
    grads["W_left"], grads["W_right"], grads["W_out"] = dW3[:, :dh], dW3[:, dh:2 * dh], dW3[:, 2 * dh:]
    dHh = np.matmul(dLRV, W3).reshape(M, B, C, d_in)
    if M > 1:
        dflat = dHh.transpose(1, 2, 0, 3).reshape(B * C, M * d_in)
        grads["head_W"] = dflat.T @ H.reshape(B * C, d_in)
        grads["head_b"] = dflat.sum(axis=0)
        dH = (dflat @ lp["head_W"]).reshape(B, C, d_in)
    else:
        dH = dHh[0]
    return dH, grads


def layer_forward(nodes: np.ndarray, graph: RelationGraph, lp: Dict[str, np.ndarray],
                  slope: float = 0.2, final: bool = False) -> np.ndarray:
    """One GATv2 layer on a single ``(C, d_in)`` node state."""
    out, _ = gat_layer_forward(nodes[None], lp, GraphIndex(graph), slope, final)
    return out[0]


def attention_coefficients(H: np.ndarray, lp, gi: GraphIndex, slope: float) -> np.ndarray:
    """Coefficients ``(M, B, C, K)`` over the padded neighbour table (0 on padding)."""
    _, cache = gat_layer_forward(H, lp, gi, slope, final=True)
    return cache["alpha"]


def predict_scores(final_nodes: np.ndarray, text: np.ndarray) -> np.ndarray:
    y, _ = cosine(final_nodes, text)
    return y


# -- full pipeline ------------------------------------------------------------------

@dataclass
class Flags:
    isr: bool = True
    ist: bool = True


def forward(store: ParamStore, mcfg: ModelConfig, isr_cfg: Optional[IsrConfig], patches: np.ndarray,
            globals_: np.ndarray, text: np.ndarray, gi: Optional[GraphIndex], flags: Flags):
    """Scores ``(B, C)`` for the ``C`` categories whose text rows are given.

    ``isr_cfg=None`` or ``flags.isr=False`` replaces local features by the
    global feature; ``flags.ist=False`` predicts straight from layer-0 nodes.
    """
    Aad, bad = store["adapter.A"], store["adapter.b"][0]
    S = patches @ Aad.T + bad                       # student patches (B, P, D)
    G = globals_ @ Aad.T + bad                      # student global (B, D)
    B, C = len(patches), len(text)
    if flags.isr and isr_cfg is not None:
        Wsel = batch_selection_weights(S, text, isr_cfg)
        fL = np.matmul(Wsel, S)
    else:
        Wsel = None
        fL = np.broadcast_to(G[:, None, :], (B, C, G.shape[1]))
    f_img = (fL + G[:, None, :]) / 2.0
    X = np.concatenate([f_img, np.broadcast_to(text, f_img.shape)], axis=-1)
    h = X @ store["ffn_in.W"].T + store["ffn_in.b"][0]
    layer_caches = []
    if flags.ist:
        if gi is None or gi.n_nodes != C:
            raise ShapeError("graph nodes do not match the scored categories")
        n_layers = len(mcfg.widths())
        for l in range(n_layers):
            lp = layer_params(store, l, mcfg.heads)
            h, lc = gat_layer_forward(h, lp, gi, mcfg.leaky_slope, final=(l == n_layers - 1))
            layer_caches.append((lp, lc))
    scores, cos_cache = cosine(h, text)
    cache = dict(patches=patches, globals=globals_, S=S, Wsel=Wsel, X=X, layers=layer_caches,
                 cos=cos_cache, gi=gi, flags=flags, heads=mcfg.heads)
    return scores, G, cache


def backward(store: ParamStore, cache, dscores: np.ndarray, dG: Optional[np.ndarray] = None) -> None:
    dh = cosine_backward(dscores, cache["cos"])
    gi = cache["gi"]
    for l in reversed(range(len(cache["layers"]))):
        lp, lc = cache["layers"][l]
        dh, grads = gat_layer_backward(dh, lp, gi, lc)
        p = f"gat{l}."
        for m in range(cache["heads"]):
            store.accumulate(f"{p}h{m}.W_left", grads["W_left"][m])
            store.accumulate(f"{p}h{m}.W_right", grads["W_right"][m])
            store.accumulate(f"{p}h{m}.W_out", grads["W_out"][m])
            store.accumulate(f"{p}h{m}.a", grads["a"][m])
        if "head_W" in grads:
            store.accumulate(p + "head.W", grads["head_W"])
            store.accumulate(p + "head.b", grads["head_b"])
    X = cache["X"]
    store.accumulate("ffn_in.W", dh.reshape(-1, dh.shape[-1]).T @ X.reshape(-1, X.shape[-1]))
    store.accumulate("ffn_in.b", dh.sum(axis=(0, 1)))
    dX = dh @ store["ffn_in.W"]
    D = X.shape[-1] // 2
    df_img = dX[..., :D]
    dfL = df_img / 2.0
    dG_total = df_img.sum(axis=1) / 2.0
    if dG is not None:
        dG_total = dG_total + dG
    if cache["Wsel"] is not None:
        dS = np.matmul(cache["Wsel"].transpose(0, 2, 1), dfL)
    else:
        dS = None
        dG_total = dG_total + dfL.sum(axis=1)
    patches, globals_ = cache["patches"], cache["globals"]
    dA = dG_total.T @ globals_
    db = dG_total.sum(axis=0)
    if dS is not None:
        D_ = patches.shape[-1]
        dA += dS.reshape(-1, D_).T @ patches.reshape(-1, D_)
        db = db + dS.sum(axis=(0, 1))
    store.accumulate("adapter.A", dA)
    store.accumulate("adapter.b", db)


# -- dynamic attention witness -----------------------------------------------------

@dataclass
class Witness:
    queries: tuple
    pair: tuple
    logits: np.ndarray
    params: Dict[str, np.ndarray]
    features: np.ndarray


def dynamic_attention_witness(rng: np.random.Generator, trials: int = 1000, n_nodes: int = 3,
                              dim: int = 4, hidden: int = 4, slope: float = 0.2,
                              zero_attention: bool = False,
                              common_neighbors: Optional[int] = None) -> Optional[Witness]:
    """Random search for two queries that rank a shared neighbour pair oppositely.

    Nodes form a clique, so any two queries share all nodes as neighbours
    unless ``common_neighbors`` restricts the candidate neighbour set.
    """
    shared = list(range(n_nodes)) if common_neighbors is None else list(range(common_neighbors))
    if n_nodes < 2 or len(shared) < 2:
        return None
    for _ in range(trials):
        h = rng.standard_normal((n_nodes, dim))
        Wl = rng.standard_normal((hidden, dim))
        Wr = rng.standard_normal((hidden, dim))
        a = np.zeros(hidden) if zero_attention else rng.standard_normal(hidden)
        e = np.array([[attention_logits(h[i], h[j], Wl, Wr, a, slope) for j in range(n_nodes)]
                      for i in range(n_nodes)])
        for i, k in itertools.combinations(range(n_nodes), 2):
            for j1, j2 in itertools.combinations(shared, 2):
                d1 = e[i, j1] - e[i, j2]
                d2 = e[k, j1] - e[k, j2]
                if d1 * d2 < 0 and min(abs(d1), abs(d2)) > 1e-9:
                    return Witness((i, k), (j1, j2), e, {"W_left": Wl, "W_right": Wr, "a": a}, h)
    return None
