"""Phase-competition Q-network with neighbor attention, forward and backward by hand.

Pipeline for a batch of B observations of intersections sharing one phase
structure (M movements, P phases):

1. Each movement's features (incoming occupancy, outgoing occupancy, green
   bit) go through one shared dense layer -> demand embedding (B, M, D).
2. The mean embedding summarizes an intersection. The self summary queries
   the summaries of itself and up to K neighbors with H heads of scaled
   dot-product attention; missing neighbors are masked out of the softmax.
3. The attention context (B, D) is appended to every movement embedding, and
   a phase's demand is the sum over its movements (B, P, 2D).
4. Every ordered phase pair (p, q), p != q, is scored by a hidden layer fed
   with p's demand, q's demand and a learned embedding of the pair's
   relation class; Q_p is the sum of p's pair scores.

All arithmetic is float64 numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .network import Intersection

N_FEATURES = 3
N_RELATIONS = 3


@dataclass(frozen=True)
class FrapConfig:
    embed_dim: int = 16
    heads: int = 5
    head_dim: int = 8
    max_neighbors: int = 4
    hidden_dim: int = 32
    relation_dim: int = 8
    activation: str = "relu"

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1 or self.embed_dim < 1:
            raise ValueError("heads, head_dim and embed_dim must be positive")
        if self.max_neighbors < 0:
            raise ValueError("max_neighbors must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0).astype(x.dtype)


def _identity(x):
    return x


def _ones(x):
    return np.ones_like(x)


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (_relu, _relu_grad),
    "identity": (_identity, _ones),
}


@dataclass(frozen=True)
class PhaseStructure:
    """Movement/phase geometry the network needs for one intersection type."""

    n_movements: int
    membership: np.ndarray  # (P, M) 0/1
    relation: np.ndarray  # (P, P) relation class index, diagonal unused
    always_green: tuple[int, ...] = ()

    @property
    def n_phases(self) -> int:
        return self.membership.shape[0]

    @cached_property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        p, q = np.nonzero(~np.eye(self.n_phases, dtype=bool))
        return p, q

    @cached_property
    def selectors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """One-hot (npair, P) maps to the first and second phase, and (npair, 3) to the relation."""
        pi, qi = self.pairs
        n = len(pi)
        sel_p = np.zeros((n, self.n_phases))
        sel_q = np.zeros((n, self.n_phases))
        sel_r = np.zeros((n, N_RELATIONS))
        sel_p[np.arange(n), pi] = 1.0
        sel_q[np.arange(n), qi] = 1.0
        sel_r[np.arange(n), self.relation[pi, qi]] = 1.0
        return sel_p, sel_q, sel_r

    @property
    def key(self) -> tuple:
        return (self.n_movements, self.membership.tobytes(), self.relation.tobytes(), self.always_green)

    @classmethod
    def from_intersection(cls, it: Intersection) -> "PhaseStructure":
        P, M = len(it.phases), len(it.movements)
        member = np.zeros((P, M))
        for ph in it.phases:
            member[ph.id, list(ph.movements)] = 1.0
        rel = np.array([[int(it.phase_relation(p, q)) for q in range(P)] for p in range(P)], dtype=np.int64)
        return cls(M, member, rel, it.always_green)

    @classmethod
    def from_phases(cls, phases, relation, n_movements: int, always_green=()) -> "PhaseStructure":
        member = np.zeros((len(phases), n_movements))
        for p, movs in enumerate(phases):
            member[p, list(movs)] = 1.0
        return cls(n_movements, member, np.asarray(relation, dtype=np.int64), tuple(always_green))


class ParamStore:
    """Named float64 parameter tensors plus a version counter bumped on every update."""

    def __init__(self, tensors: dict[str, np.ndarray], version: int = 0):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.version = version

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, self.version)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def param_shapes(cfg: FrapConfig) -> dict[str, tuple[int, ...]]:
    D, H, E, R, Hd = cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.relation_dim, cfg.hidden_dim
    return {
        "demand_w": (N_FEATURES, D),
        "demand_b": (D,),
        "attn_q": (H, D, E),
        "attn_k": (H, D, E),
        "attn_v": (H, D, E),
        "attn_out_w": (H * E, D),
        "attn_out_b": (D,),
        "relation_embed": (N_RELATIONS, R),
        "pair_w_self": (2 * D, Hd),
        "pair_w_other": (2 * D, Hd),
        "pair_w_rel": (R, Hd),
        "pair_b": (Hd,),
        "score_w": (Hd,),
        "score_b": (),
    }


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("attn_") and len(shape) == 3:
        return shape[1]
    if name == "relation_embed":
        return 1
    return shape[0] if shape else 1


def init_params(cfg: FrapConfig, seed: int = 0) -> ParamStore:
    """Weights uniform in +-1/sqrt(fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_b"):
            out[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            out[name] = rng.uniform(-bound, bound, size=shape)
    return ParamStore(out)


@dataclass
class Batch:
    """Network input for B samples of one phase structure.

    ``nx`` holds neighbor movement features padded to (B, K, Mn, 3);
    ``nmask`` marks real neighbors and ``mmask`` real neighbor movements.
    """

    x: np.ndarray
    nx: np.ndarray
    nmask: np.ndarray
    mmask: np.ndarray

    @classmethod
    def single(cls, x: np.ndarray, neighbors: list[np.ndarray] | None = None, max_neighbors: int | None = None):
        neighbors = neighbors or []
        K = len(neighbors) if max_neighbors is None else max_neighbors
        if len(neighbors) > K:
            raise ValueError(f"{len(neighbors)} neighbors exceed max_neighbors={K}")
        Mn = max([n.shape[0] for n in neighbors], default=x.shape[0])
        nx = np.zeros((1, K, Mn, N_FEATURES))
        mm = np.zeros((1, K, Mn))
        nm = np.zeros((1, K), dtype=bool)
        for j, n in enumerate(neighbors):
            nx[0, j, : n.shape[0]] = n
            mm[0, j, : n.shape[0]] = 1.0
            nm[0, j] = True
        return cls(np.asarray(x, dtype=np.float64)[None], nx, nm, mm)

    @property
    def size(self) -> int:
        return self.x.shape[0]


@dataclass
class Cache:
    batch: Batch
    structure: PhaseStructure
    cfg: FrapConfig
    values: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# forward pieces


def demand_embedding(features: np.ndarray, params: ParamStore, activation: str = "relu") -> np.ndarray:
    """Shared dense layer applied to every movement's feature vector."""
    act, _ = ACTIVATIONS[activation]
    return act(features @ params["demand_w"] + params["demand_b"])


def _masked_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    z = np.where(valid, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def neighbor_attention(self_summary: np.ndarray, neighbor_summaries: np.ndarray, neighbor_mask: np.ndarray,
                       params: ParamStore) -> tuple[np.ndarray, dict]:
    """Multi-head attention of an intersection over itself and its neighbors.

    self_summary (B, D), neighbor_summaries (B, K, D), neighbor_mask (B, K).
    Returns the output-projected context (B, D) and intermediates, including
    the attention weights ``alpha`` of shape (B, H, K + 1).
    """
    Wq, Wk, Wv = params["attn_q"], params["attn_k"], params["attn_v"]
    head_dim = Wq.shape[2]
    S = np.concatenate([self_summary[:, None, :], neighbor_summaries], axis=1)
    valid = np.concatenate([np.ones((S.shape[0], 1), dtype=bool), neighbor_mask.astype(bool)], axis=1)
    q = np.einsum("bd,hde->bhe", self_summary, Wq)
    k = np.einsum("bjd,hde->bhje", S, Wk)
    v = np.einsum("bjd,hde->bhje", S, Wv)
    logits = np.einsum("bhe,bhje->bhj", q, k) / np.sqrt(head_dim)
    alpha = _masked_softmax(logits, valid[:, None, :])
    ctx = np.einsum("bhj,bhje->bhe", alpha, v)
    flat = ctx.reshape(ctx.shape[0], -1)
    out = flat @ params["attn_out_w"] + params["attn_out_b"]
    return out, {"S": S, "q": q, "k": k, "v": v, "alpha": alpha, "flat": flat}


def pair_scores(demands: np.ndarray, structure: PhaseStructure, params: ParamStore,
                activation: str = "relu") -> tuple[np.ndarray, dict]:
    """Phase-competition scores from per-movement demand vectors (B, M, F) -> (B, P)."""
    act, _ = ACTIVATIONS[activation]
    if demands.shape[1] != structure.n_movements:
        raise ValueError(f"expected {structure.n_movements} movements, got {demands.shape[1]}")
    sel_p, sel_q, sel_r = structure.selectors
    phase_demand = structure.membership @ demands
    a = phase_demand @ params["pair_w_self"]
    b = phase_demand @ params["pair_w_other"]
    rel = params["relation_embed"] @ params["pair_w_rel"]
    pre = sel_p @ a + sel_q @ b + (sel_r @ rel + params["pair_b"])
    hidden = act(pre)
    s = hidden @ params["score_w"] + params["score_b"]
    q = s @ sel_p
    return q, {"phase_demand": phase_demand, "pre": pre, "hidden": hidden}


def forward(batch: Batch, structure: PhaseStructure, params: ParamStore, cfg: FrapConfig,
            keep_cache: bool = False) -> tuple[np.ndarray, Cache | None]:
    """Q-values (B, P) for a batch of observations."""
    act, _ = ACTIVATIONS[cfg.activation]
    Wd, bd = params["demand_w"], params["demand_b"]
    e_pre = batch.x @ Wd + bd
    e = act(e_pre)
    ne_pre = batch.nx @ Wd + bd
    ne = act(ne_pre)
    s0 = e.mean(axis=1)
    cnt = np.maximum(batch.mmask.sum(axis=2), 1.0)
    sn = (ne * batch.mmask[..., None]).sum(axis=2) / cnt[..., None]
    ctx, attn = neighbor_attention(s0, sn, batch.nmask, params)
    M = e.shape[1]
    demands = np.concatenate([e, np.broadcast_to(ctx[:, None, :], (e.shape[0], M, ctx.shape[1]))], axis=2)
    q, pair = pair_scores(demands, structure, params, cfg.activation)
    cache = None
    if keep_cache:
        cache = Cache(batch, structure, cfg, {
            "e_pre": e_pre, "ne_pre": ne_pre, "e": e, "cnt": cnt, "demands": demands, **attn, **pair,
        })
    return q, cache


def q_values(batch: Batch, structure: PhaseStructure, params: ParamStore, cfg: FrapConfig) -> np.ndarray:
    return forward(batch, structure, params, cfg)[0]


# --------------------------------------------------------------------------
# backward


def backward(dq: np.ndarray, cache: Cache | None, params: ParamStore) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of sum(dq * Q) with respect to every parameter."""
    if cache is None:
        raise ValueError("backward needs the cache from forward(..., keep_cache=True)")
    c, st, cfg, batch = cache.values, cache.structure, cache.cfg, cache.batch
    _, dact = ACTIVATIONS[cfg.activation]
    D = params["demand_w"].shape[1]
    sel_p, sel_q, sel_r = st.selectors
    g: dict[str, np.ndarray] = {}

    # pair competition
    ds = dq @ sel_p.T  # (B, npair)
    g["score_w"] = np.einsum("bn,bnh->h", ds, c["hidden"])
    g["score_b"] = np.asarray(ds.sum())
    dpre = ds[..., None] * params["score_w"] * dact(c["pre"])
    g["pair_b"] = dpre.sum(axis=(0, 1))
    drel = sel_r.T @ dpre.sum(axis=0)
    g["pair_w_rel"] = params["relation_embed"].T @ drel
    g["relation_embed"] = drel @ params["pair_w_rel"].T
    da = sel_p.T @ dpre
    db = sel_q.T @ dpre
    pd = c["phase_demand"]
    g["pair_w_self"] = np.einsum("bpf,bph->fh", pd, da)
    g["pair_w_other"] = np.einsum("bpf,bph->fh", pd, db)
    dpd = da @ params["pair_w_self"].T + db @ params["pair_w_other"].T
    ddem = st.membership.T @ dpd
    de = ddem[..., :D].copy()
    dctx = ddem[..., D:].sum(axis=1)

    # attention
    g["attn_out_w"] = c["flat"].T @ dctx
    g["attn_out_b"] = dctx.sum(axis=0)
    H, _, E = params["attn_q"].shape
    dhead = (dctx @ params["attn_out_w"].T).reshape(-1, H, E)
    alpha, v, k, q, S = c["alpha"], c["v"], c["k"], c["q"], c["S"]
    dalpha = np.einsum("bhe,bhje->bhj", dhead, v)
    dv = np.einsum("bhj,bhe->bhje", alpha, dhead)
    dlog = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True)) / np.sqrt(E)
    dqv = np.einsum("bhj,bhje->bhe", dlog, k)
    dk = np.einsum("bhj,bhe->bhje", dlog, q)
    s0 = S[:, 0]
    g["attn_q"] = np.einsum("bd,bhe->hde", s0, dqv)
    g["attn_k"] = np.einsum("bjd,bhje->hde", S, dk)
    g["attn_v"] = np.einsum("bjd,bhje->hde", S, dv)
    dS = np.einsum("bhje,hde->bjd", dk, params["attn_k"]) + np.einsum("bhje,hde->bjd", dv, params["attn_v"])
    ds0 = dS[:, 0] + np.einsum("bhe,hde->bd", dqv, params["attn_q"])
    dsn = dS[:, 1:]

    # demand embedding, self and neighbors
    M = de.shape[1]
    de += ds0[:, None, :] / M
    dne = dsn[:, :, None, :] * (batch.mmask / c["cnt"][..., None])[..., None]
    de_pre = de * dact(c["e_pre"])
    dne_pre = dne * dact(c["ne_pre"])
    g["demand_w"] = np.einsum("bmf,bmd->fd", batch.x, de_pre) + np.einsum("bkmf,bkmd->fd", batch.nx, dne_pre)
    g["demand_b"] = de_pre.sum(axis=(0, 1)) + dne_pre.sum(axis=(0, 1, 2))
    return g


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((v * v).sum()) for v in grads.values())))


def _kink_signature(cache: Cache) -> tuple[bytes, ...]:
    v = cache.values
    return tuple(np.signbit(v[k]).tobytes() for k in ("e_pre", "ne_pre", "pre"))


def gradient_check(params: ParamStore, batch: Batch, structure: PhaseStructure, cfg: FrapConfig,
                   epsilon: float = 1e-5, samples_per_tensor: int = 12, seed: int = 0,
                   grad_hook: Callable[[dict], None] | None = None) -> float:
    """Max relative error between backward and central finite differences.

    The scalar checked is sum(C * Q) for a fixed random C. Up to
    ``samples_per_tensor`` elements of every tensor are probed. A probe whose
    two evaluations put some ReLU input on different sides of zero straddles
    a kink, where the finite difference is meaningless; it is replaced by
    another element of the same tensor. ``grad_hook`` may edit the analytic
    gradients first (fault injection).
    """
    rng = np.random.default_rng(seed)
    q, cache = forward(batch, structure, params, cfg, keep_cache=True)
    coef = rng.normal(size=q.shape)
    grads = backward(coef, cache, params)
    if grad_hook is not None:
        grad_hook(grads)
    check_kinks = cfg.activation == "relu"
    worst = 0.0
    probe = params.copy()
    for name, tensor in probe.items():
        flat = tensor.reshape(-1)
        order = rng.permutation(flat.size)
        done = 0
        for idx in order:
            if done == samples_per_tensor:
                break
            orig = flat[idx]
            flat[idx] = orig + epsilon
            qp, cp = forward(batch, structure, probe, cfg, keep_cache=check_kinks)
            flat[idx] = orig - epsilon
            qm, cm = forward(batch, structure, probe, cfg, keep_cache=check_kinks)
            flat[idx] = orig
            if check_kinks and _kink_signature(cp) != _kink_signature(cm):
                continue
            num = float((coef * (qp - qm)).sum()) / (2 * epsilon)
            ana = float(grads[name].reshape(-1)[idx])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
            done += 1
    return worst


def check_case(cfg: FrapConfig, structure: PhaseStructure, seed: int, batch_size: int = 4,
               param_scale: float = 1.0) -> tuple[ParamStore, Batch]:
    """Random parameters and observations for gradient checking.

    Weights are drawn uniformly in +-``param_scale`` rather than from the
    training init: at init the attention query/key gradients are ~1e-8, below
    what a central difference can resolve. Each intersection gets its own
    congestion level so the attention logits actually differ.
    """
    rng = np.random.default_rng(seed)
    params = ParamStore({k: rng.uniform(-param_scale, param_scale, size=s)
                         for k, s in param_shapes(cfg).items()})
    B, K, M = batch_size, cfg.max_neighbors, structure.n_movements
    level = rng.uniform(size=(B, 1 + K, 1, 1))
    feats = rng.uniform(size=(B, 1 + K, M, N_FEATURES)) * level
    feats[..., 2] = rng.uniform(size=(B, 1 + K, M)) < 0.3
    batch = Batch(feats[:, 0], feats[:, 1:], np.ones((B, K), dtype=bool), np.ones((B, K, M)))
    return params, batch
