"""Embedding parameters and the forward pass of HAM / HAM^s."""

from __future__ import annotations

import dataclasses
import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np


class Pooling(str, enum.Enum):
    MEAN = "mean"
    MAX = "max"


class Ablation(str, enum.Enum):
    NONE = "none"
    DROP_O = "drop_o"
    DROP_U = "drop_u"


class EmptyPoolError(ValueError):
    pass


@dataclass
class HyperParams:
    d: int = 64
    n_h: int = 4
    n_l: int = 2
    n_p: int = 3
    p: int = 1
    pooling: Pooling = Pooling.MEAN
    ablation: Ablation = Ablation.NONE
    reg: float = 1e-3
    learning_rate: float = 1e-3
    batch_size: int = 512
    max_epochs: int = 100
    validate_every: int = 20
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.pooling = Pooling(self.pooling)
        self.ablation = Ablation(self.ablation)

    def validate(self) -> "HyperParams":
        problems = []
        if self.d < 1:
            problems.append("d >= 1")
        if not 1 <= self.n_l < self.n_h:
            problems.append("1 <= n_l < n_h")
        if not 1 <= self.p <= self.n_h:
            problems.append("1 <= p <= n_h")
        if self.n_p < 1:
            problems.append("n_p >= 1")
        if self.reg < 0:
            problems.append("reg >= 0")
        if self.batch_size < 1:
            problems.append("batch_size >= 1")
        if self.max_epochs < 0 or self.validate_every < 1:
            problems.append("max_epochs >= 0 and validate_every >= 1")
        if self.optimizer not in ("adam", "sgd"):
            problems.append("optimizer in {adam, sgd}")
        if problems:
            raise ValueError("invalid hyperparameters, need: " + ", ".join(problems))
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["pooling"] = self.pooling.value
        out["ablation"] = self.ablation.value
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "HyperParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**values)


@dataclass
class ModelParams:
    """U: users x d; V, W: (items + 1) x d.  The last item row is the pad,
    whose V row stays zero."""

    U: np.ndarray
    V: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.U = np.ascontiguousarray(self.U, dtype=np.float64)
        self.V = np.ascontiguousarray(self.V, dtype=np.float64)
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        if self.V.shape != self.W.shape or self.U.shape[1] != self.V.shape[1]:
            raise ValueError(f"shape mismatch U{self.U.shape} V{self.V.shape} W{self.W.shape}")

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def num_users(self) -> int:
        return self.U.shape[0]

    @property
    def num_items(self) -> int:
        return self.V.shape[0] - 1

    @property
    def pad_id(self) -> int:
        return self.V.shape[0] - 1

    @classmethod
    def init(cls, num_users: int, num_items: int, d: int, rng: np.random.Generator) -> "ModelParams":
        bound = 1.0 / np.sqrt(d)
        U = rng.uniform(-bound, bound, size=(num_users, d))
        V = rng.uniform(-bound, bound, size=(num_items + 1, d))
        W = rng.uniform(-bound, bound, size=(num_items + 1, d))
        V[num_items] = 0.0
        return cls(U, V, W)

    def copy(self) -> "ModelParams":
        return ModelParams(self.U.copy(), self.V.copy(), self.W.copy())


# --- single-instance building blocks -------------------------------------

def _context_mask(context, pad_id):
    ctx = np.asarray(context, dtype=np.int64)
    return ctx, ctx != pad_id


def _pool_rows(rows, mask, mode):
    """rows: (B, L, d), mask: (B, L).  Returns pooled (B, d) and, for MAX,
    the winning window position per dimension (B, d)."""
    count = mask.sum(axis=1)
    if (count == 0).any():
        raise EmptyPoolError("pooling window holds only pad items")
    if Pooling(mode) is Pooling.MEAN:
        pooled = (rows * mask[:, :, None]).sum(axis=1) / count[:, None]
        return pooled, None
    masked = np.where(mask[:, :, None], rows, -np.inf)
    winners = masked.argmax(axis=1)  # first maximal position on ties
    pooled = np.take_along_axis(rows, winners[:, None, :], axis=1)[:, 0, :]
    return pooled, winners


def pool(context, params: ModelParams, mode=Pooling.MEAN, take_last: int | None = None) -> np.ndarray:
    """Mean or per-dimension max of the V rows of the non-pad items among the
    last ``take_last`` context entries."""
    ctx = np.asarray(context, dtype=np.int64)
    if take_last is None:
        take_last = len(ctx)
    if not 1 <= take_last <= len(ctx):
        raise ValueError(f"take_last={take_last} outside 1..{len(ctx)}")
    ctx = ctx[-take_last:]
    ctx = ctx[ctx != params.pad_id]
    if not len(ctx):
        raise EmptyPoolError("pooling window holds only pad items")
    rows = params.V.take(ctx, axis=0)
    if mode == Pooling.MEAN:
        return rows.sum(axis=0) / len(ctx)
    return rows.max(axis=0)


def synergy_pair(v_j, v_k) -> np.ndarray:
    v_j, v_k = np.asarray(v_j, dtype=np.float64), np.asarray(v_k, dtype=np.float64)
    if v_j.shape != v_k.shape:
        raise ValueError(f"dimension mismatch {v_j.shape} vs {v_k.shape}")
    return v_j * v_k


def _synergy_rows(rows, mask, p):
    """Batched synergy recursion over window positions.

    rows (B, L, d) with mask (B, L).  For order k, each position j carries
    c_j^(k) = c_j^(k-1) * sum_{l != j} v_l (Hadamard distributes over the
    sum).  Returns per-order means c (B, p-1, d), the per-position terms
    (B, p, L, d) with order 1 at index 0, and the leave-one-out sums (B, L, d).
    """
    B, L, d = rows.shape
    mrows = rows * mask[:, :, None]
    count = mask.sum(axis=1)
    others = mrows.sum(axis=1, keepdims=True) - mrows
    per_item = np.empty((B, p, L, d))
    per_item[:, 0] = mrows
    for k in range(1, p):
        per_item[:, k] = per_item[:, k - 1] * others
    c = per_item[:, 1:].sum(axis=2) / np.maximum(count, 1)[:, None, None]
    return c, per_item, others


def synergy_orders(context, params: ModelParams, p: int):
    """Aggregated synergies c^(2..p) over the non-pad context items.

    Returns ``(c, c_per_item)`` where ``c`` is a list of p-1 vectors and
    ``c_per_item[k-1]`` is the (items x d) array of c_j^(k).  With fewer
    than two real items there is nothing to combine and both are empty.
    """
    ctx, mask = _context_mask(context, params.pad_id)
    ctx = ctx[mask]
    if p < 2 or len(ctx) < 2:
        return [], []
    c, per_item, _ = _synergy_rows(params.V[ctx][None], np.ones((1, len(ctx)), dtype=bool), p)
    return list(c[0]), list(per_item[0])


def latent_cross(h, c) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if len(c) == 0:
        return h
    return h + np.sum([ck * h for ck in c], axis=0)


def score(user: int, assoc, o, candidate: int, params: ModelParams, ablation=Ablation.NONE) -> float:
    ablation = Ablation(ablation)
    w = params.W[candidate]
    r = 0.0
    if ablation is not Ablation.DROP_U:
        r += float(params.U[user] @ w)
    r += float(np.asarray(assoc) @ w)
    if ablation is not Ablation.DROP_O:
        r += float(np.asarray(o) @ w)
    return r


# --- batched forward pass -------------------------------------------------

@dataclass
class ForwardState:
    """Intermediates of a batched forward pass, kept for backprop.

    ``syn`` flags rows where synergies were applied (p >= 2 and at least two
    real context items); for other rows ``s`` is ``h`` and ``c`` is unused.
    """

    users: np.ndarray
    contexts: np.ndarray
    mask: np.ndarray
    h: np.ndarray
    o: np.ndarray
    s: np.ndarray
    q: np.ndarray
    h_winners: np.ndarray | None = None
    o_winners: np.ndarray | None = None
    c: np.ndarray | None = None
    c_per_item: np.ndarray | None = None
    others: np.ndarray | None = None
    syn: np.ndarray | None = None
    p: int = 1
    meta: dict = field(default_factory=dict)


def forward(params: ModelParams, hyper: HyperParams, users, contexts) -> ForwardState:
    """Batched forward pass.  ``contexts`` is (B, n_h) with pad ids on the
    left; the low-order window is the last ``n_l`` entries."""
    users = np.asarray(users, dtype=np.int64)
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.ndim != 2 or contexts.shape[1] != hyper.n_h:
        raise ValueError(f"contexts must be (B, {hyper.n_h}), got {contexts.shape}")
    mask = contexts != params.pad_id
    rows = params.V[contexts]
    h, hw = _pool_rows(rows, mask, hyper.pooling)
    n_l = hyper.n_l
    o, ow = _pool_rows(rows[:, -n_l:], mask[:, -n_l:], hyper.pooling)

    st = ForwardState(users, contexts, mask, h, o, h, None, hw, ow, p=hyper.p)
    if hyper.p >= 2:
        syn = mask.sum(axis=1) >= 2
        if syn.any():
            c, per_item, others = _synergy_rows(rows, mask, hyper.p)
            s = h.copy()
            s[syn] = h[syn] + (c[syn] * h[syn][:, None, :]).sum(axis=1)
            st.s, st.c, st.c_per_item, st.others, st.syn = s, c, per_item, others, syn

    q = st.s.copy() if hyper.ablation is Ablation.DROP_U else params.U[users] + st.s
    if hyper.ablation is not Ablation.DROP_O:
        q = q + o
    st.q = q
    return st


def query(user: int, context, params: ModelParams, hyper: HyperParams) -> np.ndarray:
    """The vector every candidate's W row is dotted with: the sum of the
    user, association (h or s) and low-order terms left in by the ablation.

    Kept free of the batched machinery since it sits on the per-user
    latency path.
    """
    ctx = np.asarray(context, dtype=np.int64)
    h = pool(ctx, params, hyper.pooling)
    assoc = h
    if hyper.p >= 2:
        real = ctx[ctx != params.pad_id]
        if len(real) >= 2:
            rows = params.V.take(real, axis=0)
            others = rows.sum(axis=0) - rows
            per, cross = rows, np.zeros_like(h)
            for _ in range(hyper.p - 1):
                per = per * others
                cross += per.sum(axis=0) / len(real)
            assoc = h + cross * h
    q = assoc if hyper.ablation is Ablation.DROP_U else params.U[user] + assoc
    if hyper.ablation is not Ablation.DROP_O:
        q = q + pool(ctx, params, hyper.pooling, hyper.n_l)
    return q


def score_all(user: int, context, params: ModelParams, hyper: HyperParams) -> np.ndarray:
    """Scores for every item row, pad included (the caller masks it)."""
    return params.W @ query(user, context, params, hyper)


def score_batch(params: ModelParams, hyper: HyperParams, users, contexts) -> np.ndarray:
    st = forward(params, hyper, users, contexts)
    return st.q @ params.W.T


# --- checkpoint I/O -------------------------------------------------------

MAGIC = b"HAMCKPT 1\n"


def save_checkpoint(path, params: ModelParams, hyper: HyperParams, meta: dict | None = None) -> None:
    """Layout: the magic line, one JSON header line (sorted keys), then U, V
    and W as little-endian float64, row-major."""
    header = {
        "m": params.num_users,
        "n": params.num_items,
        "d": params.d,
        "pad_id": params.pad_id,
        "dtype": "<f8",
        "hyper": hyper.to_dict(),
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in (params.U, params.V, params.W):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, hyper, meta)."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{os.fspath(path)}: not a checkpoint file")
        header = json.loads(fh.readline())
        m, n, d = header["m"], header["n"], header["d"]
        blob = fh.read()
    expect = 8 * d * (m + 2 * (n + 1))
    if len(blob) != expect:
        raise ValueError(f"{os.fspath(path)}: expected {expect} payload bytes, found {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    U = flat[: m * d].reshape(m, d)
    V = flat[m * d: m * d + (n + 1) * d].reshape(n + 1, d)
    W = flat[m * d + (n + 1) * d:].reshape(n + 1, d)
    return ModelParams(U, V, W), HyperParams.from_dict(header["hyper"]), header.get("meta", {})
