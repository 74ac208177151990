"""Full-ranking evaluation: top-k, Recall@k, NDCG@k and per-user latency."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SplitPlan, history_context
from .model import HyperParams, ModelParams, score_all, score_batch


class NoEvaluableUsersError(ValueError):
    pass


def top_k(scores, k: int, exclude=(), pad_id: int | None = None) -> list[int]:
    """The ``k`` highest-scoring admissible ids, best first; ties go to the
    lower id."""
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    banned = {int(j) for j in exclude if 0 <= j < n} if len(exclude) else set()
    if pad_id is not None and 0 <= pad_id < n:
        banned.add(int(pad_id))
    if not 0 <= k <= n - len(banned):
        raise ValueError(f"k={k} exceeds the {n - len(banned)} admissible items")
    if k == 0:
        return []
    if banned:
        s = s.copy()
        s[np.fromiter(banned, dtype=np.int64, count=len(banned))] = -np.inf
    if k < n:
        idx = np.argpartition(s, n - k)[n - k:]
        kth = s[idx].min()
        if np.count_nonzero(s >= kth) > k:
            idx = np.flatnonzero(s >= kth)
        else:
            idx.sort()
    else:
        idx = np.arange(n)
    return idx[np.argsort(-s[idx], kind="stable")][:k].tolist()


def _topk_rows(S: np.ndarray, k: int) -> np.ndarray:
    B, n = S.shape
    if k == 0:
        return np.empty((B, 0), dtype=np.int64)
    if k >= n:
        return np.argsort(-S, axis=1, kind="stable")
    part = np.argpartition(-S, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(S, part, axis=1).min(axis=1)
    n_ge = (S >= kth[:, None]).sum(axis=1)
    out = np.empty((B, k), dtype=np.int64)
    for b in range(B):
        if n_ge[b] == k:
            idx = np.sort(part[b])
        else:
            # ties straddle the cut: take every tied id, lowest first
            idx = np.flatnonzero(S[b] >= kth[b])
        out[b] = idx[np.argsort(-S[b, idx], kind="stable")][:k]
    return out


def recall_at_k(recommended, ground_truth) -> float:
    truth = set(ground_truth)
    if not truth:
        raise ValueError("empty ground truth")
    return len(truth.intersection(recommended)) / len(truth)


def ndcg_at_k(recommended, ground_truth, k: int | None = None) -> float:
    """``k`` defaults to the list length; pass it when the list was cut short
    so the ideal gain still counts ``min(k, |truth|)`` positions."""
    truth = set(ground_truth)
    k = len(recommended) if k is None else k
    if not truth:
        raise ValueError("empty ground truth")
    dcg = sum(1.0 / math.log2(i + 2) for i, j in enumerate(recommended[:k]) if j in truth)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(truth))))
    return dcg / idcg if idcg > 0 else 0.0


@dataclass
class EvalResult:
    metrics: dict  # k -> (recall, ndcg)
    num_users_evaluated: int
    per_user_latency_mean: float | None = None
    meta: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for metric, pos in (("recall", 0), ("ndcg", 1)):
            for k in sorted(self.metrics):
                out.append((metric, k, self.metrics[k][pos]))
        return out

    def to_csv(self, header_comments=()) -> str:
        lines = [f"# {c}" for c in header_comments]
        lines.append("metric,k,value")
        lines += [f"{m},{k},{v:.6f}" for m, k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        ks = sorted(self.metrics)
        head = f"{'':8}" + "".join(f"{'@' + str(k):>10}" for k in ks)
        rec = f"{'Recall':8}" + "".join(f"{self.metrics[k][0]:>10.4f}" for k in ks)
        ndcg = f"{'NDCG':8}" + "".join(f"{self.metrics[k][1]:>10.4f}" for k in ks)
        lines = [head, rec, ndcg, f"users evaluated: {self.num_users_evaluated}"]
        if self.per_user_latency_mean is not None:
            lines.append(f"per-user latency: {format_latency(self.per_user_latency_mean)} s")
        return "\n".join(lines)


def format_latency(seconds: float) -> str:
    return f"{seconds:.1e}"


def _eval_targets(dataset: Dataset, plan: SplitPlan, target: str):
    """(user, history end, truth items) for users with something to rank."""
    if target not in ("test", "valid"):
        raise ValueError(f"target must be 'test' or 'valid', got {target!r}")
    out = []
    for u, seq in enumerate(dataset.sequences):
        if target == "test":
            lo, hi = int(plan.valid_end[u]), int(plan.test_end[u])
        else:
            lo, hi = int(plan.train_end[u]), int(plan.valid_end[u])
        if hi > lo and lo > 0:
            out.append((u, lo, seq[lo:hi]))
    return out


def evaluate(params: ModelParams, dataset: Dataset, plan: SplitPlan, hyper: HyperParams, ks=(5, 10),
             measure_latency: bool = False, exclude_seen: bool = False, target: str = "test",
             chunk: int = 1024) -> EvalResult:
    """Rank every item (pad excluded) for each user with a non-empty target
    range and average Recall@k / NDCG@k over those users.

    The context is the last ``n_h`` items before the target range and is
    not rolled forward over the target items.  ``exclude_seen`` also drops
    the user's earlier items from the candidates.
    """
    ks = sorted({int(k) for k in ks})
    if params.num_items != dataset.num_items or params.num_users != dataset.num_users:
        raise ValueError(f"model is {params.num_users}x{params.num_items} users x items, "
                         f"dataset is {dataset.num_users}x{dataset.num_items}")
    todo = _eval_targets(dataset, plan, target)
    if not todo:
        raise NoEvaluableUsersError(f"no user has {target} items")
    pad = params.pad_id
    kmax = ks[-1]
    admissible = dataset.num_items
    if kmax > admissible:
        raise ValueError(f"k={kmax} exceeds the {admissible} rankable items")

    sums = {k: [0.0, 0.0] for k in ks}
    latency = None
    if measure_latency:
        elapsed = 0.0
        for u, end, truth in todo:
            seq = dataset.sequences[u]
            ctx = history_context(seq, end, hyper.n_h, pad)
            seen = np.unique(seq[:end]) if exclude_seen else ()
            t0 = time.perf_counter()
            k_eff = min(kmax, admissible - len(seen))
            rec = top_k(score_all(u, ctx, params, hyper), k_eff, exclude=seen, pad_id=pad)
            elapsed += time.perf_counter() - t0
            _accumulate(sums, rec, truth, ks)
        latency = elapsed / len(todo)
    else:
        for start in range(0, len(todo), chunk):
            part = todo[start:start + chunk]
            users = np.array([u for u, _, _ in part], dtype=np.int64)
            ctx = np.stack([history_context(dataset.sequences[u], end, hyper.n_h, pad) for u, end, _ in part])
            S = score_batch(params, hyper, users, ctx)
            S[:, pad] = -np.inf
            if exclude_seen:
                for b, (u, end, _) in enumerate(part):
                    S[b, dataset.sequences[u][:end]] = -np.inf
            recs = _topk_rows(S, kmax)
            for b, (_, _, truth) in enumerate(part):
                rec = recs[b]
                if exclude_seen:
                    # a heavy user may have seen nearly everything; banned ids must not fill the list
                    rec = rec[np.isfinite(S[b, rec])]
                _accumulate(sums, rec.tolist(), truth, ks)

    n = len(todo)
    metrics = {k: (sums[k][0] / n, sums[k][1] / n) for k in ks}
    meta = {"target": target, "exclude_seen": bool(exclude_seen),
            "setting": plan.setting.value if plan.setting else "custom"}
    return EvalResult(metrics, n, latency, meta)


def _accumulate(sums, rec, truth, ks):
    truth = set(np.asarray(truth).tolist())
    for k in ks:
        sums[k][0] += recall_at_k(rec[:k], truth)
        sums[k][1] += ndcg_at_k(rec[:k], truth, k)


def bench_latency(params: ModelParams, hyper: HyperParams, contexts, users, k: int = 10) -> float:
    """Mean wall-clock seconds of score_all + top_k per user."""
    pad = params.pad_id
    elapsed = 0.0
    for u, ctx in zip(users, contexts):
        t0 = time.perf_counter()
        top_k(score_all(int(u), ctx, params, hyper), k, pad_id=pad)
        elapsed += time.perf_counter() - t0
    return elapsed / len(users)
