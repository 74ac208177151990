"""BPR training with uniform negatives, analytic gradients and sparse Adam."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SplitPlan, TrainingInstance, instances_to_arrays, make_instances
from .model import Ablation, ForwardState, HyperParams, ModelParams, Pooling, forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


def sample_negative(targets, n: int, rng: np.random.Generator) -> int:
    """One item uniformly from ``[0, n - 1)`` (the pad ``n - 1`` excluded)
    that is not among ``targets``."""
    banned = {int(t) for t in targets if 0 <= t < n - 1}
    support = n - 1 - len(banned)
    if support <= 0:
        raise ValueError("no admissible negative: targets cover every item")
    # rank-select among admissible ids so a single draw suffices
    r = int(rng.integers(support))
    for b in sorted(banned):
        if r >= b:
            r += 1
        else:
            break
    return r


def sample_negatives(targets: np.ndarray, num_items: int, rng: np.random.Generator) -> np.ndarray:
    """One negative per target entry; rows of ``targets`` are excluded
    row-wise.  Rejection sampling, so the law is uniform over admissible ids."""
    targets = np.asarray(targets, dtype=np.int64)
    if num_items <= targets.shape[1] and any(len(set(r)) >= num_items for r in targets.tolist()):
        raise ValueError("no admissible negative: targets cover every item")
    neg = rng.integers(num_items, size=targets.shape)
    bad = (neg[:, :, None] == targets[:, None, :]).any(axis=2)
    while bad.any():
        rows, cols = np.nonzero(bad)
        neg[rows, cols] = rng.integers(num_items, size=len(rows))
        bad[rows, cols] = (neg[rows, cols][:, None] == targets[rows]).any(axis=1)
    return neg


def bpr_loss(r_pos, r_neg):
    """-log sigmoid(r_pos - r_neg), as softplus(r_neg - r_pos)."""
    return np.logaddexp(0.0, np.subtract(r_neg, r_pos))


@dataclass
class Gradients:
    """Row-sparse gradients: unique row ids and their gradient rows."""

    U_ids: np.ndarray
    U: np.ndarray
    V_ids: np.ndarray
    V: np.ndarray
    W_ids: np.ndarray
    W: np.ndarray

    def dense(self, params: ModelParams):
        out = []
        for ids, g, full in ((self.U_ids, self.U, params.U), (self.V_ids, self.V, params.V),
                             (self.W_ids, self.W, params.W)):
            d = np.zeros_like(full)
            d[ids] = g
            out.append(d)
        return tuple(out)


def _scatter(ids, rows, d):
    uniq, inv = np.unique(ids, return_inverse=True)
    acc = np.zeros((len(uniq), d))
    np.add.at(acc, inv.ravel(), rows.reshape(-1, d))
    return uniq, acc


def _pool_backward(dpos, dpooled, mask, winners, lo):
    """Accumulate the pooled-vector adjoint into per-position adjoints for
    window positions ``lo:``."""
    m = mask[:, lo:]
    if winners is None:
        dpos[:, lo:] += m[:, :, None] * (dpooled / m.sum(axis=1)[:, None])[:, None, :]
    else:
        B, d = dpooled.shape
        bi = np.repeat(np.arange(B), d)
        di = np.tile(np.arange(d), B)
        np.add.at(dpos, (bi, lo + winners.ravel(), di), dpooled.ravel())


def batch_loss(st: ForwardState, pos, neg, params: ModelParams, hyper: HyperParams) -> float:
    """Mean over instances of the summed per-target BPR terms, plus reg times
    the squared norm of every distinct row the batch touches."""
    r_pos = np.einsum("bd,bjd->bj", st.q, params.W[pos])
    r_neg = np.einsum("bd,bjd->bj", st.q, params.W[neg])
    data = bpr_loss(r_pos, r_neg).sum() / len(pos)
    return float(data + hyper.reg * _reg_norm(st, pos, neg, params, hyper))


def _touched(st, pos, neg, params, hyper):
    u = np.unique(st.users) if hyper.ablation is not Ablation.DROP_U else np.empty(0, np.int64)
    v = np.unique(st.contexts[st.mask])
    w = np.unique(np.concatenate([np.ravel(pos), np.ravel(neg)]))
    return u, v, w


def _reg_norm(st, pos, neg, params, hyper):
    u, v, w = _touched(st, pos, neg, params, hyper)
    return float((params.U[u] ** 2).sum() + (params.V[v] ** 2).sum() + (params.W[w] ** 2).sum())


def backward(st: ForwardState, pos, neg, params: ModelParams, hyper: HyperParams):
    """Analytic gradients of :func:`batch_loss` for the rows the batch
    touches.  Returns ``(loss, Gradients)``."""
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    B = len(st.users)
    if pos.shape != neg.shape or pos.ndim != 2 or pos.shape[0] != B:
        raise ContractError(f"forward state has {B} rows; targets {pos.shape}, negatives {neg.shape}")
    if st.contexts.shape[1] != hyper.n_h or st.p != hyper.p or st.q.shape[1] != params.d:
        raise ContractError("forward state was produced with different hyperparameters")
    d = params.d

    Wp, Wn = params.W[pos], params.W[neg]
    margin = np.einsum("bd,bjd->bj", st.q, Wp) - np.einsum("bd,bjd->bj", st.q, Wn)
    data_loss = np.logaddexp(0.0, -margin).sum() / B
    # d softplus(-m)/dm = -sigmoid(-m)
    g = -np.exp(-np.logaddexp(0.0, margin)) / B

    dWp = g[:, :, None] * st.q[:, None, :]
    dq = np.einsum("bj,bjd->bd", g, Wp - Wn)

    dpos = np.zeros(st.contexts.shape + (d,))
    dh = dq
    if st.syn is not None:
        rows = st.syn
        c = st.c[rows]
        dh = dq.copy()
        dh[rows] = dq[rows] * (1.0 + c.sum(axis=1))
        dc = dq[rows] * st.h[rows]  # same adjoint for every order
        m = st.mask[rows]
        count = m.sum(axis=1)[:, None, None]
        share = m[:, :, None] * (dc[:, None, :] / count)
        per_item, others = st.c_per_item[rows], st.others[rows]
        gbar = share.copy()
        a_others = np.zeros_like(share)
        for k in range(st.p - 1, 0, -1):
            a_others += gbar * per_item[:, k - 1]
            gbar = gbar * others
            if k >= 2:
                gbar += share
        total = a_others.sum(axis=1, keepdims=True)
        dpos[rows] += m[:, :, None] * (gbar + total - a_others)
    _pool_backward(dpos, dh, st.mask, st.h_winners, 0)
    if hyper.ablation is not Ablation.DROP_O:
        _pool_backward(dpos, dq, st.mask, st.o_winners, hyper.n_h - hyper.n_l)

    reg = hyper.reg
    if hyper.ablation is not Ablation.DROP_U:
        U_ids, gU = _scatter(st.users, dq, d)
        gU += 2 * reg * params.U[U_ids]
    else:
        U_ids, gU = np.empty(0, np.int64), np.zeros((0, d))
    V_ids, gV = _scatter(st.contexts[st.mask], dpos[st.mask], d)
    gV += 2 * reg * params.V[V_ids]
    W_ids, gW = _scatter(np.concatenate([pos.ravel(), neg.ravel()]),
                         np.concatenate([dWp.reshape(-1, d), -dWp.reshape(-1, d)]), d)
    gW += 2 * reg * params.W[W_ids]

    loss = data_loss + reg * ((params.U[U_ids] ** 2).sum() + (params.V[V_ids] ** 2).sum()
                              + (params.W[W_ids] ** 2).sum())
    return float(loss), Gradients(U_ids, gU, V_ids, gV, W_ids, gW)


def instance_loss_and_grads(instance: TrainingInstance, negatives, params: ModelParams,
                            hyper: HyperParams):
    """Forward + backward for a single training instance."""
    st = forward(params, hyper, [instance.user], np.asarray(instance.context, dtype=np.int64)[None])
    return backward(st, np.asarray(instance.targets)[None], np.asarray(negatives)[None], params, hyper)


@dataclass
class AdamState:
    mU: np.ndarray
    vU: np.ndarray
    mV: np.ndarray
    vV: np.ndarray
    mW: np.ndarray
    vW: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        z = np.zeros_like
        return cls(z(params.U), z(params.U), z(params.V), z(params.V), z(params.W), z(params.W),
                   0, beta1, beta2, eps)


def _nonzero_rows(ids, g, pad_id=None):
    keep = np.any(g != 0, axis=1)
    if pad_id is not None:
        keep &= ids != pad_id
    return ids[keep], g[keep]


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, learning_rate: float):
    """Bias-corrected Adam on the rows with a nonzero gradient; other rows
    and their moments are left alone.  Updates in place and returns
    ``(params, state)``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    pad = params.pad_id
    for P, m, v, ids, g, is_item in (
        (params.U, state.mU, state.vU, grads.U_ids, grads.U, False),
        (params.V, state.mV, state.vV, grads.V_ids, grads.V, True),
        (params.W, state.mW, state.vW, grads.W_ids, grads.W, True),
    ):
        ids, g = _nonzero_rows(ids, g, pad if is_item else None)
        if not len(ids):
            continue
        m[ids] = b1 * m[ids] + (1.0 - b1) * g
        v[ids] = b2 * v[ids] + (1.0 - b2) * g * g
        P[ids] -= learning_rate * (m[ids] / c1) / (np.sqrt(v[ids] / c2) + state.eps)
    return params, state


def sgd_step(params: ModelParams, grads: Gradients, learning_rate: float):
    pad = params.pad_id
    for P, ids, g, is_item in ((params.U, grads.U_ids, grads.U, False),
                               (params.V, grads.V_ids, grads.V, True),
                               (params.W, grads.W_ids, grads.W, True)):
        ids, g = _nonzero_rows(ids, g, pad if is_item else None)
        P[ids] -= learning_rate * g
    return params


@dataclass
class TrainReport:
    checkpoints: list = field(default_factory=list)  # dicts: epoch, recall@10, ndcg@10, loss
    epoch_loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int | None = None

    def rows(self):
        return [(c["epoch"], c["recall@10"], c["ndcg@10"], c["loss"]) for c in self.checkpoints]

    def to_text(self, header_comments=(), timings: bool = True) -> str:
        lines = [f"# {c}" for c in header_comments]
        lines.append(f"# best_epoch={self.best_epoch}")
        lines.append("epoch,recall@10,ndcg@10,loss" + (",seconds" if timings else ""))
        for c in self.checkpoints:
            row = f"{c['epoch']},{c['recall@10']:.6f},{c['ndcg@10']:.6f},{c['loss']:.6f}"
            if timings:
                row += f",{sum(self.epoch_seconds[:c['epoch']]):.3f}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def train(dataset: Dataset, plan: SplitPlan, hyper: HyperParams, include_validation: bool = False,
          ks_valid=(10,), exclude_seen: bool = False):
    """Fit parameters; returns ``(best params, TrainReport)``.

    Every ``validate_every`` epochs (and at the last epoch) the model is
    scored on each user's validation items and the checkpoint with the
    highest Recall@10 is kept.  With ``include_validation`` the validation
    items are trained on instead, so the final parameters are returned.
    """
    from .evaluation import evaluate, NoEvaluableUsersError

    hyper.validate()
    plan.check(dataset)
    rng = np.random.default_rng(hyper.seed)
    params = ModelParams.init(dataset.num_users, dataset.num_items, hyper.d, rng)
    report = TrainReport()
    if hyper.max_epochs == 0:
        return params, report

    instances = make_instances(dataset, plan, hyper.n_h, hyper.n_p, include_validation)
    users, ctx, tgt = instances_to_arrays(instances, hyper.n_h, hyper.n_p)
    N = len(users)
    if N == 0:
        raise TrainingError("no training instances: sequences shorter than the target window")
    state = AdamState.zeros_like(params, hyper.beta1, hyper.beta2, hyper.eps)
    best = None
    best_recall = -1.0
    validating = not include_validation and bool(np.any(plan.valid_end > plan.train_end))

    for epoch in range(1, hyper.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(N)
        total = 0.0
        for bno, start in enumerate(range(0, N, hyper.batch_size)):
            idx = order[start:start + hyper.batch_size]
            neg = sample_negatives(tgt[idx], dataset.num_items, rng)
            st = forward(params, hyper, users[idx], ctx[idx])
            loss, grads = backward(st, tgt[idx], neg, params, hyper)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {bno}; "
                    f"first instance: user={int(users[idx[0]])} context={ctx[idx[0]].tolist()} "
                    f"targets={tgt[idx[0]].tolist()}")
            if hyper.optimizer == "adam":
                adam_step(params, grads, state, hyper.learning_rate)
            else:
                sgd_step(params, grads, hyper.learning_rate)
            total += loss * len(idx)
        report.epoch_loss.append(total / N)
        report.epoch_seconds.append(time.perf_counter() - t0)

        if epoch % hyper.validate_every == 0 or epoch == hyper.max_epochs:
            if validating:
                try:
                    res = evaluate(params, dataset, plan, hyper, ks=sorted(set(ks_valid) | {10}),
                                   target="valid", exclude_seen=exclude_seen)
                    recall, ndcg = res.metrics[10]
                except NoEvaluableUsersError:
                    recall = ndcg = float("nan")
            else:
                recall = ndcg = float("nan")
            report.checkpoints.append({"epoch": epoch, "recall@10": recall, "ndcg@10": ndcg,
                                       "loss": report.epoch_loss[-1]})
            log.info("epoch %d loss %.5f valid recall@10 %.4f ndcg@10 %.4f",
                     epoch, report.epoch_loss[-1], recall, ndcg)
            if validating and recall > best_recall:
                best_recall = recall
                best = params.copy()
                report.best_epoch = epoch

    if best is None:
        report.best_epoch = hyper.max_epochs
        best = params
    return best, report
