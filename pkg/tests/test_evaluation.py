import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ham.data import Dataset, SplitPlan, holdout_plan, history_context
from ham.evaluation import (
    EvalResult, NoEvaluableUsersError, bench_latency, evaluate, format_latency, ndcg_at_k, recall_at_k, top_k,
)
from ham.model import HyperParams, ModelParams, score_all
from oracles import naive_ndcg, naive_ranking, naive_recall


def test_top_k_examples():
    assert top_k([0.1, 0.9, 0.5], 2) == [1, 2]
    assert top_k([0.3, 0.3, 0.3, 0.3], 2) == [0, 1]
    assert top_k([0.1, 0.9, 0.5], 1, exclude={1}) == [2]


def test_top_k_pad_and_infeasible():
    assert top_k([0.1, 0.2, 9.0], 2, pad_id=2) == [1, 0]
    with pytest.raises(ValueError):
        top_k([0.1, 0.2, 9.0], 3, pad_id=2)
    with pytest.raises(ValueError):
        top_k([0.1, 0.2, 9.0], 2, exclude={0}, pad_id=2)


def test_top_k_ties_straddling_the_cut():
    assert top_k([1, 5, 3, 5, 3, 3], 3) == [1, 3, 2]
    assert top_k([2, 2, 1, 2], 2) == [0, 1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.data())
def test_top_k_matches_full_sort(scores, data):
    k = data.draw(st.integers(0, len(scores)))
    assert top_k(scores, k) == naive_ranking(scores)[:k]


def test_recall_examples():
    assert recall_at_k(["A", "X", "Y"], {"A", "B", "C"}) == pytest.approx(1 / 3)
    assert recall_at_k(["C", "A", "B", "Z"], {"A", "B", "C"}) == 1.0
    assert recall_at_k(["X"], {"A"}) == 0.0
    with pytest.raises(ValueError):
        recall_at_k(["A"], set())


def test_ndcg_examples():
    assert ndcg_at_k([7, 3], {7}) == 1.0
    assert ndcg_at_k([3, 7], {7}) == pytest.approx(0.63093, abs=1e-5)
    assert ndcg_at_k([3, 7], {7}) == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert ndcg_at_k([1, 2], {5}) == 0.0


rankings = st.permutations(list(range(8)))
truths = st.sets(st.integers(0, 7), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(rankings, truths)
def test_metrics_monotone_in_k_and_bounded(ranking, truth):
    rec = [recall_at_k(ranking[:k], truth) for k in range(1, 9)]
    nd = [ndcg_at_k(ranking[:k], truth) for k in range(1, 9)]
    assert all(a <= b for a, b in zip(rec, rec[1:]))
    assert all(0 <= x <= 1 for x in rec + nd)
    for k in range(1, 9):
        perfect = all(j in truth for j in ranking[:min(k, len(truth))])
        assert (nd[k - 1] == pytest.approx(1.0, abs=1e-12)) == perfect
    # recall only grows with k; NDCG can dip when the ideal gain grows faster,
    # so the non-decrease holds for DCG itself
    dcg = [sum(1 / math.log2(i + 2) for i, j in enumerate(ranking[:k]) if j in truth) for k in range(1, 9)]
    assert all(a <= b for a, b in zip(dcg, dcg[1:]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=10), st.integers(-1000, 1000),
       st.data())
def test_top_k_translation_invariant(scores, shift, data):
    k = data.draw(st.integers(1, len(scores)))
    shifted = [s + shift for s in scores]
    # a shift can round two close scores together; only compare when it didn't
    if len(set(shifted)) == len(set(scores)):
        assert top_k(scores, k) == top_k(shifted, k)


@settings(max_examples=200, deadline=None)
@given(rankings, truths, st.integers(1, 8), st.data())
def test_recall_denominator_law(ranking, truth, k, data):
    hits = truth.intersection(ranking[:k])
    misses = sorted(truth - hits)
    dropped = data.draw(st.sets(st.sampled_from(misses))) if misses else set()
    smaller = (truth - dropped) or {misses[0]}
    assert recall_at_k(ranking[:k], smaller) >= recall_at_k(ranking[:k], truth)


def test_metrics_agree_with_naive_reference_small_exhaustive():
    ranking = [4, 0, 5, 2, 1, 3]
    for k in range(1, 5):
        for r in range(1, 7):
            for truth in map(set, __import__("itertools").combinations(range(6), r)):
                assert recall_at_k(ranking[:k], truth) == naive_recall(ranking, truth, k)
                assert ndcg_at_k(ranking[:k], truth) == pytest.approx(naive_ndcg(ranking, truth, k), abs=1e-15)


# --- evaluate ---------------------------------------------------------------

def _toy(num_users=5, num_items=9, d=4, seed=0):
    rng = np.random.default_rng(seed)
    P = ModelParams.init(num_users, num_items, d, rng)
    hp = HyperParams(d=d, n_h=3, n_l=1, n_p=1, p=2)
    hist = [rng.integers(num_items, size=6) for _ in range(num_users)]
    return rng, P, hp, hist


def _dataset(seqs, n):
    return Dataset([np.asarray(s) for s in seqs], [f"u{i}" for i in range(len(seqs))],
                   [f"i{j}" for j in range(n)])


def test_perfect_model_scores_one():
    _, P, hp, hist = _toy(num_users=1)
    k = 3
    rec = top_k(score_all(0, hist[0][-3:], P, hp), k, pad_id=P.pad_id)
    ds = _dataset([list(hist[0]) + rec], 9)
    res = evaluate(P, ds, holdout_plan(ds, n_valid=0, n_test=k), hp, ks=[k])
    assert res.metrics[k] == (1.0, 1.0) and res.num_users_evaluated == 1


def test_user_mean_is_unweighted():
    _, P, hp, hist = _toy(num_users=2)
    best = [top_k(score_all(u, hist[u][-3:], P, hp), 9, pad_id=P.pad_id) for u in range(2)]
    ds = _dataset([list(hist[0]) + [best[0][0]], list(hist[1]) + [best[1][-1]]], 9)
    res = evaluate(P, ds, holdout_plan(ds, n_valid=0, n_test=1), hp, ks=[1])
    assert res.metrics[1][0] == 0.5


@pytest.mark.parametrize("exclude_seen", [False, True])
@pytest.mark.parametrize("pooling", ["mean", "max"])
def test_evaluate_matches_naive_sort_oracle(exclude_seen, pooling):
    rng, P, _, _ = _toy(seed=3)
    hp = HyperParams(d=4, n_h=3, n_l=2, n_p=1, p=3, pooling=pooling)
    seqs = [rng.integers(9, size=int(rng.integers(6, 12))) for _ in range(5)]
    ds = _dataset(seqs, 9)
    plan = holdout_plan(ds, n_valid=1, n_test=2)
    ks = (1, 3, 5)
    res = evaluate(P, ds, plan, hp, ks=ks, exclude_seen=exclude_seen)
    expect = {k: [0.0, 0.0] for k in ks}
    for u, seq in enumerate(seqs):
        end = len(seq) - 2
        ctx = history_context(seq, end, hp.n_h, P.pad_id)
        banned = {P.pad_id} | (set(seq[:end].tolist()) if exclude_seen else set())
        ranking = naive_ranking(score_all(u, ctx, P, hp).tolist(), banned)
        truth = set(seq[end:].tolist())
        for k in ks:
            expect[k][0] += naive_recall(ranking, truth, k) / 5
            expect[k][1] += naive_ndcg(ranking, truth, k) / 5
    for k in ks:
        assert res.metrics[k][0] == pytest.approx(expect[k][0], abs=1e-12)
        assert res.metrics[k][1] == pytest.approx(expect[k][1], abs=1e-12)
    assert res.meta["exclude_seen"] is exclude_seen


def test_latency_mode_gives_same_metrics():
    rng, P, hp, _ = _toy(seed=5)
    ds = _dataset([rng.integers(9, size=10) for _ in range(5)], 9)
    plan = holdout_plan(ds)
    a = evaluate(P, ds, plan, hp, ks=(2, 5))
    b = evaluate(P, ds, plan, hp, ks=(2, 5), measure_latency=True)
    assert a.metrics == b.metrics and a.per_user_latency_mean is None
    assert b.per_user_latency_mean > 0


def test_exclude_seen_short_lists_agree_across_modes():
    # 9 items, user has seen 7 of them: only 2 admissible candidates for k=5
    rng, P, hp, _ = _toy(seed=8)
    ds = _dataset([[0, 1, 2, 3, 4, 5, 6, 7], [2, 2, 3, 8, 1, 0, 4, 5]], 9)
    P = ModelParams.init(2, 9, 4, rng)
    plan = holdout_plan(ds, n_valid=0, n_test=1)
    a = evaluate(P, ds, plan, hp, ks=(5,), exclude_seen=True)
    b = evaluate(P, ds, plan, hp, ks=(5,), exclude_seen=True, measure_latency=True)
    assert a.metrics == b.metrics
    assert ndcg_at_k([3], {3, 7}, k=5) == pytest.approx(1 / (1 + 1 / math.log2(3)))


def test_evaluate_skips_empty_ranges_and_errors_when_none():
    _, P, hp, hist = _toy(num_users=2)
    ds = _dataset(hist, 9)
    plan = SplitPlan(np.array([4, 4]), np.array([5, 5]), np.array([6, 5]))
    assert evaluate(P, ds, plan, hp, ks=[2]).num_users_evaluated == 1
    with pytest.raises(NoEvaluableUsersError):
        evaluate(P, ds, SplitPlan(np.array([4, 4]), np.array([5, 5]), np.array([5, 5])), hp)


def test_evaluate_rejects_mismatched_model():
    _, P, hp, hist = _toy()
    with pytest.raises(ValueError, match="users x items"):
        evaluate(P, _dataset(hist, 10), holdout_plan(_dataset(hist, 10)), hp)


def test_result_formats():
    res = EvalResult({5: (0.25, 0.5), 10: (0.5, 0.625)}, 3, 1.234e-4)
    lines = res.to_csv(["config: {}"]).splitlines()
    assert lines[:2] == ["# config: {}", "metric,k,value"]
    assert lines[2:] == ["recall,5,0.250000", "recall,10,0.500000", "ndcg,5,0.500000", "ndcg,10,0.625000"]
    assert "1.2e-04" in res.to_table()
    assert format_latency(0.000567) == "5.7e-04"


def test_bench_latency_positive():
    _, P, hp, hist = _toy()
    assert bench_latency(P, hp, [h[-3:] for h in hist], range(5), k=3) > 0
