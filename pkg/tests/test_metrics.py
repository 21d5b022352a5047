import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unidial import metrics
from unidial.corpus import generate_synthetic_corpus
from unidial.metrics import RankingInstance


def brute_rank(scores, gt):
    """Full sort of (−score, index) pairs; position of gt plus one."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order.index(gt) + 1


def brute_ndcg(scores, rel):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    k = sum(1 for r in rel if r > 0)
    dcg = sum(rel[order[i]] / math.log2(i + 2) for i in range(k))
    ideal = sorted(rel, reverse=True)
    idcg = sum(ideal[i] / math.log2(i + 2) for i in range(k))
    return dcg / idcg


def random_instances(n, seed=0, n_c=100):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        # coarse rounding forces plenty of ties
        scores = np.round(rng.standard_normal(n_c), 1)
        rel = np.where(rng.random(n_c) < 0.1, rng.choice([0.25, 0.5, 0.75, 1.0], n_c), 0.0)
        gt = int(rng.integers(n_c))
        rel[gt] = 1.0
        out.append(RankingInstance(scores, gt, rel))
    return out


def test_thousand_instances_match_brute_force():
    inst = random_instances(1000)
    ranks = [brute_rank(list(i.scores), i.gt_index) for i in inst]
    rep = metrics.report(inst)
    for k, key in ((1, "r1"), (5, "r5"), (10, "r10")):
        want = sum(r <= k for r in ranks) / len(ranks)
        assert abs(rep[key] - want) <= 1e-12
        assert abs(metrics.recall_at_k(inst, k) - want) <= 1e-12
    assert abs(rep["mrr"] - sum(1 / r for r in ranks) / len(ranks)) <= 1e-12
    assert abs(rep["mean"] - sum(ranks) / len(ranks)) <= 1e-12
    want_ndcg = sum(brute_ndcg(list(i.scores), list(i.relevance)) for i in inst) / len(inst)
    assert abs(rep["ndcg"] - want_ndcg) <= 1e-12
    for i, r in zip(inst[:50], ranks[:50]):
        assert metrics.rank_of_gt(i) == r


def test_tie_rule():
    assert metrics.rank_of_gt(RankingInstance(np.zeros(10), 0)) == 1
    assert metrics.rank_of_gt(RankingInstance(np.zeros(10), 4)) == 5
    assert metrics.rank_of_gt(RankingInstance(np.array([0.0, 3.0, 1.0]), 1)) == 1


def instances_with_ranks(ranks, n_c=10):
    out = []
    for r in ranks:
        scores = np.arange(n_c, 0, -1, dtype=float)
        out.append(RankingInstance(scores, r - 1))
    return out


def test_hand_summed_ranks():
    inst = instances_with_ranks([1, 2, 4])
    assert abs(metrics.mrr(inst) - 0.58333) < 5e-6
    assert abs(metrics.mrr(inst) - (1 + 1 / 2 + 1 / 4) / 3) < 1e-15
    assert abs(metrics.mean_rank(inst) - 7 / 3) < 1e-15
    assert abs(metrics.recall_at_k(inst, 1) - 1 / 3) < 1e-15
    ones = instances_with_ranks([1, 1, 1])
    assert metrics.recall_at_k(ones, 1) == metrics.mrr(ones) == metrics.mean_rank(ones) == 1.0
    three = instances_with_ranks([3])
    assert metrics.recall_at_k(three, 5) == 1.0 and metrics.recall_at_k(three, 1) == 0.0


def test_ndcg_worked_examples():
    # candidates A, B, C with relevance 1, 0.5, 0 and predicted order B, A, C
    inst = RankingInstance(np.array([2.0, 3.0, 1.0]), 0, np.array([1.0, 0.5, 0.0]))
    want = (0.5 + 1 / math.log2(3)) / (1 + 0.5 / math.log2(3))
    assert abs(metrics.ndcg(inst) - want) < 1e-15
    assert abs(metrics.ndcg(inst) - 0.85972) < 5e-6
    single = RankingInstance(np.array([5.0, 1.0, 0.0]), 0, np.array([1.0, 0.0, 0.0]))
    assert metrics.ndcg(single) == 1.0


def test_ndcg_ignores_order_of_irrelevant_tail():
    rel = np.array([1.0, 0.5, 0, 0, 0, 0])
    a = RankingInstance(np.array([6.0, 5, 4, 3, 2, 1]), 0, rel)
    b = RankingInstance(np.array([6.0, 5, 1, 2, 4, 3]), 0, rel)
    assert metrics.ndcg(a) == metrics.ndcg(b) == 1.0


def test_errors():
    with pytest.raises(ValueError):
        metrics.mrr([])
    with pytest.raises(ValueError):
        metrics.ndcg(RankingInstance(np.zeros(3), 0, np.zeros(3)))
    with pytest.raises(ValueError):
        metrics.ndcg(RankingInstance(np.zeros(3), 0))
    with pytest.raises(ValueError):
        RankingInstance(np.array([0.0, np.nan]), 0)
    with pytest.raises(ValueError):
        RankingInstance(np.zeros(3), 3)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), transform=st.sampled_from(["exp", "affine", "cube", "atan"]))
def test_metrics_invariant_under_monotone_transform(seed, transform):
    inst = random_instances(5, seed=seed, n_c=20)
    f = {"exp": np.exp, "affine": lambda x: 3 * x - 7, "cube": lambda x: x ** 3, "atan": np.arctan}[transform]
    moved = [RankingInstance(f(i.scores), i.gt_index, i.relevance) for i in inst]
    a, b = metrics.report(inst), metrics.report(moved)
    for key in metrics.REPORT_KEYS:
        assert a[key] == b[key]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_ndcg_bounded_and_one_at_ideal(seed):
    rng = np.random.default_rng(seed)
    rel = np.where(rng.random(15) < 0.4, rng.random(15), 0.0)
    rel[0] = 0.9
    i = RankingInstance(rng.standard_normal(15), 0, rel)
    assert 0.0 <= metrics.ndcg(i) <= 1.0 + 1e-15
    # scores equal to relevance rank relevant candidates ideally
    assert abs(metrics.ndcg(RankingInstance(rel.copy(), 0, rel)) - 1.0) < 1e-15


def test_prediction_files_round_trip(tmp_path):
    dialogs, _, _ = generate_synthetic_corpus(4, 2, 3, n_candidates=10)
    rng = np.random.default_rng(0)
    rows = [{"image_id": d.image_id, "round_id": t, "scores": rng.standard_normal(10)}
            for d in dialogs for t in range(1, 4)]
    path = tmp_path / "pred.jsonl"
    metrics.write_predictions(path, rows)
    back = metrics.read_predictions(path)
    assert len(back) == 6 and set(back[0]) == {"image_id", "round_id", "scores"}
    rep = metrics.evaluate_predictions(back, dialogs)
    inst = [RankingInstance(r["scores"], dialogs[k // 3].rounds[k % 3].gt_index, dialogs[k // 3].rounds[k % 3].dense_relevance)
            for k, r in enumerate(rows)]
    direct = metrics.report(inst)
    for key in metrics.REPORT_KEYS:
        assert rep[key] == pytest.approx(direct[key], abs=1e-15, nan_ok=True)
    out = tmp_path / "report.json"
    metrics.write_report(out, rep)
    assert tuple(json.loads(out.read_text())) == metrics.REPORT_KEYS


def test_report_without_relevance_has_nan_ndcg():
    rep = metrics.report(instances_with_ranks([2]))
    assert math.isnan(rep["ndcg"])
