import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unidial import autograd as ag
from unidial.autograd import Tensor, gradcheck
from unidial.losses import (
    ContrastiveConfig,
    HiddenSplit,
    LossWeights,
    NonFiniteLossError,
    answer_contrastive_loss,
    combined_loss,
    context_contrastive_loss,
    dense_finetune_loss,
    generative_loss,
    info_nce,
    mlm_loss,
    nsp_loss,
    nsp_loss_from_logits,
    pool_spans,
    split_and_pool,
)

LITERAL = "exclude_positive"
INCLUSIVE = "include_positive"


def vectors_with_cosines(cos_values, dim=4, rng=None):
    """Unit query e0 and keys whose cosine with it equals each requested value."""
    rng = rng or np.random.default_rng(0)
    q = np.zeros(dim)
    q[0] = 1.0
    keys = []
    for c in cos_values:
        k = np.zeros(dim)
        k[0] = c
        k[1] = math.sqrt(max(0.0, 1.0 - c * c))
        keys.append(k * rng.uniform(0.5, 3.0))
    return q, np.array(keys)


def scalar_info_nce(pos_cos, neg_cos, tau, mode):
    """Independent oracle: plain-float evaluation of the InfoNCE formula."""
    num = math.exp(pos_cos / tau)
    den = sum(math.exp(c / tau) for c in neg_cos)
    if mode == INCLUSIVE:
        den += num
    return -math.log(num / den)


def loss_for(pos_cos, neg_cos, tau, mode):
    q, keys = vectors_with_cosines([pos_cos] + list(neg_cos))
    cfg = ContrastiveConfig(tau, len(neg_cos), mode)
    return float(info_nce(Tensor(q[None]), Tensor(keys[:1]), Tensor(keys[None, 1:]), cfg).data)


# -- contrastive worked values ------------------------------------------------
def test_equal_similarity_single_negative_is_zero():
    assert abs(loss_for(0.3, [0.3], 0.1, LITERAL)) < 1e-10


def test_worked_values_both_modes():
    assert abs(loss_for(1.0, [0.0, 0.0], 1.0, LITERAL) - (-math.log(math.e / 2))) < 1e-10
    assert abs(loss_for(1.0, [0.0, 0.0], 1.0, LITERAL) - (-0.30685)) < 5e-6
    assert abs(loss_for(1.0, [0.0, 0.0], 1.0, INCLUSIVE) - math.log((math.e + 2) / math.e)) < 1e-10
    # ln((e+2)/e) = 0.551445; the reference value 0.55150 is off in the fifth place
    assert abs(loss_for(1.0, [0.0, 0.0], 1.0, INCLUSIVE) - 0.55150) < 1e-4


def test_all_negatives_opposite():
    b = 4
    value = loss_for(1.0, [-1.0] * b, 0.5, LITERAL)
    assert abs(value - (-4 + math.log(b))) < 1e-10
    assert abs(value - (-2.61371)) < 5e-6


@pytest.mark.parametrize("mode", [LITERAL, INCLUSIVE])
def test_batch_matches_scalar_oracle(mode):
    rng = np.random.default_rng(3)
    b, k, d = 5, 4, 6
    q, p, n = rng.standard_normal((b, d)), rng.standard_normal((b, d)), rng.standard_normal((b, k, d))
    cfg = ContrastiveConfig(0.3, k, mode)
    got = float(info_nce(Tensor(q), Tensor(p), Tensor(n), cfg).data)

    def cos(u, v):
        return float(u @ v / math.sqrt(u @ u) / math.sqrt(v @ v))

    want = np.mean([scalar_info_nce(cos(q[i], p[i]), [cos(q[i], n[i, j]) for j in range(k)], 0.3, mode)
                    for i in range(b)])
    assert abs(got - want) < 1e-10


@pytest.mark.parametrize("mode", [LITERAL, INCLUSIVE])
def test_equal_similarities_give_log_counts(mode):
    for b in (1, 3, 8):
        value = loss_for(0.2, [0.2] * b, 0.1, mode)
        expected = math.log(b + 1) if mode == INCLUSIVE else math.log(b)
        assert abs(value - expected) < 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), mode=st.sampled_from([LITERAL, INCLUSIVE]))
def test_contrastive_losses_ignore_vector_scale(seed, mode):
    rng = np.random.default_rng(seed)
    b, k, h = 3, 3, 5
    split = HiddenSplit(*(Tensor(rng.standard_normal((b, h))) for _ in range(4)))
    negs = rng.standard_normal((b, k, h))
    scales = rng.uniform(0.1, 10.0, size=5)
    scaled = HiddenSplit(*(Tensor(x.data * s) for x, s in zip(
        (split.context_disc, split.answer_disc, split.context_gen, split.answer_gen), scales[:4])))
    cfg = ContrastiveConfig(0.1, k, mode)
    for fn in (answer_contrastive_loss, context_contrastive_loss):
        a = float(fn(split, Tensor(negs), cfg).data)
        c = float(fn(scaled, Tensor(negs * scales[4]), cfg).data)
        assert abs(a - c) <= 1e-12 * max(1.0, abs(a))


def test_scaling_by_three_leaves_loss_unchanged():
    rng = np.random.default_rng(7)
    v = [rng.standard_normal((2, 4)) for _ in range(4)]
    negs = rng.standard_normal((2, 2, 4))
    cfg = ContrastiveConfig(0.5, 2)
    a = context_contrastive_loss(HiddenSplit(*(Tensor(x) for x in v)), Tensor(negs), cfg)
    b = context_contrastive_loss(HiddenSplit(*(Tensor(3 * x) for x in v)), Tensor(3 * negs), cfg)
    assert abs(float(a.data) - float(b.data)) < 1e-12


@pytest.mark.parametrize("mode", [LITERAL, INCLUSIVE])
def test_loss_decreases_with_positive_similarity(mode):
    values = [loss_for(c, [0.1, -0.4, 0.3], 0.2, mode) for c in np.linspace(-0.9, 0.9, 10)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_include_positive_is_positive_and_bounded_at_uniform():
    rng = np.random.default_rng(1)
    for _ in range(20):
        cos = rng.uniform(-1, 1, 5)
        assert loss_for(cos[0], cos[1:], 0.1, INCLUSIVE) > 0


def test_zero_norm_vector_is_an_error():
    with pytest.raises(ValueError):
        info_nce(Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 3))), Tensor(np.ones((1, 1, 3))), ContrastiveConfig())


def test_contrastive_config_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0.0)
    with pytest.raises(ValueError):
        ContrastiveConfig(denominator_mode="other")


# -- pooling --------------------------------------------------------------
def test_split_and_pool_matches_manual_means():
    rng = np.random.default_rng(11)
    disc = rng.standard_normal((2, 7, 3))
    gen = rng.standard_normal((2, 7, 3))
    dec = rng.standard_normal((2, 4, 5))
    ctx = [(0, 4), (0, 5)]
    ans = [(4, 6), (5, 6)]
    lengths = [2, 1]
    s = split_and_pool(Tensor(disc), Tensor(gen), Tensor(dec), ctx, ans, lengths)
    for i in range(2):
        np.testing.assert_allclose(s.context_disc.data[i], disc[i, ctx[i][0]:ctx[i][1]].mean(0), atol=1e-12)
        np.testing.assert_allclose(s.answer_disc.data[i], disc[i, ans[i][0]:ans[i][1]].mean(0), atol=1e-12)
        np.testing.assert_allclose(s.context_gen.data[i], gen[i, ctx[i][0]:ctx[i][1]].mean(0), atol=1e-12)
        np.testing.assert_allclose(s.answer_gen.data[i], dec[i, :lengths[i]].mean(0), atol=1e-12)
    # single-token answer span is that token's state; the context includes [CLS] at 0
    assert np.array_equal(s.answer_disc.data[1], disc[1, 5])


def test_constant_context_pools_to_that_vector():
    h = np.tile(np.array([1.0, -2.0, 0.5]), (1, 6, 1))
    out = pool_spans(Tensor(h), [(0, 4)])
    np.testing.assert_allclose(out.data[0], [1.0, -2.0, 0.5], atol=1e-15)


def test_split_and_pool_rejects_inconsistent_spans():
    x = Tensor(np.zeros((1, 5, 2)))
    with pytest.raises(ValueError):
        split_and_pool(x, x, x, [(0, 3)], [(2, 4)], [2])


def test_pooling_ignores_padding():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((1, 5, 2))
    mask = np.array([[1, 1, 1, 0, 0]], dtype=float)
    out = pool_spans(Tensor(h), [(0, 5)], mask)
    np.testing.assert_allclose(out.data[0], h[0, :3].mean(0), atol=1e-14)


# -- supervised objectives ---------------------------------------------------
def test_mlm_uniform_logits_give_log_vocab():
    for v in (2, 7, 50):
        loss = mlm_loss(Tensor(np.zeros((1, v))), [1])
        assert abs(float(loss.data) - math.log(v)) < 1e-12
    assert abs(float(mlm_loss(Tensor(np.zeros((1, 2))), [0]).data) - 0.6931) < 1e-4


def test_mlm_perfect_prediction_is_zero():
    logits = np.full((2, 5), -1e4)
    logits[0, 1] = logits[1, 3] = 0.0
    assert abs(float(mlm_loss(Tensor(logits), [1, 3]).data)) < 1e-12


def test_mlm_adds_region_mse():
    logits = Tensor(np.zeros((1, 4)))
    recon = Tensor(np.array([[1.0, 2.0], [0.0, 0.0]]))
    target = np.array([[0.0, 0.0], [1.0, 1.0]])
    want = math.log(4) + np.mean((recon.data - target) ** 2)
    assert abs(float(mlm_loss(logits, [2], recon, target).data) - want) < 1e-12


def test_empty_masking_plan_gives_constant_zero():
    loss = mlm_loss(None, np.array([], dtype=int))
    assert float(loss.data) == 0.0 and not loss.requires_grad


def test_nsp_worked_values():
    assert abs(float(nsp_loss(Tensor(np.array([0.5])), 1).data) - math.log(2)) < 1e-12
    assert abs(float(nsp_loss(Tensor(np.array([0.5])), 0).data) - math.log(2)) < 1e-12
    assert abs(float(nsp_loss(Tensor(np.array([1.0])), 1).data)) < 1e-12
    assert abs(float(nsp_loss(Tensor(np.array([0.75])), 0).data) - math.log(4)) < 1e-12
    assert abs(float(nsp_loss(Tensor(np.array([0.75])), 0).data) - 1.38629) < 5e-6


def test_nsp_rejects_scores_outside_unit_interval():
    for p, y in ((1.5, 1), (-0.1, 0), (1.0, 0), (0.0, 1)):
        with pytest.raises(ValueError):
            nsp_loss(Tensor(np.array([p])), y)


def test_nsp_from_logits_matches_probability_form():
    z = np.array([-2.0, 0.3, 1.7])
    y = np.array([0.0, 1.0, 1.0])
    p = 1 / (1 + np.exp(-z))
    a = float(nsp_loss_from_logits(Tensor(z), y).data)
    b = float(nsp_loss(Tensor(p), y).data)
    assert abs(a - b) < 1e-12


def test_generative_uniform_logits_any_length():
    for length, v in ((1, 5), (3, 9), (6, 2)):
        logits = Tensor(np.zeros((1, length, v)))
        assert abs(float(generative_loss(logits, np.zeros((1, length), dtype=int)).data) - math.log(v)) < 1e-12


def test_generative_two_positions():
    logits = np.log(np.array([[[0.5, 0.5, 1e-300], [0.25, 0.75, 1e-300]]]) + 1e-300)
    value = float(generative_loss(Tensor(logits), np.array([[0, 0]])).data)
    assert abs(value - (math.log(2) + math.log(4)) / 2) < 1e-10
    assert abs(value - 1.03972) < 5e-6


def test_generative_is_mean_over_examples_of_token_means():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((2, 3, 4))
    targets = np.array([[1, 2, 0], [3, 0, 0]])
    mask = np.array([[1, 1, 1], [1, 0, 0]], dtype=float)
    got = float(generative_loss(Tensor(logits), targets, mask).data)
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    ex0 = -(lp[0, 0, 1] + lp[0, 1, 2] + lp[0, 2, 0]) / 3
    ex1 = -lp[1, 0, 3]
    assert abs(got - (ex0 + ex1) / 2) < 1e-12


def test_generative_length_mismatch_is_an_error():
    with pytest.raises(ValueError):
        generative_loss(Tensor(np.zeros((1, 3, 4))), np.zeros((1, 2), dtype=int))


def test_combined_loss_worked_values():
    ones = {k: Tensor(1.0) for k in ("l_mlm", "l_nsp", "l_g", "l_ac", "l_cc")}
    assert abs(float(combined_loss(ones, LossWeights(alpha=0.05)).data) - 4.05) < 1e-12
    assert abs(float(combined_loss(ones, LossWeights.for_mode("elementary")).data) - 2.05) < 1e-12
    assert abs(float(combined_loss(ones, LossWeights.for_mode("no_cc")).data) - 3.05) < 1e-12
    assert abs(float(combined_loss(ones, LossWeights.for_mode("no_ac")).data) - 3.05) < 1e-12


def test_combined_loss_rejects_non_finite_components():
    prev = ag.set_finite_check(False)
    try:
        bad = Tensor(float("nan"))
    finally:
        ag.set_finite_check(prev)
    with pytest.raises(NonFiniteLossError):
        combined_loss({"l_mlm": bad}, LossWeights())


def test_combined_gradient_is_weighted_sum_of_component_gradients():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    targets = np.array([0, 1, 2])

    def parts(x):
        return {"l_mlm": ag.cross_entropy(x, targets), "l_nsp": ag.tsum(x * x) * 0.1,
                "l_g": ag.tmean(ag.exp(x * 0.3)), "l_ac": ag.tsum(ag.tanh(x)), "l_cc": ag.tmean(x)}

    w = LossWeights(alpha=0.05)
    assert gradcheck(lambda x: combined_loss(parts(x), w), [x]) < 1e-6
    total = np.zeros_like(x.data)
    for name, value in parts(x).items():
        x.grad = None
        value.backward()
        total += w.coefficient(name) * x.grad
    x.grad = None
    combined_loss(parts(x), w).backward()
    np.testing.assert_allclose(x.grad, total, atol=1e-12)


def test_dense_loss_worked_values():
    n = 100
    rel = np.zeros(n)
    rel[17] = 1.0
    assert abs(float(dense_finetune_loss(Tensor(np.zeros(n)), rel).data) - math.log(n)) < 1e-12
    value = float(dense_finetune_loss(Tensor(np.zeros(4)), [1, 1, 0, 0]).data)
    assert abs(value - math.log(4)) < 1e-12
    assert abs(value - 1.38629) < 5e-6


def test_dense_loss_minimum_is_relevance_entropy():
    q = np.array([0.6, 0.3, 0.1, 0.0])
    logits = np.log(np.where(q > 0, q, 1e-300))
    entropy = -sum(p * math.log(p) for p in q if p > 0)
    assert abs(float(dense_finetune_loss(Tensor(logits), q).data) - entropy) < 1e-12
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert float(dense_finetune_loss(Tensor(rng.standard_normal(4)), q).data) > entropy


def test_dense_loss_needs_some_relevance():
    with pytest.raises(ValueError):
        dense_finetune_loss(Tensor(np.zeros(3)), [0, 0, 0])


def test_ablation_switches():
    assert LossWeights.for_mode("elementary").coefficient("l_ac") == 0.0
    assert LossWeights.for_mode("no_cc").coefficient("l_cc") == 0.0
    assert LossWeights.for_mode("no_ac").coefficient("l_ac") == 0.0
    assert LossWeights.for_mode("full").coefficient("l_g") == 0.05
    with pytest.raises(ValueError):
        LossWeights.for_mode("unknown")
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


@pytest.mark.parametrize("mode", [LITERAL, INCLUSIVE])
def test_contrastive_gradients(mode):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        q, p = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))
        n = Tensor(rng.standard_normal((3, 2, 4)))
        cfg = ContrastiveConfig(0.5, 2, mode)
        worst = max(worst, gradcheck(lambda q, p, n: info_nce(q, p, n, cfg), [q, p, n]))
    assert worst < 1e-4


def test_supervised_loss_gradients():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        logits = Tensor(rng.standard_normal((2, 3, 5)))
        targets = rng.integers(0, 5, (2, 3))
        mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=float)
        worst = max(worst, gradcheck(lambda x: generative_loss(x, targets, mask), [logits]))
        z = Tensor(rng.standard_normal(4))
        rel = rng.uniform(0, 1, 4)
        worst = max(worst, gradcheck(lambda z: dense_finetune_loss(z, rel), [z]))
        p = Tensor(rng.uniform(0.1, 0.9, 3))
        y = rng.integers(0, 2, 3)
        worst = max(worst, gradcheck(lambda p: nsp_loss(p, y), [p]))
        m = Tensor(rng.standard_normal((2, 6)))
        r = Tensor(rng.standard_normal((1, 3)))
        tgt = rng.standard_normal((1, 3))
        worst = max(worst, gradcheck(lambda m, r: mlm_loss(m, [1, 4], r, tgt), [m, r]))
    assert worst < 1e-4
