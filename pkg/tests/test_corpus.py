import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unidial.corpus import (
    BatchItem,
    Dialog,
    NegativeSamplingError,
    OOVError,
    Round,
    SequenceOverflowError,
    Vocab,
    apply_mlm_masks,
    build_negative_sets,
    decode_answer,
    encode_discriminative,
    encode_generative,
    encode_pair,
    generate_synthetic_corpus,
    load_dense,
    load_dialogs,
    load_features,
    save_dense,
    save_dialogs,
    save_features,
)
from unidial.corpus.synthetic import COLORS


def cat_dialog():
    vocab = Vocab("a cat is it black yes no sir white".split())
    r1 = Round(("is", "it", "black"), ("yes",), [("no",), ("yes",)], 1)
    r2 = Round(("is", "it", "white"), ("no", "sir"), [("no", "sir"), ("yes",)], 0)
    return Dialog(7, ("a", "cat"), [r1, r2]), vocab


def words(seq, vocab):
    return list(vocab.decode(seq.tokens))


def test_discriminative_layout():
    d, v = cat_dialog()
    seq = encode_discriminative(d, 1, ("yes",), v)
    assert words(seq, v) == "[CLS] a cat [SEP] is it black [SEP] yes [SEP]".split()
    assert decode_answer(seq, v) == ("yes",)
    assert seq.answer_span == (8, 9)
    assert seq.context_span == (0, 8)
    assert list(seq.segments) == [0] * 8 + [1, 1]


def test_history_accumulates():
    d, v = cat_dialog()
    seq = encode_discriminative(d, 2, ("yes",), v)
    assert words(seq, v) == "[CLS] a cat [SEP] is it black [SEP] yes [SEP] is it white [SEP] yes [SEP]".split()


def test_generative_train_and_infer():
    d, v = cat_dialog()
    train = encode_generative(d, 2, v, "train")
    a, b = train.answer_span
    assert b - a == 2 and all(train.tokens[a:b] == v.mask_id)
    infer = encode_generative(d, 2, v, "infer")
    assert infer.answer_span is None
    assert not (infer.tokens == v.mask_id).any()
    assert list(infer.tokens) == list(train.tokens[:a])
    with pytest.raises(ValueError):
        encode_generative(d, 1, v, "other")


def test_overflow_and_oov_are_errors():
    d, v = cat_dialog()
    with pytest.raises(SequenceOverflowError):
        encode_discriminative(d, 2, ("yes",), v, max_seq_len=10)
    with pytest.raises(OOVError):
        encode_discriminative(d, 1, ("purple",), v)
    assert v.unk_id in encode_discriminative(d, 1, ("purple",), v, allow_unk=True).tokens


def test_corpus_is_pure_function_of_seed(tmp_path):
    paths = []
    for k in range(2):
        dialogs, feats, _ = generate_synthetic_corpus(3, 5, 3, n_candidates=10)
        save_dialogs(tmp_path / f"d{k}.json", dialogs)
        save_features(tmp_path / f"f{k}.bin", feats)
        paths.append((tmp_path / f"d{k}.json", tmp_path / f"f{k}.bin"))
    for a, b in zip(*paths):
        assert a.read_bytes() == b.read_bytes()
    other, _, _ = generate_synthetic_corpus(4, 5, 3, n_candidates=10)
    save_dialogs(tmp_path / "other.json", other)
    assert (tmp_path / "other.json").read_bytes() != paths[0][0].read_bytes()


def test_structural_contract():
    dialogs, feats, _ = generate_synthetic_corpus(0, 10, 3, n_candidates=10)
    assert len(dialogs) == 10 and len(feats) == 10
    rounds = [r for d in dialogs for r in d.rounds]
    assert len(rounds) == 30
    for r in rounds:
        assert len(r.candidates) == 10
        assert r.candidates[r.gt_index] == r.gt_answer
        assert len(set(r.candidates)) == 10
        assert r.dense_relevance[r.gt_index] > 0
    assert all(np.isfinite(f.regions).all() for f in feats)
    with pytest.raises(ValueError):
        generate_synthetic_corpus(0, 1, 1, n_candidates=1)


def test_linear_probe_recovers_dominant_color():
    dialogs, feats, _, scenes = generate_synthetic_corpus(0, 500, 1, n_candidates=10, return_scenes=True)
    x = np.stack([f.regions.mean(axis=0) for f in feats]).astype(np.float64)
    x = np.hstack([x, np.ones((len(x), 1))])
    y = np.array([s.dominant_color() for s in scenes])
    onehot = np.eye(len(COLORS))[y]
    w, *_ = np.linalg.lstsq(x, onehot, rcond=None)
    acc = float((np.argmax(x @ w, axis=1) == y).mean())
    assert acc > 0.90, acc


def test_files_round_trip(tmp_path):
    dialogs, feats, _ = generate_synthetic_corpus(1, 4, 3, n_candidates=10)
    save_dialogs(tmp_path / "d.json", dialogs)
    save_features(tmp_path / "f.bin", feats)
    save_dense(tmp_path / "dense.json", dialogs)
    back, answers = load_dialogs(tmp_path / "d.json")
    for a, b in zip(dialogs, back):
        assert a.image_id == b.image_id and a.caption == b.caption
        for ra, rb in zip(a.rounds, b.rounds):
            assert (ra.question, ra.gt_answer, ra.candidates, ra.gt_index) == \
                   (rb.question, rb.gt_answer, rb.candidates, rb.gt_index)
    fb = load_features(tmp_path / "f.bin")
    for f in feats:
        assert np.array_equal(fb[f.image_id].regions, f.regions)
    dense = load_dense(tmp_path / "dense.json")
    assert len(dense) == 12
    assert np.array_equal(dense[(dialogs[0].image_id, 2)], dialogs[0].rounds[1].dense_relevance)


def test_encoding_round_trip_and_pair_agreement_over_corpus():
    dialogs, _, vocab = generate_synthetic_corpus(2, 20, 4, n_candidates=10)
    for d in dialogs:
        for t in range(1, 5):
            r = d.round(t)
            for c in r.candidates[:3]:
                pair = encode_pair(d, t, c, vocab)
                assert decode_answer(pair.disc, vocab) == tuple(c)
                a, b = pair.disc.answer_span
                ctx = pair.disc.context_span
                assert list(pair.disc.tokens[:ctx[1]]) == list(pair.gen.tokens[:ctx[1]])
                assert pair.gen.tokens[-1] == pair.disc.tokens[-1] == vocab.sep_id
            seq = encode_discriminative(d, t, r.gt_answer, vocab)
            assert list(encode_generative(d, t, vocab, "train").tokens[:seq.answer_span[0]]) == \
                list(seq.tokens[:seq.answer_span[0]])
            gen = encode_generative(d, t, vocab, "train")
            assert np.array_equal(np.delete(gen.tokens, range(*gen.answer_span)),
                                  np.delete(seq.tokens, range(*seq.answer_span)))


# -- masking -----------------------------------------------------------------
def test_masking_rate_and_eligibility():
    v = Vocab(["w"])
    from unidial.corpus import EncodedSequence
    n = 10_000
    tokens = np.full(n + 2, v.stoi["w"], dtype=np.int64)
    tokens[0], tokens[-1] = v.cls_id, v.sep_id
    seq = EncodedSequence(tokens, np.zeros(n + 2, dtype=np.int64), (0, n + 1), (n + 1, n + 1))
    plan = apply_mlm_masks(seq, np.ones((4, 3)), 0, v)
    assert 900 <= len(plan.text_positions) <= 1100
    assert 0 not in plan.text_positions and n + 1 not in plan.text_positions
    assert (plan.tokens[plan.text_positions] == v.mask_id).all()
    assert (plan.text_targets == v.stoi["w"]).all()
    empty = apply_mlm_masks(seq, np.ones((4, 3)), 0, v, p_text=0.0, p_region=0.0)
    assert empty.empty


def test_binomial_bound_coverage_by_simulation():
    rng = np.random.default_rng(0)
    counts = rng.binomial(10_000, 0.10, size=20_000)
    assert ((counts >= 900) & (counts <= 1100)).mean() > 0.998


def test_reserved_tokens_never_masked_and_regions_zeroed():
    dialogs, feats, vocab = generate_synthetic_corpus(0, 5, 3, n_candidates=10)
    special = np.array(sorted(vocab.special_ids))
    for seed in range(20):
        d = dialogs[seed % 5]
        seq = encode_discriminative(d, 3, d.round(3).gt_answer, vocab)
        plan = apply_mlm_masks(seq, feats[seed % 5].regions, seed, vocab, p_text=0.5, p_region=0.5)
        assert not np.isin(seq.tokens[plan.text_positions], special).any()
        assert (plan.regions[plan.region_indices] == 0).all()
        assert np.array_equal(plan.region_targets, feats[seed % 5].regions[plan.region_indices])
        untouched = np.setdiff1d(np.arange(len(seq.tokens)), plan.text_positions)
        assert np.array_equal(plan.tokens[untouched], seq.tokens[untouched])


# -- negatives ---------------------------------------------------------------
def items_two_by_ten():
    return [BatchItem((0, 1), list(range(10)), 3), BatchItem((1, 1), list(range(10, 20)), 0)]


def test_negative_pool_arithmetic():
    from unidial.corpus.negatives import answer_pool, context_pool
    items = items_two_by_ten()
    assert len(answer_pool(items, 0)) == 19
    assert len(context_pool(items, 0)) == 1
    sets = build_negative_sets(items, 2, 0, need_contexts=False)
    assert all(len(s.answers) == 2 for s in sets)


def test_dense_filter_removes_exactly_relevant_own_candidates():
    from unidial.corpus.negatives import answer_pool
    items = items_two_by_ten()
    rel = np.zeros(10)
    rel[[1, 3, 7]] = 0.5  # 3 is the ground truth and is excluded anyway
    rel[5] = 1.0
    full = set(answer_pool(items, 0))
    filtered = set(answer_pool(items, 0, {(0, 1): rel}))
    assert full - filtered == {(0, 1), (0, 7), (0, 5)}


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.integers(2, 5), shared=st.booleans())
def test_negative_sets_exclude_gt_and_own_context(seed, b, shared):
    rng = np.random.default_rng(seed)
    items = []
    for j in range(b):
        ids = list(rng.choice(40 if shared else 1000, size=6, replace=False) + (0 if shared else 1000 * j))
        items.append(BatchItem((j, 1), ids, int(rng.integers(6)), n_contexts=2))
    k = min(3, 2 * (b - 1))
    sets = build_negative_sets(items, k, seed)
    again = build_negative_sets(items, k, seed)
    for a, (s, s2) in enumerate(zip(sets, again)):
        assert s == s2
        assert len(s.answers) == len(set(s.answers)) == k
        assert len(s.contexts) == len(set(s.contexts)) == k
        assert all(int(items[j].candidate_ids[p]) != items[a].gt_id for j, p in s.answers)
        assert all(j != a for j, _ in s.contexts)


def test_small_pool_is_a_diagnostic_error():
    items = [BatchItem((0, 1), [0, 1], 0), BatchItem((1, 1), [0, 1], 0)]
    with pytest.raises(NegativeSamplingError, match="answer pool"):
        build_negative_sets(items, 3, 0)
