"""Token sequences for the discriminative and generative inputs, and MLM masking.

Layout (both settings share it outside the answer span)::

    [CLS] caption [SEP] Q1 [SEP] A1 [SEP] ... Qt [SEP] answer [SEP]

The discriminative sequence carries a real candidate in the answer slot;
the generative training sequence carries one [MASK] per ground-truth
answer token, and the generative inference sequence stops after
``Qt [SEP]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .types import Dialog
from .vocab import Vocab


class SequenceOverflowError(ValueError):
    pass


CONTEXT_SEGMENT = 0
ANSWER_SEGMENT = 1


@dataclass(frozen=True)
class EncodedSequence:
    tokens: np.ndarray
    segments: np.ndarray
    context_span: tuple[int, int]
    answer_span: tuple[int, int] | None

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class MaskingPlan:
    text_positions: np.ndarray
    text_targets: np.ndarray
    region_indices: np.ndarray
    region_targets: np.ndarray
    tokens: np.ndarray = field(repr=False)
    regions: np.ndarray = field(repr=False)

    @property
    def empty(self) -> bool:
        return len(self.text_positions) == 0 and len(self.region_indices) == 0


@dataclass
class EncodedPair:
    disc: EncodedSequence
    gen: EncodedSequence
    image_id: int
    round_id: int
    mlm_plan: MaskingPlan | None = None

    @property
    def answer_span(self):
        return self.disc.answer_span

    @property
    def context_span(self):
        return self.disc.context_span


def context_ids(d: Dialog, t: int, vocab: Vocab, allow_unk: bool = False) -> list[int]:
    """``[CLS] caption [SEP] Q1 [SEP] A1 [SEP] ... Qt [SEP]`` as ids."""
    ids = [vocab.cls_id] + vocab.encode(d.caption, allow_unk) + [vocab.sep_id]
    for i in range(1, t + 1):
        r = d.round(i)
        ids += vocab.encode(r.question, allow_unk) + [vocab.sep_id]
        if i < t:
            ids += vocab.encode(r.gt_answer, allow_unk) + [vocab.sep_id]
    return ids


def _with_answer(ctx: list[int], answer_ids: list[int], vocab: Vocab, max_seq_len: int) -> EncodedSequence:
    n = len(ctx) + len(answer_ids) + 1
    if n > max_seq_len:
        raise SequenceOverflowError(f"sequence length {n} exceeds max_seq_len {max_seq_len}")
    tokens = np.array(ctx + answer_ids + [vocab.sep_id], dtype=np.int64)
    segments = np.zeros(n, dtype=np.int64)
    segments[len(ctx):] = ANSWER_SEGMENT
    return EncodedSequence(tokens, segments, (0, len(ctx)), (len(ctx), len(ctx) + len(answer_ids)))


def encode_discriminative(d: Dialog, t: int, answer: Sequence[str], vocab: Vocab, max_seq_len: int = 256,
                          allow_unk: bool = False) -> EncodedSequence:
    if len(answer) == 0:
        raise ValueError("answer must contain at least one token")
    ctx = context_ids(d, t, vocab, allow_unk)
    return _with_answer(ctx, vocab.encode(answer, allow_unk), vocab, max_seq_len)


def encode_generative(d: Dialog, t: int, vocab: Vocab, mode: str = "train", max_seq_len: int = 256,
                      allow_unk: bool = False) -> EncodedSequence:
    ctx = context_ids(d, t, vocab, allow_unk)
    if mode == "infer":
        if len(ctx) > max_seq_len:
            raise SequenceOverflowError(f"sequence length {len(ctx)} exceeds max_seq_len {max_seq_len}")
        tokens = np.array(ctx, dtype=np.int64)
        return EncodedSequence(tokens, np.zeros(len(ctx), dtype=np.int64), (0, len(ctx)), None)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    n_ans = len(d.round(t).gt_answer)
    return _with_answer(ctx, [vocab.mask_id] * n_ans, vocab, max_seq_len)


def encode_pair(d: Dialog, t: int, answer: Sequence[str], vocab: Vocab, max_seq_len: int = 256,
                allow_unk: bool = False) -> EncodedPair:
    return EncodedPair(
        disc=encode_discriminative(d, t, answer, vocab, max_seq_len, allow_unk),
        gen=encode_generative(d, t, vocab, "train", max_seq_len, allow_unk),
        image_id=d.image_id,
        round_id=t,
    )


def decode_answer(seq: EncodedSequence, vocab: Vocab) -> tuple[str, ...]:
    a, b = seq.answer_span
    return vocab.decode(seq.tokens[a:b])


def apply_mlm_masks(seq: EncodedSequence, regions: np.ndarray, seed_or_rng, vocab: Vocab,
                    p_text: float = 0.10, p_region: float = 0.15) -> MaskingPlan:
    """Independently mask eligible text tokens with ``p_text`` and regions with ``p_region``.

    Reserved tokens are never eligible. Masked tokens become [MASK]; masked
    regions become zero vectors. Original values are kept as targets.
    """
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    tokens = seq.tokens.copy()
    special = np.fromiter(vocab.special_ids, dtype=np.int64)
    eligible = ~np.isin(tokens, special)
    draw = rng.random(len(tokens))
    pos = np.flatnonzero(eligible & (draw < p_text))
    targets = tokens[pos].copy()
    tokens[pos] = vocab.mask_id
    regions = np.asarray(regions)
    rdraw = rng.random(regions.shape[0])
    ridx = np.flatnonzero(rdraw < p_region)
    rtargets = regions[ridx].copy()
    masked_regions = regions.copy()
    masked_regions[ridx] = 0.0
    return MaskingPlan(pos, targets, ridx, rtargets, tokens, masked_regions)
