"""In-batch negative sampling for the two contrastive losses.

Answer negatives for an anchor come from its own candidates other than the
ground truth, plus every candidate of the other batch items. Context
negatives come from every context representation of the other rounds in
the batch. A dense relevance table removes own candidates with relevance
above zero from the answer pool.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class NegativeSamplingError(ValueError):
    pass


@dataclass(frozen=True)
class BatchItem:
    key: tuple[int, int]  # (image_id, round_id)
    candidate_ids: Sequence[int]  # global answer ids with a representation in the batch
    gt_pos: int  # position of the ground truth inside candidate_ids
    option_slots: Sequence[int] | None = None  # index of each candidate in the round's option list
    n_contexts: int = 1

    @property
    def gt_id(self) -> int:
        return int(self.candidate_ids[self.gt_pos])


@dataclass(frozen=True)
class NegativeSet:
    answers: list[tuple[int, int]]  # (item index, candidate position)
    contexts: list[tuple[int, int]]  # (item index, context slot)


def answer_pool(items: Sequence[BatchItem], anchor: int,
                dense_filter: Mapping[tuple[int, int], np.ndarray] | None = None) -> list[tuple[int, int]]:
    me = items[anchor]
    rel = dense_filter.get(me.key) if dense_filter is not None else None
    pool = []
    for j, item in enumerate(items):
        for pos, cid in enumerate(item.candidate_ids):
            if int(cid) == me.gt_id:
                continue
            if j == anchor and rel is not None:
                slot = item.option_slots[pos] if item.option_slots is not None else pos
                if rel[slot] > 0:
                    continue
            pool.append((j, pos))
    return pool


def context_pool(items: Sequence[BatchItem], anchor: int) -> list[tuple[int, int]]:
    me = items[anchor]
    return [(j, s) for j, item in enumerate(items) if item.key != me.key for s in range(item.n_contexts)]


def build_negative_sets(items: Sequence[BatchItem], n_negatives: int, seed,
                        dense_filter: Mapping[tuple[int, int], np.ndarray] | None = None,
                        need_contexts: bool = True) -> list[NegativeSet]:
    """Draw exactly ``n_negatives`` distinct answer and context negatives per anchor."""
    if n_negatives < 1:
        raise ValueError("n_negatives must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for a, item in enumerate(items):
        apool = answer_pool(items, a, dense_filter)
        if len(apool) < n_negatives:
            raise NegativeSamplingError(
                f"anchor {item.key}: answer pool has {len(apool)} entries, need {n_negatives}"
            )
        pick = rng.choice(len(apool), size=n_negatives, replace=False)
        answers = [apool[i] for i in sorted(pick)]
        contexts: list[tuple[int, int]] = []
        if need_contexts:
            cpool = context_pool(items, a)
            if len(cpool) < n_negatives:
                raise NegativeSamplingError(
                    f"anchor {item.key}: context pool has {len(cpool)} entries, need {n_negatives}"
                )
            cpick = rng.choice(len(cpool), size=n_negatives, replace=False)
            contexts = [cpool[i] for i in sorted(cpick)]
        out.append(NegativeSet(answers, contexts))
    return out
