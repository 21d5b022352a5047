"""Training objectives: MLM, NSP, generative likelihood, the two inter-task
contrastive losses, their weighted combination, and the dense soft-label loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

ABLATION_MODES = ("individual", "elementary", "no_cc", "no_ac", "full")
COMPONENTS = ("l_mlm", "l_nsp", "l_g", "l_ac", "l_cc", "l_dense")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    n_negatives: int = 8
    denominator_mode: str = "exclude_positive"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.denominator_mode not in ("exclude_positive", "include_positive"):
            raise ValueError("denominator_mode must be 'exclude_positive' or 'include_positive'")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.05
    mlm: bool = True
    nsp: bool = True
    g: bool = True
    ac: bool = True
    cc: bool = True
    dense: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    @classmethod
    def for_mode(cls, mode: str, alpha: float = 0.05, dense: bool = False) -> "LossWeights":
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
        ac = mode in ("full", "no_cc")
        cc = mode in ("full", "no_ac")
        if dense:
            return cls(alpha=alpha, mlm=False, nsp=False, g=True, ac=ac, cc=cc, dense=True)
        return cls(alpha=alpha, ac=ac, cc=cc)

    def coefficient(self, name: str) -> float:
        on = {"l_mlm": self.mlm, "l_nsp": self.nsp, "l_g": self.g, "l_ac": self.ac,
              "l_cc": self.cc, "l_dense": self.dense}[name]
        if not on:
            return 0.0
        return self.alpha if name == "l_g" else 1.0


# -- splitting / pooling ------------------------------------------------------
@dataclass
class HiddenSplit:
    context_disc: Tensor  # C_h^{s+}: pooled disc context, (B, H)
    answer_disc: Tensor | None  # A_h^{s+}: pooled disc answer, (B, H)
    context_gen: Tensor  # C_g^s: pooled gen context, (B, H)
    answer_gen: Tensor | None  # A_g^s: pooled decoder answer states, (B, C)


def span_mask(spans: Sequence[tuple[int, int]], length: int) -> np.ndarray:
    m = np.zeros((len(spans), length))
    for i, (a, b) in enumerate(spans):
        if not 0 <= a < b <= length:
            raise ValueError(f"span {(a, b)} invalid for length {length}")
        m[i, a:b] = 1.0
    return m


def pool_spans(hidden: Tensor, spans: Sequence[tuple[int, int]], pad_mask: np.ndarray | None = None) -> Tensor:
    """Mean over the given [start, end) span of each row, ignoring [PAD] positions."""
    m = span_mask(spans, hidden.shape[1])
    if pad_mask is not None:
        m = m * pad_mask
    return ag.mean_pool(hidden, m)


def split_and_pool(disc_text: Tensor, gen_text: Tensor, dec_hidden: Tensor,
                   context_spans: Sequence[tuple[int, int]], answer_spans: Sequence[tuple[int, int]],
                   answer_lengths: Sequence[int], disc_mask: np.ndarray | None = None,
                   gen_mask: np.ndarray | None = None) -> HiddenSplit:
    """Pool the four sentence-level vectors.

    Context spans start at 0, so both context vectors include the [CLS]
    state. Decoder answer states are the first ``answer_lengths[i]``
    teacher-forced positions (the ones that emit the answer tokens).
    """
    if not (len(context_spans) == len(answer_spans) == len(answer_lengths) == disc_text.shape[0]):
        raise ValueError("span lists must match the batch size")
    for (ca, cb), (aa, ab), n in zip(context_spans, answer_spans, answer_lengths):
        if cb != aa or ab - aa != n:
            raise ValueError("context/answer spans inconsistent with the answer length")
    dec_spans = [(0, int(n)) for n in answer_lengths]
    return HiddenSplit(
        context_disc=pool_spans(disc_text, context_spans, disc_mask),
        answer_disc=pool_spans(disc_text, answer_spans, disc_mask),
        context_gen=pool_spans(gen_text, context_spans, gen_mask),
        answer_gen=pool_spans(dec_hidden, dec_spans),
    )


# -- contrastive ----------------------------------------------------------------
def info_nce(query: Tensor, positive: Tensor, negatives: Tensor, cfg: ContrastiveConfig) -> Tensor:
    """Mean over anchors of ``-log exp(cos(q,k+)/t) / sum exp(cos(q,k-)/t)``.

    ``query``/``positive`` are (B, D); ``negatives`` is (B, K, D). In
    ``include_positive`` mode the positive term joins the denominator.
    """
    if negatives.ndim != 3 or negatives.shape[0] != query.shape[0] or negatives.shape[2] != query.shape[1]:
        raise ValueError(f"negatives must be (B, K, D); got {negatives.shape} for query {query.shape}")
    b, k, d = negatives.shape
    inv_t = 1.0 / cfg.temperature
    pos = ag.cosine_similarity(query, positive) * inv_t
    q = ag.broadcast_to(query.reshape(b, 1, d), (b, k, d))
    neg = ag.cosine_similarity(q, negatives) * inv_t
    if cfg.denominator_mode == "include_positive":
        neg = ag.concat([pos.reshape(b, 1), neg], axis=1)
    return ag.tmean(ag.logsumexp(neg, axis=1) - pos)


def answer_contrastive_loss(split: HiddenSplit, negatives: Tensor, cfg: ContrastiveConfig) -> Tensor:
    """Query: pooled disc answer; positive key: pooled decoder answer states."""
    return info_nce(split.answer_disc, split.answer_gen, negatives, cfg)


def context_contrastive_loss(split: HiddenSplit, negatives: Tensor, cfg: ContrastiveConfig) -> Tensor:
    """Query: pooled disc context; positive key: pooled gen context."""
    return info_nce(split.context_disc, split.context_gen, negatives, cfg)


# -- supervised objectives ---------------------------------------------------
def mlm_loss(text_logits: Tensor | None, text_targets, region_recon: Tensor | None = None,
             region_targets=None, region_weight: float = 1.0) -> Tensor:
    """Token NLL mean at masked text positions plus MSE at masked regions.

    An empty plan yields a constant zero tensor with ``requires_grad=False``.
    """
    terms = []
    if text_logits is not None and len(np.atleast_1d(text_targets)):
        terms.append(ag.cross_entropy(text_logits, text_targets))
    if region_recon is not None and region_targets is not None and len(region_targets):
        terms.append(ag.mse(region_recon, region_targets) * region_weight)
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def nsp_loss(score: Tensor, label) -> Tensor:
    """Binary cross-entropy ``-[y ln p + (1-y) ln(1-p)]`` on probabilities; mean over entries.

    Written as ``-ln q`` with ``q`` the probability given to the true label,
    so ``p = 1, y = 1`` is a valid zero loss while ``p = 1, y = 0`` is an error.
    """
    p = score.data
    y = np.asarray(label, dtype=score.dtype) * np.ones_like(p)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("NSP labels must be 0 or 1")
    q_data = np.where(y == 1.0, p, 1.0 - p)
    if (p < 0).any() or (p > 1).any() or (q_data <= 0).any():
        raise ValueError("NSP score must lie inside (0, 1)")
    q = ag.add_const(ag.mul_const(score, 2.0 * y - 1.0), 1.0 - y)
    return ag.neg(ag.tmean(ag.log(q)))


def nsp_loss_from_logits(logits: Tensor, labels) -> Tensor:
    return ag.bce_with_logits(logits, np.asarray(labels, dtype=logits.dtype).reshape(logits.shape))


def generative_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean over examples of the per-token mean NLL of ``targets`` (B, L) under (B, L, V) logits."""
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        targets = np.asarray(targets)[None]
        mask = None if mask is None else np.asarray(mask)[None]
    b, length, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (b, length):
        raise ValueError(f"generative_loss: targets {targets.shape} do not align with logits {logits.shape}")
    m = np.ones((b, length)) if mask is None else np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("generative_loss: an example has no answer positions")
    w = (m / counts[:, None] / b).reshape(-1)
    keep = np.flatnonzero(w > 0)
    flat = ag.take(logits.reshape(b * length, v), keep)
    return ag.cross_entropy(flat, targets.reshape(-1)[keep], weights=w[keep])


def combined_loss(components: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum ``L_mlm + L_nsp + alpha L_g + L_ac + L_cc (+ L_dense)`` honouring ablation switches."""
    total = None
    for name, value in components.items():
        v = float(value.data)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"component {name} is not finite ({v})")
        c = weights.coefficient(name)
        if c == 0.0:
            continue
        term = value * c
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def dense_finetune_loss(logits: Tensor, relevance) -> Tensor:
    """Cross-entropy between softmax over candidate logits and relevance normalised to a distribution.

    ``logits``/``relevance`` are (N_c,) for one round or (R, N_c) for several
    (mean over rounds).
    """
    rel = np.asarray(relevance, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
        rel = rel.reshape(1, -1)
    if rel.shape != logits.shape:
        raise ValueError("relevance must match the candidate logits")
    if (rel < 0).any():
        raise ValueError("relevance must be non-negative")
    sums = rel.sum(axis=1, keepdims=True)
    if (sums <= 0).any():
        raise ValueError("relevance is all zero for a round")
    return ag.soft_cross_entropy(logits, rel / sums)
