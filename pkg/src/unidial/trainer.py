"""Optimisation loop: batch assembly for both paths, loss evaluation per
ablation mode, Adam with warmup plus linear decay, clipping, checkpoints.

Randomness is keyed on ``(seed, purpose, step)`` so any step can be
replayed in isolation, which is what makes resume exact.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import (
    BatchItem,
    Dialog,
    ImageFeatures,
    NegativeSamplingError,
    Vocab,
    apply_mlm_masks,
    build_negative_sets,
    encode_discriminative,
    encode_generative,
)
from .corpus.negatives import answer_pool, context_pool
from .losses import (
    ABLATION_MODES,
    ContrastiveConfig,
    HiddenSplit,
    LossWeights,
    NonFiniteLossError,
    answer_contrastive_loss,
    combined_loss,
    context_contrastive_loss,
    dense_finetune_loss,
    generative_loss,
    mlm_loss,
    nsp_loss_from_logits,
    pool_spans,
)
from .model import ModelConfig, TextBatch, UnifiedDialogModel, load_checkpoint, save_checkpoint

LOG_COLUMNS = ("step", "lr", "l_mlm", "l_nsp", "l_g", "l_ac", "l_cc", "l_total")
DENSE_LOG_COLUMNS = LOG_COLUMNS[:-1] + ("l_dense", "l_total")

# rng purposes
_PERM, _DROPOUT, _BATCH, _NEGATIVES, _DROPOUT_GEN = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 1
    peak_lr: float = 2e-4
    warmup_steps: int = 0
    total_steps: int | None = None  # None: epochs * (examples // batch_size)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ablation_mode: str = "full"
    dense_finetune: bool = False
    alpha: float = 0.05
    temperature: float = 0.1
    denominator_mode: str = "exclude_positive"
    n_negatives: int | None = None  # None: batch_size
    nsp_negatives: int = 1  # negative-appended rows per round, matched by as many gt rows
    clip_norm: float = 1.0
    p_text_mask: float = 0.10
    p_region_mask: float = 0.15
    hide_gen_answer_slots: bool = True
    dense_candidates: int | None = None  # None: every candidate of the round
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.total_steps is not None and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"ablation_mode must be one of {ABLATION_MODES}")
        if self.nsp_negatives < 1:
            raise ValueError("nsp_negatives must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.dense_finetune and self.ablation_mode == "individual":
            raise ValueError("dense finetuning needs a joint model (not individual mode)")
        ContrastiveConfig(self.temperature, self.negatives, self.denominator_mode)

    @property
    def negatives(self) -> int:
        return self.n_negatives if self.n_negatives is not None else self.batch_size

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.temperature, self.negatives, self.denominator_mode)

    def weights(self) -> LossWeights:
        return LossWeights.for_mode(self.ablation_mode, self.alpha, dense=self.dense_finetune)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over the warmup steps, then linear peak -> 0 at ``total_steps``."""
    total = cfg.total_steps
    if total is None:
        raise ValueError("total_steps is unresolved")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside 0..{total}")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.peak_lr * (step / cfg.warmup_steps)
    return cfg.peak_lr * ((total - step) / (total - cfg.warmup_steps))


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float, grads: Sequence[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        for g in grads:
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteLossError("non-finite gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            dt = p.data.dtype
            if g is None:
                g = np.zeros_like(p.data)
            g = g.astype(dt, copy=False)
            m *= dt.type(b1)
            m += dt.type(1.0 - b1) * g
            v *= dt.type(b2)
            v += dt.type(1.0 - b2) * g * g
            update = (m / dt.type(c1)) / (np.sqrt(v / dt.type(c2)) + dt.type(self.eps))
            p.data = p.data - dt.type(lr) * update


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise NonFiniteLossError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


# -- data --------------------------------------------------------------------
@dataclass
class TrainingData:
    dialogs: list[Dialog]
    features: Mapping[int, ImageFeatures] | Sequence[ImageFeatures]
    vocab: Vocab
    answer_ids: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not isinstance(self.features, Mapping):
            self.features = {f.image_id: f for f in self.features}
        for d in self.dialogs:
            if d.image_id not in self.features:
                raise KeyError(f"no region features for image {d.image_id}")
            for r in d.rounds:
                for c in r.candidates:
                    self.answer_ids.setdefault(tuple(c), len(self.answer_ids))

    def examples(self) -> list[tuple[int, int]]:
        """(dialog index, 1-based round) for every round."""
        return [(i, t) for i, d in enumerate(self.dialogs) for t in range(1, len(d.rounds) + 1)]

    def answer_id(self, words) -> int:
        return self.answer_ids.setdefault(tuple(words), len(self.answer_ids))


@dataclass
class Batch:
    keys: list[tuple[int, int]]
    text: TextBatch
    regions: np.ndarray
    n_disc: int
    n_gen: int
    per_round: int  # disc rows per round: 2 * nsp_negatives, or the candidate count (dense)
    nsp_labels: np.ndarray
    context_spans: list[tuple[int, int]]
    answer_spans: list[tuple[int, int] | None]
    mlm_rows: np.ndarray
    mlm_cols: np.ndarray
    mlm_targets: np.ndarray
    region_rows: np.ndarray
    region_idx: np.ndarray
    region_targets: np.ndarray
    prefix: np.ndarray
    targets: np.ndarray
    prefix_mask: np.ndarray
    answer_lengths: np.ndarray
    gen_memory_mask: np.ndarray
    items: list[BatchItem]
    relevance: np.ndarray | None = None


def _gen_targets(data: TrainingData, rounds, max_answer_len: int):
    vocab = data.vocab
    ids = [vocab.encode(r.gt_answer) for r in rounds]
    width = max(len(a) for a in ids) + 1
    if width > max_answer_len:
        raise ValueError(f"answer of length {width - 1} needs decoder length {width} > max_answer_len {max_answer_len}")
    b = len(ids)
    prefix = np.full((b, width), vocab.pad_id, dtype=np.int64)
    targets = np.full((b, width), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((b, width))
    for i, a in enumerate(ids):
        prefix[i, :len(a) + 1] = [vocab.mask_id] + a
        targets[i, :len(a) + 1] = a + [vocab.sep_id]
        mask[i, :len(a) + 1] = 1.0
    return prefix, targets, mask, np.array([len(a) for a in ids])


def assemble_batch(data: TrainingData, examples: Sequence[tuple[int, int]], rng: np.random.Generator,
                   tcfg: TrainConfig, mcfg: ModelConfig, disc: bool = True, gen: bool = True,
                   mlm: bool = True) -> Batch:
    """Encode a batch of rounds.

    Disc rows come first, in blocks of ``b`` rows. Normally the first block
    holds each round's gt-appended sequence (label 1), the next
    ``nsp_negatives`` blocks hold negative-appended sequences (label 0), and
    any further blocks repeat the gt (label 1) so the labels stay balanced.
    In dense mode each round contributes one row per candidate instead. Gen
    rows follow, one per round.
    """
    vocab = data.vocab
    dialogs = [data.dialogs[i] for i, _ in examples]
    rounds = [d.round(t) for d, (_, t) in zip(dialogs, examples)]
    keys = [(d.image_id, t) for d, (_, t) in zip(dialogs, examples)]
    b = len(examples)
    seqs, regions, labels, ctx_spans, ans_spans = [], [], [], [], []
    mlm_rows, mlm_cols, mlm_t, reg_rows, reg_idx, reg_t = [], [], [], [], [], []
    items: list[BatchItem] = []
    relevance = None
    per_round = 0
    if disc and tcfg.dense_finetune:
        n_c = min(len(r.candidates) for r in rounds)
        per_round = n_c if tcfg.dense_candidates is None else min(tcfg.dense_candidates, n_c)
        relevance = np.zeros((b, per_round))
        for i, (d, r, (_, t)) in enumerate(zip(dialogs, rounds, examples)):
            if r.dense_relevance is None:
                raise ValueError(f"round {keys[i]} has no dense relevance")
            if per_round == len(r.candidates):
                slots = np.arange(per_round)
            else:
                others = np.setdiff1d(np.arange(len(r.candidates)), [r.gt_index])
                slots = np.sort(np.concatenate([[r.gt_index], rng.choice(others, per_round - 1, replace=False)]))
            relevance[i] = r.dense_relevance[slots]
            items.append(BatchItem(keys[i], [data.answer_id(r.candidates[s]) for s in slots],
                                   int(np.flatnonzero(slots == r.gt_index)[0]), [int(s) for s in slots],
                                   n_contexts=per_round))
        for i, (d, r, (_, t)) in enumerate(zip(dialogs, rounds, examples)):
            feats = data.features[d.image_id].regions
            for s in items[i].option_slots:
                seq = encode_discriminative(d, t, r.candidates[s], vocab, mcfg.max_seq_len)
                seqs.append(seq)
                regions.append(feats)
                labels.append(1.0 if s == r.gt_index else 0.0)
                ctx_spans.append(seq.context_span)
                ans_spans.append(seq.answer_span)
    elif disc:
        k = tcfg.nsp_negatives
        negs = []
        for r in rounds:
            gt_id = data.answer_id(r.gt_answer)
            choices = [j for j, c in enumerate(r.candidates) if data.answer_id(c) != gt_id]
            if len(choices) < k:
                raise ValueError(f"round needs {k} candidates that differ from the ground truth, has {len(choices)}")
            negs.append([choices[int(j)] for j in rng.choice(len(choices), size=k, replace=False)])
        per_round = 2 * k
        # block order: gt, k negative blocks, then k - 1 extra gt blocks (fresh masks) for balance
        blocks = [(1.0, None)] + [(0.0, j) for j in range(k)] + [(1.0, None)] * (k - 1)
        for label, pick in blocks:
            for i, (d, r, (_, t)) in enumerate(zip(dialogs, rounds, examples)):
                answer = r.gt_answer if pick is None else r.candidates[negs[i][pick]]
                seq = encode_discriminative(d, t, answer, vocab, mcfg.max_seq_len)
                feats = data.features[d.image_id].regions
                if mlm:
                    plan = apply_mlm_masks(seq, feats, rng, vocab, tcfg.p_text_mask, tcfg.p_region_mask)
                    row = len(seqs)
                    mlm_rows += [row] * len(plan.text_positions)
                    mlm_cols += list(plan.text_positions)
                    mlm_t += list(plan.text_targets)
                    reg_rows += [row] * len(plan.region_indices)
                    reg_idx += list(plan.region_indices)
                    reg_t += list(plan.region_targets)
                    seq = type(seq)(plan.tokens, seq.segments, seq.context_span, seq.answer_span)
                    feats = plan.regions
                seqs.append(seq)
                regions.append(feats)
                labels.append(label)
                ctx_spans.append(seq.context_span)
                ans_spans.append(seq.answer_span)
        for i, r in enumerate(rounds):
            ids = [data.answer_id(r.gt_answer)] + [data.answer_id(r.candidates[j]) for j in negs[i]]
            items.append(BatchItem(keys[i], ids, 0, [r.gt_index] + negs[i], n_contexts=k + 1))
    n_disc = len(seqs)
    gen_start = n_disc
    if gen:
        for d, (_, t) in zip(dialogs, examples):
            seq = encode_generative(d, t, vocab, "train", mcfg.max_seq_len)
            seqs.append(seq)
            regions.append(data.features[d.image_id].regions)
            ctx_spans.append(seq.context_span)
            ans_spans.append(seq.answer_span)
    text = TextBatch.from_sequences(seqs, vocab.pad_id)
    gen_mem = text.mask[gen_start:].copy()
    if gen and tcfg.hide_gen_answer_slots:
        # answer placeholders stay in the sequence but are hidden from attention
        for j, (_, end) in enumerate(ctx_spans[gen_start:]):
            gen_mem[j, end:] = 0.0
        text.mask[gen_start:] = gen_mem
    if gen:
        prefix, targets, pmask, lengths = _gen_targets(data, rounds, mcfg.max_answer_len)
    else:
        prefix = targets = np.zeros((b, 0), dtype=np.int64)
        pmask = np.zeros((b, 0))
        lengths = np.array([len(r.gt_answer) for r in rounds])
    return Batch(
        keys=keys, text=text, regions=np.stack(regions).astype(mcfg.dtype), n_disc=n_disc,
        n_gen=len(seqs) - n_disc, per_round=per_round, nsp_labels=np.array(labels),
        context_spans=ctx_spans, answer_spans=ans_spans,
        mlm_rows=np.array(mlm_rows, dtype=np.int64), mlm_cols=np.array(mlm_cols, dtype=np.int64),
        mlm_targets=np.array(mlm_t, dtype=np.int64), region_rows=np.array(reg_rows, dtype=np.int64),
        region_idx=np.array(reg_idx, dtype=np.int64),
        region_targets=np.array(reg_t).reshape(len(reg_t), mcfg.d_img).astype(mcfg.dtype),
        prefix=prefix, targets=targets, prefix_mask=pmask, answer_lengths=lengths,
        gen_memory_mask=gen_mem, items=items, relevance=relevance,
    )


# -- losses -------------------------------------------------------------------
def _negative_count(items: Sequence[BatchItem], want: int, contexts: bool, dense_filter=None) -> int:
    """``want`` unless some anchor's pool is smaller (many repeated answers); then the smallest pool."""
    n = want
    for a in range(len(items)):
        n = min(n, len(answer_pool(items, a, dense_filter)))
        if contexts:
            n = min(n, len(context_pool(items, a)))
    if n < 1:
        raise NegativeSamplingError("an anchor has no admissible negatives in this batch")
    return n


def forward_losses(model: UnifiedDialogModel, batch: Batch, tcfg: TrainConfig, weights: LossWeights,
                   neg_rng: np.random.Generator | None = None) -> tuple[dict[str, Tensor], HiddenSplit | None]:
    """Component losses for one batch on one model. Disabled components are not computed."""
    out = model.encode(batch.text, batch.regions)
    comps: dict[str, Tensor] = {}
    nd, ng = batch.n_disc, batch.n_gen
    b = len(batch.keys)
    if nd:
        logits = model.nsp_logits(out)[:nd]
        if batch.relevance is not None:
            if weights.dense:
                comps["l_dense"] = dense_finetune_loss(logits.reshape(b, batch.per_round), batch.relevance)
        else:
            if weights.mlm:
                text_logits = recon = None
                if len(batch.mlm_rows):
                    text_logits = model.mlm_text_logits(out, batch.mlm_rows, batch.mlm_cols)
                if len(batch.region_rows):
                    recon = model.mlm_region_recon(out, batch.region_rows, batch.region_idx)
                comps["l_mlm"] = mlm_loss(text_logits, batch.mlm_targets, recon, batch.region_targets)
            if weights.nsp:
                comps["l_nsp"] = nsp_loss_from_logits(logits, batch.nsp_labels)
    dec = None
    if ng and (weights.g or weights.ac):
        gen_text = out.text[nd:]
        text_c = model.proj_text(gen_text)
        img_c = model.proj_img(out.visual[nd:])
        dec = model.decode(text_c, img_c, batch.gen_memory_mask, batch.prefix, batch.prefix_mask)
        if weights.g:
            comps["l_g"] = generative_loss(dec.logits, batch.targets, batch.prefix_mask)
    split = None
    if nd and ng and (weights.ac or weights.cc):
        dense_filter = None
        if batch.relevance is not None:
            # indexed by the round's option slot, which is what the pool filter looks up
            dense_filter = {}
            for it, rel in zip(batch.items, batch.relevance):
                dense_filter[it.key] = np.zeros(max(it.option_slots) + 1)
                dense_filter[it.key][list(it.option_slots)] = rel
        k = _negative_count(batch.items, tcfg.negatives, weights.cc, dense_filter)
        negsets = build_negative_sets(batch.items, k, neg_rng if neg_rng is not None else np.random.default_rng(0),
                                      dense_filter, need_contexts=weights.cc)
        per = batch.per_round
        if batch.relevance is not None:
            anchor_rows = [i * per + it.gt_pos for i, it in enumerate(batch.items)]
        else:
            anchor_rows = list(range(b))

        def row_of(item: int, pos: int) -> int:
            return item * per + pos if batch.relevance is not None else pos * b + item

        disc_text = out.text[:nd]
        ctx_all = pool_spans(disc_text, batch.context_spans[:nd], batch.text.mask[:nd])
        split = HiddenSplit(
            context_disc=ag.take(ctx_all, anchor_rows),
            answer_disc=None,
            context_gen=pool_spans(out.text[nd:], batch.context_spans[nd:], batch.text.mask[nd:]),
            answer_gen=None,
        )
        cc = ContrastiveConfig(tcfg.temperature, k, tcfg.denominator_mode)
        if weights.ac:
            # disc answer states are mapped into the decoder's space before comparison
            ans_all = pool_spans(model.proj_text(disc_text), batch.answer_spans[:nd], batch.text.mask[:nd])
            split.answer_disc = ag.take(ans_all, anchor_rows)
            split.answer_gen = pool_spans(dec.hidden, [(0, int(n)) for n in batch.answer_lengths])
            idx = [row_of(j, p) for s in negsets for j, p in s.answers]
            neg = ag.take(ans_all, idx).reshape(b, k, ans_all.shape[1])
            comps["l_ac"] = answer_contrastive_loss(split, neg, cc)
        if weights.cc:
            idx = [row_of(j, slot) for s in negsets for j, slot in s.contexts]
            neg = ag.take(ctx_all, idx).reshape(b, k, ctx_all.shape[1])
            comps["l_cc"] = context_contrastive_loss(split, neg, cc)
    return comps, split


# -- training state -----------------------------------------------------------
class Learner:
    """One model with its optimiser (the joint model, or one side in individual mode)."""

    def __init__(self, model: UnifiedDialogModel, tcfg: TrainConfig):
        self.model = model
        self.params = model.parameters()
        self.names = [n for n, _ in model.named_parameters()]
        self.opt = Adam(self.params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)

    def apply(self, loss: Tensor, lr: float, clip: float) -> None:
        self.model.zero_grad()
        if loss.requires_grad:
            ag.backward(loss)
        clip_grad_norm(self.params, clip)
        self.opt.step(lr)

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{n}": p.data for n, p in zip(self.names, self.params)}
        out.update({f"{prefix}adam.m.{n}": m for n, m in zip(self.names, self.opt.m)})
        out.update({f"{prefix}adam.v.{n}": v for n, v in zip(self.names, self.opt.v)})
        return out

    def load(self, arrays: Mapping[str, np.ndarray], prefix: str = "", optimizer: bool = True) -> None:
        self.model.load_state_dict({n: arrays[f"{prefix}{n}"] for n in self.names})
        self.params = self.model.parameters()
        self.opt.params = self.params
        if optimizer and f"{prefix}adam.m.{self.names[0]}" in arrays:
            self.opt.m = [arrays[f"{prefix}adam.m.{n}"].astype(p.dtype) for n, p in zip(self.names, self.params)]
            self.opt.v = [arrays[f"{prefix}adam.v.{n}"].astype(p.dtype) for n, p in zip(self.names, self.params)]


@dataclass
class StepResult:
    step: int
    lr: float
    components: dict[str, float]
    total: float


class Trainer:
    """Runs ``total_steps`` optimisation steps; step ``s`` uses batch ``s`` of the epoch schedule."""

    def __init__(self, mcfg: ModelConfig, tcfg: TrainConfig, data: TrainingData):
        self.mcfg = mcfg
        self.data = data
        self.examples = data.examples()
        self.steps_per_epoch = len(self.examples) // tcfg.batch_size
        if self.steps_per_epoch < 1:
            raise ValueError(f"{len(self.examples)} rounds cannot fill one batch of {tcfg.batch_size}")
        if tcfg.total_steps is None:
            tcfg = replace(tcfg, total_steps=tcfg.epochs * self.steps_per_epoch)
        self.tcfg = tcfg
        self.weights = tcfg.weights()
        self.step = 0
        if tcfg.ablation_mode == "individual":
            self.learners = {"disc/": Learner(UnifiedDialogModel(mcfg, tcfg.seed), tcfg),
                             "gen/": Learner(UnifiedDialogModel(mcfg, tcfg.seed), tcfg)}
        else:
            self.learners = {"": Learner(UnifiedDialogModel(mcfg, tcfg.seed), tcfg)}
        self._perm_cache: dict[int, np.ndarray] = {}
        self.history: list[StepResult] = []

    # -- models ----------------------------------------------------------------
    @property
    def disc_model(self) -> UnifiedDialogModel:
        return self.learners.get("disc/", self.learners.get("")).model

    @property
    def gen_model(self) -> UnifiedDialogModel:
        return self.learners.get("gen/", self.learners.get("")).model

    def batch_examples(self, step: int) -> list[tuple[int, int]]:
        epoch, k = divmod(step, self.steps_per_epoch)
        if epoch not in self._perm_cache:
            self._perm_cache = {epoch: np.random.default_rng([self.tcfg.seed, _PERM, epoch]).permutation(len(self.examples))}
        b = self.tcfg.batch_size
        return [self.examples[i] for i in self._perm_cache[epoch][k * b:(k + 1) * b]]

    def _rng(self, purpose: int, step: int) -> np.random.Generator:
        return np.random.default_rng([self.tcfg.seed, purpose, step])

    # -- one step ----------------------------------------------------------------
    def train_step(self, examples: Sequence[tuple[int, int]] | None = None) -> StepResult:
        tcfg, w = self.tcfg, self.weights
        s = self.step
        if s >= tcfg.total_steps:
            raise RuntimeError("training already finished")
        examples = self.batch_examples(s) if examples is None else examples
        lr = lr_at(s, tcfg)
        comps: dict[str, float] = {}
        brng = self._rng(_BATCH, s)
        if tcfg.ablation_mode == "individual":
            dl, gl = self.learners["disc/"], self.learners["gen/"]
            disc_w = replace(w, g=False, ac=False, cc=False)
            gen_w = replace(w, mlm=False, nsp=False, ac=False, cc=False)
            for learner, wts, purpose, kw in ((dl, disc_w, _DROPOUT, {"gen": False}),
                                              (gl, gen_w, _DROPOUT_GEN, {"disc": False})):
                learner.model.train()
                learner.model.set_dropout_rng(self._rng(purpose, s))
                batch = assemble_batch(self.data, examples, brng, tcfg, self.mcfg, **kw)
                parts, _ = forward_losses(learner.model, batch, tcfg, wts)
                loss = combined_loss(parts, wts)
                learner.apply(loss, lr, tcfg.clip_norm)
                comps.update({k: float(v.data) for k, v in parts.items()})
        else:
            learner = self.learners[""]
            learner.model.train()
            learner.model.set_dropout_rng(self._rng(_DROPOUT, s))
            batch = assemble_batch(self.data, examples, brng, tcfg, self.mcfg, mlm=w.mlm)
            parts, _ = forward_losses(learner.model, batch, tcfg, w, self._rng(_NEGATIVES, s))
            loss = combined_loss(parts, w)
            learner.apply(loss, lr, tcfg.clip_norm)
            comps.update({k: float(v.data) for k, v in parts.items()})
        names = ("l_mlm", "l_nsp", "l_g", "l_ac", "l_cc") + (("l_dense",) if tcfg.dense_finetune else ())
        full = {n: comps.get(n, 0.0) for n in names}
        total = sum(w.coefficient(n) * v for n, v in full.items())
        if not math.isfinite(total):
            raise NonFiniteLossError(f"non-finite loss at step {s}")
        self.step += 1
        res = StepResult(s, lr, full, total)
        self.history.append(res)
        return res

    # -- checkpoints ---------------------------------------------------------
    def state_config(self) -> dict:
        return {"model": self.mcfg.to_dict(), "train": self.tcfg.to_dict(), "step": self.step,
                "vocab": list(self.data.vocab.itos)}

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, learner in self.learners.items():
            out.update(learner.arrays(prefix))
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.state_config(), self.arrays())

    def restore(self, path, optimizer: bool = True) -> None:
        """Load weights (and, for a resume, optimiser moments and step) from a checkpoint."""
        config, arrays = load_checkpoint(path, {"model": self.mcfg.to_dict()})
        for prefix, learner in self.learners.items():
            learner.load(arrays, prefix, optimizer)
        if optimizer:
            self.step = int(config["step"])
            for learner in self.learners.values():
                learner.opt.t = self.step


def load_models(path) -> tuple[ModelConfig, dict[str, UnifiedDialogModel], dict]:
    """Models from a checkpoint: ``{"disc": m, "gen": m}`` (the same object for a joint model)."""
    config, arrays = load_checkpoint(path)
    mcfg = ModelConfig.from_dict(config["model"])
    if any(k.startswith("disc/") for k in arrays):
        models = {}
        for side in ("disc", "gen"):
            m = UnifiedDialogModel(mcfg)
            names = [n for n, _ in m.named_parameters()]
            m.load_state_dict({n: arrays[f"{side}/{n}"] for n in names})
            models[side] = m
    else:
        m = UnifiedDialogModel(mcfg)
        m.load_state_dict({n: arrays[n] for n, _ in m.named_parameters()})
        models = {"disc": m, "gen": m}
    for m in set(models.values()):
        m.eval()
    return mcfg, models, config


# -- log ----------------------------------------------------------------------
def format_row(res: StepResult, columns: Sequence[str]) -> list[str]:
    vals = {"step": str(res.step), "lr": repr(float(res.lr)), "l_total": repr(float(res.total))}
    vals.update({k: repr(float(v)) for k, v in res.components.items()})
    return [vals[c] for c in columns]


def train(mcfg: ModelConfig, tcfg: TrainConfig, data: TrainingData, out_path, log_path=None,
          resume: bool = False, stop_after: int | None = None, init_from=None,
          on_step: Callable[[StepResult], None] | None = None) -> Trainer:
    """Train and write a checkpoint (plus a per-step CSV log).

    ``resume`` continues from ``out_path`` and keeps only the log rows that
    precede the resumed step. ``stop_after`` ends the run early (for
    interruption tests); ``init_from`` loads weights only (dense finetuning).
    """
    trainer = Trainer(mcfg, tcfg, data)
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path is not None else out_path.with_suffix(".log.csv")
    columns = DENSE_LOG_COLUMNS if tcfg.dense_finetune else LOG_COLUMNS
    kept: list[list[str]] = []
    if resume:
        trainer.restore(out_path)
        if log_path.exists():
            rows = list(csv.reader(io.StringIO(log_path.read_text())))
            kept = [r for r in rows[1:] if int(r[0]) < trainer.step]
    elif init_from is not None:
        trainer.restore(init_from, optimizer=False)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(kept)
        end = trainer.tcfg.total_steps if stop_after is None else min(stop_after, trainer.tcfg.total_steps)
        while trainer.step < end:
            res = trainer.train_step()
            writer.writerow(format_row(res, columns))
            if on_step is not None:
                on_step(res)
            if tcfg.checkpoint_every and trainer.step % tcfg.checkpoint_every == 0:
                fh.flush()
                trainer.save(out_path)
    trainer.save(out_path)
    return trainer
