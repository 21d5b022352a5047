"""Ranking by NSP logit, greedy answer generation, candidate log-likelihood
scoring, and attention export.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import Dialog, SequenceOverflowError, Vocab, encode_discriminative, encode_generative
from .model import TextBatch, UnifiedDialogModel

ATTENTION_HEADER = ("query", "key", "head", "weight")


@dataclass
class Scores:
    values: np.ndarray  # -inf where the candidate could not be encoded
    overflow: np.ndarray  # bool flags

    def finite(self, floor: float = -1e30) -> np.ndarray:
        """Scores with overflowed candidates pinned to ``floor`` (last place)."""
        return np.where(self.overflow, floor, self.values)


def _regions(features, n: int, dtype) -> np.ndarray:
    r = features.regions if hasattr(features, "regions") else np.asarray(features)
    return np.broadcast_to(np.asarray(r, dtype=dtype), (n,) + r.shape)


def rank_discriminative(d: Dialog, t: int, features, model: UnifiedDialogModel, vocab: Vocab,
                        candidates: Sequence[Sequence[str]] | None = None, chunk: int = 128) -> Scores:
    """Pre-logistic NSP logit for every candidate appended to round ``t``'s context.

    All candidates are padded to one common length so each score is
    independent of the others and of their order.
    """
    cands = d.round(t).candidates if candidates is None else candidates
    seqs, ok = [], np.ones(len(cands), dtype=bool)
    for i, c in enumerate(cands):
        try:
            seqs.append(encode_discriminative(d, t, c, vocab, model.cfg.max_seq_len))
        except SequenceOverflowError:
            ok[i] = False
    values = np.full(len(cands), -np.inf)
    if seqs:
        length = max(len(s) for s in seqs)
        out = []
        model.eval()
        with ag.no_grad():
            for start in range(0, len(seqs), chunk):
                part = seqs[start:start + chunk]
                batch = TextBatch.from_sequences(part, vocab.pad_id, length)
                enc = model.encode(batch, _regions(features, len(part), model.dtype))
                out.append(model.nsp_logits(enc).data.astype(np.float64))
        values[ok] = np.concatenate(out)
    return Scores(values, ~ok)


def _encode_context(d: Dialog, t: int, features, model: UnifiedDialogModel, vocab: Vocab):
    seq = encode_generative(d, t, vocab, "infer", model.cfg.max_seq_len)
    batch = TextBatch.from_sequences([seq], vocab.pad_id)
    enc = model.encode(batch, _regions(features, 1, model.dtype))
    text_c, img_c = model.project_common_space(enc)
    return text_c, img_c, batch.mask


def generate_answer(d: Dialog, t: int, features, model: UnifiedDialogModel, vocab: Vocab,
                    max_len: int | None = None) -> tuple[str, ...]:
    """Greedy decoding: feed the tokens so far after the start slot, take the argmax, stop at [SEP]."""
    limit = model.cfg.max_answer_len if max_len is None else min(max_len, model.cfg.max_answer_len)
    model.eval()
    with ag.no_grad():
        text_c, img_c, mask = _encode_context(d, t, features, model, vocab)
        out: list[int] = []
        while len(out) < limit:
            prefix = np.array([[vocab.mask_id] + out], dtype=np.int64)
            dec = model.decode(text_c, img_c, mask, prefix)
            nxt = int(np.argmax(dec.logits.data[0, -1]))
            if nxt == vocab.sep_id:
                break
            out.append(nxt)
    return vocab.decode(out)


def score_candidates_loglik(d: Dialog, t: int, features, model: UnifiedDialogModel, vocab: Vocab,
                            candidates: Sequence[Sequence[str]] | None = None, chunk: int = 128) -> Scores:
    """Teacher-forced mean per-token log-likelihood of each candidate followed by [SEP]."""
    cands = d.round(t).candidates if candidates is None else candidates
    cap = model.cfg.max_answer_len
    ids = [vocab.encode(c, allow_unk=True) for c in cands]
    ok = np.array([0 < len(a) + 1 <= cap for a in ids])
    values = np.full(len(cands), -np.inf)
    model.eval()
    with ag.no_grad():
        text_c, img_c, mask = _encode_context(d, t, features, model, vocab)
        rows = [i for i in range(len(cands)) if ok[i]]
        width = max((len(ids[i]) + 1 for i in rows), default=1)
        for start in range(0, len(rows), chunk):
            part = rows[start:start + chunk]
            n = len(part)
            prefix = np.full((n, width), vocab.pad_id, dtype=np.int64)
            target = np.full((n, width), vocab.pad_id, dtype=np.int64)
            pmask = np.zeros((n, width))
            for j, i in enumerate(part):
                a = ids[i]
                prefix[j, :len(a) + 1] = [vocab.mask_id] + a
                target[j, :len(a) + 1] = a + [vocab.sep_id]
                pmask[j, :len(a) + 1] = 1.0
            dec = model.decode(Tensor(np.repeat(text_c.data, n, axis=0)), Tensor(np.repeat(img_c.data, n, axis=0)),
                               np.repeat(mask, n, axis=0), prefix, pmask)
            logp = ag.log_softmax(dec.logits, axis=-1).data.astype(np.float64)
            picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
            values[part] = (picked * pmask).sum(axis=1) / pmask.sum(axis=1)
    return Scores(values, ~ok)


# -- attention export ----------------------------------------------------------
def _write_attention(path: Path, probs: np.ndarray) -> int:
    """Write one (heads, Tq, Tk) matrix as ``query,key,head,weight`` rows; returns the row count."""
    h, tq, tk = probs.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTENTION_HEADER)
        for q in range(tq):
            for k in range(tk):
                for head in range(h):
                    w.writerow((q, k, head, repr(float(probs[head, q, k]))))
    return h * tq * tk


def export_attention(d: Dialog, t: int, features, model: UnifiedDialogModel, vocab: Vocab, out_dir,
                     setting: str = "disc", answer: Sequence[str] | None = None,
                     hide_answer_slots: bool = True) -> dict[str, Path]:
    """Dump last-layer attention for one round.

    ``disc`` encodes the context with ``answer`` (default: the ground truth)
    appended and writes the encoder matrices. ``gen`` encodes the
    placeholder sequence, teacher-forces the ground truth through the
    decoder and also writes the decoder matrices. Text-stream attention is
    exported for the encoder (self and cross-to-image).
    """
    if setting not in ("disc", "gen"):
        raise ValueError("setting must be 'disc' or 'gen'")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    r = d.round(t)
    model.eval()
    model.record_attention(True)
    try:
        with ag.no_grad():
            if setting == "disc":
                seq = encode_discriminative(d, t, r.gt_answer if answer is None else answer, vocab,
                                            model.cfg.max_seq_len)
                batch = TextBatch.from_sequences([seq], vocab.pad_id)
                model.encode(batch, _regions(features, 1, model.dtype))
                mats = model.encoder_attention()
            else:
                seq = encode_generative(d, t, vocab, "train", model.cfg.max_seq_len)
                batch = TextBatch.from_sequences([seq], vocab.pad_id)
                if hide_answer_slots:
                    batch.mask[0, seq.context_span[1]:] = 0.0
                enc = model.encode(batch, _regions(features, 1, model.dtype))
                mats = model.encoder_attention()
                text_c, img_c = model.project_common_space(enc)
                a = vocab.encode(r.gt_answer)
                model.decode(text_c, img_c, batch.mask, np.array([[vocab.mask_id] + a]))
                mats.update(model.decoder_attention())
    finally:
        model.record_attention(False)
    paths = {}
    for name, probs in mats.items():
        p = out_dir / f"{name}.csv"
        _write_attention(p, probs[0])
        paths[name] = p
    return paths


def read_attention(path) -> np.ndarray:
    """Inverse of the export: (heads, Tq, Tk) array."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    q, k, h = (raw[:, i].astype(int) for i in range(3))
    out = np.zeros((h.max() + 1, q.max() + 1, k.max() + 1))
    out[h, q, k] = raw[:, 3]
    return out


# -- whole-split prediction ----------------------------------------------------
def predict(dialogs: Sequence[Dialog], features, model: UnifiedDialogModel, vocab: Vocab, setting: str) -> list[dict]:
    """Prediction rows ``{"image_id", "round_id", "scores"}`` for every round (disc: NSP logits; gen: log-likelihoods)."""
    if setting not in ("disc", "gen"):
        raise ValueError("setting must be 'disc' or 'gen'")
    feats = features if isinstance(features, dict) else {f.image_id: f for f in features}
    fn = rank_discriminative if setting == "disc" else score_candidates_loglik
    rows = []
    for d in dialogs:
        for t in range(1, len(d.rounds) + 1):
            s = fn(d, t, feats[d.image_id], model, vocab)
            rows.append({"image_id": d.image_id, "round_id": t, "scores": s.finite()})
    return rows
