"""Two-stream co-attention encoder, cross-modal answer decoder, and prediction heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import autograd as ag
from ..autograd import Module, Tensor
from .config import ModelConfig
from .layers import (
    Dropout,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    Residual,
    causal_bias,
    key_padding_bias,
)


@dataclass
class TextBatch:
    tokens: np.ndarray  # (B, T) int
    segments: np.ndarray  # (B, T) int
    mask: np.ndarray  # (B, T) 1 for real tokens, 0 for [PAD]

    @classmethod
    def from_arrays(cls, token_rows: Sequence[np.ndarray], segment_rows: Sequence[np.ndarray], pad_id: int,
                    length: int | None = None) -> "TextBatch":
        n = max(len(r) for r in token_rows) if length is None else length
        b = len(token_rows)
        tokens = np.full((b, n), pad_id, dtype=np.int64)
        segments = np.zeros((b, n), dtype=np.int64)
        mask = np.zeros((b, n), dtype=np.float64)
        for i, (t, s) in enumerate(zip(token_rows, segment_rows)):
            tokens[i, :len(t)] = t
            segments[i, :len(s)] = s
            mask[i, :len(t)] = 1.0
        return cls(tokens, segments, mask)

    @classmethod
    def from_sequences(cls, seqs, pad_id: int, length: int | None = None) -> "TextBatch":
        return cls.from_arrays([s.tokens for s in seqs], [s.segments for s in seqs], pad_id, length)


@dataclass
class EncoderOutput:
    text: Tensor  # (B, T, H); position 0 is [CLS]
    visual: Tensor  # (B, 1 + n, H); position 0 is [IMG]
    text_mask: np.ndarray  # (B, T)


@dataclass
class DecoderOutput:
    hidden: Tensor  # (B, L, C)
    logits: Tensor  # (B, L, V)
    mask: np.ndarray  # (B, L)


class StreamLayer(Module):
    """One stream's half of a co-attention block: cross-stream attention, self attention, FFN."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        h = cfg.hidden_size
        self.cross = MultiHeadAttention(h, cfg.n_heads, rng, dtype)
        self.cross_res = Residual(h, cfg.dropout, dtype, cfg.layer_norm_eps)
        self.self_attn = MultiHeadAttention(h, cfg.n_heads, rng, dtype)
        self.self_res = Residual(h, cfg.dropout, dtype, cfg.layer_norm_eps)
        self.ffn = FeedForward(h, cfg.intermediate_mult, rng, dtype)
        self.ffn_res = Residual(h, cfg.dropout, dtype, cfg.layer_norm_eps)


class CoAttentionBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.text = StreamLayer(cfg, rng, dtype)
        self.visual = StreamLayer(cfg, rng, dtype)

    def __call__(self, t: Tensor, v: Tensor, t_bias: np.ndarray, v_bias: np.ndarray | None):
        ts, vs = self.text, self.visual
        t1 = ts.cross_res(t, ts.cross(t, v, v_bias))
        v1 = vs.cross_res(v, vs.cross(v, t, t_bias))
        t2 = ts.self_res(t1, ts.self_attn(t1, t1, t_bias))
        v2 = vs.self_res(v1, vs.self_attn(v1, v1, v_bias))
        return ts.ffn_res(t2, ts.ffn(t2)), vs.ffn_res(v2, vs.ffn(v2))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        c = cfg.common_space_dim
        self.self_attn = MultiHeadAttention(c, cfg.n_decoder_heads, rng, dtype)
        self.self_res = Residual(c, cfg.dropout, dtype, cfg.layer_norm_eps)
        self.cross = MultiHeadAttention(c, cfg.n_decoder_heads, rng, dtype)
        self.cross_res = Residual(c, cfg.dropout, dtype, cfg.layer_norm_eps)
        self.ffn = FeedForward(c, cfg.intermediate_mult, rng, dtype)
        self.ffn_res = Residual(c, cfg.dropout, dtype, cfg.layer_norm_eps)

    def __call__(self, x: Tensor, memory: Tensor, self_bias: np.ndarray, mem_bias: np.ndarray) -> Tensor:
        x = self.self_res(x, self.self_attn(x, x, self_bias))
        x = self.cross_res(x, self.cross(x, memory, mem_bias))
        return self.ffn_res(x, self.ffn(x))


class UnifiedDialogModel(Module):
    """Shared encoder for both settings, answer decoder, and NSP / MLM heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        rng = np.random.default_rng([seed, 4242])
        h, c, v = cfg.hidden_size, cfg.common_space_dim, cfg.vocab_size
        eps = cfg.layer_norm_eps
        # text embeddings
        self.tok_emb = Embedding(v, h, rng, dt)
        self.pos_emb = Embedding(cfg.max_seq_len, h, rng, dt)
        self.seg_emb = Embedding(2, h, rng, dt)
        self.text_norm = LayerNorm(h, dt, eps)
        # visual embeddings
        self.region_proj = Linear(cfg.d_img, h, rng, dt)
        self.img_token = Tensor(np.zeros(h, dtype=dt), requires_grad=True)
        self.visual_norm = LayerNorm(h, dt, eps)
        self.emb_drop = Dropout(cfg.dropout)
        self.blocks = [CoAttentionBlock(cfg, rng, dt) for _ in range(cfg.n_encoder_layers)]
        # common space
        self.proj_text = Linear(h, c, rng, dt)
        self.proj_img = Linear(h, c, rng, dt)
        if c == h:
            self.proj_text.weight.data = np.eye(h, dtype=dt)
            self.proj_img.weight.data = np.eye(h, dtype=dt)
        # decoder
        self.dec_tok_emb = Embedding(v, c, rng, dt)
        self.dec_pos_emb = Embedding(cfg.max_answer_len, c, rng, dt)
        self.dec_norm = LayerNorm(c, dt, eps)
        self.dec_drop = Dropout(cfg.dropout)
        self.dec_layers = [DecoderLayer(cfg, rng, dt) for _ in range(cfg.n_decoder_layers)]
        self.dec_out = Linear(c, v, rng, dt)
        # heads
        if cfg.nsp_head == "bilinear":
            self.nsp_bilinear = Tensor(np.eye(h, dtype=dt), requires_grad=True)
        self.mlm_transform = Linear(h, h, rng, dt)
        self.mlm_norm = LayerNorm(h, dt, eps)
        if cfg.tie_mlm_head:
            self.mlm_bias = Tensor(np.zeros(v, dtype=dt), requires_grad=True)
        else:
            self.mlm_out = Linear(h, v, rng, dt)
        self.region_head = Linear(h, cfg.d_img, rng, dt)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    # -- plumbing ------------------------------------------------------------
    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def record_attention(self, enabled: bool = True) -> None:
        for m in self.modules():
            if isinstance(m, MultiHeadAttention):
                m.record = enabled
                m.last_probs = None

    # -- encoder ---------------------------------------------------------------
    def init_img_token(self, regions) -> Tensor:
        """Mean of the projected region vectors, shape (B, 1, H)."""
        r = regions if isinstance(regions, Tensor) else Tensor(np.asarray(regions, dtype=self.dtype))
        if r.ndim == 2:
            r = r.reshape(1, *r.shape)
        if r.shape[1] < 1:
            raise ValueError("at least one region is required")
        proj = self.region_proj(r)
        return ag.tmean(proj, axis=1, keepdims=True)

    def encode(self, batch: TextBatch, regions: np.ndarray) -> EncoderOutput:
        cfg = self.cfg
        b, t = batch.tokens.shape
        if t > cfg.max_seq_len:
            raise ValueError(f"text length {t} exceeds max_seq_len {cfg.max_seq_len}")
        regions = np.asarray(regions, dtype=self.dtype)
        if regions.ndim != 3 or regions.shape[0] != b or regions.shape[2] != cfg.d_img:
            raise ValueError(f"regions must be (B={b}, n, {cfg.d_img}), got {regions.shape}")
        text = self.tok_emb(batch.tokens) + self.pos_emb(np.broadcast_to(np.arange(t), (b, t)))
        text = text + self.seg_emb(batch.segments)
        text = self.emb_drop(self.text_norm(text))

        r = Tensor(regions)
        proj = self.region_proj(r)
        img = ag.tmean(proj, axis=1, keepdims=True) + self.img_token
        vis = self.emb_drop(self.visual_norm(ag.concat([img, proj], axis=1)))

        t_bias = key_padding_bias(batch.mask, self.dtype)
        for block in self.blocks:
            text, vis = block(text, vis, t_bias, None)
        return EncoderOutput(text, vis, batch.mask)

    # -- heads -------------------------------------------------------------------
    def nsp_logits(self, out: EncoderOutput) -> Tensor:
        """(B,) logits; probability is their logistic."""
        h = self.cfg.hidden_size
        cls = out.text[:, 0, :]
        img = out.visual[:, 0, :]
        if self.cfg.nsp_head == "bilinear":
            cls = ag.linear(cls, self.nsp_bilinear)
        return ag.tsum(cls * img, axis=-1) * (1.0 / np.sqrt(h))

    def nsp_score(self, out: EncoderOutput) -> np.ndarray:
        z = self.nsp_logits(out).data.astype(np.float64)
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def mlm_text_logits(self, out: EncoderOutput, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        b, t, h = out.text.shape
        flat = ag.take(out.text.reshape(b * t, h), np.asarray(rows) * t + np.asarray(cols))
        x = self.mlm_norm(ag.gelu(self.mlm_transform(flat)))
        if self.cfg.tie_mlm_head:
            return ag.linear(x, ag.transpose(self.tok_emb.weight), self.mlm_bias)
        return self.mlm_out(x)

    def mlm_region_recon(self, out: EncoderOutput, rows: np.ndarray, region_idx: np.ndarray) -> Tensor:
        b, n1, h = out.visual.shape
        flat = ag.take(out.visual.reshape(b * n1, h), np.asarray(rows) * n1 + np.asarray(region_idx) + 1)
        return self.region_head(flat)

    # -- generative path -----------------------------------------------------
    def project_common_space(self, out: EncoderOutput) -> tuple[Tensor, Tensor]:
        return self.proj_text(out.text), self.proj_img(out.visual)

    def decode(self, text_c: Tensor, img_c: Tensor, text_mask: np.ndarray, prefix: np.ndarray,
               prefix_mask: np.ndarray | None = None) -> DecoderOutput:
        cfg = self.cfg
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim == 1:
            prefix = prefix[None]
        b, length = prefix.shape
        if length < 1:
            raise ValueError("decoder prefix must hold at least the start sentinel")
        if length > cfg.max_answer_len:
            raise ValueError(f"decoder prefix length {length} exceeds max_answer_len {cfg.max_answer_len}")
        if prefix_mask is None:
            prefix_mask = np.ones((b, length))
        memory = ag.concat([text_c, img_c], axis=1)
        mem_mask = np.concatenate([text_mask, np.ones((b, img_c.shape[1]))], axis=1)
        mem_bias = key_padding_bias(mem_mask, self.dtype)
        self_bias = causal_bias(length, self.dtype) + key_padding_bias(prefix_mask, self.dtype)
        x = self.dec_tok_emb(prefix) + self.dec_pos_emb(np.broadcast_to(np.arange(length), (b, length)))
        x = self.dec_drop(self.dec_norm(x))
        for layer in self.dec_layers:
            x = layer(x, memory, self_bias, mem_bias)
        return DecoderOutput(x, self.dec_out(x), prefix_mask)

    def encoder_attention(self) -> dict[str, np.ndarray]:
        last = self.blocks[-1]
        return {"encoder_self": last.text.self_attn.last_probs, "encoder_cross": last.text.cross.last_probs}

    def decoder_attention(self) -> dict[str, np.ndarray]:
        last = self.dec_layers[-1]
        return {"decoder_self": last.self_attn.last_probs, "decoder_cross": last.cross.last_probs}
