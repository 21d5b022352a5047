"""Model hyperparameters and the closed-form parameter count."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int = 64
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 4
    n_decoder_heads: int = 4
    max_seq_len: int = 64
    max_answer_len: int = 8
    d_img: int = 32
    n_regions: int = 8
    dropout: float = 0.1
    common_space_dim: int = 64
    intermediate_mult: int = 4
    nsp_head: str = "dot"
    tie_mlm_head: bool = True
    layer_norm_eps: float = 1e-12
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("vocab_size", "hidden_size", "n_encoder_layers", "n_decoder_layers", "n_heads",
                     "n_decoder_heads", "max_seq_len", "max_answer_len", "d_img", "n_regions",
                     "common_space_dim", "intermediate_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")
        if self.common_space_dim % self.n_decoder_heads:
            raise ValueError("common_space_dim must be divisible by n_decoder_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.nsp_head not in ("dot", "bilinear"):
            raise ValueError("nsp_head must be 'dot' or 'bilinear'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**d)


def full_scale_profile(vocab_size: int = 30522) -> ModelConfig:
    """Full-scale sizes (12+12 layers, 768/1024 hidden); documentation only, too large to train here."""
    return ModelConfig(
        vocab_size=vocab_size, hidden_size=768, n_encoder_layers=12, n_decoder_layers=12, n_heads=12,
        n_decoder_heads=16, max_seq_len=256, max_answer_len=32, d_img=2048, n_regions=36,
        dropout=0.1, common_space_dim=1024,
    )


def parameter_count(cfg: ModelConfig) -> int:
    """Number of trainable scalars in ``UnifiedDialogModel(cfg)``."""
    h, c, v = cfg.hidden_size, cfg.common_space_dim, cfg.vocab_size
    lin = lambda i, o: i * o + o  # noqa: E731
    ln = lambda d: 2 * d  # noqa: E731
    attn = lambda d: 4 * lin(d, d)  # noqa: E731
    ffn = lambda d: lin(d, cfg.intermediate_mult * d) + lin(cfg.intermediate_mult * d, d)  # noqa: E731

    embeddings = v * h + cfg.max_seq_len * h + 2 * h + ln(h)
    visual = lin(cfg.d_img, h) + h + ln(h)
    per_stream = 2 * (attn(h) + ln(h)) + ffn(h) + ln(h)
    encoder = cfg.n_encoder_layers * 2 * per_stream
    projections = 2 * lin(h, c)
    decoder = v * c + cfg.max_answer_len * c + ln(c)
    decoder += cfg.n_decoder_layers * (2 * (attn(c) + ln(c)) + ffn(c) + ln(c))
    decoder += lin(c, v)
    nsp = h * h if cfg.nsp_head == "bilinear" else 0
    mlm = lin(h, h) + ln(h) + (v if cfg.tie_mlm_head else lin(h, v)) + lin(h, cfg.d_img)
    return embeddings + visual + encoder + projections + decoder + nsp + mlm
