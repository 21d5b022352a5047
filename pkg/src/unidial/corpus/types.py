"""Dialog data containers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Words = tuple[str, ...]


@dataclass
class Round:
    question: Words
    gt_answer: Words
    candidates: list[Words]
    gt_index: int
    candidate_ids: list[int] | None = None
    question_id: int | None = None
    dense_relevance: np.ndarray | None = None

    def __post_init__(self):
        if not 0 <= self.gt_index < len(self.candidates):
            raise ValueError("gt_index out of range")
        if tuple(self.candidates[self.gt_index]) != tuple(self.gt_answer):
            raise ValueError("candidates[gt_index] must equal the ground-truth answer")
        if self.dense_relevance is not None:
            self.set_relevance(self.dense_relevance)

    def set_relevance(self, relevance) -> None:
        rel = np.asarray(relevance, dtype=np.float64)
        if rel.shape != (len(self.candidates),):
            raise ValueError("dense relevance must have one entry per candidate")
        if rel[self.gt_index] <= 0:
            raise ValueError("ground-truth candidate must have positive relevance")
        self.dense_relevance = rel


@dataclass
class Dialog:
    image_id: int
    caption: Words
    rounds: list[Round] = field(default_factory=list)

    def round(self, t: int) -> Round:
        """Round ``t`` (1-based, as in the dialog files)."""
        if not 1 <= t <= len(self.rounds):
            raise IndexError(f"round {t} outside 1..{len(self.rounds)}")
        return self.rounds[t - 1]


@dataclass
class ImageFeatures:
    image_id: int
    regions: np.ndarray  # (n_regions, d_img)

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.float32)
        if self.regions.ndim != 2 or self.regions.shape[0] < 1:
            raise ValueError("regions must be a non-empty (n, d_img) array")
        if not np.isfinite(self.regions).all():
            raise ValueError("region features must be finite")
