"""Word-level vocabulary with reserved special tokens."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

PAD, CLS, SEP, MASK, IMG, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[IMG]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, MASK, IMG, UNK)


class OOVError(KeyError):
    pass


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


class Vocab:
    def __init__(self, words: Iterable[str]):
        tokens = list(SPECIALS)
        seen = set(tokens)
        for w in words:
            if w not in seen:
                seen.add(w)
                tokens.append(w)
        self.itos = tokens
        self.stoi = {w: i for i, w in enumerate(tokens)}

    pad_id = property(lambda self: self.stoi[PAD])
    cls_id = property(lambda self: self.stoi[CLS])
    sep_id = property(lambda self: self.stoi[SEP])
    mask_id = property(lambda self: self.stoi[MASK])
    img_id = property(lambda self: self.stoi[IMG])
    unk_id = property(lambda self: self.stoi[UNK])

    @property
    def special_ids(self) -> frozenset:
        return frozenset(self.stoi[s] for s in SPECIALS)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, words: Sequence[str], allow_unk: bool = False) -> list[int]:
        ids = []
        for w in words:
            i = self.stoi.get(w)
            if i is None:
                if not allow_unk:
                    raise OOVError(f"word {w!r} not in vocabulary")
                i = self.unk_id
            ids.append(i)
        return ids

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.itos[int(i)] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"tokens": self.itos}, indent=0) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = json.loads(Path(path).read_text())["tokens"]
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocab file does not start with the reserved tokens")
        return cls(tokens[len(SPECIALS):])
