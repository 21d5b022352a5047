"""Dialog, feature and dense-annotation file formats.

* dialogs: VisDial-shaped JSON ``{"questions", "answers", "dialogs"}`` with
  rounds referencing question/answer indices.
* features: one JSON header line ``{image_id: [byte_offset, n, d_img]}``
  followed by a little-endian float32 blob, row-major per image.
* dense annotations: JSON list of ``{"image_id", "round_id", "gt_relevance"}``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .types import Dialog, ImageFeatures, Round
from .vocab import tokenize


def _text(words) -> str:
    return " ".join(words)


def save_dialogs(path, dialogs: Sequence[Dialog], answers: Sequence[str] | None = None) -> None:
    answer_index: dict[str, int] = {a: i for i, a in enumerate(answers or [])}
    answers = list(answers or [])
    questions: list[str] = []
    question_index: dict[str, int] = {}

    def aid(words) -> int:
        s = _text(words)
        if s not in answer_index:
            answer_index[s] = len(answers)
            answers.append(s)
        return answer_index[s]

    out = []
    for d in dialogs:
        rounds = []
        for r in d.rounds:
            q = _text(r.question)
            if q not in question_index:
                question_index[q] = len(questions)
                questions.append(q)
            opts = [aid(c) for c in r.candidates]
            rounds.append({"question": question_index[q], "answer": opts[r.gt_index],
                           "answer_options": opts, "gt_index": r.gt_index})
        out.append({"image_id": d.image_id, "caption": _text(d.caption), "dialog": rounds})
    payload = {"questions": questions, "answers": answers, "dialogs": out}
    Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n")


def load_dialogs(path) -> tuple[list[Dialog], list[str]]:
    """Return dialogs and the global answer list."""
    payload = json.loads(Path(path).read_text())
    for key in ("questions", "answers", "dialogs"):
        if key not in payload:
            raise ValueError(f"{path}: missing top-level key {key!r}")
    questions, answers = payload["questions"], payload["answers"]
    dialogs = []
    for d in payload["dialogs"]:
        rounds = []
        for r in d["dialog"]:
            opts = [int(i) for i in r["answer_options"]]
            if any(not 0 <= i < len(answers) for i in opts):
                raise ValueError(f"image {d['image_id']}: answer option index out of range")
            gt_index = int(r["gt_index"])
            if opts[gt_index] != int(r["answer"]):
                raise ValueError(f"image {d['image_id']}: answer does not match answer_options[gt_index]")
            rounds.append(Round(
                question=tokenize(questions[int(r["question"])]),
                gt_answer=tokenize(answers[opts[gt_index]]),
                candidates=[tokenize(answers[i]) for i in opts],
                gt_index=gt_index,
                candidate_ids=opts,
                question_id=int(r["question"]),
            ))
        dialogs.append(Dialog(image_id=int(d["image_id"]), caption=tokenize(d["caption"]), rounds=rounds))
    return dialogs, list(answers)


def save_features(path, features: Iterable[ImageFeatures]) -> None:
    header = {}
    blobs = []
    offset = 0
    for f in features:
        arr = np.ascontiguousarray(f.regions, dtype="<f4")
        header[str(f.image_id)] = [offset, int(arr.shape[0]), int(arr.shape[1])]
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_features(path) -> dict[int, ImageFeatures]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    blob = memoryview(raw)[nl + 1:]
    out = {}
    for key, (offset, n, d) in header.items():
        nbytes = n * d * 4
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: feature block for image {key} runs past end of file")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f4").reshape(n, d).astype(np.float32)
        out[int(key)] = ImageFeatures(int(key), arr)
    return out


def save_dense(path, dialogs: Sequence[Dialog]) -> None:
    rows = []
    for d in dialogs:
        for t, r in enumerate(d.rounds, start=1):
            if r.dense_relevance is not None:
                rows.append({"image_id": d.image_id, "round_id": t,
                             "gt_relevance": [float(x) for x in r.dense_relevance]})
    Path(path).write_text(json.dumps(rows, separators=(",", ":")) + "\n")


def load_dense(path) -> dict[tuple[int, int], np.ndarray]:
    rows = json.loads(Path(path).read_text())
    return {(int(r["image_id"]), int(r["round_id"])): np.asarray(r["gt_relevance"], dtype=np.float64) for r in rows}


def attach_dense(dialogs: Sequence[Dialog], dense: dict[tuple[int, int], np.ndarray]) -> int:
    """Set ``dense_relevance`` on matching rounds; returns how many were attached."""
    n = 0
    for d in dialogs:
        for t, r in enumerate(d.rounds, start=1):
            rel = dense.get((d.image_id, t))
            if rel is not None:
                r.set_relevance(rel)
                n += 1
    return n
