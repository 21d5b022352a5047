"""Seeded synthetic visual-dialog corpus.

Each image is a latent scene of a few objects (shape, color, material,
size, count). Region features are sums of fixed attribute embeddings plus
seeded noise, so attributes are linearly recoverable from the features.
Questions are templated over the scene and ground-truth answers are read
off it; distractor candidates come from a fixed global answer list.

The attribute embeddings, vocabulary and answer list depend only on
``world_seed`` and ``d_img``, so corpora generated with different seeds
(train/val splits) share one world.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .types import Dialog, ImageFeatures, Round
from .vocab import Vocab

COLORS = ("red", "blue", "green", "yellow", "white", "black")
SHAPES = ("ball", "cube", "cone", "ring", "star", "disk")
MATERIALS = ("wood", "metal", "glass", "plastic")
SIZES = ("small", "large")
COUNTS = ("one", "two", "three", "four")

def _answer_families() -> dict[str, list[str]]:
    fam = {
        "it_is_color": [f"it is {c}" for c in COLORS],
        "i_see": [f"i see {n}" for n in COUNTS],
        "yes_no": ["yes", "no"],
        "made_of": [f"it is made of {m}" for m in MATERIALS],
        "check": ["yes it is"] + [f"no it is {c}" for c in COLORS] + [f"no it is {z}" for z in SIZES],
        "bank_color_shape": [f"a {c} {s}" for c in COLORS for s in SHAPES],
        "bank_count_shape": [f"{n} {s}s" for n in COUNTS for s in SHAPES],
        "bank_shape_material": [f"the {s} is {m}" for s in SHAPES for m in MATERIALS],
        "bank_misc": ["maybe", "i can not tell", "it is small", "it is large", "not sure"],
    }
    return fam


ANSWER_FAMILIES = _answer_families()
ANSWERS: tuple[str, ...] = tuple(a for fam in ANSWER_FAMILIES.values() for a in fam)
ANSWER_FAMILY_OF = {a: f for f, answers in ANSWER_FAMILIES.items() for a in answers}


def world_vocab() -> Vocab:
    words = set()
    for a in ANSWERS:
        words.update(a.split())
    templates = [
        "what color is the", "how many are there", "is there a", "what is the made of",
        "is the", "what color is it", "what is it made of", "a picture with",
    ]
    for t in templates:
        words.update(t.split())
    words.update(COLORS + MATERIALS + SIZES + COUNTS)
    words.update(SHAPES)
    words.update(s + "s" for s in SHAPES)
    return Vocab(sorted(words))


@lru_cache(maxsize=8)
def attribute_embeddings(d_img: int, world_seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([world_seed, 7919, d_img])
    scale = 1.0 / np.sqrt(4.0)
    return {
        "shape": rng.normal(0.0, 1.0, (len(SHAPES), d_img)) * scale,
        "color": rng.normal(0.0, 1.0, (len(COLORS), d_img)) * scale,
        "material": rng.normal(0.0, 1.0, (len(MATERIALS), d_img)) * scale,
        "size": rng.normal(0.0, 1.0, (len(SIZES), d_img)) * scale,
        "background": rng.normal(0.0, 1.0, d_img) * scale,
    }


@dataclass(frozen=True)
class SceneObject:
    shape: int
    color: int
    material: int
    size: int
    count: int


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]

    def dominant_color(self) -> int:
        totals = np.zeros(len(COLORS), dtype=int)
        for o in self.objects:
            totals[o.color] += o.count
        return int(np.argmax(totals))

    def find(self, shape: int) -> SceneObject | None:
        for o in self.objects:
            if o.shape == shape:
                return o
        return None


def _sample_scene(rng: np.random.Generator, n_regions: int) -> Scene:
    max_obj_regions = max(1, n_regions - 1)
    while True:
        k = int(rng.integers(2, 4))
        shapes = rng.choice(len(SHAPES), size=k, replace=False)
        objs = []
        for s in shapes:
            objs.append(
                SceneObject(
                    shape=int(s),
                    color=int(rng.integers(len(COLORS))),
                    material=int(rng.integers(len(MATERIALS))),
                    size=int(rng.integers(len(SIZES))),
                    count=int(rng.integers(1, 4)),
                )
            )
        if sum(o.count for o in objs) > max_obj_regions:
            continue
        totals = np.zeros(len(COLORS), dtype=int)
        for o in objs:
            totals[o.color] += o.count
        if (totals == totals.max()).sum() == 1:
            return Scene(tuple(objs))


def _region_features(scene: Scene, rng: np.random.Generator, n_regions: int, d_img: int,
                     world_seed: int, noise: float) -> np.ndarray:
    emb = attribute_embeddings(d_img, world_seed)
    rows = []
    for o in scene.objects:
        base = emb["shape"][o.shape] + emb["color"][o.color] + emb["material"][o.material] + emb["size"][o.size]
        rows.extend([base] * o.count)
    while len(rows) < n_regions:
        rows.append(emb["background"])
    feats = np.stack(rows) + rng.normal(0.0, noise, (n_regions, d_img))
    return feats[rng.permutation(n_regions)].astype(np.float32)


def _ask(kind: str, scene: Scene, rng: np.random.Generator, focus: SceneObject | None):
    """Return (question, answer, focused object or None)."""
    present = scene.objects
    if kind in ("coref_color", "coref_material"):
        o = focus
    else:
        o = present[int(rng.integers(len(present)))]
    s = SHAPES[o.shape]
    if kind == "color":
        return f"what color is the {s}", f"it is {COLORS[o.color]}", o
    if kind == "coref_color":
        return "what color is it", f"it is {COLORS[o.color]}", o
    if kind == "count":
        return f"how many {s}s are there", f"i see {COUNTS[o.count - 1]}", o
    if kind == "material":
        return f"what is the {s} made of", f"it is made of {MATERIALS[o.material]}", o
    if kind == "coref_material":
        return "what is it made of", f"it is made of {MATERIALS[o.material]}", o
    if kind == "exists":
        shape = int(rng.integers(len(SHAPES)))
        hit = scene.find(shape)
        return f"is there a {SHAPES[shape]}", "yes" if hit else "no", hit
    if kind == "color_check":
        c = o.color if rng.random() < 0.5 else int(rng.integers(len(COLORS)))
        ans = "yes it is" if c == o.color else f"no it is {COLORS[o.color]}"
        return f"is the {s} {COLORS[c]}", ans, o
    if kind == "size_check":
        z = int(rng.integers(len(SIZES)))
        ans = "yes it is" if z == o.size else f"no it is {SIZES[o.size]}"
        return f"is the {s} {SIZES[z]}", ans, o
    raise ValueError(kind)


def relevance_scores(gt: str, candidates: list[str]) -> np.ndarray:
    """Graded relevance: 1 for the gt, 0.6 for a shared content word, 0.2 for the same template family."""
    gt_words = set(gt.split())
    content = gt_words - {"it", "is", "i", "see", "made", "of", "no"} or gt_words
    out = np.zeros(len(candidates))
    for j, c in enumerate(candidates):
        if c == gt:
            out[j] = 1.0
        elif content & set(c.split()):
            out[j] = 0.6
        elif ANSWER_FAMILY_OF[c] == ANSWER_FAMILY_OF[gt]:
            out[j] = 0.2
    return out


def _candidates(gt: str, rng: np.random.Generator, n_candidates: int) -> tuple[list[int], int]:
    gt_id = ANSWERS.index(gt)
    fam = [ANSWERS.index(a) for a in ANSWER_FAMILIES[ANSWER_FAMILY_OF[gt]] if a != gt]
    n_fam = min(len(fam), (n_candidates - 1) // 3)
    picked = list(rng.choice(fam, size=n_fam, replace=False)) if n_fam else []
    rest = [i for i in range(len(ANSWERS)) if i != gt_id and i not in picked]
    picked += list(rng.choice(rest, size=n_candidates - 1 - n_fam, replace=False))
    ids = [int(i) for i in picked]
    gt_index = int(rng.integers(n_candidates))
    ids.insert(gt_index, gt_id)
    return ids, gt_index


def generate_synthetic_corpus(seed: int, n_images: int, rounds_per_dialog: int, n_candidates: int = 100,
                              n_regions: int = 8, d_img: int = 32, noise: float = 0.3,
                              world_seed: int = 0, first_image_id: int = 0, return_scenes: bool = False):
    """Generate ``(dialogs, features, vocab)``; a pure function of its arguments."""
    if n_images < 1 or rounds_per_dialog < 1 or n_regions < 2 or d_img < 1:
        raise ValueError("counts must be positive (n_regions >= 2)")
    if not 2 <= n_candidates <= len(ANSWERS):
        raise ValueError(f"n_candidates must be in [2, {len(ANSWERS)}]")
    rng = np.random.default_rng([seed, 1013])
    vocab = world_vocab()
    dialogs, features, scenes = [], [], []
    question_ids: dict[str, int] = {}
    kinds = ["color", "count", "exists", "material", "color_check", "size_check"]
    for n in range(n_images):
        image_id = first_image_id + n
        scene = _sample_scene(rng, n_regions)
        regions = _region_features(scene, rng, n_regions, d_img, world_seed, noise)
        o = scene.objects[int(rng.integers(len(scene.objects)))]
        caption = f"a picture with a {SIZES[o.size]} {COLORS[o.color]} {SHAPES[o.shape]}"
        rounds = []
        focus = None
        for _ in range(rounds_per_dialog):
            kind = kinds[int(rng.integers(len(kinds)))]
            if focus is not None and rng.random() < 0.3:
                kind = "coref_color" if rng.random() < 0.5 else "coref_material"
            q, a, focus = _ask(kind, scene, rng, focus)
            ids, gt_index = _candidates(a, rng, n_candidates)
            cands = [tuple(ANSWERS[i].split()) for i in ids]
            rel = relevance_scores(a, [ANSWERS[i] for i in ids])
            rounds.append(
                Round(
                    question=tuple(q.split()),
                    gt_answer=tuple(a.split()),
                    candidates=cands,
                    gt_index=gt_index,
                    candidate_ids=ids,
                    question_id=question_ids.setdefault(q, len(question_ids)),
                    dense_relevance=rel,
                )
            )
        dialogs.append(Dialog(image_id=image_id, caption=tuple(caption.split()), rounds=rounds))
        features.append(ImageFeatures(image_id=image_id, regions=regions))
        scenes.append(scene)
    if return_scenes:
        return dialogs, features, vocab, scenes
    return dialogs, features, vocab
