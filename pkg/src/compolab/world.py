"""Synthetic compositional scene world.

A scene is two attributed objects joined by a spatial relation. Everything
downstream derives from scenes deterministically: token renderings standing
in for images, grammar captions, rule paraphrases, hard negatives, and
ranking benchmarks. A standalone parser maps any grammatical caption back to
its scene and is the verification oracle for every generator here.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

__all__ = [
    "Vocabulary",
    "Scene",
    "CaptionRecord",
    "ImageRendering",
    "BenchmarkItem",
    "CaptionParseError",
    "NEGATIVE_CATEGORIES",
    "ROLE_ORIGINAL",
    "ROLE_ALTERNATIVE",
    "ROLE_PARAPHRASE",
    "ROLE_NEGATIVE",
    "build_caption",
    "parse_caption",
    "parses_to_scene",
    "canonical_form",
    "generate_scenes",
    "render_image",
    "caption_set",
    "make_paraphrase",
    "make_hard_negatives",
    "hard_negative_pool",
    "inject_paraphrase_noise",
    "build_benchmark",
    "word_edit_distance",
]

ROLE_ORIGINAL = "original"
ROLE_ALTERNATIVE = "alternative"
ROLE_PARAPHRASE = "paraphrase"
ROLE_NEGATIVE = "hard-negative"

NEGATIVE_CATEGORIES = (
    "swap-object",
    "swap-attribute",
    "replace-object",
    "replace-attribute",
    "replace-relation",
)

_NOUNS = [
    "cube", "ball", "cone", "disk", "star", "ring",
    "block", "tube", "slab", "wedge", "prism", "drum",
]
_NOUN_SYNONYMS = {
    "cube": "box", "ball": "sphere", "cone": "funnel", "disk": "plate",
    "star": "burst", "ring": "loop", "block": "brick", "tube": "pipe",
    "slab": "plank", "wedge": "ramp", "prism": "crystal", "drum": "barrel",
}
_ADJECTIVES = ["red", "blue", "green", "small", "large", "shiny", "dull", "striped"]
_ADJ_SYNONYMS = {
    "red": "crimson", "blue": "azure", "green": "emerald", "small": "tiny",
    "large": "big", "shiny": "glossy", "dull": "matte", "striped": "banded",
}
_RELATIONS = ["left-of", "right-of", "above", "below", "near", "far-from"]
_INVERSE = {
    "left-of": "right-of", "right-of": "left-of",
    "above": "below", "below": "above",
    "near": "near", "far-from": "far-from",
}
_JITTER_COUNT = 4


class CaptionParseError(ValueError):
    """Raised when token ids do not form a grammatical caption."""


class Vocabulary:
    """Fixed token inventory: specials, template words, content words, synonyms,
    and a disjoint visual token range for scene renderings."""

    def __init__(self):
        self.pad_id, self.bos_id, self.eos_id = 0, 1, 2
        words = ["<pad>", "<bos>", "<eos>", "the", "is"]
        self.the_id, self.is_id = 3, 4
        self.noun_ids = []
        for w in _NOUNS:
            self.noun_ids.append(len(words))
            words.append(w)
        self.adj_ids = []
        for w in _ADJECTIVES:
            self.adj_ids.append(len(words))
            words.append(w)
        self.rel_ids = []
        for w in _RELATIONS:
            self.rel_ids.append(len(words))
            words.append(w)
        self.synonym_of = {}
        for base_list, table in ((_NOUNS, _NOUN_SYNONYMS), (_ADJECTIVES, _ADJ_SYNONYMS)):
            for w in base_list:
                self.synonym_of[words.index(w)] = len(words)
                words.append(table[w])
        self.words = words
        self.word_to_id = {w: i for i, w in enumerate(words)}
        self.base_of = {syn: base for base, syn in self.synonym_of.items()}
        self.invert_rel = {
            self.word_to_id[a]: self.word_to_id[b] for a, b in _INVERSE.items()
        }
        self.text_size = len(words)

        # visual vocabulary occupies its own id range above the text ids
        self.visual_words = (
            [f"vis:{w}" for w in _NOUNS]
            + [f"vis:{w}" for w in _ADJECTIVES]
            + [f"vis:{w}" for w in _RELATIONS]
            + [f"vis:jitter-{j}" for j in range(_JITTER_COUNT)]
        )
        self.visual_base = self.text_size
        self.visual_size = len(self.visual_words)
        self.jitter_count = _JITTER_COUNT
        self._vis_noun = {
            n: self.visual_base + i for i, n in enumerate(self.noun_ids)
        }
        self._vis_adj = {
            a: self.visual_base + len(_NOUNS) + i for i, a in enumerate(self.adj_ids)
        }
        self._vis_rel = {
            r: self.visual_base + len(_NOUNS) + len(_ADJECTIVES) + i
            for i, r in enumerate(self.rel_ids)
        }
        self._vis_jitter = [
            self.visual_base + len(_NOUNS) + len(_ADJECTIVES) + len(_RELATIONS) + j
            for j in range(_JITTER_COUNT)
        ]

        self._symmetric_rels = {
            rid for rid, inv in self.invert_rel.items() if inv == rid
        }
        self._nounish = set(self.noun_ids) | {self.synonym_of[n] for n in self.noun_ids}
        self._adjish = set(self.adj_ids) | {self.synonym_of[a] for a in self.adj_ids}

    def word(self, token_id: int) -> str:
        if token_id < self.text_size:
            return self.words[token_id]
        return self.visual_words[token_id - self.visual_base]

    def surface(self, token_ids) -> str:
        skip = {self.pad_id, self.bos_id, self.eos_id}
        return " ".join(self.word(t) for t in token_ids if t not in skip)

    def base_token(self, token_id: int) -> int:
        return self.base_of.get(token_id, token_id)

    def is_symmetric(self, rel_id: int) -> bool:
        return rel_id in self._symmetric_rels


@dataclass(frozen=True)
class Scene:
    """Ground truth: (noun1, attr1) related to (noun2, attr2); base ids only."""

    noun1: int
    attr1: int
    rel: int
    noun2: int
    attr2: int
    scene_id: int = -1

    def __post_init__(self):
        if self.noun1 == self.noun2:
            raise ValueError(f"Scene: object nouns must differ, got {self.noun1} twice")

    @property
    def object1(self):
        return (self.noun1, self.attr1)

    @property
    def object2(self):
        return (self.noun2, self.attr2)

    def literal(self):
        return (self.noun1, self.attr1, self.rel, self.noun2, self.attr2)


def canonical_form(literal, vocab: Vocabulary):
    """Orientation-free identity of a scene description.

    Asymmetric relations are oriented to their base member (left-of, above);
    symmetric relations order the two objects. Two captions mean the same
    thing iff their parses share a canonical form.
    """
    n1, a1, rel, n2, a2 = literal
    inv = vocab.invert_rel[rel]
    if inv != rel and rel > inv:
        return (n2, a2, inv, n1, a1)
    if inv == rel and (n1, a1) > (n2, a2):
        return (n2, a2, rel, n1, a1)
    return (n1, a1, rel, n2, a2)


@dataclass(frozen=True)
class CaptionRecord:
    """Tokenized caption with its role and provenance.

    template_id encodes the surface: bit 0 marks the inverted ordering and
    bits 1..4 mark synonym use per scene slot (attr1, noun1, attr2, noun2);
    -1 marks derived surfaces (paraphrase draws, perturbed negatives, noise).
    """

    token_ids: tuple
    template_id: int
    role: str
    scene_id: int
    category: Optional[str] = None

    def __post_init__(self):
        if (self.role == ROLE_NEGATIVE) != (self.category is not None):
            raise ValueError(
                f"CaptionRecord: category must be present iff role is hard-negative "
                f"(role={self.role}, category={self.category})"
            )
        if self.category is not None and self.category not in NEGATIVE_CATEGORIES:
            raise ValueError(f"CaptionRecord: unknown negative category {self.category!r}")


@dataclass(frozen=True)
class ImageRendering:
    """Fixed-length visual token sequence standing in for an image."""

    token_ids: tuple
    scene_id: int
    jitter: int


@dataclass(frozen=True)
class BenchmarkItem:
    item_id: int
    scene_id: int
    category: str
    image: ImageRendering
    positives: tuple
    negatives: tuple


# --- caption construction and parsing (two independent routes) -------------


def _slot_word(vocab, base_id, use_synonym):
    return vocab.synonym_of[base_id] if use_synonym else base_id


def build_caption(scene, vocab: Vocabulary, inverted=False, syn=(False, False, False, False)):
    """Render scene as token ids. syn flags follow scene slots (a1, n1, a2, n2)."""
    sa1, sn1, sa2, sn2 = syn
    a1 = _slot_word(vocab, scene.attr1, sa1)
    n1 = _slot_word(vocab, scene.noun1, sn1)
    a2 = _slot_word(vocab, scene.attr2, sa2)
    n2 = _slot_word(vocab, scene.noun2, sn2)
    if inverted:
        body = [a2, n2, vocab.is_id, vocab.invert_rel[scene.rel], vocab.the_id, a1, n1]
    else:
        body = [a1, n1, vocab.is_id, scene.rel, vocab.the_id, a2, n2]
    return (vocab.bos_id, vocab.the_id, *body, vocab.eos_id)


def template_id(inverted, syn):
    mask = sum(1 << i for i, s in enumerate(syn) if s)
    return (mask << 1) | int(inverted)


def parse_caption(token_ids, vocab: Vocabulary):
    """Pattern-match a caption back to its literal (n1, a1, rel, n2, a2).

    Independent of build_caption: checks the full template structure and maps
    synonyms to base ids. Raises CaptionParseError on any violation.
    """
    toks = tuple(token_ids)
    if len(toks) != 10:
        raise CaptionParseError(f"expected 10 tokens, got {len(toks)}")
    if toks[0] != vocab.bos_id or toks[-1] != vocab.eos_id:
        raise CaptionParseError("caption must be BOS ... EOS")
    if vocab.pad_id in toks[1:-1]:
        raise CaptionParseError("interior PAD token")
    _, w_the1, w_a1, w_n1, w_is, w_rel, w_the2, w_a2, w_n2, _ = toks
    if w_the1 != vocab.the_id or w_the2 != vocab.the_id or w_is != vocab.is_id:
        raise CaptionParseError("template words out of place")
    if w_a1 not in vocab._adjish or w_a2 not in vocab._adjish:
        raise CaptionParseError("expected adjective slot")
    if w_n1 not in vocab._nounish or w_n2 not in vocab._nounish:
        raise CaptionParseError("expected noun slot")
    if w_rel not in vocab.invert_rel:
        raise CaptionParseError("expected relation slot")
    return (
        vocab.base_token(w_n1),
        vocab.base_token(w_a1),
        w_rel,
        vocab.base_token(w_n2),
        vocab.base_token(w_a2),
    )


def parses_to_scene(token_ids, scene, vocab: Vocabulary) -> bool:
    try:
        literal = parse_caption(token_ids, vocab)
    except CaptionParseError:
        return False
    return canonical_form(literal, vocab) == canonical_form(scene.literal(), vocab)


def word_edit_distance(tokens_a, tokens_b) -> int:
    """Word-level Levenshtein distance (BOS/EOS included; equal-length fast path)."""
    a, b = list(tokens_a), list(tokens_b)
    if len(a) == len(b):
        return sum(1 for x, y in zip(a, b) if x != y)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


# --- generators -------------------------------------------------------------


def generate_scenes(count: int, seed: int, vocab: Vocabulary) -> list:
    """Uniform scenes over valid (obj1, attr1, rel, obj2, attr2), obj1 != obj2."""
    if count < 1:
        raise ValueError(f"generate_scenes: count must be >= 1, got {count}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 1)))
    scenes = []
    n_nouns = len(vocab.noun_ids)
    for i in range(count):
        i1 = int(rng.integers(n_nouns))
        a1 = vocab.adj_ids[int(rng.integers(len(vocab.adj_ids)))]
        rel = vocab.rel_ids[int(rng.integers(len(vocab.rel_ids)))]
        i2 = int(rng.integers(n_nouns - 1))
        if i2 >= i1:
            i2 += 1
        a2 = vocab.adj_ids[int(rng.integers(len(vocab.adj_ids)))]
        scenes.append(
            Scene(vocab.noun_ids[i1], a1, rel, vocab.noun_ids[i2], a2, scene_id=i)
        )
    return scenes


def render_image(scene, jitter: int, vocab: Vocabulary) -> ImageRendering:
    """Deterministic 6-token visual sequence for (scene, jitter)."""
    if not 0 <= jitter < vocab.jitter_count:
        raise ValueError(f"render_image: jitter {jitter} outside [0, {vocab.jitter_count})")
    toks = (
        vocab._vis_noun[scene.noun1],
        vocab._vis_adj[scene.attr1],
        vocab._vis_rel[scene.rel],
        vocab._vis_noun[scene.noun2],
        vocab._vis_adj[scene.attr2],
        vocab._vis_jitter[jitter],
    )
    return ImageRendering(token_ids=toks, scene_id=scene.scene_id, jitter=jitter)


_CANNED_TEMPLATES = (
    (False, (False, False, False, False)),
    (True, (False, False, False, False)),
    (False, (True, True, True, True)),
    (True, (True, True, True, True)),
)


def caption_set(scene, vocab: Vocabulary) -> list:
    """The scene's faithful captions: base, inverted, and a synonym variant of each."""
    records = []
    for inverted, syn in _CANNED_TEMPLATES:
        records.append(
            CaptionRecord(
                token_ids=build_caption(scene, vocab, inverted, syn),
                template_id=template_id(inverted, syn),
                role=ROLE_ORIGINAL,
                scene_id=scene.scene_id,
            )
        )
    return records


def _caption_rng(seed, token_ids, tag):
    return np.random.default_rng(np.random.SeedSequence((int(seed), tag, *token_ids)))


def make_paraphrase(caption: CaptionRecord, vocab: Vocabulary, seed: int) -> CaptionRecord:
    """Semantically equal, lexically different rewrite via inversion/synonyms."""
    if caption.role not in (ROLE_ORIGINAL, ROLE_ALTERNATIVE):
        raise ValueError(f"make_paraphrase: role must be original/alternative, got {caption.role}")
    literal = parse_caption(caption.token_ids, vocab)
    scene = Scene(*literal, scene_id=caption.scene_id)
    rng = _caption_rng(seed, caption.token_ids, 2)
    candidates = []
    for inverted in (False, True):
        for mask in range(16):
            syn = tuple(bool(mask >> i & 1) for i in range(4))
            toks = build_caption(scene, vocab, inverted, syn)
            if toks != caption.token_ids:
                candidates.append(toks)
    toks = candidates[int(rng.integers(len(candidates)))]
    return CaptionRecord(
        token_ids=toks, template_id=-1, role=ROLE_PARAPHRASE, scene_id=caption.scene_id
    )


def hard_negative_pool(caption: CaptionRecord, scene, vocab: Vocabulary, seed: int) -> dict:
    """One perturbed candidate per negative category, keeping only candidates the
    parser confirms to be semantically inconsistent with the scene."""
    toks = list(caption.token_ids)
    rng = _caption_rng(seed, caption.token_ids, 3)
    # surface slot positions in the 10-token template
    A1, N1, REL, A2, N2 = 2, 3, 5, 7, 8
    pool = {}

    def offer(category, new_tokens):
        new_tokens = tuple(new_tokens)
        if new_tokens == caption.token_ids:
            return
        try:
            literal = parse_caption(new_tokens, vocab)
        except CaptionParseError:
            return
        if canonical_form(literal, vocab) == canonical_form(scene.literal(), vocab):
            return
        pool[category] = CaptionRecord(
            token_ids=new_tokens,
            template_id=-1,
            role=ROLE_NEGATIVE,
            scene_id=scene.scene_id,
            category=category,
        )

    t = list(toks)
    t[N1], t[N2] = t[N2], t[N1]
    offer("swap-object", t)

    t = list(toks)
    t[A1], t[A2] = t[A2], t[A1]
    offer("swap-attribute", t)

    slot = N1 if rng.integers(2) == 0 else N2
    exclude = {vocab.base_token(toks[N1]), vocab.base_token(toks[N2])}
    choices = [n for n in vocab.noun_ids if n not in exclude]
    t = list(toks)
    t[slot] = choices[int(rng.integers(len(choices)))]
    offer("replace-object", t)

    slot = A1 if rng.integers(2) == 0 else A2
    choices = [a for a in vocab.adj_ids if a != vocab.base_token(toks[slot])]
    t = list(toks)
    t[slot] = choices[int(rng.integers(len(choices)))]
    offer("replace-attribute", t)

    choices = [r for r in vocab.rel_ids if r != toks[REL]]
    t = list(toks)
    t[REL] = choices[int(rng.integers(len(choices)))]
    offer("replace-relation", t)

    return pool


def make_hard_negatives(caption: CaptionRecord, scene, count: int, vocab: Vocabulary, seed: int) -> list:
    """Sample ``count`` negatives without replacement across the valid categories."""
    if count < 1:
        raise ValueError(f"make_hard_negatives: count must be >= 1, got {count}")
    pool = hard_negative_pool(caption, scene, vocab, seed)
    if count > len(pool):
        raise ValueError(
            f"make_hard_negatives: requested {count} but only {len(pool)} distinct "
            f"negatives exist for this caption"
        )
    categories = sorted(pool)
    rng = _caption_rng(seed, caption.token_ids, 4)
    order = rng.permutation(len(categories))
    return [pool[categories[int(i)]] for i in order[:count]]


def inject_paraphrase_noise(records, fraction: float, seed: int, vocab: Vocabulary) -> list:
    """Replace an exact fraction of paraphrase records with captions of
    unrelated scenes drawn from the original-role records in the list."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"inject_paraphrase_noise: fraction {fraction} outside [0, 1]")
    records = list(records)
    para_idx = [i for i, r in enumerate(records) if r.role == ROLE_PARAPHRASE]
    n_replace = int(round(fraction * len(para_idx)))
    if n_replace == 0:
        return records
    originals = [r for r in records if r.role == ROLE_ORIGINAL]
    canon = {}

    def canon_of(rec):
        key = rec.token_ids
        if key not in canon:
            canon[key] = canonical_form(parse_caption(key, vocab), vocab)
        return canon[key]

    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 5)))
    chosen = rng.choice(len(para_idx), size=n_replace, replace=False)
    for c in np.sort(chosen):
        idx = para_idx[int(c)]
        target = records[idx]
        target_canon = canon_of(target)
        unrelated = [r for r in originals if canon_of(r) != target_canon]
        if not unrelated:
            raise ValueError("inject_paraphrase_noise: no unrelated caption available")
        source = unrelated[int(rng.integers(len(unrelated)))]
        records[idx] = replace(
            target, token_ids=source.token_ids, template_id=-1
        )
    return records


_KIND_CODES = {"swap-suite": 10, "replace-suite": 11, "paraphrase-suite": 12}


def build_benchmark(kind: str, scenes, vocab: Vocabulary, seed: int, m_negatives: int = 3) -> list:
    """Ranking items per suite kind.

    swap/replace suites: one positive and one category-matched negative.
    paraphrase suite: two semantically equal positives plus m negatives.
    """
    if kind not in _KIND_CODES:
        raise ValueError(f"build_benchmark: unknown kind {kind!r}")
    if not scenes:
        raise ValueError("build_benchmark: empty scene list")
    code = _KIND_CODES[kind]
    items = []
    for pos_idx, scene in enumerate(scenes):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), code, pos_idx)))
        jitter = int(rng.integers(vocab.jitter_count))
        image = render_image(scene, jitter, vocab)
        caps = caption_set(scene, vocab)
        positive = caps[int(rng.integers(len(caps)))]
        item_seed = int(rng.integers(2**32))
        if kind == "paraphrase-suite":
            pos2 = make_paraphrase(positive, vocab, seed=item_seed)
            negatives = make_hard_negatives(positive, scene, m_negatives, vocab, seed=item_seed)
            items.append(
                BenchmarkItem(
                    item_id=len(items),
                    scene_id=scene.scene_id,
                    category="paraphrase",
                    image=image,
                    positives=(positive, pos2),
                    negatives=tuple(negatives),
                )
            )
            continue
        pool = hard_negative_pool(positive, scene, vocab, seed=item_seed)
        wanted = ("swap-object", "swap-attribute") if kind == "swap-suite" else (
            "replace-object", "replace-attribute", "replace-relation"
        )
        available = [c for c in wanted if c in pool]
        if not available:
            continue  # scene admits no valid negative in this suite
        category = available[int(rng.integers(len(available)))]
        items.append(
            BenchmarkItem(
                item_id=len(items),
                scene_id=scene.scene_id,
                category=category,
                image=image,
                positives=(positive,),
                negatives=(pool[category],),
            )
        )
    return items
