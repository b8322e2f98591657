"""Dataset assembly and the JSON-lines record format.

Record schema (one JSON object per line, field order fixed):
    {scene_id, role, category, token_ids, surface_text}
Grouping is positional and documented in the README: a scene block is the
image record followed by its caption blocks; a caption block is the caption
record followed by its paraphrase candidates and its hard-negative pool.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .world import (
    ROLE_NEGATIVE,
    ROLE_ORIGINAL,
    ROLE_PARAPHRASE,
    BenchmarkItem,
    CaptionRecord,
    ImageRendering,
    Scene,
    Vocabulary,
    canonical_form,
    caption_set,
    hard_negative_pool,
    inject_paraphrase_noise,
    make_paraphrase,
    parse_caption,
    render_image,
)

__all__ = ["SceneDataset", "build_dataset", "write_records", "read_records",
           "write_dataset", "read_dataset", "write_benchmark", "read_benchmark"]

ROLE_IMAGE = "image"


def _record_line(scene_id, role, category, token_ids, surface_text) -> str:
    return json.dumps(
        {
            "scene_id": int(scene_id),
            "role": role,
            "category": category,
            "token_ids": [int(t) for t in token_ids],
            "surface_text": surface_text,
        },
        separators=(", ", ": "),
    )


def write_records(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row + "\n")


def read_records(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class SceneDataset:
    """Scenes with pregenerated caption sets, paraphrase candidates, and
    hard-negative pools. All sampling at train time draws from these pools."""

    vocab: Vocabulary
    scenes: list
    captions: list  # per scene: list of CaptionRecord
    paraphrases: list  # per scene: per caption: list of CaptionRecord (num_p)
    negatives: list  # per scene: per caption: list of CaptionRecord (valid categories)
    num_p: int

    def __len__(self):
        return len(self.scenes)

    def canonical_set(self):
        return {canonical_form(s.literal(), self.vocab) for s in self.scenes}


def build_dataset(scenes, vocab: Vocabulary, num_p: int = 1, seed: int = 0,
                  noise_fraction: float = 0.0) -> SceneDataset:
    if num_p < 1:
        raise ValueError(f"build_dataset: num_p must be >= 1, got {num_p}")
    captions, paraphrases, negatives = [], [], []
    for scene in scenes:
        caps = caption_set(scene, vocab)
        captions.append(caps)
        scene_paras, scene_negs = [], []
        for ci, cap in enumerate(caps):
            cands, seen = [], set()
            k = 0
            while len(cands) < num_p:
                p = make_paraphrase(cap, vocab, seed=(seed * 1000003 + ci * 101 + k))
                k += 1
                if p.token_ids in seen:
                    continue
                seen.add(p.token_ids)
                cands.append(p)
            scene_paras.append(cands)
            pool = hard_negative_pool(cap, scene, vocab, seed=(seed * 1000003 + ci * 101))
            scene_negs.append([pool[c] for c in sorted(pool)])
        paraphrases.append(scene_paras)
        negatives.append(scene_negs)

    if noise_fraction > 0.0:
        flat = []
        for si in range(len(scenes)):
            for ci in range(len(captions[si])):
                flat.append(captions[si][ci])
                flat.extend(paraphrases[si][ci])
        noised = inject_paraphrase_noise(flat, noise_fraction, seed, vocab)
        pos = 0
        for si in range(len(scenes)):
            for ci in range(len(captions[si])):
                pos += 1
                paraphrases[si][ci] = noised[pos:pos + num_p]
                pos += num_p

    return SceneDataset(
        vocab=vocab, scenes=list(scenes), captions=captions,
        paraphrases=paraphrases, negatives=negatives, num_p=num_p,
    )


def write_dataset(path, dataset: SceneDataset):
    vocab = dataset.vocab
    rows = []
    for si, scene in enumerate(dataset.scenes):
        image = render_image(scene, 0, vocab)
        rows.append(_record_line(
            scene.scene_id, ROLE_IMAGE, None, image.token_ids, vocab.surface(image.token_ids)
        ))
        for ci, cap in enumerate(dataset.captions[si]):
            rows.append(_record_line(
                cap.scene_id, cap.role, cap.category, cap.token_ids, vocab.surface(cap.token_ids)
            ))
            for p in dataset.paraphrases[si][ci]:
                rows.append(_record_line(
                    p.scene_id, p.role, p.category, p.token_ids, vocab.surface(p.token_ids)
                ))
            for n in dataset.negatives[si][ci]:
                rows.append(_record_line(
                    n.scene_id, n.role, n.category, n.token_ids, vocab.surface(n.token_ids)
                ))
    write_records(path, rows)


def read_dataset(path, vocab: Vocabulary) -> SceneDataset:
    records = read_records(path)
    scenes, captions, paraphrases, negatives = [], [], [], []
    i = 0
    num_p = None
    while i < len(records):
        rec = records[i]
        if rec["role"] != ROLE_IMAGE:
            raise ValueError(f"read_dataset: expected image record at line {i + 1}")
        scene_id = rec["scene_id"]
        i += 1
        caps, paras, negs = [], [], []
        while i < len(records) and records[i]["role"] == ROLE_ORIGINAL:
            cap_rec = records[i]
            caps.append(CaptionRecord(
                token_ids=tuple(cap_rec["token_ids"]), template_id=-1,
                role=ROLE_ORIGINAL, scene_id=scene_id,
            ))
            i += 1
            cur_paras = []
            while i < len(records) and records[i]["role"] == ROLE_PARAPHRASE:
                cur_paras.append(CaptionRecord(
                    token_ids=tuple(records[i]["token_ids"]), template_id=-1,
                    role=ROLE_PARAPHRASE, scene_id=scene_id,
                ))
                i += 1
            cur_negs = []
            while i < len(records) and records[i]["role"] == ROLE_NEGATIVE:
                cur_negs.append(CaptionRecord(
                    token_ids=tuple(records[i]["token_ids"]), template_id=-1,
                    role=ROLE_NEGATIVE, scene_id=scene_id,
                    category=records[i]["category"],
                ))
                i += 1
            paras.append(cur_paras)
            negs.append(cur_negs)
            if num_p is None:
                num_p = len(cur_paras)
        literal = parse_caption(caps[0].token_ids, vocab)
        scenes.append(Scene(*literal, scene_id=scene_id))
        captions.append(caps)
        paraphrases.append(paras)
        negatives.append(negs)
    return SceneDataset(
        vocab=vocab, scenes=scenes, captions=captions,
        paraphrases=paraphrases, negatives=negatives, num_p=num_p or 1,
    )


def write_benchmark(path, items, dataset_vocab: Vocabulary):
    vocab = dataset_vocab
    rows = []
    for item in items:
        rows.append(_record_line(
            item.scene_id, ROLE_IMAGE, None, item.image.token_ids,
            vocab.surface(item.image.token_ids),
        ))
        for p in item.positives:
            rows.append(_record_line(
                p.scene_id, p.role, p.category, p.token_ids, vocab.surface(p.token_ids)
            ))
        for n in item.negatives:
            rows.append(_record_line(
                n.scene_id, n.role, n.category, n.token_ids, vocab.surface(n.token_ids)
            ))
    write_records(path, rows)


def read_benchmark(path, vocab: Vocabulary) -> list:
    records = read_records(path)
    items = []
    i = 0
    while i < len(records):
        rec = records[i]
        if rec["role"] != ROLE_IMAGE:
            raise ValueError(f"read_benchmark: expected image record at line {i + 1}")
        scene_id = rec["scene_id"]
        toks = tuple(rec["token_ids"])
        jitter_base = vocab._vis_jitter[0]
        image = ImageRendering(token_ids=toks, scene_id=scene_id, jitter=toks[-1] - jitter_base)
        i += 1
        positives, negatives = [], []
        category = None
        while i < len(records) and records[i]["role"] != ROLE_IMAGE:
            r = records[i]
            rec_obj = CaptionRecord(
                token_ids=tuple(r["token_ids"]), template_id=-1, role=r["role"],
                scene_id=r["scene_id"], category=r["category"],
            )
            if r["role"] == ROLE_NEGATIVE:
                negatives.append(rec_obj)
                category = category or r["category"]
            else:
                positives.append(rec_obj)
            i += 1
        if len(positives) > 1:
            category = "paraphrase"
        items.append(BenchmarkItem(
            item_id=len(items), scene_id=scene_id, category=category,
            image=image, positives=tuple(positives), negatives=tuple(negatives),
        ))
    return items
