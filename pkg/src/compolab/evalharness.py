"""Ranking-based evaluation on held-out benchmark items.

Correctness rules use strict inequality everywhere: a tie with any negative
counts as incorrect. This can only understate performance; float ties are
vanishingly rare for trained embeddings.

Dump layout per item (see README for the full contract):
  single-positive item: pos_sims=[img-pos], neg_sims=[img-neg...]
  paraphrase item:      pos_sims=[img-pos1, img-pos2, pos1-pos2],
                        neg_sims=[img-neg x M, pos1-neg x M, pos2-neg x M]
Every correctness flag is recomputable from those lists alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import pad_batch
from .tensor import no_grad

__all__ = [
    "RankingResult",
    "SimilarityTrace",
    "single_positive_correct",
    "itt_correct",
    "tot_correct",
    "embed_captions",
    "embed_images",
    "score_items",
    "single_positive_accuracy",
    "itt_accuracy",
    "tot_accuracy",
    "retrieval_accuracy",
    "track_pair_similarity",
    "trace_from_results",
    "dump_ranking_results",
    "load_ranking_results",
    "summarize_results",
]


@dataclass
class RankingResult:
    item_id: int
    category: str
    pos_sims: list
    neg_sims: list
    correct_single: Optional[bool]
    correct_itt: Optional[bool]
    correct_tot: Optional[bool]


@dataclass
class SimilarityTrace:
    """Mean cosine per caption-pair class over a paraphrase suite."""

    epoch: int
    pos_pos: float
    pos1_neg: float
    pos2_neg: float


# --- correctness rules on raw similarity lists ------------------------------


def single_positive_correct(pos_sims, neg_sims) -> bool:
    if len(pos_sims) != 1:
        raise ValueError(f"single-positive rule needs exactly 1 positive, got {len(pos_sims)}")
    if not neg_sims:
        raise ValueError("item with no negatives")
    return all(pos_sims[0] > n for n in neg_sims)


def itt_correct(pos_sims, neg_sims) -> bool:
    if len(pos_sims) < 2:
        raise ValueError(f"image-to-text rule needs >= 2 positives, got {len(pos_sims)}")
    if not neg_sims:
        raise ValueError("item with no negatives")
    return min(pos_sims) > max(neg_sims)


def tot_correct(pos_pair_sim, pos_neg_sims) -> bool:
    if not pos_neg_sims:
        raise ValueError("item with no negatives")
    return all(pos_pair_sim > s for s in pos_neg_sims)


# --- embedding helpers -------------------------------------------------------

_CHUNK = 512


def embed_captions(bundle, token_lists) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(token_lists), _CHUNK):
            ids, lengths = pad_batch([tuple(t) for t in token_lists[start:start + _CHUNK]])
            out.append(bundle.text_encoder.encode_batch(ids, lengths).data)
    return np.concatenate(out, axis=0)


def embed_images(bundle, renderings) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(renderings), _CHUNK):
            chunk = renderings[start:start + _CHUNK]
            ids = np.array([
                r.token_ids if hasattr(r, "token_ids") else tuple(r) for r in chunk
            ])
            out.append(bundle.image_encoder.encode_batch(ids).data)
    return np.concatenate(out, axis=0)


def _norm_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _norm_rows(a) @ _norm_rows(b).T


# --- item scoring ------------------------------------------------------------


def score_items(bundle, items) -> list:
    """Embed each item once and apply every applicable correctness rule."""
    results = []
    cap_tokens, cap_index = [], {}

    def cap_id(toks):
        if toks not in cap_index:
            cap_index[toks] = len(cap_tokens)
            cap_tokens.append(toks)
        return cap_index[toks]

    image_ids = []
    layout = []
    for item in items:
        pos = [cap_id(p.token_ids) for p in item.positives]
        neg = [cap_id(n.token_ids) for n in item.negatives]
        if not neg:
            raise ValueError(f"item {item.item_id} has no negatives")
        image_ids.append(item.image)
        layout.append((item, pos, neg))

    cap_emb = embed_captions(bundle, cap_tokens)
    img_emb = embed_images(bundle, image_ids)
    cap_n = _norm_rows(cap_emb)
    img_n = _norm_rows(img_emb)

    for row, (item, pos, neg) in enumerate(layout):
        img_pos = [float(img_n[row] @ cap_n[p]) for p in pos]
        img_neg = [float(img_n[row] @ cap_n[n]) for n in neg]
        if len(pos) == 1:
            results.append(RankingResult(
                item_id=item.item_id, category=item.category,
                pos_sims=img_pos, neg_sims=img_neg,
                correct_single=single_positive_correct(img_pos, img_neg),
                correct_itt=None, correct_tot=None,
            ))
            continue
        pos_pair = float(cap_n[pos[0]] @ cap_n[pos[1]])
        p1_neg = [float(cap_n[pos[0]] @ cap_n[n]) for n in neg]
        p2_neg = [float(cap_n[pos[1]] @ cap_n[n]) for n in neg]
        results.append(RankingResult(
            item_id=item.item_id, category=item.category,
            pos_sims=img_pos + [pos_pair],
            neg_sims=img_neg + p1_neg + p2_neg,
            correct_single=None,
            correct_itt=itt_correct(img_pos, img_neg),
            correct_tot=tot_correct(pos_pair, p1_neg + p2_neg),
        ))
    return results


def _accuracy(flags) -> float:
    flags = list(flags)
    if not flags:
        raise ValueError("accuracy over zero items")
    return float(np.sort(np.array(flags, dtype=np.float64)).sum() / len(flags))


def single_positive_accuracy(bundle, items) -> float:
    """Fraction of items whose positive strictly outranks every negative."""
    for item in items:
        if len(item.positives) != 1:
            raise ValueError(f"item {item.item_id} has {len(item.positives)} positives")
    return _accuracy(r.correct_single for r in score_items(bundle, items))


def itt_accuracy(bundle, items) -> float:
    """Fraction of items where both positives outrank every negative by image score."""
    return _accuracy(r.correct_itt for r in score_items(bundle, items))


def tot_accuracy(bundle, items) -> float:
    """Fraction of items where the positive pair is more similar to each other
    than either positive is to any negative; the image is unused."""
    return _accuracy(r.correct_tot for r in score_items(bundle, items))


def retrieval_accuracy(bundle, images, captions) -> tuple:
    """Recall@1 in both directions with a strict unique-argmax rule."""
    if len(images) != len(captions):
        raise ValueError("retrieval_accuracy: need one caption per image")
    img = embed_images(bundle, images)
    cap = embed_captions(bundle, [tuple(c) for c in captions])
    sims = _cos(img, cap)
    n = sims.shape[0]
    if n == 1:
        return 1.0, 1.0
    off_i = sims + np.where(np.eye(n, dtype=bool), -np.inf, 0.0)
    i2t = float(np.mean(sims[np.arange(n), np.arange(n)] > off_i.max(axis=1)))
    t2i = float(np.mean(sims[np.arange(n), np.arange(n)] > off_i.max(axis=0)))
    return i2t, t2i


def trace_from_results(results, epoch: int = 0) -> SimilarityTrace:
    pos_pos, p1n, p2n = [], [], []
    for r in results:
        if len(r.pos_sims) != 3:
            raise ValueError(f"item {r.item_id} is not a paraphrase-suite item")
        m = len(r.neg_sims) // 3
        pos_pos.append(r.pos_sims[2])
        p1n.extend(r.neg_sims[m:2 * m])
        p2n.extend(r.neg_sims[2 * m:])
    return SimilarityTrace(
        epoch=epoch,
        pos_pos=float(np.mean(pos_pos)),
        pos1_neg=float(np.mean(p1n)),
        pos2_neg=float(np.mean(p2n)),
    )


def track_pair_similarity(bundle, items, epoch: int = 0) -> SimilarityTrace:
    return trace_from_results(score_items(bundle, items), epoch=epoch)


# --- dumps -------------------------------------------------------------------


def dump_ranking_results(path, results):
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "item_id": r.item_id,
                "category": r.category,
                "pos_sims": r.pos_sims,
                "neg_sims": r.neg_sims,
                "correct_single": r.correct_single,
                "correct_itt": r.correct_itt,
                "correct_tot": r.correct_tot,
            }, separators=(", ", ": ")) + "\n")


def load_ranking_results(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(RankingResult(
                item_id=d["item_id"], category=d["category"],
                pos_sims=d["pos_sims"], neg_sims=d["neg_sims"],
                correct_single=d["correct_single"],
                correct_itt=d["correct_itt"], correct_tot=d["correct_tot"],
            ))
    return out


def summarize_results(results) -> list:
    """Aggregate accuracy rows keyed by category, plus an 'all' row."""
    def agg(rs, category):
        row = {"category": category, "n": len(rs)}
        for key in ("correct_single", "correct_itt", "correct_tot"):
            flags = [getattr(r, key) for r in rs if getattr(r, key) is not None]
            row[key.replace("correct", "acc")] = (
                round(_accuracy(flags), 10) if flags else None
            )
        return row

    categories = sorted({r.category for r in results})
    rows = [agg([r for r in results if r.category == c], c) for c in categories]
    rows.append(agg(results, "all"))
    return rows
