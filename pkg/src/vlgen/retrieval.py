"""Two-stage image-text retrieval and recall@k."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import TokenSequence, pad_batch
from .encoders import AttentionMaskKind, ModelParams, encode_images, encode_multimodal_batch, encode_texts
from .errors import ValidationError
from .objectives import contrastive_embeddings, itm_logits

log = logging.getLogger(__name__)
BIDIR = AttentionMaskKind.BIDIRECTIONAL


@dataclass(frozen=True)
class RetrievalConfig:
    top_k: int = 16

    def __post_init__(self):
        if self.top_k < 1:
            raise ValidationError("top_k must be >= 1")


@dataclass
class Ranking:
    query: int
    items: list[int]
    stage1: list[float]
    stage2: list[float | None]


@dataclass
class RetrievalOutput:
    rankings: list[Ranking]
    warnings: list[str] = field(default_factory=list)

    def item_lists(self) -> list[list[int]]:
        return [r.items for r in self.rankings]


class Encoded:
    """Unimodal states and contrastive embeddings for a set of images and texts."""

    def __init__(self, images: np.ndarray, texts: Sequence[TokenSequence], params: ModelParams, chunk: int = 128):
        with T.no_grad():
            zs = [encode_images(images[s : s + chunk], params).data for s in range(0, len(images), chunk)]
            self.visual = np.concatenate(zs) if zs else np.zeros((0,))
            self.ids, self.vis = pad_batch(texts)
            ts = [encode_texts(self.ids[s : s + chunk], self.vis[s : s + chunk], BIDIR, params).data
                  for s in range(0, len(texts), chunk)]
            self.text = np.concatenate(ts)
            x, y = contrastive_embeddings(T.Tensor(self.visual[:, 0], dtype=self.visual.dtype),
                                          T.Tensor(self.text[:, 0], dtype=self.text.dtype), params)
        self.image_emb = x.data
        self.text_emb = y.data


def similarity_matrix(enc: Encoded) -> np.ndarray:
    """Cosine similarity of projected [CLS] states, ``[n_images, n_texts]``."""
    return (enc.image_emb.astype(np.float64) @ enc.text_emb.astype(np.float64).T)


def itm_scores(enc: Encoded, pairs: Sequence[tuple[int, int]], params: ModelParams, chunk: int = 256) -> np.ndarray:
    """Positive-class ITM probability for (image index, text index) pairs."""
    out = []
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    with T.no_grad():
        for s in range(0, len(pairs), chunk):
            p = pairs[s : s + chunk]
            z = T.Tensor(enc.visual[p[:, 0]], dtype=enc.visual.dtype)
            t = T.Tensor(enc.text[p[:, 1]], dtype=enc.text.dtype)
            fused = encode_multimodal_batch(t, enc.vis[p[:, 1]], z, BIDIR, params)
            logits = itm_logits(fused[:, 0], params).data.astype(np.float64)
            m = logits.max(axis=1, keepdims=True)
            prob = np.exp(logits - m)
            out.append(prob[:, 1] / prob.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def retrieve(images: np.ndarray, texts: Sequence[TokenSequence], params: ModelParams,
             cfg: RetrievalConfig = RetrievalConfig(), direction: str = "i2t") -> RetrievalOutput:
    """Rank the gallery side for every query side item.

    ``direction="i2t"`` queries with each image over the text gallery;
    ``"t2i"`` the reverse. Stage 1 orders the gallery by contrastive cosine
    similarity; stage 2 reorders the top ``top_k`` by ITM probability
    (ties: stage-1 similarity descending, then index ascending). The rest of
    the gallery follows in stage-1 order.
    """
    if direction not in ("i2t", "t2i"):
        raise ValidationError(f"direction must be 'i2t' or 't2i', got {direction!r}")
    images = np.asarray(images)
    enc = Encoded(images, texts, params)
    sim = similarity_matrix(enc)
    if direction == "t2i":
        sim = sim.T
    n_query, n_gallery = sim.shape
    if n_gallery == 0:
        raise ValidationError("gallery is empty")
    warnings = []
    k = cfg.top_k
    if k > n_gallery:
        msg = f"top_k={k} exceeds gallery size {n_gallery}; clamped"
        log.warning(msg)
        warnings.append(msg)
        k = n_gallery
    idx = np.arange(n_gallery)
    rankings = []
    for q in range(n_query):
        s1 = sim[q]
        order = np.lexsort((idx, -s1))
        head, tail = order[:k], order[k:]
        pairs = [(q, int(g)) if direction == "i2t" else (int(g), q) for g in head]
        s2 = itm_scores(enc, pairs, params)
        head_order = np.lexsort((head, -s1[head], -s2))
        items = [int(head[i]) for i in head_order] + [int(g) for g in tail]
        stage2 = {int(head[i]): float(s2[i]) for i in range(len(head))}
        rankings.append(Ranking(q, items, [float(s1[g]) for g in items], [stage2.get(g) for g in items]))
    return RetrievalOutput(rankings, warnings)


def recall_at_k(rankings: Sequence[Sequence[int]], ground_truth: Sequence, k: int) -> float:
    """Fraction of queries with at least one ground-truth item in their first ``k`` results."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(rankings) != len(ground_truth):
        raise ValidationError("one ground-truth set per query is required")
    if not rankings:
        return 0.0
    hits = 0
    for ranked, truth in zip(rankings, ground_truth):
        truth = {truth} if isinstance(truth, (int, np.integer)) else set(truth)
        hits += bool(truth.intersection(ranked[:k]))
    return hits / len(rankings)


def format_rankings(out: RetrievalOutput) -> str:
    """Tab-separated: query, ranked item ids, stage-1 scores, stage-2 scores ('-' if not reranked)."""
    lines = ["query\titems\tstage1\tstage2"]
    for r in out.rankings:
        s2 = ",".join("-" if v is None else repr(v) for v in r.stage2)
        lines.append(f"{r.query}\t{','.join(map(str, r.items))}\t{','.join(map(repr, r.stage1))}\t{s2}")
    return "\n".join(lines) + "\n"
