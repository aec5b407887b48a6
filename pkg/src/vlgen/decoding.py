"""Caption / answer generation by repeatedly appending [MASK] and filling it.

Each step re-encodes the whole prefix plus one trailing [MASK] under the
causal mask and reads the MLM head at that last position. No key/value
caching.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import CLS_ID, CTX_BASE, MASK_ID, N_CTX, PAD_ID, SEP_ID, PairedExample, TokenSequence
from .encoders import AttentionMaskKind, ModelParams, encode_images, encode_multimodal_batch, encode_texts
from .errors import ValidationError
from .objectives import mlm_logits

CAUSAL = AttentionMaskKind.CAUSAL


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    max_len: int = 20
    length_normalization: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValidationError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValidationError("max_len must be >= 1")


@dataclass
class DecodeResult:
    ids: list[int]
    generated: list[int]
    logprob: float
    finished: bool

    @property
    def score(self) -> float:
        return self.logprob


def banned_ids(vocab_size: int) -> np.ndarray:
    """Ids never emitted: [PAD], [CLS], [MASK] and the [CTX_i] block."""
    banned = np.zeros(vocab_size, dtype=bool)
    banned[[PAD_ID, CLS_ID, MASK_ID]] = True
    banned[CTX_BASE : CTX_BASE + N_CTX] = True
    return banned


def _prefix_ids(prefix: TokenSequence | Sequence[int]) -> list[int]:
    ids = list(prefix.ids if isinstance(prefix, TokenSequence) else prefix)
    if not ids:
        raise ValidationError("decode prefix is empty")
    if ids[0] != CLS_ID:
        raise ValidationError("decode prefix must start with [CLS]")
    if ids[-1] == MASK_ID:
        ids = ids[:-1]
    return ids


def next_token_logprobs(visual: T.Tensor, rows: Sequence[Sequence[int]], params: ModelParams) -> np.ndarray:
    """Log-probabilities ``[A, V]`` for the [MASK] appended to each row.

    ``visual`` is ``[A, N+1, H]``. Rows may differ in length; padding sits to
    the right of each row's [MASK], where the causal mask hides it.
    """
    a = len(rows)
    lengths = [len(r) + 1 for r in rows]
    length = max(lengths)
    ids = np.full((a, length), PAD_ID, dtype=np.int64)
    vis = np.zeros((a, length), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        ids[i, len(r)] = MASK_ID
        vis[i, : len(r) + 1] = True
    with T.no_grad():
        text = encode_texts(ids, vis, CAUSAL, params)
        fused = encode_multimodal_batch(text, vis, visual, CAUSAL, params)
        last = np.asarray(lengths) - 1
        logits = mlm_logits(fused[np.arange(a), last], params).data.astype(np.float64)
    logits[:, banned_ids(logits.shape[1])] = -np.inf
    m = logits.max(axis=1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def _visual(image: np.ndarray, params: ModelParams) -> T.Tensor:
    with T.no_grad():
        return encode_images(np.asarray(image)[None], params)


def _final_score(logprob: float, n: int, normalize: bool) -> float:
    return logprob / max(n, 1) if normalize else logprob


def decode(image: np.ndarray, prefix: TokenSequence | Sequence[int], params: ModelParams,
           cfg: DecodeConfig = DecodeConfig()) -> DecodeResult:
    """Beam search over appended-[MASK] predictions.

    Finished hypotheses (ending in [SEP] or reaching ``max_len`` generated
    tokens) are set aside. Without length normalisation the search stops
    once the best live score cannot beat the best finished score. Ties
    between equal scores go to the lexicographically smaller token tuple.
    """
    base = _prefix_ids(prefix)
    z1 = _visual(image, params)
    alive: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[tuple[float, float, tuple[int, ...], bool]] = []
    k = cfg.beam_size
    for t in range(cfg.max_len):
        z = T.Tensor(np.repeat(z1.data, len(alive), axis=0), dtype=z1.dtype)
        lp = next_token_logprobs(z, [base + list(toks) for _, toks in alive], params)
        cands = []
        for (score, toks), row in zip(alive, lp):
            order = np.lexsort((np.arange(row.size), -row))[:k]
            for tok in order:
                if np.isfinite(row[tok]):
                    cands.append((score + float(row[tok]), toks + (int(tok),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        last_step = t == cfg.max_len - 1
        for score, toks in cands:
            if len(alive) == k:
                break
            if toks[-1] == SEP_ID or last_step:
                done = toks[-1] == SEP_ID
                finished.append((_final_score(score, len(toks), cfg.length_normalization), score, toks, done))
            else:
                alive.append((score, toks))
        if not alive:
            break
        if finished and not cfg.length_normalization:
            best_done = max(f[0] for f in finished)
            if alive[0][0] <= best_done:
                break
    if not finished:
        # every live beam was cut by the early-stop bound before any finished
        score, toks = alive[0]
        finished.append((_final_score(score, len(toks), cfg.length_normalization), score, toks, False))
    finished.sort(key=lambda f: (-f[0], f[2]))
    _, logprob, toks, done = finished[0]
    return DecodeResult(base + list(toks), list(toks), logprob, done)


def greedy_decode(image: np.ndarray, prefix: TokenSequence | Sequence[int], params: ModelParams,
                  max_len: int = 20) -> DecodeResult:
    """Plain argmax loop; the reference that beam size 1 must reproduce."""
    base = _prefix_ids(prefix)
    z = _visual(image, params)
    toks: list[int] = []
    total = 0.0
    for _ in range(max_len):
        row = next_token_logprobs(z, [base + toks], params)[0]
        tok = int(np.argmax(row))
        total += float(row[tok])
        toks.append(tok)
        if tok == SEP_ID:
            break
    return DecodeResult(base + toks, toks, total, bool(toks) and toks[-1] == SEP_ID)


def greedy_decode_batch(images: np.ndarray, prefixes: Sequence[Sequence[int]], params: ModelParams,
                        max_len: int = 20) -> list[list[int]]:
    """Batched greedy decoding; returns generated ids per input (trailing [SEP] dropped)."""
    rows = [_prefix_ids(p) for p in prefixes]
    with T.no_grad():
        z = encode_images(np.asarray(images), params)
    out: list[list[int]] = [[] for _ in rows]
    live = list(range(len(rows)))
    for _ in range(max_len):
        if not live:
            break
        zl = T.Tensor(z.data[live], dtype=z.dtype)
        lp = next_token_logprobs(zl, [rows[i] + out[i] for i in live], params)
        still = []
        for j, i in enumerate(live):
            tok = int(np.argmax(lp[j]))
            if tok == SEP_ID:
                continue
            out[i].append(tok)
            still.append(i)
        live = still
    return out


def caption_cross_entropy(examples: Sequence[PairedExample], params: ModelParams, batch_size: int = 128) -> float:
    """Mean per-token negative log-likelihood of reference captions under the decoding procedure.

    Each caption token, and its closing [SEP], is scored as the fill of a
    [MASK] appended to the gold prefix, exactly as the decoder sees it.
    """
    jobs = []
    for e in examples:
        ids = e.caption.ids
        for k in range(1, len(ids)):
            jobs.append((e.image, ids[:k], ids[k]))
    total = 0.0
    for s in range(0, len(jobs), batch_size):
        chunk = jobs[s : s + batch_size]
        with T.no_grad():
            z = encode_images(np.stack([j[0] for j in chunk]), params)
        lp = next_token_logprobs(z, [j[1] for j in chunk], params)
        total -= float(sum(lp[i, j[2]] for i, j in enumerate(chunk)))
    return total / max(len(jobs), 1)
