"""Contrastive, masked-language-modelling and matching losses, and one mixed pretraining step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import PairedExample, make_itm_batch, make_mlm_batch, pad_batch
from .encoders import (AttentionMaskKind, ModelParams, encode_images, encode_multimodal_batch,
                       encode_texts)
from .errors import ValidationError
from .tensor import Tensor

BIDIR = AttentionMaskKind.BIDIRECTIONAL


@dataclass
class MaskMixPolicy:
    """Each MLM sample uses the causal mask with probability ``p_causal``."""

    p_causal: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p_causal <= 1.0:
            raise ValidationError(f"p_causal must be in [0, 1], got {self.p_causal}")

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random(n) < self.p_causal


# ----------------------------------------------------------------------------- heads

def contrastive_embeddings(image_cls: Tensor, text_cls: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    x = T.l2_normalize(T.matmul(image_cls, params["heads.itc.image_proj"]))
    y = T.l2_normalize(T.matmul(text_cls, params["heads.itc.text_proj"]))
    return x, y


def itm_logits(fused_cls: Tensor, params: ModelParams) -> Tensor:
    return T.linear(fused_cls, params["heads.itm.w"], params["heads.itm.b"])


def mlm_logits(states: Tensor, params: ModelParams) -> Tensor:
    return T.linear(states, params["heads.mlm.w"], params["heads.mlm.b"])


# ---------------------------------------------------------------------------- losses

def itc_loss_from_embeddings(x: Tensor, y: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE on unit vectors; the denominator runs over the other side's batch."""
    if x.shape[0] == 0:
        raise ValidationError("ITC needs a non-empty batch")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    b = x.shape[0]
    sim = T.matmul(x, T.swap_last(y)) * (1.0 / temperature)
    diag = np.arange(b)
    i2t = T.cross_entropy(sim, diag, reduction="mean")
    t2i = T.cross_entropy(T.swap_last(sim), diag, reduction="mean")
    return i2t + t2i


def itc_loss(image_cls: Tensor, text_cls: Tensor, params: ModelParams, temperature: float = 0.07) -> Tensor:
    x, y = contrastive_embeddings(image_cls, text_cls, params)
    return itc_loss_from_embeddings(x, y, temperature)


def mlm_loss(states: Tensor, positions: Sequence, targets, params: ModelParams) -> Tensor:
    """Summed cross-entropy at masked positions.

    ``states`` is ``[L, H]`` with ``positions`` a list of ints, or ``[B, L, H]``
    with ``positions`` a list of ``(b, i)`` pairs.
    """
    if len(positions) == 0:
        return Tensor(0.0, dtype=states.dtype)
    logits = masked_logits(states, positions, params)
    return T.cross_entropy(logits, np.asarray(targets, dtype=np.int64), reduction="sum")


def masked_logits(states: Tensor, positions: Sequence, params: ModelParams) -> Tensor:
    pos = np.asarray(positions, dtype=np.int64)
    picked = states[pos] if states.ndim == 2 else states[pos[:, 0], pos[:, 1]]
    return mlm_logits(picked, params)


def itm_loss(fused_cls: Tensor, labels, params: ModelParams) -> Tensor:
    return T.cross_entropy(itm_logits(fused_cls, params), np.asarray(labels, np.int64), reduction="sum")


# ----------------------------------------------------------------------- pretraining

@dataclass
class StepResult:
    total: Tensor
    itc: float
    mlm: float
    itm: float
    causal_frac: float
    causal_flags: np.ndarray = field(repr=False)
    n_masked: int = 0
    n_correct: int = 0


def pretrain_step(examples: Sequence[PairedExample], params: ModelParams, policy: MaskMixPolicy,
                  rng: np.random.Generator, mask_prob: float = 0.15, temperature: float = 0.07,
                  mask_sep: bool = True) -> StepResult:
    """Forward all three losses for one batch and backpropagate their sum.

    Only the MLM path draws a mask kind per sample; ITC and ITM always read
    bidirectional [CLS] summaries.
    """
    b = len(examples)
    images = np.stack([e.image for e in examples])
    captions = [e.caption for e in examples]
    causal = policy.draw(b, rng)
    mlm = make_mlm_batch(captions, mask_prob, rng, mask_sep=mask_sep)
    itm = make_itm_batch(b, rng)

    z = encode_images(images, params)
    ids, vis = pad_batch(captions)
    text = encode_texts(ids, vis, BIDIR, params)
    l_itc = itc_loss(z[:, 0], text[:, 0], params, temperature)

    fused = encode_multimodal_batch(text[itm.text_index], vis[itm.text_index], z[itm.image_index],
                                    BIDIR, params)
    l_itm = itm_loss(fused[:, 0], itm.labels, params)

    mids, mvis = pad_batch(mlm.sequences)
    mtext = encode_texts(mids, mvis, causal, params)
    mfused = encode_multimodal_batch(mtext, mvis, z, causal, params)
    correct = 0
    if mlm.n_masked:
        logits = masked_logits(mfused, mlm.positions, params)
        l_mlm = T.cross_entropy(logits, mlm.targets, reduction="sum")
        correct = int((logits.data.argmax(-1) == mlm.targets).sum())
    else:
        l_mlm = Tensor(0.0, dtype=z.dtype)
    total = l_itc + l_itm + l_mlm
    params.zero_grad()
    total.backward()
    return StepResult(total, l_itc.item(), l_mlm.item(), l_itm.item(), float(causal.mean()), causal,
                      mlm.n_masked, correct)
