"""Pretraining loop, metrics log and masked-token evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import (Checkpoint, make_checkpoint, optimizer_from_checkpoint, params_from_checkpoint,
                         rng_from_checkpoint, save_checkpoint)
from .data import Corpus, PairedExample, make_mlm_batch, pad_batch
from .encoders import EncoderConfig, ModelParams, encode_images, encode_multimodal_batch, encode_texts, init_params
from .errors import NumericError, ValidationError
from .objectives import MaskMixPolicy, masked_logits, pretrain_step
from .optim import AdamW, OptimizerState

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "L_itc", "L_mlm", "L_itm", "causal_frac")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    mask_prob: float = 0.15
    temperature: float = 0.07
    mask_sep: bool = True
    checkpoint_every: int = 0

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(self.lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.warmup_steps)


@dataclass
class MetricsRecord:
    step: int
    L_itc: float
    L_mlm: float
    L_itm: float
    causal_frac: float
    n_masked: int = 0
    n_correct: int = 0

    @property
    def total(self) -> float:
        return self.L_itc + self.L_mlm + self.L_itm

    def row(self) -> list[str]:
        return [str(self.step), repr(self.L_itc), repr(self.L_mlm), repr(self.L_itm), repr(self.causal_frac)]


def format_metrics(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["step"]), float(r["L_itc"]), float(r["L_mlm"]), float(r["L_itm"]),
                          float(r["causal_frac"])) for r in rows]


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    params: ModelParams
    optimizer: OptimizerState
    metrics: list[MetricsRecord]


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def pretrain(corpus: Corpus | Sequence[PairedExample], config: EncoderConfig | None = None, p_causal: float = 0.5,
             steps: int = 100, seed: int = 0, train: TrainConfig | None = None,
             log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
             resume: Checkpoint | None = None) -> PretrainResult:
    """Train all three objectives for ``steps`` more optimizer steps.

    Deterministic given ``seed`` (or the resumed checkpoint's rng state).
    A non-finite loss raises NumericError; the last checkpoint written to
    ``checkpoint_path`` before that step is left in place.
    """
    examples = list(corpus)
    if not examples:
        raise ValidationError("corpus is empty")
    train = train or TrainConfig()
    policy = MaskMixPolicy(p_causal)
    if resume is not None:
        params = params_from_checkpoint(resume)
        opt_state = optimizer_from_checkpoint(resume) or train.optimizer_state()
        rng = rng_from_checkpoint(resume)
        if rng is None:
            raise ValidationError("resume checkpoint carries no rng state")
        start = resume.step
        seed = int(resume.config.get("seed", seed))
    else:
        if config is None:
            config = EncoderConfig(vocab_size=len(corpus.vocab)) if isinstance(corpus, Corpus) else EncoderConfig()
        init_rng, rng = _seed_streams(seed)
        params = init_params(config, init_rng)
        opt_state = train.optimizer_state()
        start = 0
    opt = AdamW(params, opt_state)
    extra = {"p_causal": p_causal, "seed": seed}
    records: list[MetricsRecord] = []
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume is not None else "w", newline="")
        if resume is None:
            log_fh.write(",".join(METRIC_COLUMNS) + "\n")
    bsz = min(train.batch_size, len(examples))
    try:
        for step in range(start + 1, start + steps + 1):
            idx = rng.choice(len(examples), size=bsz, replace=False)
            res = pretrain_step([examples[i] for i in idx], params, policy, rng, train.mask_prob,
                                train.temperature, train.mask_sep)
            total = res.total.item()
            if not math.isfinite(total):
                raise NumericError(f"non-finite loss {total} at step {step}")
            opt.step()
            rec = MetricsRecord(step, res.itc, res.mlm, res.itm, res.causal_frac, res.n_masked, res.n_correct)
            records.append(rec)
            if log_fh is not None:
                csv.writer(log_fh, lineterminator="\n").writerow(rec.row())
            if checkpoint_path is not None and train.checkpoint_every and step % train.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, make_checkpoint(params, step, opt_state, rng, extra))
            if step % 100 == 0:
                log.info("step %d total %.4f itc %.4f mlm %.4f itm %.4f", step, total, res.itc, res.mlm, res.itm)
    finally:
        if log_fh is not None:
            log_fh.close()
    params.zero_grad()
    ckpt = make_checkpoint(params, start + steps, opt_state, rng, extra)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, ckpt)
    return PretrainResult(ckpt, params, opt_state, records)


def masked_token_accuracy(examples: Sequence[PairedExample], params: ModelParams, p_causal: float,
                          seed: int = 0, mask_prob: float = 0.15, repeats: int = 4,
                          mask_sep: bool = True, batch_size: int = 64) -> float:
    """Accuracy of argmax MLM predictions on freshly masked captions."""
    rng = np.random.default_rng(seed)
    policy = MaskMixPolicy(p_causal)
    correct = total = 0
    with T.no_grad():
        for _ in range(repeats):
            for s in range(0, len(examples), batch_size):
                chunk = examples[s : s + batch_size]
                mlm = make_mlm_batch([e.caption for e in chunk], mask_prob, rng, mask_sep=mask_sep)
                if not mlm.n_masked:
                    continue
                causal = policy.draw(len(chunk), rng)
                z = encode_images(np.stack([e.image for e in chunk]), params)
                ids, vis = pad_batch(mlm.sequences)
                fused = encode_multimodal_batch(encode_texts(ids, vis, causal, params), vis, z, causal, params)
                pred = masked_logits(fused, mlm.positions, params).data.argmax(-1)
                correct += int((pred == mlm.targets).sum())
                total += mlm.n_masked
    return correct / max(total, 1)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
