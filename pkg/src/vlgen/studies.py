"""Ablation studies as runnable grids, plus the linear-classifier comparator.

Each study produces a tab-separated table with a header row and one row per
grid cell and seed. Budgets (corpus sizes, step counts) live on
``StudySpec`` so the same grid runs at smoke-test scale or desk scale.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, params_from_checkpoint
from .data import (CLS_ID, VE_LABELS, Corpus, PairedExample, build_answer_lists, detokenize, generate_corpus,
                   pad_batch, tokenize)
from .decoding import caption_cross_entropy, greedy_decode_batch
from .encoders import AttentionMaskKind, EncoderConfig, ModelParams, encode_images, encode_multimodal_batch, \
    encode_texts
from .errors import ValidationError
from .metrics import accuracy, bleu1, bleu4
from .prompting import (FreezeSpec, LabelSet, PromptTuner, context_template, generate_answers, has_task,
                        natural_template, rank_answers)
from .retrieval import RetrievalConfig, recall_at_k, retrieve
from .train import TrainConfig, pretrain

log = logging.getLogger(__name__)

STUDY_KINDS = ("mask_mix_sweep", "prompt_len_pos", "few_shot", "vqa_domain_split", "ve_methods", "cls_freeze")

DEFAULT_GRIDS = {
    "mask_mix_sweep": {"p_causal": [0.0, 0.33, 0.66, 1.0], "corpus_size": [256]},
    "prompt_len_pos": {"length": [1, 4, 8, 16, 32], "position": ["begin", "mid"]},
    "few_shot": {"fraction": [0.1, 0.25, 0.5, 1.0]},
    "vqa_domain_split": {"list_size": [8, 16], "method": ["LC", "prompt"]},
    "ve_methods": {"method": ["LC", "NLP", "LCP", "1inK"]},
    "cls_freeze": {"components": ["VE", "TE", "ME", "VEME", "VETEME"], "method": ["LC", "prompt"]},
}


@dataclass
class StudySpec:
    kind: str
    grid: dict[str, list] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None
    n_train: int = 256
    n_test: int = 128
    pretrain_steps: int = 200
    finetune_steps: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    checkpoint: str | None = None
    encoder: EncoderConfig | None = None

    def __post_init__(self):
        if self.kind not in STUDY_KINDS:
            raise ValidationError(f"unknown study kind {self.kind!r}; choose from {STUDY_KINDS}")
        grid = dict(DEFAULT_GRIDS[self.kind])
        grid.update(self.grid or {})
        self.grid = grid
        for k, v in grid.items():
            if not v:
                raise ValidationError(f"grid axis {k!r} is empty")
        if not self.seeds:
            raise ValidationError("at least one seed is required")

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        if self.encoder is None:
            return EncoderConfig(vocab_size=vocab_size)
        return dataclasses.replace(self.encoder, vocab_size=vocab_size)


@dataclass
class Report:
    columns: list[str]
    rows: list[list]

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        for r in self.rows:
            lines.append("\t".join(_cell(v) for v in r))
        return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# -- shared helpers ------------------------------------------------------------------------

def _split(seed: int, n_train: int, n_test: int) -> tuple[Corpus, list[PairedExample], list[PairedExample]]:
    corpus = generate_corpus(seed, n_train + n_test)
    return corpus, corpus.examples[:n_train], corpus.examples[n_train:]


def _base_params(spec: StudySpec, seed: int, train_set: Sequence[PairedExample], vocab) -> ModelParams:
    if spec.checkpoint:
        return params_from_checkpoint(load_checkpoint(spec.checkpoint))
    cfg = spec.encoder_config(len(vocab))
    tc = TrainConfig(batch_size=spec.batch_size, lr=spec.lr)
    return pretrain(list(train_set), cfg, p_causal=0.5, steps=spec.pretrain_steps, seed=seed, train=tc).params


def _task_examples(examples: Sequence[PairedExample], task: str) -> list[PairedExample]:
    return [e for e in examples if has_task(e, task)]


def _answers(examples: Sequence[PairedExample], task: str) -> list[str]:
    if task == "vqa":
        return [e.qa.answer for e in examples]
    if task == "cls":
        return [e.class_label for e in examples]
    return [e.entailment.label for e in examples]


def _prompt_accuracy(params: ModelParams, template, task: str, train_set, test_set, vocab, spec: StudySpec,
                     seed: int, freeze: FreezeSpec | None = None, ranking: LabelSet | None = None) -> float:
    tuned = params.clone()
    tuner = PromptTuner(tuned, template, task, freeze or FreezeSpec.of("VE", "TE", "ME", "heads", "ctx_embeddings"),
                        ranking=ranking is not None, lr=spec.lr, batch_size=spec.batch_size)
    train_set = _task_examples(train_set, task)
    test_set = _task_examples(test_set, task)
    if spec.finetune_steps and train_set:
        tuner.fit(train_set, vocab, spec.finetune_steps, np.random.default_rng([seed, 7]))
    if not test_set:
        return 0.0
    if ranking is not None:
        preds = rank_answers(tuned, template, task, test_set, vocab, ranking)
    else:
        preds = generate_answers(tuned, template, task, test_set, vocab)
    return accuracy(preds, _answers(test_set, task))


# -- linear classifier ------------------------------------------------------------------------

LC_TASKS = {"vqa_closed": "vqa", "classification": "cls", "entailment": "ve"}


@dataclass
class LinearClassifier:
    answers: list[str]
    w: np.ndarray
    b: np.ndarray
    task: str

    def predict(self, features: np.ndarray) -> list[str]:
        logits = features @ self.w + self.b
        return [self.answers[i] for i in logits.argmax(axis=1)]


def _lc_text(example: PairedExample, task: str) -> str:
    if task == "vqa":
        return example.qa.question
    if task == "ve":
        return example.entailment.hypothesis
    return ""


def fused_cls_features(params: ModelParams, examples: Sequence[PairedExample], task: str, vocab,
                       batch_size: int = 128) -> np.ndarray:
    """First multimodal state for each (image, task text) pair, bidirectional masks."""
    out = []
    bidir = AttentionMaskKind.BIDIRECTIONAL
    with T.no_grad():
        for s in range(0, len(examples), batch_size):
            chunk = examples[s : s + batch_size]
            seqs = [tokenize(_lc_text(e, task), vocab) for e in chunk]
            ids, vis = pad_batch(seqs)
            z = encode_images(np.stack([e.image for e in chunk]), params)
            fused = encode_multimodal_batch(encode_texts(ids, vis, bidir, params), vis, z, bidir, params)
            out.append(fused.data[:, 0].astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, params.config.hidden))


def train_linear_head(features: np.ndarray, labels: np.ndarray, n_classes: int, steps: int = 300,
                      lr: float = 0.05, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch softmax regression with Adam on fixed features."""
    rng = np.random.default_rng(seed)
    h = features.shape[1]
    w = rng.normal(0.0, 0.02, (h, n_classes))
    b = np.zeros(n_classes)
    if len(labels) == 0:
        return w, b
    mu = features.mean(0)
    sd = features.std(0) + 1e-6
    x = (features - mu) / sd
    onehot = np.eye(n_classes)[labels]
    m = [np.zeros_like(w), np.zeros_like(b)]
    v = [np.zeros_like(w), np.zeros_like(b)]
    for t in range(1, steps + 1):
        logits = x @ w + b
        logits -= logits.max(1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(1, keepdims=True)
        g = (p - onehot) / len(labels)
        grads = [x.T @ g, g.sum(0)]
        for i, (param, grad) in enumerate(zip((w, b), grads)):
            m[i] = 0.9 * m[i] + 0.1 * grad
            v[i] = 0.999 * v[i] + 0.001 * grad * grad
            param -= lr * (m[i] / (1 - 0.9 ** t)) / (np.sqrt(v[i] / (1 - 0.999 ** t)) + 1e-8)
    # fold the standardisation into the head
    w_out = w / sd[:, None]
    b_out = b - mu @ w_out
    return w_out, b_out


def linear_classifier_baseline(checkpoint: Checkpoint | ModelParams, task: str, train_set: Sequence[PairedExample],
                               answers: Sequence[str] | None = None, vocab=None, steps: int = 300,
                               lr: float = 0.05, seed: int = 0) -> tuple[LinearClassifier, float]:
    """Softmax head over a closed answer list on frozen multimodal [CLS] features.

    Examples whose answer lies outside the list are kept for accuracy (they
    can never be right) but do not contribute to training.
    """
    if task not in LC_TASKS:
        raise ValidationError(f"task must be one of {sorted(LC_TASKS)}")
    key = LC_TASKS[task]
    params = checkpoint if isinstance(checkpoint, ModelParams) else params_from_checkpoint(checkpoint)
    examples = _task_examples(train_set, key)
    golds = _answers(examples, key)
    answers = list(answers) if answers is not None else sorted(set(golds))
    if not answers:
        raise ValidationError("answer list is empty")
    from .data import default_vocab

    vocab = vocab or default_vocab()
    feats = fused_cls_features(params, examples, key, vocab)
    index = {a: i for i, a in enumerate(answers)}
    keep = np.array([g in index for g in golds], dtype=bool)
    labels = np.array([index[g] for g in golds if g in index], dtype=np.int64)
    w, b = train_linear_head(feats[keep], labels, len(answers), steps, lr, seed)
    clf = LinearClassifier(answers, w, b, key)
    acc = accuracy(clf.predict(feats), golds) if examples else 0.0
    return clf, acc


def lc_accuracy(params: ModelParams, task: str, train_set, test_set, vocab, answers=None, seed: int = 0) -> float:
    clf, _ = linear_classifier_baseline(params, task, train_set, answers, vocab, seed=seed)
    key = LC_TASKS[task]
    test = _task_examples(test_set, key)
    if not test:
        return 0.0
    return accuracy(clf.predict(fused_cls_features(params, test, key, vocab)), _answers(test, key))


# -- studies -------------------------------------------------------------------------------------

def _caption_scores(params: ModelParams, test_set: Sequence[PairedExample], vocab) -> tuple[float, float, float]:
    gen = greedy_decode_batch(np.stack([e.image for e in test_set]), [[CLS_ID]] * len(test_set), params)
    hyps = [detokenize(g, vocab) for g in gen]
    refs = [e.caption_text for e in test_set]
    return bleu1(hyps, refs), bleu4(hyps, refs), caption_cross_entropy(test_set, params)


def _retrieval_r1(params: ModelParams, test_set: Sequence[PairedExample]) -> float:
    images = np.stack([e.image for e in test_set])
    out = retrieve(images, [e.caption for e in test_set], params, RetrievalConfig(top_k=min(16, len(test_set))))
    return recall_at_k(out.item_lists(), list(range(len(test_set))), 1)


def _mask_mix(spec: StudySpec) -> Report:
    cols = ["corpus_size", "p_causal", "seed", "B1", "B4", "caption_ce", "R1_i2t", "vqa_acc", "ve_acc"]
    rows = []
    for size, p, seed in itertools.product(spec.grid["corpus_size"], spec.grid["p_causal"], spec.seeds):
        corpus, train_set, test_set = _split(seed, int(size), spec.n_test)
        cfg = spec.encoder_config(len(corpus.vocab))
        tc = TrainConfig(batch_size=spec.batch_size, lr=spec.lr)
        params = pretrain(train_set, cfg, p_causal=float(p), steps=spec.pretrain_steps, seed=seed, train=tc).params
        b1, b4, ce = _caption_scores(params, test_set, corpus.vocab)
        r1 = _retrieval_r1(params, test_set)
        vqa = _prompt_accuracy(params, natural_template("vqa"), "vqa", train_set, test_set, corpus.vocab, spec, seed)
        ve = _prompt_accuracy(params, natural_template("ve"), "ve", train_set, test_set, corpus.vocab, spec, seed)
        rows.append([size, float(p), seed, b1, b4, ce, r1, vqa, ve])
    return Report(cols, rows)


def _prompt_len_pos(spec: StudySpec) -> Report:
    cols = ["length", "position", "seed", "vqa_acc"]
    rows = []
    for seed in spec.seeds:
        corpus, train_set, test_set = _split(seed, spec.n_train, spec.n_test)
        base = _base_params(spec, seed, train_set, corpus.vocab)
        for length, pos in itertools.product(spec.grid["length"], spec.grid["position"]):
            tpl = context_template("vqa", int(length), pos)
            acc = _prompt_accuracy(base, tpl, "vqa", train_set, test_set, corpus.vocab, spec, seed)
            rows.append([int(length), pos, seed, acc])
    return Report(cols, rows)


def _few_shot(spec: StudySpec) -> Report:
    cols = ["fraction", "n_train", "seed", "LC_acc", "prompt_acc"]
    rows = []
    fractions = sorted(float(f) for f in spec.grid["fraction"])
    for seed in spec.seeds:
        corpus, train_set, test_set = _split(seed, spec.n_train, spec.n_test)
        base = _base_params(spec, seed, train_set, corpus.vocab)
        for frac in fractions:
            n = max(1, int(round(frac * len(train_set))))
            subset = train_set[:n]
            lc = lc_accuracy(base, "vqa_closed", subset, test_set, corpus.vocab, corpus.answers, seed)
            pr = _prompt_accuracy(base, natural_template("vqa"), "vqa", subset, test_set, corpus.vocab, spec, seed)
            rows.append([frac, n, seed, lc, pr])
    return Report(cols, rows)


def _vqa_domain_split(spec: StudySpec) -> Report:
    cols = ["list_size", "method", "seed", "in_domain_acc", "out_domain_acc", "n_in", "n_out"]
    rows = []
    for seed in spec.seeds:
        corpus, train_set, test_set = _split(seed, spec.n_train, spec.n_test)
        base = _base_params(spec, seed, train_set, corpus.vocab)
        test_qa = _task_examples(test_set, "vqa")
        for m, method in itertools.product(spec.grid["list_size"], spec.grid["method"]):
            n_distinct = len({e.qa.answer for e in train_set if e.qa is not None})
            if int(m) > n_distinct:
                log.warning("list_size %s exceeds %d distinct training answers; using all of them", m, n_distinct)
            in_list, _ = build_answer_lists(train_set, min(int(m), n_distinct))
            inside = [e for e in test_qa if e.qa.answer in in_list]
            outside = [e for e in test_qa if e.qa.answer not in in_list]
            if method == "LC":
                clf, _ = linear_classifier_baseline(base, "vqa_closed", train_set, in_list, corpus.vocab, seed=seed)

                def score(part):
                    if not part:
                        return 0.0
                    return accuracy(clf.predict(fused_cls_features(base, part, "vqa", corpus.vocab)),
                                    [e.qa.answer for e in part])
                ins, outs = score(inside), score(outside)
            elif method == "prompt":
                tpl = natural_template("vqa")
                tuned = base.clone()
                tuner = PromptTuner(tuned, tpl, "vqa", lr=spec.lr, batch_size=spec.batch_size)
                qa_train = _task_examples(train_set, "vqa")
                if spec.finetune_steps and qa_train:
                    tuner.fit(qa_train, corpus.vocab, spec.finetune_steps, np.random.default_rng([seed, 7]))

                def score(part):
                    if not part:
                        return 0.0
                    return accuracy(generate_answers(tuned, tpl, "vqa", part, corpus.vocab),
                                    [e.qa.answer for e in part])
                ins, outs = score(inside), score(outside)
            else:
                raise ValidationError(f"unknown method {method!r} for vqa_domain_split")
            rows.append([int(m), method, seed, ins, outs, len(inside), len(outside)])
    return Report(cols, rows)


def _ve_methods(spec: StudySpec) -> Report:
    cols = ["method", "seed", "ve_acc"]
    rows = []
    for seed in spec.seeds:
        corpus, train_set, test_set = _split(seed, spec.n_train, spec.n_test)
        base = _base_params(spec, seed, train_set, corpus.vocab)
        labels = LabelSet.build(VE_LABELS, corpus.vocab)
        for method in spec.grid["method"]:
            if method == "LC":
                acc = lc_accuracy(base, "entailment", train_set, test_set, corpus.vocab, list(VE_LABELS), seed)
            elif method == "NLP":
                acc = _prompt_accuracy(base, natural_template("ve"), "ve", train_set, test_set, corpus.vocab, spec,
                                       seed)
            elif method == "LCP":
                acc = _prompt_accuracy(base, context_template("ve"), "ve", train_set, test_set, corpus.vocab, spec,
                                       seed)
            elif method == "1inK":
                acc = _prompt_accuracy(base, context_template("ve"), "ve", train_set, test_set, corpus.vocab, spec,
                                       seed, ranking=labels)
            else:
                raise ValidationError(f"unknown method {method!r} for ve_methods")
            rows.append([method, seed, acc])
    return Report(cols, rows)


def _cls_freeze(spec: StudySpec) -> Report:
    cols = ["components", "method", "seed", "cls_acc"]
    rows = []
    for seed in spec.seeds:
        corpus, train_set, test_set = _split(seed, spec.n_train, spec.n_test)
        base = _base_params(spec, seed, train_set, corpus.vocab)
        for comps, method in itertools.product(spec.grid["components"], spec.grid["method"]):
            freeze = FreezeSpec.parse(str(comps))
            if method == "LC":
                # the head-only comparator ignores the freeze grid; it never updates the backbone
                acc = lc_accuracy(base, "classification", train_set, test_set, corpus.vocab, corpus.class_names, seed)
            elif method == "prompt":
                acc = _prompt_accuracy(base, natural_template("cls"), "cls", train_set, test_set, corpus.vocab,
                                       spec, seed, freeze=freeze)
            else:
                raise ValidationError(f"unknown method {method!r} for cls_freeze")
            rows.append([comps, method, seed, acc])
    return Report(cols, rows)


_RUNNERS = {
    "mask_mix_sweep": _mask_mix,
    "prompt_len_pos": _prompt_len_pos,
    "few_shot": _few_shot,
    "vqa_domain_split": _vqa_domain_split,
    "ve_methods": _ve_methods,
    "cls_freeze": _cls_freeze,
}


def run_study(spec: StudySpec) -> Report:
    report = _RUNNERS[spec.kind](spec)
    if spec.out:
        Path(spec.out).write_text(report.to_tsv())
    return report
