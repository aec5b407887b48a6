"""Prompt templates, learnable-context tokens, restricted ranking and component freezing.

Template text format, one segment per line as ``kind:payload``::

    position:mid          # begin | mid, where the context block sits
    question:             # the question text slot
    sentence:             # the hypothesis sentence slot
    literal:answer :      # fixed words
    context:16            # 16 [CTX] tokens starting at [CTX_0]
    context:8@4           # 8 [CTX] tokens starting at [CTX_4]
    answer:               # the answer slot; must be the final segment

Rendering always starts with [CLS]. In ``train`` mode the answer tokens and
the closing [SEP] become [MASK]s whose targets are recorded; in ``infer``
mode the answer slot is a single trailing [MASK]; ``plain`` mode writes the
answer and [SEP] unmasked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import CLS_ID, CTX_BASE, MASK_ID, N_CTX, SEP_ID, PairedExample, TokenSequence, Vocabulary, pad_batch
from .decoding import greedy_decode_batch
from .encoders import AttentionMaskKind, ModelParams, ctx_row_mask, encode_images, encode_multimodal_batch, encode_texts
from .errors import ValidationError
from .objectives import masked_logits
from .optim import AdamW, OptimizerState

CONTEXT_LENGTHS = (1, 4, 8, 16, 32)
POSITIONS = ("begin", "mid")


@dataclass(frozen=True)
class Literal:
    text: str


@dataclass(frozen=True)
class Context:
    length: int = 16
    offset: int = 0

    @property
    def ids(self) -> list[int]:
        return list(range(CTX_BASE + self.offset, CTX_BASE + self.offset + self.length))


@dataclass(frozen=True)
class QuestionSlot:
    pass


@dataclass(frozen=True)
class SentenceSlot:
    pass


@dataclass(frozen=True)
class AnswerSlot:
    pass


Segment = Literal | Context | QuestionSlot | SentenceSlot | AnswerSlot


@dataclass(frozen=True)
class PromptTemplate:
    segments: tuple
    position: str = "mid"

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if self.position not in POSITIONS:
            raise ValidationError(f"position must be one of {POSITIONS}")
        answers = [i for i, s in enumerate(segs) if isinstance(s, AnswerSlot)]
        if len(answers) != 1:
            raise ValidationError(f"template needs exactly one answer slot, found {len(answers)}")
        if any(isinstance(s, Context) for s in segs[answers[0] + 1:]):
            raise ValidationError("context tokens may not follow the answer slot")
        if answers[0] != len(segs) - 1:
            raise ValidationError("the answer slot must be the final segment")
        for s in segs:
            if isinstance(s, Context):
                if s.length not in CONTEXT_LENGTHS:
                    raise ValidationError(f"context length {s.length} not in {CONTEXT_LENGTHS}")
                if s.offset < 0 or s.offset + s.length > N_CTX:
                    raise ValidationError(f"context block {s.offset}+{s.length} exceeds {N_CTX} [CTX] tokens")

    @property
    def uses_context(self) -> bool:
        return any(isinstance(s, Context) for s in self.segments)

    @property
    def needs(self) -> set[str]:
        out = set()
        for s in self.segments:
            if isinstance(s, QuestionSlot):
                out.add("question")
            elif isinstance(s, SentenceSlot):
                out.add("sentence")
        return out

    def to_text(self) -> str:
        lines = [f"position:{self.position}"]
        for s in self.segments:
            if isinstance(s, Literal):
                lines.append(f"literal:{s.text}")
            elif isinstance(s, Context):
                lines.append(f"context:{s.length}" + (f"@{s.offset}" if s.offset else ""))
            elif isinstance(s, QuestionSlot):
                lines.append("question:")
            elif isinstance(s, SentenceSlot):
                lines.append("sentence:")
            else:
                lines.append("answer:")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PromptTemplate":
        position = "mid"
        segs: list = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            kind, sep, payload = line.partition(":")
            if not sep:
                raise ValidationError(f"template line {n}: expected 'kind:payload', got {raw!r}")
            payload = payload.strip()
            if kind == "position":
                position = payload
            elif kind == "literal":
                segs.append(Literal(payload))
            elif kind == "context":
                length, _, offset = payload.partition("@")
                segs.append(Context(int(length), int(offset or 0)))
            elif kind == "question":
                segs.append(QuestionSlot())
            elif kind == "sentence":
                segs.append(SentenceSlot())
            elif kind == "answer":
                segs.append(AnswerSlot())
            else:
                raise ValidationError(f"template line {n}: unknown segment kind {kind!r}")
        return cls(tuple(segs), position)


# -- stock templates ------------------------------------------------------------------

VQA_PROMPT = "answer :"
CLS_PROMPT = "a photo of"
VE_PROMPT = "relationship :"


def _with_context(slot, length: int, position: str) -> PromptTemplate:
    ctx = Context(length)
    if slot is None:
        return PromptTemplate((ctx, AnswerSlot()), position)
    if position == "begin":
        return PromptTemplate((ctx, slot, AnswerSlot()), position)
    return PromptTemplate((slot, ctx, AnswerSlot()), position)


def natural_template(task: str) -> PromptTemplate:
    if task == "vqa":
        return PromptTemplate((QuestionSlot(), Literal(VQA_PROMPT), AnswerSlot()))
    if task == "cls":
        return PromptTemplate((Literal(CLS_PROMPT), AnswerSlot()), "begin")
    if task == "ve":
        return PromptTemplate((SentenceSlot(), Literal(VE_PROMPT), AnswerSlot()))
    raise ValidationError(f"unknown task {task!r}")


def context_template(task: str, length: int = 16, position: str = "mid") -> PromptTemplate:
    slot = {"vqa": QuestionSlot(), "ve": SentenceSlot(), "cls": None}
    if task not in slot:
        raise ValidationError(f"unknown task {task!r}")
    return _with_context(slot[task], length, position)


# -- rendering ----------------------------------------------------------------------------

def render_prompt(template: PromptTemplate, vocab: Vocabulary, question: str | None = None,
                  sentence: str | None = None, answer: str | None = None, mode: str = "train",
                  max_text_len: int = 48) -> TokenSequence:
    if mode not in ("train", "infer", "plain"):
        raise ValidationError(f"unknown render mode {mode!r}")
    values = {"question": question, "sentence": sentence}
    ids = [CLS_ID]
    prompt_lo = prompt_hi = None
    for seg in template.segments:
        if isinstance(seg, (Literal, Context)):
            toks = [vocab.id(w) for w in seg.text.split()] if isinstance(seg, Literal) else seg.ids
            prompt_lo = len(ids) if prompt_lo is None else prompt_lo
            ids.extend(toks)
            prompt_hi = len(ids)
        elif isinstance(seg, (QuestionSlot, SentenceSlot)):
            key = "question" if isinstance(seg, QuestionSlot) else "sentence"
            if values[key] is None:
                raise ValidationError(f"template needs a {key}")
            ids.extend(vocab.id(w) for w in values[key].split())
    start = len(ids)
    targets = {}
    if mode == "infer":
        ids.append(MASK_ID)
        span = (start, start + 1)
    else:
        if answer is None:
            raise ValidationError("training render needs an answer")
        ans = [vocab.id(w) for w in answer.split()] + [SEP_ID]
        if mode == "train":
            for i, tok in enumerate(ans):
                targets[start + i] = tok
            ids.extend([MASK_ID] * len(ans))
        else:
            ids.extend(ans)
        span = (start, len(ids))
    if len(ids) > max_text_len + 1:
        raise ValidationError(f"rendered prompt has {len(ids)} tokens; limit is {max_text_len + 1}")
    prompt = (prompt_lo, prompt_hi) if prompt_lo is not None else None
    return TokenSequence(ids, prompt_span=prompt, answer_span=span, targets=targets)


def task_fields(example: PairedExample, task: str) -> dict:
    if task == "vqa":
        return {"question": example.qa.question, "answer": example.qa.answer}
    if task == "cls":
        return {"answer": example.class_label}
    if task == "ve":
        return {"sentence": example.entailment.hypothesis, "answer": example.entailment.label}
    raise ValidationError(f"unknown task {task!r}")


def has_task(example: PairedExample, task: str) -> bool:
    return {"vqa": example.qa, "cls": example.class_label, "ve": example.entailment}[task] is not None


# -- restricted ranking -------------------------------------------------------------------

@dataclass(frozen=True)
class LabelSet:
    labels: tuple[str, ...]
    ids: tuple[int, ...]

    @classmethod
    def build(cls, labels: Sequence[str], vocab: Vocabulary) -> "LabelSet":
        if not labels:
            raise ValidationError("label set is empty")
        multi = [lab for lab in labels if len(lab.split()) != 1]
        if multi:
            raise ValidationError(f"restricted ranking needs single-token labels; got {multi}")
        return cls(tuple(labels), tuple(vocab.id(lab) for lab in labels))


def rank_scores(images: np.ndarray, seqs: Sequence[TokenSequence], label_set: LabelSet, params: ModelParams,
                mask_kind: AttentionMaskKind = AttentionMaskKind.BIDIRECTIONAL) -> np.ndarray:
    """MLM logits at each sequence's single [MASK], restricted to the label ids: ``[B, K]``."""
    positions = []
    for b, s in enumerate(seqs):
        where = [i for i, t in enumerate(s.ids) if t == MASK_ID]
        if len(where) != 1:
            raise ValidationError(f"restricted ranking needs exactly one [MASK], found {len(where)}")
        positions.append((b, where[0]))
    ids, vis = pad_batch(seqs)
    with T.no_grad():
        z = encode_images(np.asarray(images), params)
        fused = encode_multimodal_batch(encode_texts(ids, vis, mask_kind, params), vis, z, mask_kind, params)
        logits = masked_logits(fused, positions, params).data
    return logits[:, list(label_set.ids)].astype(np.float64)


def pick_label(scores: np.ndarray, label_set: LabelSet) -> int:
    """Index of the best label; equal scores go to the lowest token id."""
    order = np.lexsort((np.asarray(label_set.ids), -scores))
    return int(order[0])


def restricted_rank(image: np.ndarray, seq: TokenSequence, label_set: LabelSet, params: ModelParams,
                    mask_kind: AttentionMaskKind = AttentionMaskKind.BIDIRECTIONAL) -> tuple[str, dict[str, float]]:
    scores = rank_scores(np.asarray(image)[None], [seq], label_set, params, mask_kind)[0]
    best = pick_label(scores, label_set)
    return label_set.labels[best], dict(zip(label_set.labels, scores.tolist()))


# -- freezing -------------------------------------------------------------------------------

FREEZABLE = ("VE", "TE", "ME", "heads", "ctx_embeddings")


@dataclass(frozen=True)
class FreezeSpec:
    """The components that stay trainable; everything else is frozen."""

    trainable: frozenset

    def __post_init__(self):
        comps = frozenset(self.trainable)
        object.__setattr__(self, "trainable", comps)
        if not comps:
            raise ValidationError("freeze spec must leave at least one component trainable")
        bad = comps - set(FREEZABLE)
        if bad:
            raise ValidationError(f"unknown components {sorted(bad)}; choose from {FREEZABLE}")

    @classmethod
    def of(cls, *names: str) -> "FreezeSpec":
        return cls(frozenset(names))

    @classmethod
    def parse(cls, text: str) -> "FreezeSpec":
        """'VEME' / 'VE,ME' / 'ctx_embeddings' style strings."""
        parts = [p for p in text.replace("+", ",").split(",") if p]
        names = []
        for p in parts:
            if p in FREEZABLE:
                names.append(p)
            else:
                chunks = [p[i : i + 2] for i in range(0, len(p), 2)]
                if not all(c in ("VE", "TE", "ME") for c in chunks):
                    raise ValidationError(f"cannot parse component list {text!r}")
                names.extend(chunks)
        return cls(frozenset(names))


def apply_freeze_spec(params: ModelParams, spec: FreezeSpec) -> dict[str, object]:
    """Per-tensor trainability for ``adamw_step``: True, a row mask, or None (frozen)."""
    if not isinstance(spec, FreezeSpec):
        spec = FreezeSpec(frozenset(spec))
    out: dict[str, object] = {}
    for name in params:
        comp = params.component(name)
        if comp in spec.trainable:
            out[name] = True
        elif name == "text.word_emb" and "ctx_embeddings" in spec.trainable:
            out[name] = ctx_row_mask(params.config)
        else:
            out[name] = None
    return out


# -- fine-tuning ---------------------------------------------------------------------------

def prompt_mask_kind(ranking: bool) -> AttentionMaskKind:
    return AttentionMaskKind.BIDIRECTIONAL if ranking else AttentionMaskKind.CAUSAL


def prompt_mlm_loss(images: np.ndarray, seqs: Sequence[TokenSequence], params: ModelParams,
                    mask_kind: AttentionMaskKind) -> T.Tensor:
    positions, targets = [], []
    for b, s in enumerate(seqs):
        for i in s.mask_positions:
            positions.append((b, i))
            targets.append(s.targets[i])
    if not positions:
        return T.Tensor(0.0)
    ids, vis = pad_batch(seqs)
    z = encode_images(np.asarray(images), params)
    fused = encode_multimodal_batch(encode_texts(ids, vis, mask_kind, params), vis, z, mask_kind, params)
    return T.cross_entropy(masked_logits(fused, positions, params), np.asarray(targets), reduction="sum")


def finetune_step(batch: Sequence[tuple[np.ndarray, TokenSequence]], params: ModelParams, optimizer: AdamW,
                  mask_kind: AttentionMaskKind = AttentionMaskKind.CAUSAL) -> float:
    """One MLM update on answer spans; frozen tensors are left untouched by ``optimizer``."""
    images = np.stack([b[0] for b in batch])
    loss = prompt_mlm_loss(images, [b[1] for b in batch], params, mask_kind)
    params.zero_grad()
    if loss.requires_grad:
        loss.backward()
        optimizer.step()
    return loss.item()


@dataclass
class PromptTuner:
    """Fine-tunes ``params`` in place on one task through one template."""

    params: ModelParams
    template: PromptTemplate
    task: str
    freeze: FreezeSpec = field(default_factory=lambda: FreezeSpec.of("VE", "TE", "ME", "heads", "ctx_embeddings"))
    ranking: bool = False
    lr: float = 1e-4
    weight_decay: float = 0.02
    batch_size: int = 16

    def __post_init__(self):
        state = OptimizerState(lr=self.lr, weight_decay=self.weight_decay)
        self.optimizer = AdamW(self.params, state, apply_freeze_spec(self.params, self.freeze))
        self.mask_kind = prompt_mask_kind(self.ranking)

    def render(self, example: PairedExample, vocab: Vocabulary, mode: str = "train") -> TokenSequence:
        f = task_fields(example, self.task)
        if mode == "infer":
            f = {k: v for k, v in f.items() if k != "answer"}
        return render_prompt(self.template, vocab, mode=mode, max_text_len=self.params.config.max_text_len, **f)

    def fit(self, examples: Sequence[PairedExample], vocab: Vocabulary, steps: int,
            rng: np.random.Generator) -> list[float]:
        rendered = [(e.image, self.render(e, vocab)) for e in examples]
        losses = []
        bsz = min(self.batch_size, len(rendered))
        for _ in range(steps):
            idx = rng.choice(len(rendered), size=bsz, replace=False)
            losses.append(finetune_step([rendered[i] for i in idx], self.params, self.optimizer, self.mask_kind))
        return losses


def generate_answers(params: ModelParams, template: PromptTemplate, task: str, examples: Sequence[PairedExample],
                     vocab: Vocabulary, max_len: int = 6, batch_size: int = 64) -> list[str]:
    """Greedy open-ended answers via appended [MASK] decoding."""
    out = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s : s + batch_size]
        prefixes = []
        for e in chunk:
            f = {k: v for k, v in task_fields(e, task).items() if k != "answer"}
            prefixes.append(render_prompt(template, vocab, mode="infer", max_text_len=params.config.max_text_len,
                                          **f).ids)
        gen = greedy_decode_batch(np.stack([e.image for e in chunk]), prefixes, params, max_len)
        out.extend(" ".join(vocab.word(t) for t in g) for g in gen)
    return out


def rank_answers(params: ModelParams, template: PromptTemplate, task: str, examples: Sequence[PairedExample],
                 vocab: Vocabulary, label_set: LabelSet, batch_size: int = 64) -> list[str]:
    out = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s : s + batch_size]
        seqs = []
        for e in chunk:
            f = {k: v for k, v in task_fields(e, task).items() if k != "answer"}
            seqs.append(render_prompt(template, vocab, mode="infer", max_text_len=params.config.max_text_len, **f))
        scores = rank_scores(np.stack([e.image for e in chunk]), seqs, label_set, params)
        out.extend(label_set.labels[pick_label(row, label_set)] for row in scores)
    return out
