"""Synthetic shape-scene corpus, closed word vocabulary and batch builders.

Scenes are drawn on a 2x2 grid of cells (16x16 pixels each on the default
32x32 canvas). Each cell holds at most one coloured shape. Captions list the
objects in reading order, e.g. ``a red circle at top left and a blue square
at bottom right``, so a caption determines its scene exactly.
"""

from __future__ import annotations

import dataclasses
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import UnknownTokenError, ValidationError

PAD, CLS, SEP, MASK = "[PAD]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, CLS, SEP, MASK)
N_CTX = 32
CTX_TOKENS = tuple(f"[CTX_{i}]" for i in range(N_CTX))
PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
CTX_BASE = 4

COLORS = ("blue", "green", "orange", "purple", "red", "yellow")
SHAPES = ("circle", "cross", "diamond", "square", "triangle")
ROW_NAMES = ("top", "bottom")
COL_NAMES = ("left", "right")
COUNT_WORDS = ("zero", "one", "two", "three", "four")
VE_LABELS = ("entailment", "neutral", "contradiction")
UNVERIFIABLE = ("large", "shiny", "small")

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.6, 0.2, 0.8),
    "orange": (1.0, 0.55, 0.05),
}
BACKGROUND = (0.05, 0.05, 0.05)

_CAPTION_WORDS = ("a", "at", "and", "empty", "scene", *ROW_NAMES, *COL_NAMES, *COLORS, *SHAPES)
_QUESTION_WORDS = ("what", "color", "is", "the", "shape", "how", "many", "shapes", "are",
                   "there", "yes", "no", "nothing", *COUNT_WORDS)
_PROMPT_WORDS = ("answer", ":", "photo", "of", "relationship")
_VE_WORDS = (*VE_LABELS, *UNVERIFIABLE)


def lexicon() -> list[str]:
    """Every word the generator and the prompt templates can emit, sorted."""
    return sorted(set(_CAPTION_WORDS + _QUESTION_WORDS + _PROMPT_WORDS + _VE_WORDS))


# --------------------------------------------------------------------------- vocab

@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise UnknownTokenError(f"unknown word {word!r}") from None

    def word(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def ctx_ids(self) -> range:
        return range(CTX_BASE, CTX_BASE + N_CTX)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(CTX_BASE + N_CTX))

    def is_special(self, idx: int) -> bool:
        return idx < CTX_BASE + N_CTX


def build_vocab(words: Iterable[str]) -> Vocabulary:
    """Specials and the [CTX_i] block first, then the distinct words sorted."""
    words = list(words)
    if not words:
        raise ValidationError("word list is empty")
    reserved = set(SPECIALS) | set(CTX_TOKENS)
    clash = reserved.intersection(words)
    if clash:
        raise ValidationError(f"reserved tokens in word list: {sorted(clash)}")
    return Vocabulary(SPECIALS + CTX_TOKENS + tuple(sorted(set(words))))


def default_vocab() -> Vocabulary:
    return build_vocab(lexicon())


# ------------------------------------------------------------------ token sequences

@dataclass
class TokenSequence:
    """Token ids of one text input, with optional span annotations.

    ``pad_mask`` is True at real (visible) positions. ``targets`` maps a
    masked position to the id it hides.
    """

    ids: list[int]
    pad_mask: list[bool] = None
    prompt_span: tuple[int, int] | None = None
    answer_span: tuple[int, int] | None = None
    targets: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.pad_mask is None:
            self.pad_mask = [i != PAD_ID for i in self.ids]
        if len(self.pad_mask) != len(self.ids):
            raise ValidationError("pad_mask length differs from ids")
        for span in (self.prompt_span, self.answer_span):
            if span is not None and not (0 <= span[0] <= span[1] <= len(self.ids)):
                raise ValidationError(f"span {span} outside sequence of length {len(self.ids)}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def mask_positions(self) -> list[int]:
        return sorted(self.targets)

    def copy(self) -> "TokenSequence":
        return dataclasses.replace(self, ids=list(self.ids), pad_mask=list(self.pad_mask),
                                   targets=dict(self.targets))


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    words = text.split()
    return TokenSequence([CLS_ID] + [vocab.id(w) for w in words] + [SEP_ID])


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return " ".join(vocab.word(i) for i in ids if i not in (PAD_ID, CLS_ID, SEP_ID))


def pad_batch(seqs: Sequence[TokenSequence], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into ``(ids[B, L], visible[B, L])`` right-padded with [PAD]."""
    L = max(len(s) for s in seqs) if length is None else length
    ids = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    vis = np.zeros((len(seqs), L), dtype=bool)
    for b, s in enumerate(seqs):
        if len(s) > L:
            raise ValidationError(f"sequence of length {len(s)} exceeds pad length {L}")
        ids[b, : len(s)] = s.ids
        vis[b, : len(s)] = s.pad_mask
    return ids, vis


# ------------------------------------------------------------------------- scenes

@dataclass(frozen=True, order=True)
class SceneObject:
    row: int
    col: int
    shape: str
    color: str

    @property
    def position(self) -> str:
        return f"{ROW_NAMES[self.row]} {COL_NAMES[self.col]}"

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class SyntheticScene:
    objects: tuple[SceneObject, ...]
    canvas: int = 32
    grid: int = 2

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(sorted(self.objects)))

    def at(self, row: int, col: int) -> SceneObject | None:
        for o in self.objects:
            if (o.row, o.col) == (row, col):
                return o
        return None

    def validate(self) -> None:
        if self.canvas % self.grid:
            raise ValidationError(f"canvas {self.canvas} not divisible by grid {self.grid}")
        cells = set()
        for o in self.objects:
            if not (0 <= o.row < self.grid and 0 <= o.col < self.grid):
                raise ValidationError(f"object {o} lies outside the {self.grid}x{self.grid} canvas grid")
            if (o.row, o.col) in cells:
                raise ValidationError(f"two objects share cell {(o.row, o.col)}")
            if o.shape not in SHAPES or o.color not in PALETTE:
                raise ValidationError(f"unknown shape/color in {o}")
            cells.add((o.row, o.col))


def shape_stencil(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` footprint of a shape inside its cell."""
    m = max(1, size // 8)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    inner = size - 2 * m
    if shape == "square":
        return (yy >= m) & (yy < size - m) & (xx >= m) & (xx < size - m)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (inner / 2.0) ** 2
    if shape == "diamond":
        return np.abs(yy - c) + np.abs(xx - c) <= inner / 2.0
    if shape == "cross":
        arm = max(1, size // 8)
        band_y = np.abs(yy - c) <= arm
        band_x = np.abs(xx - c) <= arm
        inside = (yy >= m) & (yy < size - m) & (xx >= m) & (xx < size - m)
        return (band_y | band_x) & inside
    if shape == "triangle":
        rows = (yy >= m) & (yy < size - m)
        half = (yy - m + 1) * (inner / 2.0) / inner
        return rows & (np.abs(xx - c) <= half)
    raise ValidationError(f"unknown shape {shape!r}")


def render_scene(scene: SyntheticScene) -> np.ndarray:
    """Render to a float32 ``[3, canvas, canvas]`` image with values in [0, 1]."""
    scene.validate()
    cell = scene.canvas // scene.grid
    img = np.empty((3, scene.canvas, scene.canvas), dtype=np.float32)
    img[:] = np.asarray(BACKGROUND, dtype=np.float32)[:, None, None]
    for o in scene.objects:
        stencil = shape_stencil(o.shape, cell)
        r0, c0 = o.row * cell, o.col * cell
        region = img[:, r0 : r0 + cell, c0 : c0 + cell]
        for ch, value in enumerate(PALETTE[o.color]):
            region[ch][stencil] = np.float32(value)
    return img


# ----------------------------------------------------------------------- captions

def caption_text(scene: SyntheticScene) -> str:
    if not scene.objects:
        return "empty scene"
    return " and ".join(f"a {o.name} at {o.position}" for o in scene.objects)


def parse_caption(text: str) -> SyntheticScene:
    """Inverse of ``caption_text``; raises ValidationError on malformed text."""
    if text == "empty scene":
        return SyntheticScene(())
    objs = []
    for clause in text.split(" and "):
        w = clause.split()
        if len(w) != 6 or w[0] != "a" or w[3] != "at":
            raise ValidationError(f"malformed caption clause {clause!r}")
        if w[4] not in ROW_NAMES or w[5] not in COL_NAMES:
            raise ValidationError(f"bad position in {clause!r}")
        objs.append(SceneObject(ROW_NAMES.index(w[4]), COL_NAMES.index(w[5]), w[2], w[1]))
    return SyntheticScene(tuple(objs))


def caption_matches(scene: SyntheticScene, text: str) -> bool:
    try:
        return parse_caption(text).objects == scene.objects
    except ValidationError:
        return False


# ------------------------------------------------------------------------ examples

@dataclass
class QAPair:
    question: str
    answer: str


@dataclass
class EntailmentTriple:
    hypothesis: str
    label: str


@dataclass
class PairedExample:
    index: int
    scene: SyntheticScene
    image: np.ndarray
    caption: TokenSequence
    caption_text: str
    qa: QAPair | None = None
    class_label: str | None = None
    entailment: EntailmentTriple | None = None


@dataclass
class Corpus:
    seed: int
    examples: list[PairedExample]
    class_names: list[str]
    answers: list[str]
    vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def __iter__(self):
        return iter(self.examples)


def _cells(grid: int) -> list[tuple[int, int]]:
    return [(r, c) for r in range(grid) for c in range(grid)]


def sample_scene(rng: np.random.Generator, max_objects: int = 2, grid: int = 2) -> SyntheticScene:
    n = int(rng.integers(1, max_objects + 1))
    cells = _cells(grid)
    picks = rng.choice(len(cells), size=n, replace=False)
    objs = []
    for p in sorted(picks):
        r, c = cells[p]
        objs.append(SceneObject(r, c, SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))]))
    return SyntheticScene(tuple(objs))


def make_question(scene: SyntheticScene, rng: np.random.Generator) -> QAPair:
    kind = int(rng.integers(5))
    r, c = _cells(scene.grid)[rng.integers(scene.grid ** 2)]
    pos = f"{ROW_NAMES[r]} {COL_NAMES[c]}"
    obj = scene.at(r, c)
    if kind == 0 and obj is not None:
        return QAPair(f"what color is the shape at {pos}", obj.color)
    if kind == 1 and obj is not None:
        return QAPair(f"what shape is at {pos}", obj.shape)
    if kind == 2:
        return QAPair("how many shapes are there", COUNT_WORDS[len(scene.objects)])
    if kind == 3:
        color = COLORS[rng.integers(len(COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        if rng.random() < 0.5 and scene.objects:
            o = scene.objects[rng.integers(len(scene.objects))]
            color, shape = o.color, o.shape
        present = any(o.color == color and o.shape == shape for o in scene.objects)
        return QAPair(f"is there a {color} {shape}", "yes" if present else "no")
    return QAPair(f"what is at {pos}", obj.name if obj is not None else "nothing")


def answer_question(scene: SyntheticScene, question: str) -> str:
    """Independent scene checker for generated questions."""
    w = question.split()
    if w[:2] == ["how", "many"]:
        return COUNT_WORDS[len(scene.objects)]
    if w[:3] == ["is", "there", "a"]:
        color, shape = w[3], w[4]
        return "yes" if any(o.color == color and o.shape == shape for o in scene.objects) else "no"
    r, c = ROW_NAMES.index(w[-2]), COL_NAMES.index(w[-1])
    obj = scene.at(r, c)
    if w[:2] == ["what", "color"]:
        return obj.color
    if w[:2] == ["what", "shape"]:
        return obj.shape
    return obj.name if obj is not None else "nothing"


def make_entailment(scene: SyntheticScene, rng: np.random.Generator) -> EntailmentTriple:
    label = VE_LABELS[rng.integers(3)]
    o = scene.objects[rng.integers(len(scene.objects))]
    if label == "entailment":
        return EntailmentTriple(f"there is a {o.color} {o.shape}", label)
    if label == "neutral":
        adj = UNVERIFIABLE[rng.integers(len(UNVERIFIABLE))]
        return EntailmentTriple(f"there is a {adj} {o.color} {o.shape}", label)
    absent = [c for c in COLORS if not any(x.color == c and x.shape == o.shape for x in scene.objects)]
    return EntailmentTriple(f"there is a {absent[rng.integers(len(absent))]} {o.shape}", label)


def entailment_label(scene: SyntheticScene, hypothesis: str) -> str:
    w = hypothesis.split()
    if w[3] in UNVERIFIABLE:
        return "neutral"
    present = any(o.color == w[3] and o.shape == w[4] for o in scene.objects)
    return "entailment" if present else "contradiction"


def class_label_of(scene: SyntheticScene) -> str:
    """Fine-grained class: colour and shape of the first object in reading order."""
    return scene.objects[0].name


DEFAULT_TASK_MIX = {"qa": 1.0, "cls": 1.0, "ve": 1.0}


def _example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_corpus(seed: int, n_examples: int, task_mix: dict[str, float] | None = None,
                    vocab: Vocabulary | None = None, unique: bool = True,
                    max_objects: int = 2) -> Corpus:
    """Build ``n_examples`` scenes with captions and optional task annotations.

    Each example draws from its own rng keyed on ``(seed, index)``; with
    ``unique`` set, a scene already present is redrawn from the same stream.
    ``task_mix`` weights are the per-example probabilities of attaching a QA
    pair, a class label and an entailment triple.
    """
    if n_examples < 1:
        raise ValidationError("n_examples must be >= 1")
    mix = dict(DEFAULT_TASK_MIX if task_mix is None else task_mix)
    unknown = set(mix) - set(DEFAULT_TASK_MIX)
    if unknown:
        raise ValidationError(f"unknown task_mix keys {sorted(unknown)}")
    vocab = vocab or default_vocab()
    seen: set[tuple] = set()
    examples = []
    for i in range(n_examples):
        rng = _example_rng(seed, i)
        scene = sample_scene(rng, max_objects)
        tries = 0
        while unique and scene.objects in seen:
            tries += 1
            if tries > 10_000:
                raise ValidationError(f"cannot draw {n_examples} distinct scenes with <= {max_objects} objects")
            scene = sample_scene(rng, max_objects)
        seen.add(scene.objects)
        text = caption_text(scene)
        ex = PairedExample(i, scene, render_scene(scene), tokenize(text, vocab), text)
        if rng.random() < mix.get("qa", 0.0):
            ex.qa = make_question(scene, rng)
        if rng.random() < mix.get("cls", 0.0):
            ex.class_label = class_label_of(scene)
        if rng.random() < mix.get("ve", 0.0):
            ex.entailment = make_entailment(scene, rng)
        examples.append(ex)
    class_names = sorted({e.class_label for e in examples if e.class_label})
    answers = sorted({e.qa.answer for e in examples if e.qa})
    return Corpus(seed, examples, class_names, answers, vocab)


def verify_example(ex: PairedExample) -> bool:
    ok = caption_matches(ex.scene, ex.caption_text)
    if ex.qa is not None:
        ok &= answer_question(ex.scene, ex.qa.question) == ex.qa.answer
    if ex.entailment is not None:
        ok &= entailment_label(ex.scene, ex.entailment.hypothesis) == ex.entailment.label
    if ex.class_label is not None:
        ok &= ex.class_label == class_label_of(ex.scene)
    return bool(ok)


# -------------------------------------------------------------------------- batches

@dataclass
class MlmBatch:
    sequences: list[TokenSequence]
    positions: list[tuple[int, int]]
    targets: np.ndarray

    @property
    def n_masked(self) -> int:
        return len(self.positions)


def make_mlm_batch(sequences: Sequence[TokenSequence], mask_prob: float, rng: np.random.Generator,
                   mask_sep: bool = False) -> MlmBatch:
    """Replace each maskable token by [MASK] independently with ``mask_prob``.

    [CLS], [PAD], [MASK] and [CTX_i] are never masked. [SEP] is masked only
    when ``mask_sep`` is set, which is how pretraining teaches the decoder
    where a caption ends.
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ValidationError(f"mask_prob must lie in [0, 1], got {mask_prob}")
    out, positions, targets = [], [], []
    for b, seq in enumerate(sequences):
        s = seq.copy()
        s.targets = {}
        draws = rng.random(len(s.ids))
        for i, tok in enumerate(seq.ids):
            if not s.pad_mask[i]:
                continue
            maskable = tok >= CTX_BASE + N_CTX or (mask_sep and tok == SEP_ID)
            if maskable and draws[i] < mask_prob:
                s.targets[i] = tok
                s.ids[i] = MASK_ID
                positions.append((b, i))
                targets.append(tok)
        out.append(s)
    return MlmBatch(out, positions, np.asarray(targets, dtype=np.int64))


@dataclass
class ItmBatch:
    image_index: np.ndarray
    text_index: np.ndarray
    labels: np.ndarray
    swapped_image: np.ndarray


def make_itm_batch(n: int, rng: np.random.Generator) -> ItmBatch:
    """Pair indices for ``n`` positives followed by ``n`` negatives.

    Each negative keeps one side of positive ``i`` and swaps the other side,
    image or text with equal probability, for a different example.
    """
    if n < 2:
        raise ValidationError("ITM batches need at least 2 examples to draw negatives from")
    idx = np.arange(n)
    other = (idx + rng.integers(1, n, size=n)) % n
    swap_img = rng.random(n) < 0.5
    img = np.concatenate([idx, np.where(swap_img, other, idx)])
    txt = np.concatenate([idx, np.where(swap_img, idx, other)])
    labels = np.concatenate([np.ones(n, np.int64), np.zeros(n, np.int64)])
    return ItmBatch(img, txt, labels, swap_img)


def build_answer_lists(examples: Iterable[PairedExample], list_size: int) -> tuple[list[str], list[str]]:
    """Top-``list_size`` training answers by frequency (ties lexicographic) and the full inventory."""
    if list_size <= 0:
        raise ValidationError("answer list size must be positive")
    counts = Counter(e.qa.answer for e in examples if e.qa is not None)
    if list_size > len(counts):
        raise ValidationError(f"list size {list_size} exceeds {len(counts)} distinct answers")
    ranked = sorted(counts, key=lambda a: (-counts[a], a))
    return ranked[:list_size], sorted(counts)


# --------------------------------------------------------------------------- export

MANIFEST_FIELDS = ("format", "version", "seed", "count", "image_shape", "class_names", "answers")
RECORD_COLUMNS = ("index", "scene", "caption_ids", "question_ids", "answer_ids", "class_ids",
                  "hypothesis_ids", "ve_label")


def _ids(text: str | None, vocab: Vocabulary) -> str:
    if text is None:
        return "-"
    return " ".join(str(vocab.id(w)) for w in text.split())


def _scene_str(scene: SyntheticScene) -> str:
    return ";".join(f"{o.row},{o.col},{o.shape},{o.color}" for o in scene.objects) or "-"


def _scene_from_str(s: str) -> SyntheticScene:
    if s == "-":
        return SyntheticScene(())
    objs = []
    for part in s.split(";"):
        r, c, shape, color = part.split(",")
        objs.append(SceneObject(int(r), int(c), shape, color))
    return SyntheticScene(tuple(objs))


def export_corpus(corpus: Corpus, directory: str | Path) -> None:
    """Write ``manifest.txt``, ``records.tsv`` and ``images.bin``.

    ``images.bin`` holds, per example in index order, a header of four
    little-endian uint32 (rank=3, C, H, W) followed by C*H*W little-endian
    float32 values in C, H, W order.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    v = corpus.vocab
    shape = corpus.examples[0].image.shape
    lines = [
        "# field order: " + ", ".join(MANIFEST_FIELDS),
        "# records.tsv columns: " + ", ".join(RECORD_COLUMNS),
        "format = vlgen-corpus",
        "version = 1",
        f"seed = {corpus.seed}",
        f"count = {len(corpus)}",
        f"image_shape = {' '.join(map(str, shape))}",
        f"class_names = {'|'.join(corpus.class_names)}",
        f"answers = {'|'.join(corpus.answers)}",
    ]
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    rows = ["\t".join(RECORD_COLUMNS)]
    with open(d / "images.bin", "wb") as fh:
        for e in corpus.examples:
            fh.write(struct.pack("<4I", 3, *e.image.shape))
            fh.write(e.image.astype("<f4").tobytes())
            rows.append("\t".join([
                str(e.index), _scene_str(e.scene), " ".join(map(str, e.caption.ids)),
                _ids(e.qa.question if e.qa else None, v), _ids(e.qa.answer if e.qa else None, v),
                _ids(e.class_label, v), _ids(e.entailment.hypothesis if e.entailment else None, v),
                e.entailment.label if e.entailment else "-",
            ]))
    (d / "records.tsv").write_text("\n".join(rows) + "\n")


def load_corpus(directory: str | Path, vocab: Vocabulary | None = None) -> Corpus:
    d = Path(directory)
    vocab = vocab or default_vocab()
    meta = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        k, _, val = line.partition("=")
        meta[k.strip()] = val.strip()
    if meta.get("format") != "vlgen-corpus" or meta.get("version") != "1":
        raise ValidationError(f"unsupported corpus manifest in {d}")

    def words(col: str) -> str | None:
        return None if col == "-" else " ".join(vocab.word(int(t)) for t in col.split())

    raw = (d / "images.bin").read_bytes()
    offset = 0
    examples = []
    for row in (d / "records.tsv").read_text().splitlines()[1:]:
        cols = row.split("\t")
        rank, c, h, w = struct.unpack_from("<4I", raw, offset)
        offset += 16
        n = c * h * w
        img = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(c, h, w).astype(np.float32)
        offset += 4 * n
        scene = _scene_from_str(cols[1])
        seq = TokenSequence([int(t) for t in cols[2].split()])
        ex = PairedExample(int(cols[0]), scene, img, seq, detokenize(seq, vocab))
        q, a = words(cols[3]), words(cols[4])
        if q is not None:
            ex.qa = QAPair(q, a)
        ex.class_label = words(cols[5])
        if cols[6] != "-":
            ex.entailment = EntailmentTriple(words(cols[6]), cols[7])
        examples.append(ex)
    names = meta["class_names"].split("|") if meta["class_names"] else []
    answers = meta["answers"].split("|") if meta["answers"] else []
    return Corpus(int(meta["seed"]), examples, names, answers, vocab)
