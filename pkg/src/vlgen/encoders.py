"""Visual (pre-LN), text (post-LN) and multimodal (post-LN + cross-attention) encoders.

All forward functions are batched: images are ``[B, C, H, W]`` and token ids
``[B, L]``. Parameters live in a flat ``ModelParams`` mapping keyed by dotted
names whose first component is the encoder group (``visual``, ``text``,
``multimodal``, ``heads``).
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .data import CTX_BASE, N_CTX, TokenSequence, pad_batch
from .errors import ShapeError, ValidationError
from .tensor import NEG_SENTINEL, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int = 64
    n_heads: int = 4
    visual_layers: int = 2
    text_layers: int = 2
    multimodal_layers: int = 2
    patch: int = 8
    channels: int = 3
    image_height: int = 32
    image_width: int = 32
    max_text_len: int = 48
    vocab_size: int = 85
    mlp_ratio: int = 4
    contrastive_dim: int = 32
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValidationError(f"hidden={self.hidden} not divisible by n_heads={self.n_heads}")
        if self.image_height % self.patch or self.image_width % self.patch:
            raise ValidationError("image dims must be divisible by the patch size")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v < 0:
                raise ValidationError(f"{f.name} must be non-negative")

    @property
    def n_patches(self) -> int:
        return (self.image_height // self.patch) * (self.image_width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class AttentionMaskKind(enum.Enum):
    BIDIRECTIONAL = "bidirectional"
    CAUSAL = "causal"


# ------------------------------------------------------------------------- params

COMPONENTS = {"visual": "VE", "text": "TE", "multimodal": "ME", "heads": "heads"}


class ModelParams(dict):
    """Ordered name -> Tensor mapping plus the config that shaped it."""

    def __init__(self, config: EncoderConfig, items=()):
        super().__init__(items)
        self.config = config

    def component(self, name: str) -> str:
        return COMPONENTS[name.split(".", 1)[0]]

    def tensors(self) -> Iterator[Tensor]:
        return iter(self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, ((k, Tensor(v.data.copy(), requires_grad=v.requires_grad,
                                                   name=k, dtype=v.data.dtype))
                                          for k, v in self.items()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}


def _attn_shapes(prefix: str, h: int) -> list[tuple[str, tuple[int, ...], str]]:
    out = []
    for p in ("q", "k", "v", "o"):
        out.append((f"{prefix}.w{p}", (h, h), "normal"))
        out.append((f"{prefix}.b{p}", (h,), "zeros"))
    return out


def _ln_shapes(prefix: str, h: int):
    return [(f"{prefix}.g", (h,), "ones"), (f"{prefix}.b", (h,), "zeros")]


def _mlp_shapes(prefix: str, h: int, ratio: int):
    return [(f"{prefix}.w1", (h, h * ratio), "normal"), (f"{prefix}.b1", (h * ratio,), "zeros"),
            (f"{prefix}.w2", (h * ratio, h), "normal"), (f"{prefix}.b2", (h,), "zeros")]


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter in a fixed order."""
    h, r = cfg.hidden, cfg.mlp_ratio
    spec = [("visual.patch_proj", (cfg.patch_dim, h), "normal"),
            ("visual.cls", (h,), "normal"),
            ("visual.pos", (cfg.n_patches + 1, h), "normal")]
    for i in range(cfg.visual_layers):
        p = f"visual.layers.{i}"
        spec += _ln_shapes(f"{p}.ln1", h) + _attn_shapes(f"{p}.attn", h)
        spec += _ln_shapes(f"{p}.ln2", h) + _mlp_shapes(f"{p}.mlp", h, r)
    spec += [("text.word_emb", (cfg.vocab_size, h), "normal"),
             ("text.pos", (cfg.max_text_len + 1, h), "normal")]
    for i in range(cfg.text_layers):
        p = f"text.layers.{i}"
        spec += _attn_shapes(f"{p}.attn", h) + _ln_shapes(f"{p}.ln1", h)
        spec += _mlp_shapes(f"{p}.mlp", h, r) + _ln_shapes(f"{p}.ln2", h)
    for i in range(cfg.multimodal_layers):
        p = f"multimodal.layers.{i}"
        spec += _attn_shapes(f"{p}.self_attn", h) + _ln_shapes(f"{p}.ln1", h)
        spec += _attn_shapes(f"{p}.cross_attn", h) + _ln_shapes(f"{p}.ln2", h)
        spec += _mlp_shapes(f"{p}.mlp", h, r) + _ln_shapes(f"{p}.ln3", h)
    spec += [("heads.itc.image_proj", (h, cfg.contrastive_dim), "normal"),
             ("heads.itc.text_proj", (h, cfg.contrastive_dim), "normal"),
             ("heads.itm.w", (h, 2), "normal"), ("heads.itm.b", (2,), "zeros"),
             ("heads.mlm.w", (h, cfg.vocab_size), "normal"), ("heads.mlm.b", (cfg.vocab_size,), "zeros")]
    return spec


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: EncoderConfig, seed: int | np.random.Generator = 0) -> ModelParams:
    """Truncated normal (std ``init_std``) weights, zero biases, unit LN gains."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = ModelParams(cfg)
    for name, shape, kind in param_shapes(cfg):
        if kind == "normal":
            data = truncated_normal(rng, shape, cfg.init_std)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# ------------------------------------------------------------------------- patches

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[C, H, W]`` -> ``[N, P*P*C]`` (or batched with a leading B axis).

    Patches run row-major from the top-left; inside a patch values are
    ordered channel first, then pixel row, then pixel column.
    """
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    out = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    x = np.asarray(patches)
    single = x.ndim == 2
    if single:
        x = x[None]
    gh, gw = height // patch, width // patch
    out = x.reshape(x.shape[0], gh, gw, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    out = out.reshape(x.shape[0], channels, height, width)
    return out[0] if single else out


# ---------------------------------------------------------------------------- masks

def build_attention_mask(kind: AttentionMaskKind, length: int, pad_mask: Sequence[bool]) -> np.ndarray:
    """``[L, L]`` additive mask: 0 where query i may attend key j, NEG_SENTINEL elsewhere."""
    vis = np.asarray(pad_mask, dtype=bool)
    if vis.shape != (length,):
        raise ShapeError(f"pad_mask has shape {vis.shape}, expected ({length},)")
    return attention_bias(np.array([kind is AttentionMaskKind.CAUSAL]), vis[None])[0, 0]


def attention_bias(causal: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Per-sample masks ``[B, 1, L, L]`` from causal flags ``[B]`` and visibility ``[B, L]``."""
    b, length = visible.shape
    allowed = np.broadcast_to(visible[:, None, :], (b, length, length)).copy()
    tri = np.tril(np.ones((length, length), dtype=bool))
    causal = np.asarray(causal, dtype=bool).reshape(b)
    allowed[causal] &= tri
    bias = np.where(allowed, 0.0, NEG_SENTINEL).astype(T.default_dtype())
    return bias[:, None]


def causal_flags(kind, batch: int) -> np.ndarray:
    if isinstance(kind, AttentionMaskKind):
        return np.full(batch, kind is AttentionMaskKind.CAUSAL)
    flags = np.asarray(kind, dtype=bool)
    if flags.shape != (batch,):
        raise ShapeError(f"mask kinds for {flags.shape} samples, batch has {batch}")
    return flags


# ------------------------------------------------------------------------- building blocks

def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, h = x.shape
    return x.reshape(b, length, n_heads, h // n_heads).transpose(0, 2, 1, 3)


def attention(params: ModelParams, prefix: str, queries: Tensor, keys: Tensor, bias, n_heads: int) -> Tensor:
    """Multi-head attention; ``bias`` is an additive mask broadcastable to [B, h, Lq, Lk] or None."""
    p = params
    q = _heads(T.linear(queries, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), n_heads)
    k = _heads(T.linear(keys, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), n_heads)
    v = _heads(T.linear(keys, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), n_heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = T.matmul(q, T.swap_last(k)) * scale
    weights = T.masked_softmax(scores, bias)
    ctx = T.matmul(weights, v).transpose(0, 2, 1, 3)
    b, lq = ctx.shape[0], ctx.shape[1]
    ctx = ctx.reshape(b, lq, -1)
    return T.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def mlp(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return T.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def layer_norm(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], params.config.ln_eps)


# ------------------------------------------------------------------------- encoders

def visual_embed(images: np.ndarray, params: ModelParams) -> Tensor:
    cfg = params.config
    imgs = np.asarray(images)
    if imgs.ndim == 3:
        imgs = imgs[None]
    expected = (cfg.channels, cfg.image_height, cfg.image_width)
    if imgs.shape[1:] != expected:
        raise ShapeError(f"image shape {imgs.shape[1:]} does not match config {expected}")
    patches = Tensor(patchify(imgs, cfg.patch), dtype=params["visual.patch_proj"].dtype)
    tokens = T.matmul(patches, params["visual.patch_proj"])
    b = tokens.shape[0]
    cls = T.reshape(params["visual.cls"], (1, 1, cfg.hidden)) + Tensor(np.zeros((b, 1, cfg.hidden)),
                                                                       dtype=tokens.dtype)
    return T.concat([cls, tokens], axis=1) + params["visual.pos"]


def encode_images(images: np.ndarray, params: ModelParams) -> Tensor:
    """Pre-LN ViT stack: z' = MSA(LN(z)) + z, z = MLP(LN(z')) + z'. Returns [B, N+1, H]."""
    cfg = params.config
    z = visual_embed(images, params)
    for i in range(cfg.visual_layers):
        p = f"visual.layers.{i}"
        h = layer_norm(params, f"{p}.ln1", z)
        z = attention(params, f"{p}.attn", h, h, None, cfg.n_heads) + z
        z = mlp(params, f"{p}.mlp", layer_norm(params, f"{p}.ln2", z)) + z
    return z


def encode_image(image: np.ndarray, params: ModelParams, config: EncoderConfig | None = None) -> Tensor:
    """Single image ``[C, H, W]`` -> ``[N+1, H]``; position 0 is the visual [CLS] state."""
    out = encode_images(np.asarray(image)[None], params)
    return out[0]


def text_embed(ids: np.ndarray, params: ModelParams) -> Tensor:
    cfg = params.config
    length = ids.shape[1]
    if length > cfg.max_text_len + 1:
        raise ShapeError(f"text length {length} exceeds max_text_len + 1 = {cfg.max_text_len + 1}")
    return T.embedding(params["text.word_emb"], ids) + params["text.pos"][:length]


def encode_texts(ids: np.ndarray, visible: np.ndarray, causal, params: ModelParams) -> Tensor:
    """Post-LN text stack: p' = LN(MSA(p)) + p, p = LN(MLP(p')) + p'. Returns [B, L, H]."""
    cfg = params.config
    ids = np.asarray(ids)
    bias = attention_bias(causal_flags(causal, ids.shape[0]), np.asarray(visible, dtype=bool))
    p = text_embed(ids, params)
    for i in range(cfg.text_layers):
        pre = f"text.layers.{i}"
        p = layer_norm(params, f"{pre}.ln1", attention(params, f"{pre}.attn", p, p, bias, cfg.n_heads)) + p
        p = layer_norm(params, f"{pre}.ln2", mlp(params, f"{pre}.mlp", p)) + p
    return p


def encode_text(seq: TokenSequence, mask_kind: AttentionMaskKind, params: ModelParams,
                config: EncoderConfig | None = None) -> Tensor:
    ids, vis = pad_batch([seq])
    return encode_texts(ids, vis, mask_kind, params)[0]


def encode_multimodal_batch(text_states: Tensor, visible: np.ndarray, visual_states: Tensor, causal,
                            params: ModelParams) -> Tensor:
    """Three post-LN sublayers per layer: masked self-attention, cross-attention
    over every visual position, MLP. Returns [B, L, H]."""
    cfg = params.config
    if text_states.shape[-1] != visual_states.shape[-1]:
        raise ShapeError(f"text width {text_states.shape[-1]} != visual width {visual_states.shape[-1]}")
    if text_states.shape[0] != visual_states.shape[0]:
        raise ShapeError(f"batch mismatch: {text_states.shape[0]} texts vs {visual_states.shape[0]} images")
    visible = np.asarray(visible, dtype=bool)
    bias = attention_bias(causal_flags(causal, text_states.shape[0]), visible)
    m = text_states
    for i in range(cfg.multimodal_layers):
        pre = f"multimodal.layers.{i}"
        m = layer_norm(params, f"{pre}.ln1", attention(params, f"{pre}.self_attn", m, m, bias, cfg.n_heads)) + m
        m = layer_norm(params, f"{pre}.ln2",
                       attention(params, f"{pre}.cross_attn", m, visual_states, None, cfg.n_heads)) + m
        m = layer_norm(params, f"{pre}.ln3", mlp(params, f"{pre}.mlp", m)) + m
    return m


def encode_multimodal(text_states: Tensor, visual_states: Tensor, mask_kind: AttentionMaskKind,
                      params: ModelParams, pad_mask: Sequence[bool] | None = None) -> Tensor:
    """Unbatched form: ``[L, H]`` text states and ``[N+1, H]`` visual states."""
    length = text_states.shape[0]
    vis = np.ones((1, length), bool) if pad_mask is None else np.asarray(pad_mask, bool)[None]
    t = T.reshape(text_states, (1,) + text_states.shape)
    z = T.reshape(visual_states, (1,) + visual_states.shape)
    return encode_multimodal_batch(t, vis, z, mask_kind, params)[0]


def ctx_row_mask(cfg: EncoderConfig) -> np.ndarray:
    rows = np.zeros(cfg.vocab_size, dtype=bool)
    rows[CTX_BASE : CTX_BASE + N_CTX] = True
    return rows
