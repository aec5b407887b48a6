"""AdamW with decoupled weight decay and per-tensor (or per-row) trainability."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import NumericError, ValidationError

# Embedding tables are exempt from weight decay alongside every 1-D tensor.
NO_DECAY_NAMES = frozenset({"visual.cls", "visual.pos", "text.word_emb", "text.pos"})


def decays(name: str, arr: np.ndarray) -> bool:
    return arr.ndim > 1 and name not in NO_DECAY_NAMES


@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.warmup_steps > 0 and self.step <= self.warmup_steps:
            return self.lr * self.step / self.warmup_steps
        return self.lr


def _arr(x):
    return x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else x


def adamw_step(params: Mapping, grads: Mapping[str, np.ndarray], state: OptimizerState,
               trainable: Mapping[str, object] | None = None, decay_filter=decays) -> None:
    """One in-place AdamW update.

    ``params`` maps names to arrays (or Tensors, updated through ``.data``).
    ``trainable`` maps a name to True (whole tensor), a boolean row mask, or
    False/None (frozen); names missing from it are frozen. With
    ``trainable=None`` every parameter that has a gradient is updated.
    Weight decay is applied directly to the weights, never through the
    gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    state.step += 1
    lr = state.current_lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        sel = True if trainable is None else trainable.get(name)
        g = grads.get(name)
        if sel is None or sel is False or g is None:
            continue
        w = _arr(p)
        if g.shape != w.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        new_m = b1 * m + (1.0 - b1) * g
        new_v = b2 * v + (1.0 - b2) * (g * g)
        upd = lr * (new_m / c1) / (np.sqrt(new_v / c2) + state.eps)
        decayed = w * (1.0 - lr * state.weight_decay) if decay_filter(name, w) else w
        new_w = (decayed - upd).astype(w.dtype, copy=False)
        if sel is True:
            m[...] = new_m
            v[...] = new_v
            w[...] = new_w
        else:
            rows = np.asarray(sel, dtype=bool)
            m[rows] = new_m[rows]
            v[rows] = new_v[rows]
            w[rows] = new_w[rows]


class AdamW:
    """Convenience wrapper binding an OptimizerState to a ModelParams."""

    def __init__(self, params, state: OptimizerState | None = None, trainable=None, **hyper):
        self.params = params
        self.state = state or OptimizerState(**hyper)
        self.trainable = trainable

    def step(self) -> None:
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        adamw_step(self.params, grads, self.state, self.trainable)
