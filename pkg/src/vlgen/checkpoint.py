"""Binary checkpoint format.

All integers are little-endian::

    magic        4 bytes  b"VLGC"
    version      uint32
    config_len   uint64
    config       config_len bytes of UTF-8 ``key = value`` lines
    n_tensors    uint32
    n_tensors times:
        name_len     uint32
        name         name_len bytes UTF-8
        dtype        uint8   (0 = float32, 1 = float64)
        rank         uint32
        dims         rank x uint64
        payload_len  uint64  (must equal prod(dims) * itemsize)
        payload      little-endian values, C order

Tensors are written in the order they appear in ``Checkpoint.tensors``, so a
load followed by a save reproduces the file byte for byte. Optimizer moments
are stored as ordinary tensors named ``optim.m.<param>`` / ``optim.v.<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import coerce, format_kv, parse_kv
from .encoders import EncoderConfig, ModelParams
from .errors import (BadMagicError, PayloadMismatchError, TruncatedCheckpointError, UnknownTensorError,
                     VersionMismatchError)
from .optim import OptimizerState
from .tensor import Tensor

MAGIC = b"VLGC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAG = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_OPT_FIELDS = ("lr", "weight_decay", "beta1", "beta2", "eps", "warmup_steps", "step")


@dataclass
class Checkpoint:
    config: dict[str, str]
    tensors: dict[str, np.ndarray]
    version: int = VERSION
    extra: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.config.get("step", 0))

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    text = format_kv(ckpt.config).encode("utf-8")
    parts.append(struct.pack("<Q", len(text)))
    parts.append(text)
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        tag = _DTYPE_TAG.get(arr.dtype)
        if tag is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw_name = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic bytes)")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    (clen,) = r.unpack("<Q")
    config = parse_kv(r.take(clen).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _DTYPES:
            raise PayloadMismatchError(f"tensor {name!r}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}Q")
        (plen,) = r.unpack("<Q")
        dt = _DTYPES[tag]
        expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if plen != expected:
            raise PayloadMismatchError(f"tensor {name!r}: payload {plen} bytes, shape {dims} needs {expected}")
        data = np.frombuffer(r.take(plen), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise PayloadMismatchError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return Checkpoint(config, tensors, version)


# -- model <-> checkpoint ---------------------------------------------------------------

def encoder_config_from(ckpt: Checkpoint) -> EncoderConfig:
    names = EncoderConfig.__dataclass_fields__
    vals = {k: coerce(v) for k, v in ckpt.config.items() if k in names}
    for k in ("ln_eps", "init_std"):
        if k in vals:
            vals[k] = float(vals[k])
    return EncoderConfig(**vals)


def make_checkpoint(params: ModelParams, step: int = 0, optimizer: OptimizerState | None = None,
                    rng: np.random.Generator | None = None, extra_config: dict | None = None) -> Checkpoint:
    config = {k: str(v) if not isinstance(v, float) else repr(v) for k, v in params.config.to_dict().items()}
    config["step"] = str(step)
    if extra_config:
        config.update({k: repr(v) if isinstance(v, float) else str(v) for k, v in extra_config.items()})
    if rng is not None:
        config["rng_state"] = json.dumps(rng.bit_generator.state, sort_keys=True)
    tensors = {k: t.data.copy() for k, t in params.items()}
    if optimizer is not None:
        for k in _OPT_FIELDS:
            val = getattr(optimizer, k)
            config[f"optim.{k}"] = repr(val) if isinstance(val, float) else str(val)
        for k in params:
            if k in optimizer.m:
                tensors[f"optim.m.{k}"] = optimizer.m[k].copy()
                tensors[f"optim.v.{k}"] = optimizer.v[k].copy()
    return Checkpoint(config, tensors)


def params_from_checkpoint(ckpt: Checkpoint, config: EncoderConfig | None = None) -> ModelParams:
    """Rebuild parameters; names outside the config's parameter set are rejected."""
    from .encoders import param_shapes

    cfg = config or encoder_config_from(ckpt)
    expected = {name: shape for name, shape, _ in param_shapes(cfg)}
    model = ckpt.model_tensors()
    unknown = sorted(set(model) - set(expected))
    if unknown:
        raise UnknownTensorError(f"unknown tensor names in checkpoint: {unknown[:5]}")
    missing = sorted(set(expected) - set(model))
    if missing:
        raise UnknownTensorError(f"checkpoint lacks tensors: {missing[:5]}")
    params = ModelParams(cfg)
    for name, shape in expected.items():
        arr = model[name]
        if tuple(arr.shape) != tuple(shape):
            raise PayloadMismatchError(f"tensor {name!r} has shape {arr.shape}, config expects {shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True, name=name, dtype=arr.dtype)
    return params


def optimizer_from_checkpoint(ckpt: Checkpoint) -> OptimizerState | None:
    if "optim.step" not in ckpt.config:
        return None
    vals = {k: coerce(ckpt.config[f"optim.{k}"]) for k in _OPT_FIELDS}
    for k in ("lr", "weight_decay", "beta1", "beta2", "eps"):
        vals[k] = float(vals[k])
    state = OptimizerState(**vals)
    for name, arr in ckpt.tensors.items():
        if name.startswith("optim.m."):
            state.m[name[len("optim.m."):]] = arr.copy()
        elif name.startswith("optim.v."):
            state.v[name[len("optim.v."):]] = arr.copy()
    return state


def rng_from_checkpoint(ckpt: Checkpoint) -> np.random.Generator | None:
    raw = ckpt.config.get("rng_state")
    if raw is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(raw)
    return rng
