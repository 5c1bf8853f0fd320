"""Binary checkpoint format.

Layout (little-endian)::

    magic      8 bytes  b"TMTCKPT\\0"
    version    u32
    header     u32 length + UTF-8 JSON {model, vocab, step, stage}
    tensors    u32 count, then per tensor:
                 u16 name length, name, u8 ndim, u32 dims..., float64 payload
    optimizer  u8 flag; when 1: u64 step, then a tensor table of m.* / v.* entries

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import VocabLayout
from .model import ModelConfig, param_shapes
from .tensor import Tensor

MAGIC = b"TMTCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: VocabLayout
    tensors: dict[str, np.ndarray]
    step: int = 0
    stage: str = ""
    optimizer_step: int | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: dict[str, Tensor], config: ModelConfig, vocab: VocabLayout,
                    step: int = 0, stage: str = "", optimizer=None) -> "Checkpoint":
        opt_tensors, opt_step = {}, None
        if optimizer is not None and optimizer.t:
            opt_step = optimizer.t
            for k in optimizer.m:
                opt_tensors["m." + k] = optimizer.m[k]
                opt_tensors["v." + k] = optimizer.v[k]
        return cls(config, vocab, {k: p.data.copy() for k, p in params.items()},
                   step, stage, opt_step, opt_tensors)

    def params(self) -> dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()}


def _pack_table(table: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def encode(ckpt: Checkpoint) -> bytes:
    header = json.dumps({
        "model": ckpt.config.to_dict(),
        "vocab": {"text_vocab_size": ckpt.vocab.text_vocab_size,
                  "speech_vocab_size": ckpt.vocab.speech_vocab_size,
                  "max_duration": ckpt.vocab.max_duration},
        "step": ckpt.step,
        "stage": ckpt.stage,
    }, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
             _pack_table(ckpt.tensors)]
    if ckpt.optimizer_step is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BQ", 1, ckpt.optimizer_step))
        parts.append(_pack_table(ckpt.optimizer))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def table(self, what: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", f"{what} count")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H", f"{what} name length")
            try:
                name = self.take(nlen, f"{what} name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"{what}: tensor name is not UTF-8") from None
            (ndim,) = self.unpack("<B", f"{what} {name} rank")
            shape = self.unpack(f"<{ndim}I", f"{what} {name} shape")
            size = int(np.prod(shape, dtype=np.int64))
            payload = self.take(8 * size, f"{what} {name} payload")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        return out


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("magic: not a checkpoint file")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"version: file has {version}, reader supports {VERSION}")
    (hlen,) = r.unpack("<I", "header length")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
        config = ModelConfig(**header["model"])
        vocab = VocabLayout(**header["vocab"])
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointError(f"header: {err}") from None
    tensors = r.table("tensors")
    expected = param_shapes(config)
    if set(tensors) != set(expected):
        raise CheckpointError(f"tensors: names do not match the model config ({sorted(set(tensors) ^ set(expected))[:3]})")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"tensors: {name} has shape {tensors[name].shape}, expected {shape}")
    (flag,) = r.unpack("<B", "optimizer flag")
    opt_step, opt = None, {}
    if flag == 1:
        (opt_step,) = r.unpack("<Q", "optimizer step")
        opt = r.table("optimizer")
    elif flag != 0:
        raise CheckpointError(f"optimizer flag: invalid value {flag}")
    if r.pos != len(buf):
        raise CheckpointError(f"trailing bytes: {len(buf) - r.pos} unexpected bytes after payload")
    return Checkpoint(config, vocab, tensors, int(header.get("step", 0)), header.get("stage", ""),
                      opt_step, opt)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"{path}: {err.strerror}") from None
    return decode(buf)


def optimizer_from_checkpoint(ckpt: Checkpoint):
    from .train import AdamState

    if ckpt.optimizer_step is None:
        return None
    state = AdamState(t=ckpt.optimizer_step)
    for k, v in ckpt.optimizer.items():
        kind, name = k.split(".", 1)
        (state.m if kind == "m" else state.v)[name] = v.copy()
    return state
