"""Llama-style transformer with a shared embedding table and two output heads.

Pre-norm residual blocks (RMSNorm, rotary attention, SwiGLU feed-forward).
The final hidden state feeds a speech-token head and a duration head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tt
from .corpus import VocabLayout
from .tensor import Tensor


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 256
    total_vocab: int = 100
    speech_vocab: int = 64
    num_duration_classes: int = 33
    max_seq_len: int = 512
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    learned_positions: bool = True

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ModelError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if (self.model_dim // self.num_heads) % 2:
            raise ModelError("head dimension must be even for rotary embedding")
        if self.num_duration_classes < 2:
            raise ModelError("num_duration_classes must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @classmethod
    def for_vocab(cls, vocab: VocabLayout, **overrides) -> "ModelConfig":
        return cls(total_vocab=vocab.total_vocab, speech_vocab=vocab.speech_vocab_size,
                   num_duration_classes=vocab.num_duration_classes, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.model_dim, config.ffn_dim
    shapes = {"embed": (config.total_vocab, d)}
    if config.learned_positions:
        shapes["pos_embed"] = (config.max_seq_len, d)
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ffn_norm": (d,),
            p + "w_gate": (d, f), p + "w_up": (d, f), p + "w_down": (f, d),
        })
    shapes["final_norm"] = (d,)
    shapes["speech_head"] = (d, config.speech_vocab)
    shapes["duration_head"] = (d, config.num_duration_classes)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    out_scale = 1.0 / math.sqrt(2 * max(config.num_layers, 1))
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
            if name.endswith(("wo", "w_down")):
                data *= out_scale
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def count_flops(config: ModelConfig, seq_len: int) -> int:
    """Multiply-add FLOPs (2 per MAC) of one forward pass; lookups and norms are free."""
    d, f, n = config.model_dim, config.ffn_dim, seq_len
    per_layer = n * (2 * 4 * d * d + 2 * 3 * d * f) + 2 * 2 * n * n * d
    heads = 2 * n * d * (config.speech_vocab + config.num_duration_classes)
    return config.num_layers * per_layer + heads


def hidden_states(params: dict[str, Tensor], config: ModelConfig, ids: np.ndarray,
                  allow: np.ndarray, lengths=None) -> Tensor:
    """Final normed hidden states of the real (unpadded) positions.

    ``ids`` is ``[B, N]`` and ``allow`` is ``[B, N, N]``; ``lengths`` gives the
    real length of each row (default: all ``N``). Rows are returned packed,
    ``[sum(lengths), model_dim]``, sequence after sequence. Projections and the
    feed-forward run on packed rows; only the attention core is padded.
    """
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
        allow = np.asarray(allow)[None]
    B, N = ids.shape
    if N > config.max_seq_len:
        raise ModelError(f"sequence length {N} exceeds max_seq_len {config.max_seq_len}")
    if allow.shape != (B, N, N):
        raise ModelError(f"mask shape {allow.shape} does not match sequence shape {(B, N)}")
    lengths = np.full(B, N) if lengths is None else np.asarray(lengths)
    real = (np.arange(N)[None, :] < lengths[:, None]).reshape(-1)
    real_index = np.flatnonzero(real)
    H, hd, d = config.num_heads, config.head_dim, config.model_dim
    cos, sin = tt.rope_tables(np.arange(N), hd, config.rope_base)
    blocked = np.repeat(~allow, H, axis=0)
    scale = 1.0 / math.sqrt(hd)

    def split_heads(t: Tensor) -> Tensor:
        t = tt.reshape(tt.pad_rows(t, real_index, B * N), (B, N, H, hd))
        return tt.reshape(tt.transpose(t, (0, 2, 1, 3)), (B * H, N, hd))

    x = tt.embedding_lookup(params["embed"], ids.reshape(-1)[real_index])
    if config.learned_positions:
        pos = np.tile(np.arange(N), B)[real_index]
        x = tt.add(x, tt.embedding_lookup(params["pos_embed"], pos))
    for i in range(config.num_layers):
        p = f"layers.{i}."
        h = tt.rmsnorm(x, params[p + "attn_norm"], config.norm_eps)
        q = tt.rope(split_heads(tt.matmul(h, params[p + "wq"])), cos, sin)
        k = tt.rope(split_heads(tt.matmul(h, params[p + "wk"])), cos, sin)
        v = split_heads(tt.matmul(h, params[p + "wv"]))
        scores = tt.mul(tt.matmul(q, tt.transpose(k, (0, 2, 1))), scale)
        weights = tt.softmax_rows(tt.masked_fill(scores, blocked, tt.NEG_INF))
        o = tt.reshape(tt.matmul(weights, v), (B, H, N, hd))
        o = tt.unpad_rows(tt.reshape(tt.transpose(o, (0, 2, 1, 3)), (B * N, d)), real_index)
        x = tt.add(x, tt.matmul(o, params[p + "wo"]))
        h = tt.rmsnorm(x, params[p + "ffn_norm"], config.norm_eps)
        gated = tt.mul(tt.silu(tt.matmul(h, params[p + "w_gate"])), tt.matmul(h, params[p + "w_up"]))
        x = tt.add(x, tt.matmul(gated, params[p + "w_down"]))
    return tt.rmsnorm(x, params["final_norm"], config.norm_eps)


def speech_logits(params, hidden: Tensor) -> Tensor:
    return tt.matmul(hidden, params["speech_head"])


def duration_logits(params, hidden: Tensor) -> Tensor:
    return tt.matmul(hidden, params["duration_head"])


def forward(params: dict[str, Tensor], config: ModelConfig, seq, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-position ``(speech_logits [N, V_s], duration_logits [N, C])`` for one sequence."""
    ids = np.asarray(seq.ids if hasattr(seq, "ids") else seq, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(ids), len(ids)):
        raise ModelError(f"mask shape {mask.shape} does not match sequence length {len(ids)}")
    h = hidden_states(params, config, ids[None, :], mask[None])
    return speech_logits(params, h), duration_logits(params, h)
