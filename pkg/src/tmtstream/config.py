"""Flat ``key = value`` run configuration shared by every subcommand.

Values are resolved as defaults < config file < command-line flags. The file
comes from ``--config`` or, failing that, the ``TMTSTREAM_CONFIG`` environment
variable. Unknown keys are rejected wherever they appear.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

CONFIG_ENV = "TMTSTREAM_CONFIG"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(kind: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else kind(text)
    parse.__name__ = f"optional_{kind.__name__}"
    return parse


@dataclass(frozen=True)
class Setting:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")

    @property
    def is_bool(self) -> bool:
        return self.parse is _bool


_S = Setting
SETTINGS: dict[str, Setting] = {s.name: s for s in [
    # corpus
    _S("seed", int, 0, "random seed"),
    _S("n", int, 2000, "number of sentences to generate"),
    _S("min_len", int, 3, "shortest generated sentence"),
    _S("max_len", int, 12, "longest generated sentence"),
    _S("text_vocab", int, 32, "text vocabulary size"),
    _S("speech_vocab", int, 64, "speech vocabulary size"),
    _S("max_duration", int, 32, "largest span length"),
    # paths
    _S("out", _optional(str), None, "output path"),
    _S("corpus", _optional(str), None, "corpus file"),
    _S("ckpt", _optional(str), None, "checkpoint to read"),
    _S("init_ckpt", _optional(str), None, "checkpoint to start training from"),
    _S("curve", _optional(str), None, "training curve CSV output"),
    _S("eval_corpus", _optional(str), None, "held-out corpus for periodic evaluation"),
    # model
    _S("layers", int, 4, "transformer layers"),
    _S("heads", int, 4, "attention heads"),
    _S("dim", int, 128, "model width"),
    _S("ffn", int, 256, "feed-forward width"),
    _S("learned_positions", _bool, True, "add a learned absolute position table (off: rotary only)"),
    # training
    _S("steps", _optional(int), None, "optimizer steps (none: 3000 pretrain, 1000 finetune)"),
    _S("batch_size", int, 16, "sequences per step"),
    _S("lr", float, 2e-3, "peak learning rate"),
    _S("warmup", int, 100, "linear warmup steps"),
    _S("min_lr_ratio", float, 0.1, "final learning rate as a fraction of the peak"),
    _S("clip_norm", float, 1.0, "global gradient-norm clip"),
    _S("q", int, 1, "look-ahead text tokens"),
    _S("designed_mask", _bool, True, "span-aware attention mask (off: plain causal)"),
    _S("supervise_first_duration", _bool, True, "also supervise the placeholder before span 1 when n = 1"),
    _S("supervise_all_durations", _bool, False, "supervise every duration placeholder in fine-tuning"),
    _S("eval_every", int, 0, "evaluate every N steps (0: never)"),
    # streaming
    _S("text", _optional(str), None, "space-separated text token ids"),
    _S("text_file", _optional(str), None, "file of text token ids ('-' for stdin)"),
    _S("chunk", int, 15, "speech tokens per decoder chunk"),
    _S("duration_topk", int, 3, "top-k for duration sampling (1: greedy)"),
    _S("modulation", float, 1.0, "duration scale factor r"),
    _S("speech_sampling", str, "greedy", "speech token policy: greedy or topk"),
    _S("speech_topk", int, 3, "top-k for speech sampling"),
    _S("samples_per_token", int, 640, "mock decoder samples per speech token"),
    _S("dllm_ms", float, 25.0, "upstream time per text token in ms"),
    _S("trace_out", _optional(str), None, "session trace CSV output"),
    _S("audio_out", _optional(str), None, "raw float64 audio output"),
    # latency
    _S("model", str, "tmt", "model class: cosyvoice valle cosyvoice2 maskgct f5tts tmt"),
    _S("dtts_ms", _optional(float), 5.0, "TTS step time in ms (none: measure from --ckpt)"),
    _S("frame_ms", float, 40.0, "speech-token frame length in ms"),
    _S("L", _optional(int), None, "text token count"),
    _S("T", _optional(int), None, "speech token count"),
    _S("b", _optional(int), None, "NAR sampling iterations"),
    _S("c", _optional(int), None, "span steps before the first chunk"),
    _S("spans", _optional(str), None, "comma-separated span lengths for the simulator"),
    _S("count_bootstrap", _bool, False, "charge the bootstrap pass to first-packet time"),
    _S("arrival_gated", _bool, False, "make each span wait for its look-ahead text"),
    _S("events_out", _optional(str), None, "simulator event log CSV"),
    _S("results_out", _optional(str), None, "latency results CSV"),
    # masks
    _S("durations", _optional(str), None, "space-separated span lengths (default: corpus rule)"),
    _S("step", int, 1, "fine-tuning step n (spans present)"),
    _S("dump_out", _optional(str), None, "sequence debug dump output"),
]}


def parse_value(key: str, text: str):
    if key not in SETTINGS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SETTINGS[key].parse(text)
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {err}") from None


def read_config_file(path) -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as err:
            raise ConfigError(f"{path}:{lineno}: {err}") from None
    return out


class RunConfig:
    """Resolved settings with attribute access."""

    def __init__(self, values: dict[str, Any]):
        unknown = set(values) - set(SETTINGS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        self._values = {k: s.default for k, s in SETTINGS.items()}
        self._values.update(values)

    def __getattr__(self, key: str):
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    @classmethod
    def resolve(cls, flags: dict[str, Any], config_path=None) -> "RunConfig":
        path = config_path or os.environ.get(CONFIG_ENV) or None
        merged = read_config_file(path) if path else {}
        merged.update(flags)
        return cls(merged)
