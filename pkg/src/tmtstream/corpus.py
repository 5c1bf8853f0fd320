"""Synthetic aligned corpus: text tokens, speech tokens and per-token durations.

The generator follows a fixed rule so a model can fit it exactly. A text token
``t`` at sentence position ``p`` (0-based) lasts ``1 + (t + p) % 4`` frames,
and offset ``o`` inside its span carries speech token ``(7 t + 3 o) % V_s``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np


class CorpusError(ValueError):
    """Invalid corpus content (parse failure or broken invariant)."""


@dataclass(frozen=True)
class VocabLayout:
    """Embedding id plan shared by text, special and speech tokens."""

    text_vocab_size: int = 32
    speech_vocab_size: int = 64
    max_duration: int = 32

    STOP = 0  # duration class reserved for "no further span"

    @property
    def eot(self) -> int:
        return self.text_vocab_size

    @property
    def dur(self) -> int:
        return self.text_vocab_size + 1

    @property
    def mask(self) -> int:
        return self.text_vocab_size + 2

    @property
    def pad(self) -> int:
        return self.text_vocab_size + 3

    @property
    def speech_base(self) -> int:
        return self.text_vocab_size + 4

    @property
    def total_vocab(self) -> int:
        return self.speech_base + self.speech_vocab_size

    @property
    def num_duration_classes(self) -> int:
        return self.max_duration + 1

    def speech_id(self, k: int) -> int:
        return self.speech_base + k


@dataclass(frozen=True)
class AlignedExample:
    text: tuple[int, ...]
    speech: tuple[int, ...]
    durations_end: tuple[int, ...]

    @property
    def durations(self) -> tuple[int, ...]:
        ends = (0,) + self.durations_end
        return tuple(b - a for a, b in zip(ends, ends[1:]))

    def span(self, j: int) -> tuple[int, ...]:
        """Speech tokens of the 1-based span ``j``."""
        start = self.durations_end[j - 2] if j > 1 else 0
        return self.speech[start:self.durations_end[j - 1]]

    @classmethod
    def from_durations(cls, text, durations, speech) -> "AlignedExample":
        return cls(tuple(text), tuple(speech), tuple(int(x) for x in np.cumsum(durations)))

    def validate(self, vocab: VocabLayout) -> None:
        if len(self.durations_end) != len(self.text):
            raise CorpusError(
                f"durations_end: length {len(self.durations_end)} != text length {len(self.text)}"
            )
        if self.text and self.durations_end[-1] != len(self.speech):
            raise CorpusError(
                f"durations_end: last end {self.durations_end[-1]} != speech length {len(self.speech)}"
            )
        if not self.text and self.speech:
            raise CorpusError("speech: non-empty speech with empty text")
        for i, l in enumerate(self.durations):
            if not 1 <= l <= vocab.max_duration:
                raise CorpusError(f"durations: token {i} has length {l}, outside [1, {vocab.max_duration}]")
        if any(not 0 <= t < vocab.text_vocab_size for t in self.text):
            raise CorpusError("text: id outside text vocabulary")
        if any(not 0 <= s < vocab.speech_vocab_size for s in self.speech):
            raise CorpusError("speech: id outside speech vocabulary")


def rule_duration(token: int, position: int) -> int:
    return 1 + (token + position) % 4


def rule_span(token: int, length: int, speech_vocab: int) -> list[int]:
    return [(7 * token + 3 * o) % speech_vocab for o in range(length)]


def example_from_text(text: Iterable[int], vocab: VocabLayout) -> AlignedExample:
    """Ground-truth alignment of an arbitrary text under the generator rule."""
    text = list(text)
    durations = [rule_duration(t, p) for p, t in enumerate(text)]
    speech: list[int] = []
    for t, l in zip(text, durations):
        speech.extend(rule_span(t, l, vocab.speech_vocab_size))
    return AlignedExample.from_durations(text, durations, speech)


def generate_corpus(
    num_sentences: int,
    seed: int,
    vocab: VocabLayout = VocabLayout(),
    len_range: tuple[int, int] = (3, 12),
) -> list[AlignedExample]:
    lo, hi = len_range
    if not 1 <= lo <= hi <= 64:
        raise CorpusError(f"len_range {len_range} must satisfy 1 <= min <= max <= 64")
    if vocab.text_vocab_size < 2 or vocab.speech_vocab_size < 2:
        raise CorpusError("vocabularies need at least two entries")
    if vocab.max_duration < 4:
        raise CorpusError("max_duration must be >= 4 for the generator rule")
    rng = np.random.default_rng(seed)
    corpus = []
    for _ in range(num_sentences):
        length = int(rng.integers(lo, hi + 1))
        text = rng.integers(0, vocab.text_vocab_size, size=length).tolist()
        corpus.append(example_from_text(text, vocab))
    return corpus


def format_example(ex: AlignedExample) -> str:
    join = lambda xs: " ".join(str(x) for x in xs)
    return f"TEXT\t{join(ex.text)}\tDUR\t{join(ex.durations)}\tSPEECH\t{join(ex.speech)}"


def save_corpus(path, corpus: Iterable[AlignedExample]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        for ex in corpus:
            fh.write(format_example(ex) + "\n")
    os.replace(tmp, path)


def _ints(field: str, lineno: int, name: str) -> list[int]:
    try:
        return [int(x) for x in field.split(" ")] if field else []
    except ValueError:
        raise CorpusError(f"line {lineno}: {name} field holds a non-integer") from None


def parse_line(line: str, lineno: int, vocab: VocabLayout) -> AlignedExample:
    parts = line.split("\t")
    if len(parts) != 6 or parts[0] != "TEXT" or parts[2] != "DUR" or parts[4] != "SPEECH":
        raise CorpusError(f"line {lineno}: expected TEXT/DUR/SPEECH tab-separated layout")
    text = _ints(parts[1], lineno, "TEXT")
    durations = _ints(parts[3], lineno, "DUR")
    speech = _ints(parts[5], lineno, "SPEECH")
    if len(durations) != len(text):
        raise CorpusError(f"line {lineno}: durations has {len(durations)} entries for {len(text)} text tokens")
    ex = AlignedExample.from_durations(text, durations, speech)
    try:
        ex.validate(vocab)
    except CorpusError as err:
        raise CorpusError(f"line {lineno}: {err}") from None
    return ex


def load_corpus(path, vocab: VocabLayout = VocabLayout()) -> list[AlignedExample]:
    corpus = []
    with open(path, encoding="ascii", newline="\n") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line:
                corpus.append(parse_line(line, lineno, vocab))
    return corpus
