"""Streaming synthesis session.

Text tokens are fed one at a time. Once enough look-ahead has arrived, each
span is decoded in a single forward pass that also predicts the next span's
length; the very first length needs one extra bootstrap pass. Generated
speech tokens are cut into fixed-size chunks and handed to a mock decoder.

The reference path recomputes the whole sequence every step (no key/value
cache), so :func:`offline_decode`, which rebuilds each step's sequence from
scratch, must agree with the session token for token under greedy decoding.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import AlignedExample, VocabLayout
from .masks import mask_for
from .model import ModelConfig, duration_logits, hidden_states, speech_logits
from .sequence import (ComposedSequence, build_inference_init, build_prompt_prefix,
                       compose, insert_eot, insert_text, pad_seq, update_seq)

END_OF_TEXT = None


class SessionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SessionConfig:
    q: int = 1
    chunk_size: int = 15
    duration_topk: int = 3
    duration_modulation: float = 1.0
    speech_sampling: str = "greedy"
    speech_topk: int = 3
    seed: int = 0
    use_designed_mask: bool = True
    samples_per_token: int = 640

    def __post_init__(self):
        if self.chunk_size < 1:
            raise SessionError("chunk_size must be >= 1")
        if self.duration_modulation <= 0:
            raise SessionError("duration_modulation must be > 0")
        if self.duration_topk < 1:
            raise SessionError("duration_topk must be >= 1")
        if self.speech_sampling not in ("greedy", "topk"):
            raise SessionError(f"unknown speech sampling policy {self.speech_sampling!r}")
        if self.q < 0:
            raise SessionError("q must be >= 0")


@dataclass
class AudioChunk:
    samples: np.ndarray
    token_range: tuple[int, int]
    index: int


# ------------------------------------------------------------------- sampling


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_duration(logits_row, topk: int, r: float, rng: np.random.Generator,
                    allow_stop: bool = True) -> int:
    """Top-k sample a duration class, then scale non-STOP classes by ``r``.

    Scaled values are rounded half-up and clamped to ``[1, max class]``.
    """
    logits = np.array(logits_row, dtype=np.float64)
    if not allow_stop:
        logits[VocabLayout.STOP] = -np.inf
    order = np.argsort(-logits, kind="stable")
    k = min(topk, int(np.isfinite(logits).sum()))
    if k <= 1:
        cls = int(order[0])
    else:
        top = logits[order[:k]]
        p = np.exp(top - top.max())
        cls = int(order[rng.choice(k, p=p / p.sum())])
    if cls == VocabLayout.STOP:
        return cls
    return min(max(round_half_up(r * cls), 1), len(logits) - 1)


def sample_speech(logits_rows, policy: str = "greedy", rng: np.random.Generator | None = None,
                  topk: int = 1) -> list[int]:
    rows = np.asarray(logits_rows, dtype=np.float64)
    if policy == "greedy" or topk <= 1:
        return [int(i) for i in rows.argmax(axis=1)]
    out = []
    for row in rows:
        order = np.argsort(-row, kind="stable")[:topk]
        p = np.exp(row[order] - row[order].max())
        out.append(int(order[rng.choice(len(order), p=p / p.sum())]))
    return out


def mock_decode(tokens: Sequence[int], chunk_index: int, speech_vocab: int,
                samples_per_token: int, start: int = 0) -> AudioChunk:
    """Token ``k`` becomes ``samples_per_token`` copies of ``(k + 1) / V_s``."""
    if not tokens:
        raise SessionError("mock_decode needs at least one token")
    values = (np.asarray(tokens, dtype=np.float64) + 1.0) / speech_vocab
    return AudioChunk(np.repeat(values, samples_per_token), (start, start + len(tokens)), chunk_index)


# -------------------------------------------------------------------- session


TRACE_HEADER = ["step", "event", "tokens_in", "span_len", "cum_speech_tokens", "wall_ms"]


class StreamSession:
    """One dual-stream synthesis session over read-only parameters."""

    def __init__(self, params, model_config: ModelConfig, config: SessionConfig = SessionConfig(),
                 vocab: VocabLayout = VocabLayout(), prompt: AlignedExample | None = None):
        self.params = params
        self.model_config = model_config
        self.config = config
        self.vocab = vocab
        self.rng = np.random.default_rng(config.seed)
        self.prompt = prompt
        self.seq: ComposedSequence = build_prompt_prefix(prompt, vocab)
        self.text: list[int] = []
        self.text_in_seq = 0
        self.end_of_text = False
        self.closed = False
        self.spans_done = 0
        self.pre_dur: int | None = None
        self.speech: list[int] = []
        self.emitted = 0
        self.chunks_emitted = 0
        self.forward_count = 0
        self.forward_times: list[float] = []
        self.trace: list[list] = []
        self.stop_sampled = False
        self._t0 = time.perf_counter()
        self._step = 0

    # -- bookkeeping

    def _log(self, event: str, span_len: int = 0) -> None:
        self.trace.append([self._step, event, len(self.text), span_len, len(self.speech),
                           round((time.perf_counter() - self._t0) * 1000.0, 3)])

    def _forward(self, span_len: int = 0):
        t = time.perf_counter()
        seq = self.seq
        allow = mask_for(seq, self.config.use_designed_mask)
        h = hidden_states(self.params, self.model_config, np.asarray(seq.ids)[None, :], allow[None])
        self.forward_count += 1
        self.forward_times.append(time.perf_counter() - t)
        self._step += 1
        self._log("forward", span_len)
        return h

    def _emit_ready(self, flush: bool = False) -> list[AudioChunk]:
        out = []
        size = self.config.chunk_size
        while len(self.speech) - self.emitted >= size or (flush and len(self.speech) > self.emitted):
            stop = min(self.emitted + size, len(self.speech))
            chunk = mock_decode(self.speech[self.emitted:stop], self.chunks_emitted,
                                self.vocab.speech_vocab_size, self.config.samples_per_token,
                                start=self.emitted)
            self.emitted = stop
            self.chunks_emitted += 1
            self._log("emit", chunk.token_range[1] - chunk.token_range[0])
            out.append(chunk)
        return out

    # -- decoding

    def _bootstrap(self) -> None:
        self.seq = build_inference_init(self.text, self.config.q, self.vocab,
                                        end_of_text=self.end_of_text, prefix=self.seq)
        self.text_in_seq = min(len(self.text), self.config.q + 1)
        h = self._forward()
        row = duration_logits(self.params, h).data[-1]
        dur = sample_duration(row, self.config.duration_topk, self.config.duration_modulation,
                              self.rng, allow_stop=False)
        pad_seq(self.seq, dur, self.vocab)
        self.pre_dur = dur

    def _decode_span(self, k: int) -> bool:
        """Decode live span ``k``; returns True when the session finished."""
        want = min(len(self.text), k + self.config.q)
        if want > self.text_in_seq:
            insert_text(self.seq, self.text[self.text_in_seq:want])
            self.text_in_seq = want
        final = self.end_of_text and k == len(self.text)
        if final:
            insert_eot(self.seq, self.vocab)
        h = self._forward(self.pre_dur)
        start, stop = self.seq.span_bounds[-1]
        tokens = sample_speech(speech_logits(self.params, h).data[start:stop],
                               self.config.speech_sampling, self.rng, self.config.speech_topk)
        dur = sample_duration(duration_logits(self.params, h).data[-1], self.config.duration_topk,
                              self.config.duration_modulation, self.rng, allow_stop=final)
        update_seq(self.seq, tokens, self.vocab)
        self.speech.extend(tokens)
        self.spans_done = k
        if final:
            self.stop_sampled = dur == VocabLayout.STOP
            return True
        pad_seq(self.seq, dur, self.vocab)
        self.pre_dur = dur
        return False

    def _drop_pending_span(self) -> None:
        start, _ = self.seq.span_bounds.pop()
        del self.seq.ids[start:], self.seq.roles[start:], self.seq.span_index[start:]

    def _close(self) -> list[AudioChunk]:
        self.closed = True
        if self.text and self.ended_cleanly():
            insert_eot(self.seq, self.vocab)
        chunks = self._emit_ready(flush=True)
        self._log("stop")
        return chunks

    def feed(self, token) -> list[AudioChunk]:
        """Accept one text token (or :data:`END_OF_TEXT`) and run every decode step it unlocks."""
        if self.closed:
            raise SessionError("session is closed")
        if token is END_OF_TEXT:
            self.end_of_text = True
        else:
            token = int(token)
            if self.end_of_text:
                raise SessionError("token fed after end-of-text")
            if not 0 <= token < self.vocab.text_vocab_size:
                raise SessionError(f"text token {token} outside [0, {self.vocab.text_vocab_size})")
            self.text.append(token)
        self._log("feed")
        chunks: list[AudioChunk] = []
        q = self.config.q
        while not self.closed:
            k = self.spans_done + 1
            if k > len(self.text):
                if self.end_of_text:
                    if len(self.seq.span_bounds) > self._prompt_spans() + self.spans_done:
                        # q = 0: a span was opened for a token that never arrived
                        self._drop_pending_span()
                    chunks += self._close()
                break
            if len(self.text) < k + q and not self.end_of_text:
                break
            if self.pre_dur is None:
                self._bootstrap()
            done = self._decode_span(k)
            chunks += self._emit_ready()
            if done:
                chunks += self._close()
        return chunks

    def ended_cleanly(self) -> bool:
        return self.end_of_text and self.spans_done == len(self.text)

    def _prompt_spans(self) -> int:
        return len(self.prompt.text) if self.prompt is not None else 0

    def finish(self) -> list[AudioChunk]:
        return [] if self.closed else self.feed(END_OF_TEXT)

    def spans(self) -> list[list[int]]:
        """Generated speech tokens grouped per live span."""
        first = self._prompt_spans()
        return [[self.seq.ids[i] - self.vocab.speech_base for i in range(a, b)]
                for a, b in self.seq.span_bounds[first:first + self.spans_done]]

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            w.writerows(self.trace)


def open_session(params, model_config: ModelConfig, config: SessionConfig = SessionConfig(),
                 vocab: VocabLayout = VocabLayout(), prompt: AlignedExample | None = None) -> StreamSession:
    return StreamSession(params, model_config, config, vocab, prompt)


def feed_token(session: StreamSession, token) -> list[AudioChunk]:
    return session.feed(token)


def synthesize(session: StreamSession, tokens: Iterable[int], interval_s: float = 0.0) -> list[AudioChunk]:
    """Feed a whole token stream, optionally sleeping ``interval_s`` between arrivals."""
    chunks = []
    for i, tok in enumerate(tokens):
        if interval_s and i:
            time.sleep(interval_s)
        chunks += session.feed(tok)
    return chunks + session.finish()


def write_audio(path, chunks: Iterable[AudioChunk]) -> int:
    """Append chunk samples as raw little-endian float64; returns the sample count."""
    count = 0
    with open(path, "wb") as fh:
        for c in chunks:
            fh.write(np.ascontiguousarray(c.samples, dtype="<f8").tobytes())
            count += len(c.samples)
    return count


# ------------------------------------------------------------ offline reference


def offline_decode(params, model_config: ModelConfig, text: Sequence[int],
                   config: SessionConfig = SessionConfig(), vocab: VocabLayout = VocabLayout(),
                   prompt: AlignedExample | None = None) -> tuple[list[list[int]], int]:
    """Decode a complete text by rebuilding each step's sequence from scratch.

    Returns the generated spans and the number of forward passes.
    """
    rng = np.random.default_rng(config.seed)
    L, q = len(text), config.q
    p_text = list(prompt.text) if prompt is not None else []
    p_spans = [list(prompt.span(j)) for j in range(1, len(p_text) + 1)]
    forwards = 0

    def run(seq):
        nonlocal forwards
        forwards += 1
        allow = mask_for(seq, config.use_designed_mask)
        return hidden_states(params, model_config, np.asarray(seq.ids)[None, :], allow[None])

    seq = compose(p_text + list(text[:min(L, 1 + q)]), p_spans, vocab, eot=(L == 1))
    dur = sample_duration(duration_logits(params, run(seq)).data[-1], config.duration_topk,
                          config.duration_modulation, rng, allow_stop=False)
    spans: list[list[int]] = []
    for k in range(1, L + 1):
        seq = compose(p_text + list(text[:min(L, k + q)]), p_spans + spans + [dur], vocab, eot=(k == L))
        h = run(seq)
        start, stop = seq.span_bounds[-1]
        tokens = sample_speech(speech_logits(params, h).data[start:stop], config.speech_sampling,
                               rng, config.speech_topk)
        dur = sample_duration(duration_logits(params, h).data[-1], config.duration_topk,
                              config.duration_modulation, rng, allow_stop=(k == L))
        spans.append(tokens)
    return spans, forwards
