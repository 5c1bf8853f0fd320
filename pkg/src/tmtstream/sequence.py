"""Composed model-input sequences.

Every sequence has the layout::

    [text..., (EOT), D, span_1, D, span_2, ..., D, span_n, (D)]

where ``D`` is the duration placeholder. The hidden state at a ``D`` predicts
the length of the span that follows it; hidden states over a span predict its
speech tokens. Spans are numbered from 1 and stored as half-open position
ranges ``[start, stop)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .corpus import AlignedExample, VocabLayout


class SequenceError(ValueError):
    pass


class Role(enum.IntEnum):
    TEXT = 0
    EOT = 1
    DUR_PLACEHOLDER = 2
    SPEECH = 3
    MASKED_SPEECH = 4


SPAN_ROLES = (Role.SPEECH, Role.MASKED_SPEECH)
_ROLE_CODE = {Role.TEXT: "T", Role.EOT: "E", Role.DUR_PLACEHOLDER: "D",
              Role.SPEECH: "S", Role.MASKED_SPEECH: "M"}


@dataclass
class ComposedSequence:
    ids: list[int] = field(default_factory=list)
    roles: list[Role] = field(default_factory=list)
    span_index: list[int] = field(default_factory=list)
    span_bounds: list[tuple[int, int]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def copy(self) -> "ComposedSequence":
        return ComposedSequence(list(self.ids), list(self.roles), list(self.span_index),
                                list(self.span_bounds), dict(self.meta))

    @property
    def num_spans(self) -> int:
        return len(self.span_bounds)

    @property
    def text_length(self) -> int:
        return sum(1 for r in self.roles if r == Role.TEXT)

    @property
    def has_eot(self) -> bool:
        return Role.EOT in self.roles

    def ends_with_placeholder(self) -> bool:
        return bool(self.roles) and self.roles[-1] == Role.DUR_PLACEHOLDER

    def positions(self, role: Role) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    def dump(self) -> str:
        """One ``index<TAB>role<TAB>id<TAB>span`` line per position."""
        return "".join(f"{i}\t{_ROLE_CODE[r]}\t{t}\t{s}\n"
                       for i, (r, t, s) in enumerate(zip(self.roles, self.ids, self.span_index)))


@dataclass
class LossTargets:
    speech_targets: dict[int, int] = field(default_factory=dict)
    duration_targets: dict[int, int] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.speech_targets and not self.duration_targets


@dataclass
class PretrainMaskPlan:
    bpe_mask: list[int]
    frame_mask: list[int]
    masked_spans: list[int]  # 1-based span numbers J


# ------------------------------------------------------------------ composition


def _push(seq: ComposedSequence, ident: int, role: Role, span: int) -> None:
    seq.ids.append(ident)
    seq.roles.append(role)
    seq.span_index.append(span)


def compose(
    text,
    spans,
    vocab: VocabLayout,
    *,
    eot: bool = False,
    trailing_placeholder: bool = True,
) -> ComposedSequence:
    """Render a sequence from scratch.

    ``spans`` holds one entry per span: a token list (known speech) or an
    ``int`` length (fully masked span).
    """
    seq = ComposedSequence()
    for t in text:
        _push(seq, int(t), Role.TEXT, 0)
    if eot:
        _push(seq, vocab.eot, Role.EOT, 0)
    for k, span in enumerate(spans, start=1):
        _push(seq, vocab.dur, Role.DUR_PLACEHOLDER, k)
        start = len(seq)
        if isinstance(span, (int, np.integer)):
            for _ in range(int(span)):
                _push(seq, vocab.mask, Role.MASKED_SPEECH, k)
        else:
            for s in span:
                _push(seq, vocab.speech_id(int(s)), Role.SPEECH, k)
        seq.span_bounds.append((start, len(seq)))
    if trailing_placeholder:
        _push(seq, vocab.dur, Role.DUR_PLACEHOLDER, len(spans) + 1)
    return seq


def build_finetune_sequence(
    example: AlignedExample,
    n: int,
    q: int,
    vocab: VocabLayout = VocabLayout(),
    *,
    supervise_first_duration: bool = True,
    supervise_all_durations: bool = False,
) -> tuple[ComposedSequence, LossTargets]:
    """Prediction-consistent training sequence for span ``n`` with look-ahead ``q``.

    Spans ``1..n-1`` carry ground truth, span ``n`` is fully masked, and the
    trailing placeholder is supervised with the next token's duration (STOP
    when ``n`` is the last token). With ``supervise_first_duration``, the
    placeholder before span 1 is also supervised when ``n == 1``; it sees
    exactly the context of the bootstrap pass at inference.
    """
    L = len(example.text)
    if not 1 <= n <= L:
        raise SequenceError(f"n={n} outside [1, {L}]")
    if q < 0:
        raise SequenceError(f"q={q} must be >= 0")
    durations = example.durations
    l_prime = min(L, n + q)
    spans: list = [list(example.span(j)) for j in range(1, n)]
    spans.append(durations[n - 1])
    seq = compose(example.text[:l_prime], spans, vocab, eot=(n == L))
    seq.meta = dict(n=n, q=q, L=L, L_prime=l_prime, durations=durations[:n])

    targets = LossTargets()
    start, stop = seq.span_bounds[-1]
    for pos, tok in zip(range(start, stop), example.span(n)):
        targets.speech_targets[pos] = tok
    targets.duration_targets[len(seq) - 1] = durations[n] if n < L else VocabLayout.STOP
    if supervise_first_duration and n == 1:
        targets.duration_targets[seq.span_bounds[0][0] - 1] = durations[0]
    if supervise_all_durations:
        for j, (s, _) in enumerate(seq.span_bounds, start=1):
            targets.duration_targets[s - 1] = durations[j - 1]
    return seq, targets


def alternating_bpe_mask(length: int, first: int) -> list[int]:
    return [(first + i) % 2 for i in range(length)]


def build_pretrain_sequence(
    example: AlignedExample,
    rng: np.random.Generator,
    vocab: VocabLayout = VocabLayout(),
    *,
    first: int | None = None,
) -> tuple[ComposedSequence, LossTargets, PretrainMaskPlan]:
    """Masked-pretraining sequence: every other span masked, starting at random.

    ``first`` overrides the Bernoulli(0.5) draw for the first token's mask bit.
    """
    L = len(example.text)
    if L == 0:
        raise SequenceError("example has no text tokens")
    if first is None:
        first = int(rng.random() < 0.5)
    bpe = alternating_bpe_mask(L, first)
    durations = example.durations
    frame = [m for m, l in zip(bpe, durations) for _ in range(l)]
    masked = [j for j in range(1, L + 1) if bpe[j - 1]]
    spans = [durations[j - 1] if bpe[j - 1] else list(example.span(j)) for j in range(1, L + 1)]
    seq = compose(example.text, spans, vocab, eot=True, trailing_placeholder=False)
    seq.meta = dict(n=L, q=None, L=L, L_prime=L, durations=durations)

    targets = LossTargets()
    for j in masked:
        start, stop = seq.span_bounds[j - 1]
        for pos, tok in zip(range(start, stop), example.span(j)):
            targets.speech_targets[pos] = tok
        targets.duration_targets[start - 1] = durations[j - 1]
    return seq, targets, PretrainMaskPlan(bpe, frame, masked)


def build_prompt_prefix(prompt: AlignedExample | None, vocab: VocabLayout = VocabLayout()) -> ComposedSequence:
    """Prompt rendered with visible spans and no EOT or trailing placeholder."""
    if prompt is None or not prompt.text:
        return ComposedSequence(meta=dict(prompt_spans=0, prompt_text=0))
    spans = [list(prompt.span(j)) for j in range(1, len(prompt.text) + 1)]
    seq = compose(prompt.text, spans, vocab, trailing_placeholder=False)
    seq.meta = dict(prompt_spans=len(spans), prompt_text=len(prompt.text))
    return seq


# ------------------------------------------------------- incremental operations


def _text_end(seq: ComposedSequence) -> int:
    for i, r in enumerate(seq.roles):
        if r != Role.TEXT:
            return i
    return len(seq)


def _insert(seq: ComposedSequence, at: int, ids, role: Role) -> None:
    k = len(ids)
    seq.ids[at:at] = list(ids)
    seq.roles[at:at] = [role] * k
    seq.span_index[at:at] = [0] * k
    seq.span_bounds = [(a + k, b + k) for a, b in seq.span_bounds]


def insert_text(seq: ComposedSequence, tokens) -> ComposedSequence:
    """Append newly arrived text tokens to the end of the text segment."""
    if seq.has_eot:
        raise SequenceError("cannot add text after end-of-text")
    _insert(seq, _text_end(seq), [int(t) for t in tokens], Role.TEXT)
    return seq


def insert_eot(seq: ComposedSequence, vocab: VocabLayout = VocabLayout()) -> ComposedSequence:
    if not seq.has_eot:
        _insert(seq, _text_end(seq), [vocab.eot], Role.EOT)
    return seq


def build_inference_init(
    text_so_far,
    q: int,
    vocab: VocabLayout = VocabLayout(),
    *,
    end_of_text: bool = False,
    prefix: ComposedSequence | None = None,
) -> ComposedSequence:
    """First-step sequence ``[y_1..y_{1+q}, (EOT), D]`` whose placeholder predicts l_1.

    EOT is included only for a one-token sentence whose end has been
    signalled, mirroring the training rule that EOT appears when the span
    being decoded is the last one.
    """
    text = list(text_so_far)
    if not text or (len(text) < q + 1 and not end_of_text):
        raise SequenceError(f"need {q + 1} text tokens (or end-of-text), have {len(text)}")
    seq = prefix.copy() if prefix is not None else ComposedSequence()
    insert_text(seq, text[:q + 1])
    if end_of_text and len(text) == 1:
        insert_eot(seq, vocab)
    _push(seq, vocab.dur, Role.DUR_PLACEHOLDER, seq.num_spans + 1)
    return seq


def pad_seq(seq: ComposedSequence, dur: int, vocab: VocabLayout = VocabLayout()) -> ComposedSequence:
    """Open a new masked span of ``dur`` positions followed by a placeholder."""
    if dur == VocabLayout.STOP or dur < 1:
        raise SequenceError(f"cannot pad with duration class {dur}")
    if not seq.ends_with_placeholder():
        raise SequenceError("sequence must end with a duration placeholder")
    k = seq.num_spans + 1
    start = len(seq)
    for _ in range(dur):
        _push(seq, vocab.mask, Role.MASKED_SPEECH, k)
    seq.span_bounds.append((start, len(seq)))
    _push(seq, vocab.dur, Role.DUR_PLACEHOLDER, k + 1)
    return seq


def update_seq(seq: ComposedSequence, generated, vocab: VocabLayout = VocabLayout()) -> ComposedSequence:
    """Overwrite the newest masked span with generated speech tokens."""
    generated = [int(g) for g in generated]
    if not seq.span_bounds:
        if generated:
            raise SequenceError("no span to update")
        return seq
    start, stop = seq.span_bounds[-1]
    if stop - start != len(generated):
        raise SequenceError(f"span has {stop - start} positions, got {len(generated)} tokens")
    if any(seq.roles[i] != Role.MASKED_SPEECH for i in range(start, stop)):
        raise SequenceError("newest span is not masked")
    for i, g in zip(range(start, stop), generated):
        seq.ids[i] = vocab.speech_id(g)
        seq.roles[i] = Role.SPEECH
    return seq


# -------------------------------------------------------------------- checking


def check_sequence(seq: ComposedSequence, vocab: VocabLayout = VocabLayout()) -> None:
    """Raise :class:`SequenceError` unless ``seq`` is a well-formed composition."""
    n = len(seq)
    if not (len(seq.roles) == len(seq.span_index) == n):
        raise SequenceError("ids/roles/span_index lengths differ")
    i = 0
    while i < n and seq.roles[i] == Role.TEXT:
        if not 0 <= seq.ids[i] < vocab.text_vocab_size or seq.span_index[i] != 0:
            raise SequenceError(f"position {i}: bad text entry")
        i += 1
    if i < n and seq.roles[i] == Role.EOT:
        if seq.ids[i] != vocab.eot or seq.span_index[i] != 0:
            raise SequenceError(f"position {i}: bad EOT entry")
        i += 1
    k = 0
    while i < n:
        if seq.roles[i] != Role.DUR_PLACEHOLDER or seq.ids[i] != vocab.dur:
            raise SequenceError(f"position {i}: expected duration placeholder")
        if seq.span_index[i] != k + 1:
            raise SequenceError(f"position {i}: placeholder should precede span {k + 1}")
        i += 1
        if i == n:
            break
        k += 1
        if k > len(seq.span_bounds) or seq.span_bounds[k - 1][0] != i:
            raise SequenceError(f"span {k}: bounds do not start at {i}")
        stop = seq.span_bounds[k - 1][1]
        if stop <= i or stop > n:
            raise SequenceError(f"span {k}: empty or out of range")
        for j in range(i, stop):
            role, ident = seq.roles[j], seq.ids[j]
            if seq.span_index[j] != k:
                raise SequenceError(f"position {j}: span index {seq.span_index[j]} != {k}")
            if role == Role.MASKED_SPEECH and ident != vocab.mask:
                raise SequenceError(f"position {j}: masked position must carry the mask id")
            if role == Role.SPEECH and not vocab.speech_base <= ident < vocab.total_vocab:
                raise SequenceError(f"position {j}: speech id out of range")
            if role not in SPAN_ROLES:
                raise SequenceError(f"position {j}: non-speech role inside span {k}")
        i = stop
    if k != len(seq.span_bounds):
        raise SequenceError(f"{len(seq.span_bounds)} span bounds but {k} spans in layout")
