"""First-packet latency and real-time factor: closed forms and an event simulator.

Symbols: ``d_llm`` is the upstream LLM time per text token, ``d_tts`` the
time of one TTS forward (AR) or sampling iteration (NAR), ``chunk`` the
decoder chunk size, ``F`` the speech-token frame length, ``L``/``T`` the text
and speech token counts, ``b`` the NAR iteration count, ``c`` the number of
span-decoding steps before the first chunk fills, and ``q`` the look-ahead.

FPL-L counts from the moment the LLM starts producing text; FPL-A assumes the
whole text is already available, which removes the LLM term.

The simulator keeps time in integer nanoseconds so event order is exact.
"""

from __future__ import annotations

import csv
import enum
import heapq
import statistics
from dataclasses import dataclass, field, replace
from typing import Sequence

NS = 1_000_000_000
COSYVOICE2_TEXT_GROUP = 5
COSYVOICE2_SPEECH_GROUP = 15


class LatencyError(ValueError):
    pass


class ModelClass(str, enum.Enum):
    COSYVOICE = "cosyvoice"
    VALLE = "valle"
    COSYVOICE2 = "cosyvoice2"
    MASKGCT = "maskgct"
    F5TTS = "f5tts"
    TMT = "tmt"

    @property
    def family(self) -> str:
        if self in (ModelClass.COSYVOICE, ModelClass.VALLE):
            return "ar"
        if self is ModelClass.COSYVOICE2:
            return "interleaved"
        if self in (ModelClass.MASKGCT, ModelClass.F5TTS):
            return "nar"
        return "tmt"


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS))


@dataclass(frozen=True)
class LatencyParams:
    d_llm: float
    d_tts: float
    chunk: int = 15
    F: float = 0.040
    L: int | None = None
    T: int | None = None
    b: int | None = None
    c: int | None = None
    q: int | None = None

    def __post_init__(self):
        if self.d_llm <= 0 or self.d_tts <= 0 or self.F <= 0:
            raise LatencyError("d_llm, d_tts and F must be > 0")
        if self.chunk < 1:
            raise LatencyError("chunk must be >= 1")
        for name in ("L", "T", "b", "c"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise LatencyError(f"{name} must be >= 1")
        if self.q is not None and self.q < 0:
            raise LatencyError("q must be >= 0")

    @classmethod
    def from_ms(cls, d_llm_ms: float, d_tts_ms: float, **kw) -> "LatencyParams":
        return cls(d_llm=d_llm_ms / 1000.0, d_tts=d_tts_ms / 1000.0, **kw)

    def need(self, *names: str) -> None:
        for n in names:
            if getattr(self, n) is None:
                raise LatencyError(f"missing parameter {n}")


def _check_mode(mode: str) -> None:
    if mode not in ("A", "L"):
        raise LatencyError(f"mode must be 'A' or 'L', got {mode!r}")


def analytic_fpl_ns(model: ModelClass | str, p: LatencyParams, mode: str = "L") -> int:
    model = ModelClass(model)
    _check_mode(mode)
    llm, tts = to_ns(p.d_llm), to_ns(p.d_tts)
    fam = model.family
    if fam == "ar":
        p.need("L")
        text_tokens, steps = p.L, p.chunk if p.T is None else min(p.chunk, p.T)
    elif fam == "interleaved":
        if p.chunk > COSYVOICE2_SPEECH_GROUP:
            raise LatencyError(f"chunk {p.chunk} exceeds the interleave group of {COSYVOICE2_SPEECH_GROUP}")
        text_tokens = COSYVOICE2_TEXT_GROUP if p.L is None else min(COSYVOICE2_TEXT_GROUP, p.L)
        steps = p.chunk if p.T is None else min(p.chunk, p.T)
    elif fam == "nar":
        p.need("L", "b")
        text_tokens, steps = p.L, p.b
    else:
        p.need("c", "q")
        text_tokens = p.q + 1 if p.L is None else min(p.q + 1, p.L)
        steps = p.c
    return (text_tokens * llm if mode == "L" else 0) + steps * tts


def analytic_fpl(model: ModelClass | str, p: LatencyParams, mode: str = "L") -> float:
    """First-packet latency in seconds."""
    return analytic_fpl_ns(model, p, mode) / NS


def analytic_rtf(p: LatencyParams, model: ModelClass | str = ModelClass.TMT) -> float:
    """Generation time over generated audio duration.

    One pass per text token plus the bootstrap pass for the span decoder;
    one pass per speech token for the autoregressive classes; ``b`` passes
    for the NAR classes.
    """
    model = ModelClass(model)
    p.need("T")
    fam = model.family
    if fam == "tmt":
        p.need("L")
        passes = p.L + 1
    elif fam == "nar":
        p.need("b")
        passes = p.b
    else:
        passes = p.T
    return passes * p.d_tts / (p.T * p.F)


def first_chunk_spans(spans: Sequence[int], chunk: int) -> int:
    """Number of spans decoded when the generated total first reaches ``chunk``."""
    total = 0
    for i, s in enumerate(spans, start=1):
        total += s
        if total >= chunk:
            return i
    return len(spans)


# ------------------------------------------------------------------ simulator


@dataclass
class SimResult:
    model: ModelClass
    events: list[tuple[int, str, str]]
    fpl_a_ns: int
    fpl_l_ns: int
    rtf: float
    c: int | None = None

    @property
    def fpl_a(self) -> float:
        return self.fpl_a_ns / NS

    @property
    def fpl_l(self) -> float:
        return self.fpl_l_ns / NS


class _Timeline:
    def __init__(self):
        self.heap: list[tuple[int, int, str, str]] = []
        self.seq = 0

    def post(self, t: int, actor: str, event: str) -> None:
        heapq.heappush(self.heap, (t, self.seq, actor, event))
        self.seq += 1

    def drain(self) -> list[tuple[int, str, str]]:
        out = []
        while self.heap:
            t, _, actor, event = heapq.heappop(self.heap)
            out.append((t, actor, event))
        return out


def _run(model: ModelClass, p: LatencyParams, spans: Sequence[int] | None, text_streaming: bool,
         count_bootstrap: bool, arrival_gated: bool) -> tuple[list, int, int, int | None]:
    """Simulate one scenario. Returns (events, first_packet_ns, busy_ns, c)."""
    tl = _Timeline()
    llm, tts = to_ns(p.d_llm), to_ns(p.d_tts)
    L = len(spans) if spans is not None else p.L
    arrival = [(i * llm if text_streaming else 0) for i in range(1, L + 1)]
    for i, t in enumerate(arrival, start=1):
        tl.post(t, "llm", f"token {i}")

    def text_ready(count: int) -> int:
        return arrival[min(count, L) - 1]

    fam = model.family
    clock = 0
    produced = 0
    first_packet = None
    busy = 0
    c = None

    def produce(t: int, n: int) -> None:
        nonlocal produced, first_packet
        produced += n
        if first_packet is None and produced >= min(p.chunk, total_speech):
            first_packet = t
            tl.post(t, "decoder", f"first packet ({produced} tokens)")

    if fam in ("ar", "interleaved"):
        p.need("T")
        total_speech = p.T
        if fam == "ar":
            clock = text_ready(L)
            for s in range(p.T):
                clock += tts
                busy += tts
                tl.post(clock, "tts", f"speech token {s + 1}")
                produce(clock, 1)
        else:
            group = 0
            while produced < p.T:
                group += 1
                clock = max(clock, text_ready(COSYVOICE2_TEXT_GROUP * group))
                last_group = COSYVOICE2_TEXT_GROUP * group >= L
                n = p.T - produced if last_group else min(COSYVOICE2_SPEECH_GROUP, p.T - produced)
                for _ in range(n):
                    clock += tts
                    busy += tts
                    tl.post(clock, "tts", f"speech token {produced + 1}")
                    produce(clock, 1)
    elif fam == "nar":
        p.need("T", "b")
        total_speech = p.T
        clock = text_ready(L)
        for i in range(p.b):
            clock += tts
            busy += tts
            tl.post(clock, "tts", f"sampling step {i + 1}")
        produce(clock, p.T)
    else:
        p.need("q")
        if not spans:
            raise LatencyError("span trace is empty")
        if any(s < 1 for s in spans):
            raise LatencyError("span lengths must be positive")
        total_speech = sum(spans)
        clock = text_ready(p.q + 1)
        busy += tts
        if count_bootstrap:
            clock += tts
        tl.post(clock, "tts", "bootstrap duration")
        for k, s in enumerate(spans, start=1):
            if arrival_gated:
                clock = max(clock, text_ready(k + p.q))
            clock += tts
            busy += tts
            tl.post(clock, "tts", f"span {k} ({s} tokens)")
            before = first_packet
            produce(clock, s)
            if before is None and first_packet is not None:
                c = k
    return tl.drain(), first_packet, busy, c


def simulate_pipeline(model: ModelClass | str, p: LatencyParams, trace: Sequence[int] | None = None,
                      *, count_bootstrap: bool = False, arrival_gated: bool = False) -> SimResult:
    """Discrete-event run of LLM -> TTS -> chunk decoder for one utterance.

    ``trace`` holds per-text-token span lengths (required for ``tmt``; for the
    other classes it only supplies ``L`` and ``T``). By default the span
    decoder's bootstrap pass is left out of the first-packet timeline and
    later spans do not wait for their look-ahead tokens, which are the
    assumptions behind the closed form; both can be switched on.
    """
    model = ModelClass(model)
    if trace is not None:
        trace = [int(x) for x in trace]
        if not trace:
            raise LatencyError("span trace is empty")
        p = replace(p, L=len(trace), T=sum(trace))
    elif model is ModelClass.TMT:
        raise LatencyError("span trace is empty")
    spans = trace if model is ModelClass.TMT else None
    ev_l, fpl_l, busy, c = _run(model, p, spans, True, count_bootstrap, arrival_gated)
    _, fpl_a, _, _ = _run(model, p, spans, False, count_bootstrap, arrival_gated)
    return SimResult(model, ev_l, fpl_a, fpl_l, busy / (p.T * to_ns(p.F)), c)


# ------------------------------------------------------------------- outputs


RESULTS_HEADER = ["model", "mode", "d_llm_ms", "d_tts_ms", "L", "T", "b", "c", "q", "fpl_ms", "rtf"]


def result_rows(model: ModelClass | str, p: LatencyParams, fpl_a_s: float, fpl_l_s: float,
                rtf: float | None) -> list[list]:
    model = ModelClass(model)
    fmt = lambda v: "" if v is None else v
    rows = []
    for mode, fpl in (("A", fpl_a_s), ("L", fpl_l_s)):
        rows.append([model.value, mode, f"{p.d_llm * 1000:g}", f"{p.d_tts * 1000:g}", fmt(p.L),
                     fmt(p.T), fmt(p.b), fmt(p.c), fmt(p.q), f"{fpl * 1000:.6f}",
                     "" if rtf is None else f"{rtf:.8f}"])
    return rows


def write_results(path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        w.writerows(rows)


def write_events(path, events: list[tuple[int, str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ns", "actor", "event"])
        w.writerows(events)


def measured_d_tts(forward_times: Sequence[float], warmup: int = 2) -> float:
    """Median forward time after discarding the first ``warmup`` passes."""
    warm = list(forward_times[warmup:]) or list(forward_times)
    if not warm:
        raise LatencyError("no forward timings recorded")
    return statistics.median(warm)
