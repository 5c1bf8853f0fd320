import numpy as np
import pytest
from hypothesis import strategies as st

from tmtstream.corpus import AlignedExample, VocabLayout

VOCAB = VocabLayout()


def random_example(rng: np.random.Generator, max_len: int = 8, max_span: int = 6) -> AlignedExample:
    L = int(rng.integers(1, max_len + 1))
    text = rng.integers(0, VOCAB.text_vocab_size, size=L).tolist()
    durations = rng.integers(1, max_span + 1, size=L).tolist()
    speech = rng.integers(0, VOCAB.speech_vocab_size, size=sum(durations)).tolist()
    return AlignedExample.from_durations(text, durations, speech)


@st.composite
def aligned_examples(draw, max_len: int = 8, max_span: int = 6):
    L = draw(st.integers(1, max_len))
    text = draw(st.lists(st.integers(0, VOCAB.text_vocab_size - 1), min_size=L, max_size=L))
    durations = draw(st.lists(st.integers(1, max_span), min_size=L, max_size=L))
    speech = draw(st.lists(st.integers(0, VOCAB.speech_vocab_size - 1),
                           min_size=sum(durations), max_size=sum(durations)))
    return AlignedExample.from_durations(text, durations, speech)


@pytest.fixture
def vocab():
    return VOCAB


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store one pass/fail line per acceptance criterion for the terminal summary."""
    def _record(number: int, ok: bool, detail: str) -> bool:
        prev = ACCEPTANCE.get(number)
        if prev is not None:
            ok, detail = ok and prev[0], f"{prev[1]}; {detail}"
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
