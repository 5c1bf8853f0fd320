"""Attention allow-matrices.

``allow[i, j]`` is true when position ``i`` may attend to position ``j``.
Text, EOT and placeholder rows are causal. A row inside span ``k`` sees
everything up to the end of span ``k``, so positions of one span attend to
each other in both directions.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .sequence import SPAN_ROLES, Role


class MaskError(ValueError):
    pass


def _row_limits(roles, span_index, span_bounds) -> np.ndarray:
    """Last visible column (inclusive) for every row."""
    n = len(roles)
    if len(span_index) != n:
        raise MaskError(f"roles ({n}) and span_index ({len(span_index)}) differ in length")
    limits = np.arange(n)
    covered = np.zeros(n, dtype=bool)
    for k, (start, stop) in enumerate(span_bounds, start=1):
        if not 0 <= start < stop <= n:
            raise MaskError(f"span {k}: bounds ({start}, {stop}) outside sequence of length {n}")
        for i in range(start, stop):
            if roles[i] not in SPAN_ROLES or span_index[i] != k:
                raise MaskError(f"position {i}: role/span metadata disagree with span {k}")
        limits[start:stop] = stop - 1
        covered[start:stop] = True
    for i, r in enumerate(roles):
        if r in SPAN_ROLES and not covered[i]:
            raise MaskError(f"position {i}: speech role outside every span")
    return limits


def build_designed_mask(roles, span_index, span_bounds) -> np.ndarray:
    limits = _row_limits(roles, span_index, span_bounds)
    n = len(roles)
    return np.arange(n)[None, :] <= limits[:, None]


def build_causal_mask(length: int) -> np.ndarray:
    if length < 1:
        raise MaskError("length must be >= 1")
    return np.tril(np.ones((length, length), dtype=bool))


def oracle_mask(roles, span_index, span_bounds) -> np.ndarray:
    """Pair-by-pair reference for :func:`build_designed_mask`."""
    n = len(roles)
    allow = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if roles[i] in (Role.TEXT, Role.EOT, Role.DUR_PLACEHOLDER):
                allow[i, j] = j <= i
            else:
                end = None
                for start, stop in span_bounds:
                    if start <= i < stop:
                        end = stop - 1
                allow[i, j] = end is not None and j <= end
    return allow


def mask_for(seq, designed: bool = True) -> np.ndarray:
    if designed:
        return build_designed_mask(seq.roles, seq.span_index, seq.span_bounds)
    return build_causal_mask(len(seq))


def format_mask(allow: np.ndarray) -> str:
    rows = ["".join("1" if v else "0" for v in row) for row in allow]
    return f"{allow.shape[0]}\n" + "".join(r + "\n" for r in rows)


def write_mask(path, allow: np.ndarray) -> None:
    Path(path).write_text(format_mask(allow), encoding="ascii")


def read_mask(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="ascii").split("\n")
    n = int(lines[0])
    rows = lines[1:n + 1]
    if len(rows) != n or any(len(r) != n or set(r) - {"0", "1"} for r in rows):
        raise MaskError(f"{path}: malformed {n}x{n} mask")
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool)
