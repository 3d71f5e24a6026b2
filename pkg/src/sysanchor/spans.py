"""Token-level detection of the privileged system-prompt span.

The detector walks decoded token strings: the span opens at the
delimiter token immediately before a token containing "system" and
closes at the first later token carrying an end delimiter. Bounds are
half-open, so tokens[s:e] runs from the opening delimiter through the
closing delimiter inclusive. (0, 0) means "no system prompt"; such rows
bypass the cross-attention adapters entirely.
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

CHATML = "chatml"
LLAMA3_HEADER = "llama3"

_OPENERS = {
    CHATML: "<|im_start|>",
    LLAMA3_HEADER: "<|start_header_id|>",
}
_END_MARKERS = ("<|im_end|>", "<|eot_id|>")


@dataclass(frozen=True)
class SpanBounds:
    """Half-open [s, e) token interval of the system prompt."""

    s: int
    e: int

    @property
    def length(self):
        return self.e - self.s

    def as_tuple(self):
        return (self.s, self.e)


NO_SPAN = SpanBounds(0, 0)


@dataclass(frozen=True)
class BatchBounds:
    """Per-row span bounds as a (B, 2) integer table plus the batch max length."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.ndim != 2 or rows.shape[1] != 2:
            raise ValueError(f"bounds table must be (B, 2), got {rows.shape}")
        object.__setattr__(self, "rows", rows)

    @property
    def batch_size(self):
        return self.rows.shape[0]

    @property
    def lengths(self):
        return self.rows[:, 1] - self.rows[:, 0]

    @property
    def ell_max(self):
        return int(self.lengths.max()) if self.batch_size else 0

    def row(self, b):
        return SpanBounds(int(self.rows[b, 0]), int(self.rows[b, 1]))


def detect_span(tokens, dialect=CHATML):
    """Find the system-prompt span in a sequence of decoded token strings.

    Start rule: a token containing "system" whose previous token equals
    the dialect's opening delimiter. End rule: once inside, the first
    token containing an end delimiter closes the span one past itself.
    No match, or a start without an end, yields (0, 0).
    """
    if dialect not in _OPENERS:
        raise ValueError(f"unknown dialect {dialect!r}")
    if len(tokens) == 0:
        raise ValueError("detect_span needs a nonempty token sequence")
    opener = _OPENERS[dialect]
    start = None
    for i, tok in enumerate(tokens):
        if start is None:
            if i > 0 and "system" in tok and tokens[i - 1] == opener:
                start = i - 1
        else:
            if any(marker in tok for marker in _END_MARKERS):
                return SpanBounds(start, i + 1)
    if start is not None:
        logger.warning("system span opened at %d but never closed; treating as absent", start)
    return NO_SPAN


def batch_bounds(batch, dialect=CHATML):
    """Apply detect_span to each row; cache the result for all decode steps."""
    if len(batch) < 1:
        raise ValueError("batch_bounds needs at least one row")
    rows = np.array([detect_span(row, dialect).as_tuple() for row in batch], dtype=np.int64)
    return BatchBounds(rows)


def bounds_for(spans):
    """BatchBounds from explicit (s, e) pairs, for tests and synthetic data."""
    return BatchBounds(np.array([tuple(sp) for sp in spans], dtype=np.int64).reshape(-1, 2))
