"""Series representation, PAA/iSAX summarization, breakpoints and distances."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from . import kernels
from .errors import ConfigurationError, UsageError

MAX_SUPPORTED_BITS = 16


class _Abandoned:
    """Sentinel returned by :func:`euclidean_distance` when it gives up early."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABANDONED"

    def __bool__(self) -> bool:
        return False


ABANDONED = _Abandoned()


def znormalize(series) -> np.ndarray:
    """Rescale to zero mean and unit population standard deviation.

    Series whose standard deviation is below 1e-12 map to all zeros.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise UsageError("cannot normalize an empty series")
    std = x.std()
    if std < 1e-12:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def check_segments(n: int, w: int) -> None:
    if w <= 0 or n <= 0:
        raise ConfigurationError(f"series length ({n}) and segment count ({w}) must be positive")
    if n % w:
        raise ConfigurationError(f"segment count {w} does not divide series length {n}")


@dataclass(frozen=True)
class PaaSummary:
    means: np.ndarray

    @property
    def w(self) -> int:
        return len(self.means)


def paa(series, w: int) -> PaaSummary:
    """Mean of each of ``w`` equal-length consecutive segments."""
    x = np.asarray(series)
    check_segments(x.shape[0], w)
    means = np.empty(w, dtype=np.float64)
    kernels.paa_row(x, w, means)
    return PaaSummary(means)


class BreakpointTable:
    """Equiprobable standard-normal breakpoints for every cardinality up to ``max_bits``.

    The table for ``b`` bits holds ``Phi^-1(k / 2^b)`` for ``k = 1 .. 2^b - 1``.
    Values are mirrored from the lower half so symmetry about zero is exact,
    and coarser tables are read off the finest one, which makes nesting exact.
    """

    def __init__(self, max_bits: int = 8):
        if not 1 <= max_bits <= MAX_SUPPORTED_BITS:
            raise ConfigurationError(f"max_bits must be in [1, {MAX_SUPPORTED_BITS}], got {max_bits}")
        self.max_bits = max_bits
        size = 1 << max_bits
        half = size // 2
        k = np.arange(1, half, dtype=np.float64)
        lower = ndtri(k / size)
        finest = np.empty(size - 1, dtype=np.float64)
        finest[: half - 1] = lower
        finest[half - 1] = 0.0
        finest[half:] = -lower[::-1]
        self.finest = finest
        # region r at max_bits is [extended[r], extended[r + 1]]
        self.extended = np.concatenate(([-np.inf], finest, [np.inf]))

    def for_bits(self, bits: int) -> np.ndarray:
        if not 1 <= bits <= self.max_bits:
            raise UsageError(f"bit count {bits} outside [1, {self.max_bits}]")
        step = 1 << (self.max_bits - bits)
        return self.finest[step - 1 :: step]

    def region(self, symbol: int, bits: int) -> tuple[float, float]:
        """Value interval ``(lo, hi)`` covered by ``symbol`` at ``bits`` bits."""
        shift = self.max_bits - bits
        return float(self.extended[symbol << shift]), float(self.extended[(symbol + 1) << shift])

    def digest(self) -> bytes:
        return hashlib.sha256(self.finest.astype("<f8").tobytes()).digest()


@lru_cache(maxsize=None)
def build_breakpoints(max_bits: int = 8) -> BreakpointTable:
    return BreakpointTable(max_bits)


@dataclass(frozen=True)
class IsaxWord:
    """Per-segment symbols with their own bit counts (variable cardinality)."""

    symbols: tuple[int, ...]
    bits: tuple[int, ...]
    max_bits: int = 8

    def __post_init__(self):
        if len(self.symbols) != len(self.bits):
            raise UsageError("symbols and bits differ in length")
        for s, b in zip(self.symbols, self.bits):
            if not 1 <= b <= self.max_bits:
                raise UsageError(f"bit count {b} outside [1, {self.max_bits}]")
            if not 0 <= s < (1 << b):
                raise UsageError(f"symbol {s} does not fit in {b} bits")

    @property
    def w(self) -> int:
        return len(self.symbols)

    def truncate(self, bits: Sequence[int]) -> IsaxWord:
        """Same word at lower cardinality (keeps the top bits of each symbol)."""
        syms = []
        for s, have, want in zip(self.symbols, self.bits, bits):
            if want > have:
                raise UsageError("cannot raise cardinality by truncation")
            syms.append(s >> (have - want))
        return IsaxWord(tuple(syms), tuple(bits), self.max_bits)

    def root_key(self) -> int:
        """Integer of the first bit of every segment, segment 0 most significant."""
        key = 0
        for s, b in zip(self.symbols, self.bits):
            key = (key << 1) | ((s >> (b - 1)) & 1)
        return key

    def __str__(self) -> str:
        return " ".join(f"{s:0{b}b}_{b}" for s, b in zip(self.symbols, self.bits))


def isax_from_paa(summary: PaaSummary, bits_per_segment: Sequence[int], table: BreakpointTable) -> IsaxWord:
    """Region index of each segment mean; a mean on a breakpoint belongs to the region above."""
    if len(bits_per_segment) != summary.w:
        raise UsageError("one bit count per segment is required")
    symbols = []
    for m, b in zip(summary.means, bits_per_segment):
        bp = table.for_bits(b)
        symbols.append(int(np.searchsorted(bp, m, side="right")))
    return IsaxWord(tuple(symbols), tuple(int(b) for b in bits_per_segment), table.max_bits)


def promote_cardinality_check(low: IsaxWord, high: IsaxWord) -> bool:
    """True iff ``low`` is a bitwise prefix of ``high`` on every segment."""
    if low.w != high.w:
        raise UsageError("words have different segment counts")
    for ls, lb, hs, hb in zip(low.symbols, low.bits, high.symbols, high.bits):
        if lb > hb:
            raise UsageError("low word has more bits than high word")
        if hs >> (hb - lb) != ls:
            return False
    return True


def euclidean_distance(a, b, abandon_at: float | None = None):
    """Euclidean distance, or :data:`ABANDONED` once the partial sum exceeds ``abandon_at**2``."""
    x = np.asarray(a)
    y = np.asarray(b)
    if x.shape != y.shape:
        raise UsageError(f"length mismatch: {x.shape} vs {y.shape}")
    limit = math.inf if abandon_at is None else float(abandon_at) ** 2
    sq = kernels.ed_sq_abandon(x, y, limit)
    if sq < 0.0:
        return ABANDONED
    return math.sqrt(sq)


def lower_bound_distance(query_paa: PaaSummary, word: IsaxWord, table: BreakpointTable, n: int) -> float:
    """Admissible lower bound on the ED between the query and any series summarized by ``word``."""
    if query_paa.w != word.w:
        raise UsageError("query PAA and word differ in segment count")
    acc = 0.0
    for m, s, b in zip(query_paa.means, word.symbols, word.bits):
        lo, hi = table.region(s, b)
        d = max(0.0, lo - m, m - hi)
        acc += d * d
    return math.sqrt(n / word.w * acc)
