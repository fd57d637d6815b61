"""
CAM Markov Source Model
=======================

Domain types for m-th order Markov source models of CAM traffic and the
alphabet index arithmetic that maps a symbol n onto a (size, interval) pair:

    i = ((n - 1) % |S|) + 1        size index
    j = floor((n - 1) / |S|) + 1   interval index
    n = (j - 1) * |S| + i          inverse

Symbols, size indices and interval indices are 1-based everywhere.
Contexts are tuples of m symbols ordered oldest -> newest.

All types are immutable after construction.
"""

import bisect
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import DEFAULT_INTERVALS_MS, DEFAULT_QUANTUM_MS, get_preset
from errors import EmptyModelError, ModelValidationError, SymbolIndexError

logger = logging.getLogger(__name__)

Context = Tuple[int, ...]

# In-memory tables accept float rounding noise only
EXACT_TOLERANCE = 1e-6


class ModelMode(str, Enum):
    """Which alphabet a model is defined over."""
    COMPLETE = "complete"       # A = S x G
    SIZE_ONLY = "size"          # A = S
    INTERVAL_ONLY = "interval"  # A = G

    @classmethod
    def parse(cls, value) -> "ModelMode":
        if isinstance(value, ModelMode):
            return value
        aliases = {
            "complete": cls.COMPLETE,
            "size": cls.SIZE_ONLY,
            "sizeonly": cls.SIZE_ONLY,
            "size_only": cls.SIZE_ONLY,
            "interval": cls.INTERVAL_ONLY,
            "intervalonly": cls.INTERVAL_ONLY,
            "interval_only": cls.INTERVAL_ONLY,
        }
        key = str(value).strip().lower()
        if key not in aliases:
            raise ModelValidationError(f"Invalid mode '{value}'. Choose from: complete, size, interval")
        return aliases[key]


@dataclass(frozen=True)
class SizeSet:
    """Ordered set S of CAM sizes in bytes."""
    sizes: Tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ModelValidationError("Size set S must contain at least one size")
        if any(s < 1 for s in sizes):
            raise ModelValidationError(f"CAM sizes must be >= 1 byte, got {sizes}")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ModelValidationError(f"Size set must be strictly increasing, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    def __len__(self) -> int:
        return len(self.sizes)

    def value(self, i: int) -> int:
        """Size in bytes for 1-based index i."""
        if not 1 <= i <= len(self.sizes):
            raise SymbolIndexError(f"Size index {i} out of range 1..{len(self.sizes)}")
        return self.sizes[i - 1]

    def snap(self, size_bytes: float, tolerance_bytes: float) -> Optional[int]:
        """1-based index of the nearest size within tolerance, or None."""
        pos = bisect.bisect_left(self.sizes, size_bytes)
        candidates = [k for k in (pos - 1, pos) if 0 <= k < len(self.sizes)]
        # ties go to the smaller size
        best = min(candidates, key=lambda k: (abs(self.sizes[k] - size_bytes), k))
        if abs(self.sizes[best] - size_bytes) > tolerance_bytes:
            return None
        return best + 1

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sizes, dtype=np.int64)


@dataclass(frozen=True)
class IntervalSet:
    """Ordered set G of generation intervals (ms), all multiples of the quantum q."""
    intervals_ms: Tuple[int, ...] = DEFAULT_INTERVALS_MS
    quantum_ms: int = DEFAULT_QUANTUM_MS

    def __post_init__(self):
        intervals = tuple(int(g) for g in self.intervals_ms)
        quantum = int(self.quantum_ms)
        if quantum <= 0:
            raise ModelValidationError(f"Interval quantum must be positive, got {quantum}")
        if not intervals:
            raise ModelValidationError("Interval set G must contain at least one interval")
        if any(b <= a for a, b in zip(intervals, intervals[1:])):
            raise ModelValidationError(f"Interval set must be strictly increasing, got {intervals}")
        bad = [g for g in intervals if g <= 0 or g % quantum != 0]
        if bad:
            raise ModelValidationError(f"Intervals {bad} are not positive multiples of q={quantum} ms")
        object.__setattr__(self, "intervals_ms", intervals)
        object.__setattr__(self, "quantum_ms", quantum)

    @classmethod
    def default(cls) -> "IntervalSet":
        return cls(DEFAULT_INTERVALS_MS, DEFAULT_QUANTUM_MS)

    def __len__(self) -> int:
        return len(self.intervals_ms)

    @property
    def min_ms(self) -> int:
        return self.intervals_ms[0]

    @property
    def max_ms(self) -> int:
        return self.intervals_ms[-1]

    @property
    def split_threshold_ms(self) -> float:
        """Inter-arrivals above this start a new trace segment."""
        return self.max_ms + self.quantum_ms / 2

    def value(self, j: int) -> int:
        """Interval in ms for 1-based index j."""
        if not 1 <= j <= len(self.intervals_ms):
            raise SymbolIndexError(f"Interval index {j} out of range 1..{len(self.intervals_ms)}")
        return self.intervals_ms[j - 1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.intervals_ms, dtype=np.int64)


def _check_symbol(n: int, s_card: int, alphabet_size: Optional[int]) -> None:
    if s_card < 1:
        raise SymbolIndexError(f"|S| must be >= 1, got {s_card}")
    upper = alphabet_size if alphabet_size is not None else n
    if not 1 <= n <= upper:
        raise SymbolIndexError(f"Symbol {n} out of range 1..{alphabet_size}")


def symbol_to_size_index(n: int, s_card: int, alphabet_size: Optional[int] = None) -> int:
    """Size index i of symbol n: i = ((n - 1) % |S|) + 1."""
    _check_symbol(n, s_card, alphabet_size)
    return ((n - 1) % s_card) + 1


def symbol_to_interval_index(n: int, s_card: int, alphabet_size: Optional[int] = None) -> int:
    """Interval index j of symbol n: j = floor((n - 1) / |S|) + 1."""
    _check_symbol(n, s_card, alphabet_size)
    return (n - 1) // s_card + 1


def indices_to_symbol(i: int, j: int, s_card: int, g_card: Optional[int] = None) -> int:
    """Symbol n of the pair (i, j): n = (j - 1) * |S| + i."""
    if s_card < 1:
        raise SymbolIndexError(f"|S| must be >= 1, got {s_card}")
    if not 1 <= i <= s_card:
        raise SymbolIndexError(f"Size index {i} out of range 1..{s_card}")
    if j < 1 or (g_card is not None and j > g_card):
        raise SymbolIndexError(f"Interval index {j} out of range 1..{g_card}")
    return (j - 1) * s_card + i


def project_symbols(symbols: Sequence[int], s_card: int, mode: "ModelMode") -> np.ndarray:
    """Project complete-mode symbols onto size indices or interval indices."""
    arr = np.asarray(symbols, dtype=np.int64)
    mode = ModelMode.parse(mode)
    if arr.size and arr.min() < 1:
        raise SymbolIndexError("Symbols are 1-based")
    if mode is ModelMode.SIZE_ONLY:
        return (arr - 1) % s_card + 1
    if mode is ModelMode.INTERVAL_ONLY:
        return (arr - 1) // s_card + 1
    return arr.copy()


@dataclass(frozen=True)
class ModelSpec:
    """Alphabet definition: mode, order m, S and/or G, jitter σ."""
    mode: ModelMode
    m: int
    sizes: Optional[SizeSet] = None
    intervals: Optional[IntervalSet] = None
    jitter_std_ms: float = 0.0

    def __post_init__(self):
        mode = ModelMode.parse(self.mode)
        object.__setattr__(self, "mode", mode)
        if isinstance(self.sizes, (tuple, list)):
            object.__setattr__(self, "sizes", SizeSet(tuple(self.sizes)))
        if isinstance(self.intervals, (tuple, list)):
            object.__setattr__(self, "intervals", IntervalSet(tuple(self.intervals)))

        if int(self.m) != self.m or self.m < 1:
            raise ModelValidationError(f"Model order m must be a positive integer, got {self.m}")
        object.__setattr__(self, "m", int(self.m))
        if self.jitter_std_ms is None or self.jitter_std_ms < 0:
            raise ModelValidationError(f"jitter_std_ms must be >= 0, got {self.jitter_std_ms}")
        object.__setattr__(self, "jitter_std_ms", float(self.jitter_std_ms))

        if mode is ModelMode.COMPLETE and (self.sizes is None or self.intervals is None):
            raise ModelValidationError("Complete mode requires both S and G")
        if mode is ModelMode.SIZE_ONLY and (self.sizes is None or self.intervals is not None):
            raise ModelValidationError("Size mode requires S only")
        if mode is ModelMode.INTERVAL_ONLY and (self.intervals is None or self.sizes is not None):
            raise ModelValidationError("Interval mode requires G only")

    @property
    def models_sizes(self) -> bool:
        return self.sizes is not None

    @property
    def models_intervals(self) -> bool:
        return self.intervals is not None

    @property
    def size_card(self) -> int:
        return len(self.sizes) if self.sizes is not None else 0

    @property
    def interval_card(self) -> int:
        return len(self.intervals) if self.intervals is not None else 0

    @property
    def alphabet_size(self) -> int:
        if self.mode is ModelMode.COMPLETE:
            return self.size_card * self.interval_card
        if self.mode is ModelMode.SIZE_ONLY:
            return self.size_card
        return self.interval_card

    def check_symbol(self, n: int) -> None:
        if not 1 <= n <= self.alphabet_size:
            raise SymbolIndexError(f"Symbol {n} out of range 1..{self.alphabet_size}")

    def encode(self, i: int, j: int) -> int:
        """Complete-mode symbol for size index i and interval index j."""
        if self.mode is not ModelMode.COMPLETE:
            raise ModelValidationError("encode() needs a complete-mode spec")
        return indices_to_symbol(i, j, self.size_card, self.interval_card)

    def decode(self, n: int) -> Tuple[Optional[int], Optional[int]]:
        """(size_bytes, interval_ms) of symbol n; the unmodeled half is None."""
        self.check_symbol(n)
        if self.mode is ModelMode.COMPLETE:
            i = symbol_to_size_index(n, self.size_card, self.alphabet_size)
            j = symbol_to_interval_index(n, self.size_card, self.alphabet_size)
            return self.sizes.value(i), self.intervals.value(j)
        if self.mode is ModelMode.SIZE_ONLY:
            return self.sizes.value(n), None
        return None, self.intervals.value(n)

    def decode_arrays(self, symbols: np.ndarray) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        """Vectorized decode of a symbol array into size and interval arrays."""
        symbols = np.asarray(symbols, dtype=np.int64)
        sizes = intervals = None
        if self.mode is ModelMode.COMPLETE:
            sizes = self.sizes.as_array()[(symbols - 1) % self.size_card]
            intervals = self.intervals.as_array()[(symbols - 1) // self.size_card]
        elif self.mode is ModelMode.SIZE_ONLY:
            sizes = self.sizes.as_array()[symbols - 1]
        else:
            intervals = self.intervals.as_array()[symbols - 1]
        return sizes, intervals

    def separate(self, mode: ModelMode) -> "ModelSpec":
        """Spec of the separate model (A=S or A=G) derived from this spec."""
        mode = ModelMode.parse(mode)
        if mode is ModelMode.SIZE_ONLY:
            return ModelSpec(mode, self.m, sizes=self.sizes)
        if mode is ModelMode.INTERVAL_ONLY:
            return ModelSpec(mode, self.m, intervals=self.intervals, jitter_std_ms=self.jitter_std_ms)
        return self

    def with_order(self, m: int) -> "ModelSpec":
        return ModelSpec(self.mode, m, self.sizes, self.intervals, self.jitter_std_ms)

    def with_jitter(self, jitter_std_ms: float) -> "ModelSpec":
        return ModelSpec(self.mode, self.m, self.sizes, self.intervals, jitter_std_ms)

    def to_dict(self) -> Dict:
        return {
            "mode": self.mode.value,
            "m": self.m,
            "S": list(self.sizes.sizes) if self.sizes else None,
            "G": list(self.intervals.intervals_ms) if self.intervals else None,
            "q": self.intervals.quantum_ms if self.intervals else None,
            "jitter_std_ms": self.jitter_std_ms,
            "alphabet_size": self.alphabet_size,
        }


def preset_spec(oem: str, scenario: str = "universal", mode=ModelMode.COMPLETE, m: int = 1) -> ModelSpec:
    """ModelSpec with the published S, G and jitter σ for an OEM and scenario."""
    preset = get_preset(oem, scenario)
    base = ModelSpec(
        ModelMode.COMPLETE,
        m,
        sizes=SizeSet(preset["sizes"]),
        intervals=IntervalSet(preset["intervals"], preset["quantum_ms"]),
        jitter_std_ms=preset["jitter_std_ms"],
    )
    return base.separate(mode)


def _check_context(context: Context, m: int) -> Context:
    context = tuple(int(a) for a in context)
    if len(context) != m:
        raise ModelValidationError(f"Context {context} has length {len(context)}, expected m={m}")
    if any(a < 1 for a in context):
        raise ModelValidationError(f"Context {context} contains a non-positive symbol")
    return context


class TransitionTable:
    """
    Sparse next-symbol distributions keyed by length-m context.

    Rows with a null conditional probability are never stored. Each context's
    probabilities are re-normalized exactly in memory; the values as given are
    kept for serialization.
    """

    def __init__(
        self,
        rows: Mapping[Context, Mapping[int, float]],
        m: int,
        tolerance: float = EXACT_TOLERANCE,
    ):
        if m < 1:
            raise ModelValidationError(f"Model order m must be >= 1, got {m}")
        self._m = m
        self._stored: Dict[Context, Tuple[Tuple[int, ...], Tuple[float, ...]]] = {}
        self._normalized: Dict[Context, Tuple[float, ...]] = {}
        self._cumulative: Dict[Context, List[float]] = {}

        for raw_context, successors in rows.items():
            context = _check_context(raw_context, m)
            entries = []
            for nxt, prob in successors.items():
                nxt, prob = int(nxt), float(prob)
                if nxt < 1:
                    raise ModelValidationError(f"Next symbol {nxt} after {context} is not 1-based")
                if not np.isfinite(prob) or prob < 0 or prob > 1 + tolerance:
                    raise ModelValidationError(f"Probability {prob} for {context} -> {nxt} outside (0, 1]")
                if prob == 0:
                    continue
                entries.append((nxt, prob))
            if not entries:
                continue
            entries.sort()
            symbols = tuple(e[0] for e in entries)
            probs = tuple(e[1] for e in entries)
            total = float(np.sum(probs))
            if abs(total - 1.0) > tolerance:
                raise ModelValidationError(
                    f"Probabilities for context {context} sum to {total:.9g}, outside tolerance {tolerance:g}"
                )
            normalized = tuple(p / total for p in probs)
            cumulative = list(np.cumsum(normalized))
            cumulative[-1] = 1.0  # final bucket absorbs rounding residue
            self._stored[context] = (symbols, probs)
            self._normalized[context] = normalized
            self._cumulative[context] = cumulative

    @classmethod
    def from_counts(cls, counts: Mapping[Context, Mapping[int, int]], m: int) -> "TransitionTable":
        """P(next | context) = c / r with r the row total."""
        rows = {}
        for context, successors in counts.items():
            total = sum(successors.values())
            if total <= 0:
                continue
            rows[context] = {nxt: c / total for nxt, c in successors.items() if c > 0}
        return cls(rows, m)

    @property
    def m(self) -> int:
        return self._m

    @property
    def context_count(self) -> int:
        return len(self._stored)

    @property
    def row_count(self) -> int:
        return sum(len(symbols) for symbols, _ in self._stored.values())

    def __contains__(self, context) -> bool:
        return tuple(context) in self._stored

    def contexts(self) -> List[Context]:
        return sorted(self._stored)

    def successors(self, context: Context) -> Tuple[Tuple[int, float], ...]:
        """(next_symbol, probability) pairs for a context; empty for a dead end."""
        context = tuple(context)
        if context not in self._stored:
            return ()
        return tuple(zip(self._stored[context][0], self._normalized[context]))

    def probability(self, context: Context, next_symbol: int) -> float:
        return dict(self.successors(context)).get(next_symbol, 0.0)

    def sampling_row(self, context: Context) -> Optional[Tuple[Tuple[int, ...], List[float]]]:
        """(symbols, cumulative probabilities) used for inverse-CDF sampling."""
        context = tuple(context)
        if context not in self._stored:
            return None
        return self._stored[context][0], self._cumulative[context]

    def rows(self) -> Iterator[Tuple[Context, int, float]]:
        """Normalized rows sorted by context then next symbol."""
        for context in self.contexts():
            symbols, _ = self._stored[context]
            for nxt, prob in zip(symbols, self._normalized[context]):
                yield context, nxt, prob

    def stored_rows(self) -> Iterator[Tuple[Context, int, float]]:
        """Rows with their probabilities as given at construction."""
        for context in self.contexts():
            symbols, probs = self._stored[context]
            for nxt, prob in zip(symbols, probs):
                yield context, nxt, prob

    def max_symbol(self) -> int:
        best = 0
        for context, (symbols, _) in self._stored.items():
            best = max(best, max(context), symbols[-1])
        return best

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransitionTable):
            return NotImplemented
        return self._m == other._m and self._stored == other._stored

    def __repr__(self) -> str:
        return f"TransitionTable(m={self._m}, contexts={self.context_count}, rows={self.row_count})"


class InitialDistribution:
    """Empirical probability of each length-m context (the preliminary m symbols)."""

    def __init__(self, entries: Mapping[Context, float], m: int, tolerance: float = EXACT_TOLERANCE):
        if m < 1:
            raise ModelValidationError(f"Model order m must be >= 1, got {m}")
        self._m = m
        stored = {}
        for raw_context, prob in entries.items():
            context = _check_context(raw_context, m)
            prob = float(prob)
            if not np.isfinite(prob) or prob < 0 or prob > 1 + tolerance:
                raise ModelValidationError(f"Initial probability {prob} for {context} outside (0, 1]")
            if prob > 0:
                stored[context] = prob
        if stored:
            total = float(np.sum(list(stored.values())))
            if abs(total - 1.0) > tolerance:
                raise ModelValidationError(
                    f"Initial probabilities sum to {total:.9g}, outside tolerance {tolerance:g}"
                )
        else:
            total = 1.0
        self._contexts: List[Context] = sorted(stored)
        self._stored = tuple(stored[c] for c in self._contexts)
        self._normalized = tuple(p / total for p in self._stored)
        cumulative = np.cumsum(self._normalized) if self._normalized else np.zeros(0)
        if cumulative.size:
            cumulative[-1] = 1.0
        self._cumulative = cumulative

    @classmethod
    def from_counts(cls, counts: Mapping[Context, int], m: int) -> "InitialDistribution":
        total = sum(counts.values())
        if total <= 0:
            return cls({}, m)
        return cls({context: c / total for context, c in counts.items() if c > 0}, m)

    @property
    def m(self) -> int:
        return self._m

    def __len__(self) -> int:
        return len(self._contexts)

    def __contains__(self, context) -> bool:
        return self.probability(tuple(context)) > 0

    def contexts(self) -> List[Context]:
        return list(self._contexts)

    def probability(self, context: Context) -> float:
        context = tuple(context)
        pos = bisect.bisect_left(self._contexts, context)
        if pos < len(self._contexts) and self._contexts[pos] == context:
            return self._normalized[pos]
        return 0.0

    def items(self) -> List[Tuple[Context, float]]:
        return list(zip(self._contexts, self._normalized))

    def stored_items(self) -> List[Tuple[Context, float]]:
        return list(zip(self._contexts, self._stored))

    def draw(self, u: float) -> Context:
        """Inverse-CDF draw for a uniform u in [0, 1)."""
        if not self._contexts:
            raise EmptyModelError("Initial distribution is empty")
        pos = int(np.searchsorted(self._cumulative, u, side="right"))
        return self._contexts[min(pos, len(self._contexts) - 1)]

    def dead_ends(self, table: TransitionTable) -> List[Context]:
        """Contexts with no recorded successor in the transition table."""
        return [c for c in self._contexts if c not in table]

    def __eq__(self, other) -> bool:
        if not isinstance(other, InitialDistribution):
            return NotImplemented
        return self._m == other._m and self.stored_items() == other.stored_items()

    def __repr__(self) -> str:
        return f"InitialDistribution(m={self._m}, contexts={len(self._contexts)})"


@dataclass(frozen=True)
class CamModel:
    """A fitted (or loaded) Markov source: spec + transition table + initial distribution."""
    spec: ModelSpec
    transitions: TransitionTable
    initial: InitialDistribution
    label: str = ""
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.transitions.m != self.spec.m or self.initial.m != self.spec.m:
            raise ModelValidationError(
                f"Table order (transitions m={self.transitions.m}, initial m={self.initial.m}) "
                f"does not match spec m={self.spec.m}"
            )
        largest = max(self.transitions.max_symbol(),
                      max((max(c) for c in self.initial.contexts()), default=0))
        if largest > self.spec.alphabet_size:
            raise ModelValidationError(
                f"Symbol {largest} exceeds alphabet size |A|={self.spec.alphabet_size}"
            )
        object.__setattr__(self, "metadata", dict(self.metadata))

    def dead_end_contexts(self) -> List[Context]:
        return self.initial.dead_ends(self.transitions)

    def summary(self) -> Dict:
        return {
            "label": self.label,
            "mode": self.spec.mode.value,
            "m": self.spec.m,
            "|S|": self.spec.size_card,
            "|G|": self.spec.interval_card,
            "|A|": self.spec.alphabet_size,
            "transition_rows": self.transitions.row_count,
            "transition_contexts": self.transitions.context_count,
            "initial_contexts": len(self.initial),
            "dead_end_contexts": len(self.dead_end_contexts()),
            "jitter_std_ms": self.spec.jitter_std_ms,
        }
