"""
Model fitting from quantized CAM traces.

The conditional probabilities are estimated by counting:

    P(a_n | context) = c(context, a_n) / r(context),   r(context) = sum_n c(context, a_n)

The initial distribution is the empirical frequency of every (overlapping)
length-m window. Contexts never observed are absent; unobserved transitions
stay impossible (no smoothing).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import CONCURRENT_CONFIG, FIT_CONFIG
from errors import BinDetectionError, InsufficientDataError, ModelValidationError
from metrics import estimate_jitter_std, size_histogram
from model import CamModel, Context, InitialDistribution, ModelMode, ModelSpec, SizeSet, TransitionTable
from trace_io import QuantizedTrace, as_event_arrays, merge_traces

logger = logging.getLogger(__name__)


def _count_windows(symbols: np.ndarray, width: int) -> Dict[tuple, int]:
    """Occurrences of every length-`width` window of a symbol stream."""
    if symbols.shape[0] < width:
        return {}
    windows = sliding_window_view(symbols, width)
    unique, counts = np.unique(windows, axis=0, return_counts=True)
    return {tuple(row): int(c) for row, c in zip(unique.tolist(), counts.tolist())}


@dataclass
class CountTable:
    """Transition counts c(context, next), row totals r(context) and m-window counts."""
    m: int
    counts: Dict[Context, Dict[int, int]] = field(default_factory=dict)
    totals: Dict[Context, int] = field(default_factory=dict)
    window_counts: Dict[Context, int] = field(default_factory=dict)

    @classmethod
    def from_segment(cls, symbols: Sequence[int], m: int) -> "CountTable":
        symbols = np.asarray(symbols, dtype=np.int64)
        table = cls(m)
        table.window_counts = _count_windows(symbols, m)
        for gram, c in _count_windows(symbols, m + 1).items():
            context, nxt = gram[:-1], gram[-1]
            table.counts.setdefault(context, {})[nxt] = c
            table.totals[context] = table.totals.get(context, 0) + c
        return table

    def merge(self, other: "CountTable") -> "CountTable":
        if other.m != self.m:
            raise ModelValidationError(f"Cannot merge counts of order {self.m} and {other.m}")
        merged = CountTable(self.m)
        for source in (self, other):
            for context, successors in source.counts.items():
                row = merged.counts.setdefault(context, {})
                for nxt, c in successors.items():
                    row[nxt] = row.get(nxt, 0) + c
            for context, r in source.totals.items():
                merged.totals[context] = merged.totals.get(context, 0) + r
            for context, c in source.window_counts.items():
                merged.window_counts[context] = merged.window_counts.get(context, 0) + c
        return merged

    @property
    def transition_count(self) -> int:
        return sum(self.totals.values())

    def to_transition_table(self) -> TransitionTable:
        return TransitionTable.from_counts(self.counts, self.m)

    def to_initial_distribution(self) -> InitialDistribution:
        return InitialDistribution.from_counts(self.window_counts, self.m)


def count_segments(segments: Sequence[np.ndarray], m: int, max_workers: Optional[int] = None) -> CountTable:
    """
    Count all segments, in parallel when there are several.

    The merge runs in segment order, so the result does not depend on how the
    work was partitioned.
    """
    segments = list(segments)
    if max_workers is None:
        max_workers = CONCURRENT_CONFIG["max_workers"]

    if len(segments) <= 1 or max_workers <= 1:
        partials = [CountTable.from_segment(seg, m) for seg in segments]
    else:
        with ThreadPoolExecutor(max_workers=min(len(segments), max_workers)) as executor:
            partials = list(executor.map(lambda seg: CountTable.from_segment(seg, m), segments))

    total = CountTable(m)
    for partial in partials:
        total = total.merge(partial)
    return total


@dataclass
class FitResult:
    transitions: TransitionTable
    initial: InitialDistribution
    jitter_std_ms: Optional[float]
    counts: CountTable
    symbol_count: int
    dead_ends: List[Context]

    def __iter__(self) -> Iterator:
        # unpacks as (transitions, initial, jitter_std_ms)
        return iter((self.transitions, self.initial, self.jitter_std_ms))

    def to_model(self, spec: ModelSpec, label: str = "", metadata: Optional[Mapping[str, str]] = None) -> CamModel:
        """CamModel carrying the estimated jitter σ (or the spec's own when none was estimated)."""
        if self.jitter_std_ms is not None and spec.models_intervals:
            spec = spec.with_jitter(self.jitter_std_ms)
        return CamModel(spec, self.transitions, self.initial, label=label, metadata=dict(metadata or {}))


def fit(trace: QuantizedTrace, spec: ModelSpec, max_workers: Optional[int] = None) -> FitResult:
    """
    Estimate the transition table, initial distribution and jitter σ.

    Args:
        trace: Quantized trace (a complete-mode trace is projected for separate specs)
        spec: Model spec (mode and order m)
        max_workers: Segment-counting parallelism

    Returns:
        FitResult (unpacks as transitions, initial, jitter_std_ms)

    Raises:
        InsufficientDataError: no (m+1)-window fits inside any segment
    """
    if trace.mode is not spec.mode:
        trace = trace.project(spec.mode)
    if (trace.size_card, trace.interval_card) != (spec.size_card, spec.interval_card):
        raise ModelValidationError(
            f"Trace alphabet (|S|={trace.size_card}, |G|={trace.interval_card}) does not match "
            f"spec (|S|={spec.size_card}, |G|={spec.interval_card})"
        )

    counts = count_segments(trace.segments, spec.m, max_workers)
    if counts.transition_count == 0:
        raise InsufficientDataError(
            f"Need more than m={spec.m} consecutive symbols to fit, got {len(trace)} symbols"
        )

    transitions = counts.to_transition_table()
    initial = counts.to_initial_distribution()
    jitter = estimate_jitter_std(trace.residuals_ms) if spec.models_intervals else None
    dead_ends = initial.dead_ends(transitions)

    logger.info(
        f"Fitted {spec.mode.value} model m={spec.m}: {transitions.row_count} rows over "
        f"{transitions.context_count} contexts, {len(initial)} initial contexts, "
        f"{len(dead_ends)} dead end(s), jitter σ={jitter}"
    )
    return FitResult(
        transitions=transitions,
        initial=initial,
        jitter_std_ms=jitter,
        counts=counts,
        symbol_count=len(trace),
        dead_ends=dead_ends,
    )


def fit_separate(trace: QuantizedTrace, spec: ModelSpec, max_workers: Optional[int] = None) -> FitResult:
    """Fit a separate model (A=S or A=G) over the projected symbol stream."""
    if spec.mode is ModelMode.COMPLETE:
        raise ModelValidationError("fit_separate needs a size or interval spec")
    return fit(trace.project(spec.mode), spec, max_workers)


def fit_traces(traces: Sequence[QuantizedTrace], spec: ModelSpec, max_workers: Optional[int] = None) -> FitResult:
    """Joint fit over several traces, e.g. a universal model from all scenarios of one OEM."""
    return fit(merge_traces(traces), spec, max_workers)


def detect_size_bins(events, hist_bin: int = None, min_peak_prob: float = None) -> SizeSet:
    """
    Candidate size set S from the peaks of the size histogram.

    A bin is a peak when it holds more mass than its left neighbour, at least
    as much as its right neighbour, and more than min_peak_prob. The size
    reported for a peak is the median of the sizes in the peak bin and its two
    neighbours.

    Raises:
        BinDetectionError: no bin qualifies
    """
    hist_bin = hist_bin or FIT_CONFIG["hist_bin_bytes"]
    min_peak_prob = FIT_CONFIG["min_peak_prob"] if min_peak_prob is None else min_peak_prob
    _, sizes = as_event_arrays(events)
    if sizes.size == 0:
        raise BinDetectionError("No events to detect size bins from")

    pdf = size_histogram(sizes, hist_bin)
    probs = pdf.probs
    left = np.concatenate(([0.0], probs[:-1]))
    right = np.concatenate((probs[1:], [0.0]))
    peaks = np.flatnonzero((probs > left) & (probs >= right) & (probs > min_peak_prob))
    if peaks.size == 0:
        raise BinDetectionError(
            f"No size histogram peak exceeds {min_peak_prob:g}; pass the size set explicitly (--sizes)"
        )

    edges = np.asarray(pdf.alphabet, dtype=float)
    detected = set()
    for k in peaks:
        low = edges[max(k - 1, 0)]
        high = edges[min(k + 1, len(edges) - 1)] + hist_bin
        in_window = sizes[(sizes >= low) & (sizes < high)]
        detected.add(int(round(float(np.median(in_window)))))

    result = SizeSet(tuple(sorted(detected)))
    logger.info(f"Detected size bins {result.sizes} (bin {hist_bin} B, threshold {min_peak_prob:g})")
    return result
