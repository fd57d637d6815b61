"""
CAM trace ingestion, emission and quantization.

Trace CSV format (UTF-8, LF):

    t_ms,size_bytes[,symbol]
    0.000,200
    101.200,300

t_ms is printed with exactly 3 decimals. A headerless two-column file is also
accepted on input.
"""

import io
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import TRACE_CONFIG
from errors import EmptyModelError, ModelValidationError, TraceFormatError, TraceValidationError
from model import IntervalSet, ModelMode, ModelSpec, project_symbols
from shared_utils import TextSource, ensure_parent_dir, read_text_source, undecodable_line

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t_ms", "size_bytes"]
SYMBOL_COLUMN = "symbol"


class CamEvent(NamedTuple):
    """One observed or generated CAM."""
    t_ms: float
    size_bytes: int


class EventArrays(NamedTuple):
    """A whole trace as parallel arrays."""
    t_ms: np.ndarray
    size_bytes: np.ndarray


@dataclass
class QuantizedTrace:
    """
    A trace mapped onto a model alphabet.

    `segments` hold the symbol streams between trace splits; context windows
    never span two segments. `residuals_ms` align 1:1 with the concatenated
    symbols whenever intervals are modeled, and are empty otherwise.
    """
    mode: ModelMode
    segments: List[np.ndarray]
    residuals_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dropped_count: int = 0
    clamped_count: int = 0
    split_count: int = 0
    size_card: int = 0
    interval_card: int = 0

    @property
    def symbols(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.segments)

    def __len__(self) -> int:
        return int(sum(len(s) for s in self.segments))

    @classmethod
    def from_symbols(
        cls,
        symbols: Sequence[int],
        spec: ModelSpec,
        residuals_ms: Optional[Sequence[float]] = None,
    ) -> "QuantizedTrace":
        """Single-segment trace built directly from a symbol sequence."""
        arr = np.asarray(symbols, dtype=np.int64)
        if arr.size and (arr.min() < 1 or arr.max() > spec.alphabet_size):
            raise ModelValidationError(f"Symbols outside 1..{spec.alphabet_size}")
        residuals = np.asarray(residuals_ms if residuals_ms is not None else [], dtype=float)
        if residuals.size and residuals.size != arr.size:
            raise ModelValidationError("Residuals must align 1:1 with symbols")
        return cls(
            mode=spec.mode,
            segments=[arr] if arr.size else [],
            residuals_ms=residuals,
            size_card=spec.size_card,
            interval_card=spec.interval_card,
        )

    def project(self, mode: ModelMode) -> "QuantizedTrace":
        """Project a complete-mode trace onto size indices or interval indices."""
        mode = ModelMode.parse(mode)
        if mode is self.mode:
            return self
        if self.mode is not ModelMode.COMPLETE:
            raise ModelValidationError(f"Cannot project a {self.mode.value}-mode trace onto {mode.value}")
        segments = [project_symbols(seg, self.size_card, mode) for seg in self.segments]
        return QuantizedTrace(
            mode=mode,
            segments=segments,
            residuals_ms=self.residuals_ms if mode is ModelMode.INTERVAL_ONLY else np.zeros(0),
            dropped_count=self.dropped_count,
            clamped_count=self.clamped_count,
            split_count=self.split_count,
            size_card=self.size_card if mode is ModelMode.SIZE_ONLY else 0,
            interval_card=self.interval_card if mode is ModelMode.INTERVAL_ONLY else 0,
        )


def as_event_arrays(events) -> Tuple[np.ndarray, np.ndarray]:
    """(t_ms float64, size_bytes int64) arrays from CamEvents or an array-backed stream."""
    t = getattr(events, "t_ms", None)
    if isinstance(t, np.ndarray):
        return np.asarray(t, dtype=float), np.asarray(events.size_bytes, dtype=np.int64)
    events = list(events)
    if not events:
        return np.zeros(0, dtype=float), np.zeros(0, dtype=np.int64)
    t_arr = np.fromiter((e[0] for e in events), dtype=float, count=len(events))
    s_arr = np.fromiter((e[1] for e in events), dtype=np.int64, count=len(events))
    return t_arr, s_arr


def _first_violation(t: np.ndarray) -> Optional[int]:
    """Index of the first event that does not strictly follow its predecessor."""
    bad = np.flatnonzero(np.diff(t) <= 0)
    return int(bad[0]) + 1 if bad.size else None


def _read_text(source: TextSource) -> str:
    try:
        return read_text_source(source)
    except UnicodeDecodeError as e:
        raise TraceFormatError(f"Trace is not valid UTF-8 ({e.reason})", undecodable_line(e)) from e


def _ragged_line(text: str) -> Optional[int]:
    """Line number of the first row with more fields than the first non-blank line."""
    expected = None
    for line_no, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        fields = line.count(",") + 1
        if expected is None:
            expected = fields
        elif fields > expected:
            return line_no
    return None


def _parse_frame(text: str) -> Tuple[pd.DataFrame, int]:
    """Parse trace text into a string DataFrame; returns (frame, line number of row 0)."""
    first_line = text.split("\n", 1)[0].strip().lstrip("\ufeff")
    has_header = first_line.lower().startswith("t_ms")
    try:
        frame = pd.read_csv(
            io.StringIO(text),
            header=0 if has_header else None,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=TRACE_COLUMNS), 2
    except pd.errors.ParserError as e:
        line_no = _ragged_line(text)
        reason = "too many fields" if line_no is not None else str(e)
        raise TraceFormatError(f"Malformed trace row: {reason}", line_no) from e

    if len(frame.index) and not isinstance(frame.index, pd.RangeIndex):
        # pandas turns a surplus leading field on the first data row into an index
        raise TraceFormatError("Malformed trace row: too many fields", _ragged_line(text))

    if has_header:
        columns = [str(c).strip().lstrip("\ufeff") for c in frame.columns]
        if columns not in (TRACE_COLUMNS, TRACE_COLUMNS + [SYMBOL_COLUMN]):
            raise TraceFormatError(f"Unexpected header {columns}, expected t_ms,size_bytes[,symbol]", 1)
        frame.columns = columns
    else:
        if frame.shape[1] not in (2, 3):
            raise TraceFormatError(f"Expected 2 or 3 columns, found {frame.shape[1]}", 1)
        frame.columns = (TRACE_COLUMNS + [SYMBOL_COLUMN])[:frame.shape[1]]
    return frame, 2 if has_header else 1


def _numeric_column(frame: pd.DataFrame, column: str, first_line: int) -> np.ndarray:
    raw = frame[column]
    values = pd.to_numeric(raw.astype(str).str.strip(), errors="coerce")
    bad = np.flatnonzero(~np.isfinite(values.to_numpy(dtype=float)) | raw.isna().to_numpy())
    if bad.size:
        row = int(bad[0])
        raise TraceFormatError(f"Invalid {column} value {raw.iloc[row]!r}", first_line + row)
    return values.to_numpy(dtype=float)


def read_trace_arrays(source: TextSource) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Read a trace CSV into arrays.

    Returns:
        (t_ms, size_bytes, symbols or None)
    """
    text = _read_text(source)
    if not text.strip():
        return np.zeros(0), np.zeros(0, dtype=np.int64), None

    frame, first_line = _parse_frame(text)
    if frame.empty:
        return np.zeros(0), np.zeros(0, dtype=np.int64), None

    _numeric_column(frame, "t_ms", first_line)
    # exact decimal -> double conversion for the timestamp column
    t = frame["t_ms"].str.strip().map(float).to_numpy(dtype=float)
    sizes = _numeric_column(frame, "size_bytes", first_line)
    not_int = np.flatnonzero((sizes != np.floor(sizes)) | (sizes < 1))
    if not_int.size:
        row = int(not_int[0])
        raise TraceFormatError(f"size_bytes must be a positive integer, got {frame['size_bytes'].iloc[row]!r}",
                               first_line + row)

    symbols = None
    if SYMBOL_COLUMN in frame.columns:
        symbols = _numeric_column(frame, SYMBOL_COLUMN, first_line).astype(np.int64)

    violation = _first_violation(t)
    if violation is not None:
        raise TraceValidationError(
            f"Timestamps must be strictly increasing ({t[violation]} after {t[violation - 1]})",
            first_line + violation,
        )
    return t, sizes.astype(np.int64), symbols


def read_trace(source: TextSource) -> List[CamEvent]:
    """
    Read a trace CSV.

    Args:
        source: Path or text stream in the trace CSV format

    Returns:
        List of CamEvent in file order

    Raises:
        TraceFormatError: malformed row (carries line_no)
        TraceValidationError: non-monotonic timestamps (carries line_no)
    """
    t, sizes, _ = read_trace_arrays(source)
    return [CamEvent(ts, sz) for ts, sz in zip(t.tolist(), sizes.tolist())]


def read_events(source: TextSource) -> EventArrays:
    """Read a trace CSV into arrays without building per-event objects."""
    t, sizes, _ = read_trace_arrays(source)
    return EventArrays(t, sizes)


def write_trace(events, target: TextSource, symbols: Optional[Sequence[int]] = None) -> None:
    """
    Write a trace CSV (header + one row per CAM, t_ms with 3 decimals).

    Args:
        events: CamEvents or an array-backed stream (GeneratedStream)
        target: Path or writable text stream
        symbols: Optional symbol per event, written as a third column
    """
    t, sizes = as_event_arrays(events)
    violation = _first_violation(t)
    if violation is not None:
        raise TraceValidationError(
            f"Cannot write non-monotonic trace: event {violation} at {t[violation]} ms "
            f"does not follow {t[violation - 1]} ms"
        )

    data = {"t_ms": t, "size_bytes": sizes}
    if symbols is not None:
        symbols = np.asarray(symbols, dtype=np.int64)
        if symbols.shape[0] != t.shape[0]:
            raise TraceValidationError(f"{symbols.shape[0]} symbols for {t.shape[0]} events")
        data[SYMBOL_COLUMN] = symbols
    frame = pd.DataFrame(data)

    float_format = f"%.{TRACE_CONFIG['timestamp_decimals']}f"
    if hasattr(target, "write"):
        frame.to_csv(target, index=False, float_format=float_format, lineterminator="\n")
    else:
        ensure_parent_dir(target)
        frame.to_csv(target, index=False, float_format=float_format, lineterminator="\n", encoding="utf-8")
    logger.info(f"Wrote {len(frame)} CAM events")


def _nearest_index(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    """0-based index of the nearest grid value (ties go to the smaller value)."""
    pos = np.searchsorted(grid, values, side="left")
    lower = np.clip(pos - 1, 0, len(grid) - 1)
    upper = np.clip(pos, 0, len(grid) - 1)
    use_upper = np.abs(grid[upper] - values) < np.abs(values - grid[lower])
    return np.where(use_upper, upper, lower)


def quantize(events, spec: ModelSpec, size_tolerance_bytes: Optional[float] = None) -> QuantizedTrace:
    """
    Map a CAM trace onto the model alphabet.

    Every event after the first of a segment yields one symbol built from its
    own size and its inter-arrival time from the preceding event.

    - inter-arrivals round to the nearest multiple of q, clamp into
      [min(G), max(G)] and snap to the nearest g in G; residual = delta - g
    - inter-arrivals above max(G) + q/2 split the trace into segments
    - sizes snap to the nearest s in S within the tolerance, else the event is dropped

    Args:
        events: CamEvents or an array-backed stream
        spec: Model spec defining S and/or G
        size_tolerance_bytes: Snap tolerance (default TRACE_CONFIG)

    Returns:
        QuantizedTrace

    Raises:
        EmptyModelError: nothing left to model
    """
    if size_tolerance_bytes is None:
        size_tolerance_bytes = TRACE_CONFIG["size_snap_tolerance_bytes"]
    t, sizes = as_event_arrays(events)
    if t.shape[0] < 2:
        raise EmptyModelError(f"Quantization needs at least 2 events, got {t.shape[0]}")
    violation = _first_violation(t)
    if violation is not None:
        raise TraceValidationError(f"Timestamps must be strictly increasing (event {violation})")

    deltas = np.diff(t)
    grid = spec.intervals or IntervalSet.default()
    split = deltas > grid.split_threshold_ms
    keep = ~split
    size_index = interval_index = None
    residuals = np.zeros(0)
    clamped = np.zeros(deltas.shape[0], dtype=bool)

    if spec.models_intervals:
        g_values = grid.as_array().astype(float)
        q = float(grid.quantum_ms)
        snapped = np.rint(deltas / q) * q
        clamped = (snapped < g_values[0]) | (snapped > g_values[-1])
        snapped = np.clip(snapped, g_values[0], g_values[-1])
        interval_index = _nearest_index(g_values, snapped)
        residuals = deltas - g_values[interval_index]

    dropped = np.zeros(deltas.shape[0], dtype=bool)
    if spec.models_sizes:
        s_values = spec.sizes.as_array().astype(float)
        successor_sizes = sizes[1:].astype(float)
        size_index = _nearest_index(s_values, successor_sizes)
        within = np.abs(s_values[size_index] - successor_sizes) <= size_tolerance_bytes
        dropped = keep & ~within
        keep = keep & within

    if spec.mode is ModelMode.COMPLETE:
        symbols = interval_index * spec.size_card + size_index + 1
    elif spec.mode is ModelMode.SIZE_ONLY:
        symbols = size_index + 1
    else:
        symbols = interval_index + 1
    symbols = symbols.astype(np.int64)

    if not keep.any():
        raise EmptyModelError(f"All {t.shape[0]} events were dropped or split; nothing to model")

    segment_id = np.cumsum(split)[keep]
    kept_symbols = symbols[keep]
    boundaries = np.flatnonzero(np.diff(segment_id)) + 1
    segments = [seg for seg in np.split(kept_symbols, boundaries) if seg.size]

    result = QuantizedTrace(
        mode=spec.mode,
        segments=segments,
        residuals_ms=residuals[keep] if spec.models_intervals else np.zeros(0),
        dropped_count=int(dropped.sum()),
        clamped_count=int((clamped & keep).sum()),
        split_count=int(split.sum()),
        size_card=spec.size_card,
        interval_card=spec.interval_card,
    )
    if result.dropped_count or result.clamped_count or result.split_count:
        logger.warning(
            f"Quantization: {result.dropped_count} events dropped (size outside ±{size_tolerance_bytes} B), "
            f"{result.clamped_count} intervals clamped, {result.split_count} trace splits"
        )
    logger.info(f"Quantized {t.shape[0]} events into {len(result)} symbols over {len(segments)} segment(s)")
    return result


def jitter_residuals(events, intervals: Optional[IntervalSet] = None) -> np.ndarray:
    """Inter-arrival residuals (delta - nearest g) of a trace, in ms."""
    spec = ModelSpec(ModelMode.INTERVAL_ONLY, 1, intervals=intervals or IntervalSet.default())
    return quantize(events, spec).residuals_ms


def merge_traces(traces: Sequence[QuantizedTrace]) -> QuantizedTrace:
    """Join quantized traces as independent segments (e.g. urban + suburban + highway)."""
    traces = list(traces)
    if not traces:
        raise EmptyModelError("No traces to merge")
    first = traces[0]
    for other in traces[1:]:
        if (other.mode, other.size_card, other.interval_card) != (first.mode, first.size_card, first.interval_card):
            raise ModelValidationError("Cannot merge traces quantized under different alphabets")
    return QuantizedTrace(
        mode=first.mode,
        segments=[seg for trace in traces for seg in trace.segments],
        residuals_ms=np.concatenate([trace.residuals_ms for trace in traces]),
        dropped_count=sum(trace.dropped_count for trace in traces),
        clamped_count=sum(trace.clamped_count for trace in traces),
        split_count=sum(trace.split_count for trace in traces) + len(traces) - 1,
        size_card=first.size_card,
        interval_card=first.interval_card,
    )
