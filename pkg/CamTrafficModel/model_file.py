"""
Plain-text model files (UTF-8, LF).

    # cam-model v1
    mode=complete
    m=2
    S=200,300,360,455
    G=100,200,300,400,500,600,700,800,900,1000
    q=100
    jitter_std_ms=3.444
    label=volkswagen-highway
    <other key=value metadata, sorted by key>
    [initial]
    <m context symbols> <probability>
    [transitions]
    <m context symbols, oldest first> <next symbol> <probability>

Rows are sorted by context, then next symbol. Probabilities carry 9
significant digits; per-context sums must be 1 within CAM_NORMALIZATION_TOLERANCE.
"""

import io
import logging
import os
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from config import DEFAULT_QUANTUM_MS, MODEL_FILE_CONFIG
from errors import ModelFileError, ModelValidationError
from model import (
    CamModel,
    Context,
    InitialDistribution,
    IntervalSet,
    ModelMode,
    ModelSpec,
    SizeSet,
    TransitionTable,
)
from shared_utils import TextSource, ensure_parent_dir, read_text_source, undecodable_line

logger = logging.getLogger(__name__)

INITIAL_SECTION = "[initial]"
TRANSITIONS_SECTION = "[transitions]"
RESERVED_KEYS = ("mode", "m", "S", "G", "q", "jitter_std_ms", "label")


def _fmt(value: float) -> str:
    return format(value, f".{MODEL_FILE_CONFIG['probability_digits']}g")


def format_model(model: CamModel) -> str:
    """Serialize a model; rows are written with their probabilities as stored."""
    spec = model.spec
    lines = [MODEL_FILE_CONFIG["format_header"], f"mode={spec.mode.value}", f"m={spec.m}"]
    if spec.sizes is not None:
        lines.append("S=" + ",".join(str(s) for s in spec.sizes.sizes))
    if spec.intervals is not None:
        lines.append("G=" + ",".join(str(g) for g in spec.intervals.intervals_ms))
        lines.append(f"q={spec.intervals.quantum_ms}")
    lines.append(f"jitter_std_ms={_fmt(spec.jitter_std_ms)}")
    if model.label:
        lines.append(f"label={model.label}")
    for key in sorted(model.metadata):
        if key in RESERVED_KEYS:
            continue
        lines.append(f"{key}={model.metadata[key]}")

    lines.append(INITIAL_SECTION)
    for context, prob in model.initial.stored_items():
        lines.append(" ".join(str(a) for a in context) + f" {_fmt(prob)}")
    lines.append(TRANSITIONS_SECTION)
    for context, nxt, prob in model.transitions.stored_rows():
        lines.append(" ".join(str(a) for a in context) + f" {nxt} {_fmt(prob)}")
    return "\n".join(lines) + "\n"


def write_model(model: CamModel, target: TextSource) -> None:
    """Write a model file to a path or text stream."""
    text = format_model(model)
    if hasattr(target, "write"):
        target.write(text)
    else:
        ensure_parent_dir(target)
        with io.open(os.fspath(target), "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    logger.info(
        f"Wrote {model.spec.mode.value} model m={model.spec.m} "
        f"({model.transitions.row_count} rows, {len(model.initial)} initial contexts)"
    )


def _int_list(value: str, key: str, line_no: int) -> Tuple[int, ...]:
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ModelFileError(f"{key}= must be a comma-separated list of integers, got {value!r}", line_no)


def _parse_row(fields: List[str], width: int, line_no: int, kind: str) -> Tuple[Tuple[int, ...], float]:
    if len(fields) != width:
        raise ModelFileError(f"{kind} row has {len(fields)} fields, expected {width}", line_no)
    try:
        symbols = tuple(int(f) for f in fields[:-1])
        prob = float(fields[-1])
    except ValueError:
        raise ModelFileError(f"Invalid {kind} row {' '.join(fields)!r}", line_no)
    if any(a < 1 for a in symbols):
        raise ModelFileError(f"Symbols are 1-based, got {symbols}", line_no)
    if not 0 < prob <= 1:
        raise ModelFileError(f"Probability {prob} outside (0, 1]", line_no)
    return symbols, prob


def _read_text(source: TextSource) -> str:
    try:
        return read_text_source(source)
    except UnicodeDecodeError as e:
        raise ModelFileError(f"File is not valid UTF-8 ({e.reason})", undecodable_line(e)) from e


def _numbered_rows(lines: Iterable[Tuple[int, str]]) -> Iterable[Tuple[int, List[str]]]:
    for line_no, line in lines:
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield line_no, stripped.split()


def _collect_transitions(
    rows: Iterable[Tuple[int, List[str]]], m: int, tolerance: float
) -> Dict[Context, Dict[int, float]]:
    """Transition rows keyed by context, with duplicate and per-context normalization checks."""
    table: Dict[Context, Dict[int, float]] = {}
    first_line: Dict[Context, int] = {}
    for line_no, fields in rows:
        symbols, prob = _parse_row(fields, m + 2, line_no, "transition")
        context, nxt = symbols[:-1], symbols[-1]
        row = table.setdefault(context, {})
        if nxt in row:
            raise ModelFileError(f"Duplicate transition {context} -> {nxt}", line_no)
        row[nxt] = prob
        first_line.setdefault(context, line_no)
    for context, row in table.items():
        total = sum(row.values())
        if abs(total - 1.0) > tolerance:
            raise ModelFileError(
                f"Probabilities for context {context} sum to {total:.9g}, outside tolerance {tolerance:g}",
                first_line[context],
            )
    return table


def _collect_initial(rows: Iterable[Tuple[int, List[str]]], m: int, tolerance: float) -> Dict[Context, float]:
    entries: Dict[Context, float] = {}
    last_line = None
    for line_no, fields in rows:
        context, prob = _parse_row(fields, m + 1, line_no, "initial")
        if context in entries:
            raise ModelFileError(f"Duplicate initial context {context}", line_no)
        entries[context] = prob
        last_line = line_no
    if entries and abs(sum(entries.values()) - 1.0) > tolerance:
        raise ModelFileError(
            f"Initial probabilities sum to {sum(entries.values()):.9g}, outside tolerance {tolerance:g}",
            last_line,
        )
    return entries


def _spec_from_header(header: Mapping[str, Tuple[str, int]]) -> ModelSpec:
    for key in ("mode", "m"):
        if key not in header:
            raise ModelFileError(f"Missing {key}= in model header", 1)
    try:
        mode = ModelMode.parse(header["mode"][0])
        m = int(header["m"][0])
        sizes = intervals = None
        if "S" in header:
            sizes = SizeSet(_int_list(header["S"][0], "S", header["S"][1]))
        if "G" in header:
            quantum = int(header["q"][0]) if "q" in header else DEFAULT_QUANTUM_MS
            intervals = IntervalSet(_int_list(header["G"][0], "G", header["G"][1]), quantum)
        jitter = float(header["jitter_std_ms"][0]) if "jitter_std_ms" in header else 0.0
        return ModelSpec(mode, m, sizes=sizes, intervals=intervals, jitter_std_ms=jitter)
    except ModelFileError:
        raise
    except ValueError as e:
        raise ModelFileError(f"Invalid model header: {e}", 1) from e


def read_model(source: TextSource, tolerance: Optional[float] = None) -> CamModel:
    """
    Parse a model file.

    Args:
        source: Path or text stream
        tolerance: Per-context probability-sum tolerance (default 1e-3)

    Returns:
        CamModel whose stored probabilities are exactly the values read

    Raises:
        ModelFileError: syntax or normalization violation (carries line_no)
    """
    tolerance = MODEL_FILE_CONFIG["normalization_tolerance"] if tolerance is None else tolerance
    lines = _read_text(source).split("\n")
    if not lines or lines[0].strip().lstrip("\ufeff") != MODEL_FILE_CONFIG["format_header"]:
        raise ModelFileError(f"Expected '{MODEL_FILE_CONFIG['format_header']}' as the first line", 1)

    header: Dict[str, Tuple[str, int]] = {}
    sections: Dict[str, List[Tuple[int, str]]] = {INITIAL_SECTION: [], TRANSITIONS_SECTION: []}
    current = None
    for line_no, line in enumerate(lines[1:], start=2):
        stripped = line.strip()
        if stripped in sections:
            if current == TRANSITIONS_SECTION or (current == stripped):
                raise ModelFileError(f"Unexpected section {stripped}", line_no)
            current = stripped
            continue
        if current is not None:
            sections[current].append((line_no, line))
            continue
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ModelFileError(f"Expected key=value in header, got {stripped!r}", line_no)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in header:
            raise ModelFileError(f"Duplicate header key {key}", line_no)
        header[key] = (value, line_no)

    if current is None:
        raise ModelFileError(f"Missing {INITIAL_SECTION} / {TRANSITIONS_SECTION} sections", len(lines))

    spec = _spec_from_header(header)
    initial = _collect_initial(_numbered_rows(sections[INITIAL_SECTION]), spec.m, tolerance)
    transitions = _collect_transitions(_numbered_rows(sections[TRANSITIONS_SECTION]), spec.m, tolerance)
    metadata = {k: v for k, (v, _) in header.items() if k not in RESERVED_KEYS}
    label = header["label"][0] if "label" in header else ""

    try:
        model = CamModel(
            spec,
            TransitionTable(transitions, spec.m, tolerance=tolerance),
            InitialDistribution(initial, spec.m, tolerance=tolerance),
            label=label,
            metadata=metadata,
        )
    except ModelFileError:
        raise
    except ModelValidationError as e:
        raise ModelFileError(str(e)) from e

    logger.info(f"Loaded {spec.mode.value} model m={spec.m} with {model.transitions.row_count} rows")
    return model


def import_matrix(
    transitions_source: TextSource,
    spec: ModelSpec,
    initial_source: Optional[TextSource] = None,
    label: str = "",
    tolerance: Optional[float] = None,
) -> CamModel:
    """
    Build a model from headerless whitespace-separated matrix files.

    Transition rows have m+2 fields (context, next, probability); initial rows,
    when given, have m+1. Without an initial file every transition context is
    equally likely. Blank lines and '#' comments are skipped.
    """
    tolerance = MODEL_FILE_CONFIG["normalization_tolerance"] if tolerance is None else tolerance
    text = _read_text(transitions_source)
    rows = _numbered_rows(enumerate(text.split("\n"), start=1))
    transitions = _collect_transitions(rows, spec.m, tolerance)
    if not transitions:
        raise ModelFileError("Transition matrix has no rows")

    if initial_source is not None:
        initial_text = _read_text(initial_source)
        initial = _collect_initial(_numbered_rows(enumerate(initial_text.split("\n"), start=1)), spec.m, tolerance)
    else:
        initial = {context: 1.0 / len(transitions) for context in transitions}

    try:
        model = CamModel(
            spec,
            TransitionTable(transitions, spec.m, tolerance=tolerance),
            InitialDistribution(initial, spec.m, tolerance=max(tolerance, 1e-9)),
            label=label,
            metadata={"source": "import"},
        )
    except ModelValidationError as e:
        raise ModelFileError(str(e)) from e
    logger.info(f"Imported {model.transitions.row_count} transition rows over {model.transitions.context_count} contexts")
    return model
