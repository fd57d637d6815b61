"""
Statistical validation of generated CAM streams against reference traces.

- joint / marginal PDFs over the model alphabet
- KL divergence  D(P||Q) = sum_a P(a) log(P(a) / Q(a))   (nats by default)
- total variation  delta(P, Q) = max_a |P(a) - Q(a)|     (sup convention, not 1/2 L1)
- autocorrelation and cross-correlation of the physical series (bytes, ms),
  biased (divide-by-n) estimator
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import rel_entr

from config import VALIDATION_CONFIG
from errors import (
    AlphabetMismatchError,
    EmptyModelError,
    ModelValidationError,
    SymbolIndexError,
    UndefinedCorrelationError,
)
from model import CamModel, ModelMode, project_symbols
from shared_utils import ensure_parent_dir

logger = logging.getLogger(__name__)

LagSeries = List[Tuple[int, float]]


@dataclass(frozen=True, eq=False)
class Pdf:
    """Discrete distribution over an ordered alphabet; keeps the counts it came from."""
    alphabet: Tuple
    probs: np.ndarray
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        object.__setattr__(self, "probs", probs)
        if probs.shape != (len(self.alphabet),):
            raise ModelValidationError(f"{probs.shape[0]} probabilities for {len(self.alphabet)} outcomes")
        if probs.size and (np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9):
            raise ModelValidationError(f"Not a probability distribution (sum={probs.sum():.12g})")

    @classmethod
    def from_counts(cls, alphabet: Sequence, counts: Sequence[int]) -> "Pdf":
        counts = np.asarray(counts, dtype=np.int64)
        total = int(counts.sum())
        if total <= 0:
            raise EmptyModelError("Cannot build a PDF from zero observations")
        return cls(tuple(alphabet), counts / total, counts)

    def __len__(self) -> int:
        return len(self.alphabet)

    def as_dict(self) -> Dict[Any, float]:
        return dict(zip(self.alphabet, self.probs.tolist()))


def _check_same_alphabet(p: Pdf, q: Pdf) -> None:
    if p.alphabet != q.alphabet:
        raise AlphabetMismatchError(f"PDFs are defined over different alphabets ({len(p)} vs {len(q)} outcomes)")


def joint_pdf(symbols: Sequence[int], alphabet_size: int) -> Pdf:
    """Empirical frequency of each symbol 1..alphabet_size (unseen symbols keep probability 0)."""
    arr = np.asarray(symbols, dtype=np.int64)
    if arr.size == 0:
        raise EmptyModelError("Cannot build a PDF from an empty symbol list")
    if arr.min() < 1 or arr.max() > alphabet_size:
        raise SymbolIndexError(f"Symbols outside 1..{alphabet_size}")
    counts = np.bincount(arr, minlength=alphabet_size + 1)[1:]
    return Pdf.from_counts(range(1, alphabet_size + 1), counts)


def marginalize(joint: Pdf, s_card: int, keep: ModelMode) -> Pdf:
    """Size or interval marginal of a complete-mode joint PDF (sums counts when available)."""
    keep = ModelMode.parse(keep)
    if len(joint) % s_card:
        raise ModelValidationError(f"Joint alphabet of {len(joint)} symbols is not a multiple of |S|={s_card}")
    g_card = len(joint) // s_card
    # symbol n-1 = (j-1)*|S| + (i-1): rows are intervals, columns are sizes
    source = joint.counts if joint.counts is not None else joint.probs
    grid = np.asarray(source).reshape(g_card, s_card)
    if keep is ModelMode.SIZE_ONLY:
        marginal, card = grid.sum(axis=0), s_card
    elif keep is ModelMode.INTERVAL_ONLY:
        marginal, card = grid.sum(axis=1), g_card
    else:
        return joint
    if joint.counts is not None:
        return Pdf.from_counts(range(1, card + 1), marginal)
    return Pdf(tuple(range(1, card + 1)), marginal / marginal.sum())


def size_pdf(symbols: Sequence[int], s_card: int) -> Pdf:
    """PDF of size indices of complete-mode symbols."""
    return joint_pdf(project_symbols(symbols, s_card, ModelMode.SIZE_ONLY), s_card)


def interval_pdf(symbols: Sequence[int], s_card: int, g_card: int) -> Pdf:
    """PDF of interval indices of complete-mode symbols."""
    return joint_pdf(project_symbols(symbols, s_card, ModelMode.INTERVAL_ONLY), g_card)


def size_histogram(sizes: Sequence[int], bin_bytes: int = 10) -> Pdf:
    """Size PDF on fixed-width bins; the alphabet holds each bin's lower edge in bytes."""
    sizes = np.asarray(sizes, dtype=float)
    if sizes.size == 0:
        raise EmptyModelError("Cannot build a size histogram from zero events")
    low = math.floor(sizes.min() / bin_bytes) * bin_bytes
    high = math.floor(sizes.max() / bin_bytes) * bin_bytes + bin_bytes
    edges = np.arange(low, high + bin_bytes, bin_bytes)
    counts, _ = np.histogram(sizes, bins=edges)
    return Pdf.from_counts([int(e) for e in edges[:-1]], counts)


def jitter_pdf(residuals_ms: Sequence[float], bin_ms: float = None, limit_ms: float = 20.0) -> Pdf:
    """Residual PDF on [-limit, +limit] with bins of bin_ms; the alphabet holds bin centres."""
    bin_ms = bin_ms or VALIDATION_CONFIG["jitter_pdf_bin_ms"]
    residuals = np.asarray(residuals_ms, dtype=float)
    edges = np.arange(-limit_ms, limit_ms + bin_ms / 2, bin_ms)
    counts, _ = np.histogram(residuals, bins=edges)
    centres = [round(float(c), 6) for c in (edges[:-1] + edges[1:]) / 2]
    return Pdf.from_counts(centres, counts)


def estimate_jitter_std(residuals_ms: Sequence[float]) -> Optional[float]:
    """
    Jitter σ from inter-arrival residuals.

    A residual is the difference of two independent jitters around the nominal
    grid, so σ = std(residuals) / sqrt(2).
    """
    residuals = np.asarray(residuals_ms, dtype=float)
    if residuals.size < 2:
        return None
    return float(np.std(residuals, ddof=1) / math.sqrt(2))


def _log_base(base: Union[str, float, None]) -> float:
    if base in (None, "e"):
        return 1.0
    if str(base) == "2":
        return math.log(2.0)
    base = float(base)
    if base <= 0 or base == 1:
        raise ModelValidationError(f"Invalid logarithm base {base}")
    return math.log(base)


def kl_divergence(p: Pdf, q: Pdf, base: Union[str, float] = "e", smoothing: Optional[float] = None) -> float:
    """
    D_KL(P || Q): information lost when Q approximates P.

    Terms with P(a)=0 contribute 0. Any a with P(a)>0 and Q(a)=0 gives +inf
    unless `smoothing` ε is supplied, in which case Q <- (Q + ε) / sum.
    """
    _check_same_alphabet(p, q)
    q_probs = q.probs
    if smoothing:
        q_probs = q_probs + smoothing
        q_probs = q_probs / q_probs.sum()
    value = float(np.sum(rel_entr(p.probs, q_probs)))
    if math.isinf(value):
        return math.inf
    return value / _log_base(base)


def total_variation(p: Pdf, q: Pdf) -> float:
    """delta(P, Q) = max_a |P(a) - Q(a)|."""
    _check_same_alphabet(p, q)
    if not len(p):
        return 0.0
    return float(np.max(np.abs(p.probs - q.probs)))


def _centred(series: Sequence[float], name: str) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if x.size == 0 or np.ptp(x) == 0:
        raise UndefinedCorrelationError(f"Correlation of a constant {name} series is undefined")
    return x - x.mean()


def autocorrelation(series: Sequence[float], max_lag: int) -> LagSeries:
    """
    Sample autocorrelation at lags 0..max_lag.

    r(k) = sum_t (x_t - m)(x_{t+k} - m) / sum_t (x_t - m)^2
    """
    x = _centred(series, "input")
    n = x.shape[0]
    if max_lag < 0 or n <= max_lag:
        raise ModelValidationError(f"Series of length {n} is too short for max_lag={max_lag}")
    denom = float(np.dot(x, x))
    return [(k, float(np.dot(x[:n - k], x[k:]) / denom)) for k in range(max_lag + 1)]


def cross_correlation(a: Sequence[float], b: Sequence[float], max_lag: int) -> LagSeries:
    """
    Normalized cross-correlation at lags -max_lag..+max_lag.

    Lag k > 0 pairs a_t with b_{t-k}; lag k < 0 pairs a_t with b_{t+|k|}.
    """
    x = _centred(a, "first")
    y = _centred(b, "second")
    if x.shape != y.shape:
        raise ModelValidationError(f"Series lengths differ ({x.shape[0]} vs {y.shape[0]})")
    n = x.shape[0]
    if max_lag < 0 or n <= max_lag:
        raise ModelValidationError(f"Series of length {n} is too short for max_lag={max_lag}")
    denom = math.sqrt(float(np.dot(x, x)) * float(np.dot(y, y)))
    values = []
    for k in range(-max_lag, max_lag + 1):
        if k > 0:
            cov = np.dot(x[k:], y[:-k])
        elif k < 0:
            cov = np.dot(x[:k], y[-k:])
        else:
            cov = np.dot(x, y)
        values.append((k, float(cov / denom)))
    return values


def compare_autocorrelation(a: LagSeries, b: LagSeries, skip_zero: bool = True) -> float:
    """Largest absolute lag-wise difference of two correlation sequences."""
    lookup = dict(b)
    diffs = [abs(v - lookup[k]) for k, v in a if k in lookup and not (skip_zero and k == 0)]
    return max(diffs) if diffs else 0.0


@dataclass
class ValidationReport:
    mode: str
    kl_divergence: float
    tv: float
    kl_unit: str = "nats"
    size_kl: Optional[float] = None
    size_tv: Optional[float] = None
    interval_kl: Optional[float] = None
    interval_tv: Optional[float] = None
    autocorr_size: LagSeries = field(default_factory=list)
    autocorr_size_reference: LagSeries = field(default_factory=list)
    autocorr_interval: LagSeries = field(default_factory=list)
    autocorr_interval_reference: LagSeries = field(default_factory=list)
    crosscorr: LagSeries = field(default_factory=list)
    crosscorr_reference: LagSeries = field(default_factory=list)
    autocorr_size_max_diff: Optional[float] = None
    autocorr_interval_max_diff: Optional[float] = None
    crosscorr_max_diff: Optional[float] = None
    jitter_std_model: Optional[float] = None
    jitter_std_reference: Optional[float] = None
    jitter_std_generated: Optional[float] = None
    reference_symbols: int = 0
    generated_symbols: int = 0
    reference_dropped: int = 0
    generated_dropped: int = 0
    undefined_correlations: str = ""

    LAG_FIELDS = (
        "autocorr_size", "autocorr_size_reference",
        "autocorr_interval", "autocorr_interval_reference",
        "crosscorr", "crosscorr_reference",
    )

    def scalars(self) -> Dict[str, Any]:
        return {k: v for k, v in self.__dict__.items() if k not in self.LAG_FIELDS}

    def to_records(self) -> List[Dict[str, Any]]:
        """Flat records: {metric, lag, value}; lag is null for scalar metrics."""
        records = [{"metric": k, "lag": None, "value": v} for k, v in self.scalars().items()]
        for name in self.LAG_FIELDS:
            records.extend({"metric": name, "lag": lag, "value": value} for lag, value in getattr(self, name))
        return records

    def to_text(self) -> str:
        lines = [f"{k}\t{_format_value(v)}" for k, v in self.scalars().items()]
        for name in self.LAG_FIELDS:
            lines.extend(f"{name}[{lag}]\t{_format_value(value)}" for lag, value in getattr(self, name))
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> Tuple[str, str]:
        """Write the key<TAB>value report to `path` and JSON records to `path + '.json'`."""
        ensure_parent_dir(path)
        json_path = f"{path}.json"
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())
        records = [dict(r, value=_json_value(r["value"])) for r in self.to_records()]
        with open(json_path, "w", encoding="utf-8", newline="\n") as f:
            json.dump({"schema": ["metric", "lag", "value"], "records": records}, f, indent=2)
        logger.info(f"Validation report written to {path} and {json_path}")
        return path, json_path


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.9g}"
    return "" if value is None else str(value)


def _json_value(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def _physical_series(model: CamModel, symbols: np.ndarray) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    sizes, intervals = model.spec.decode_arrays(symbols)
    return (
        sizes.astype(float) if sizes is not None else None,
        intervals.astype(float) if intervals is not None else None,
    )


def _correlate_pair(report: ValidationReport, name: str, undefined: List[str], correlate,
                    reference, generated, skip_zero: bool = True) -> None:
    """Fill `<name>_reference`, `<name>` and `<name>_max_diff`; constant inputs leave them empty."""
    try:
        ref_values = correlate(reference)
        gen_values = correlate(generated)
    except UndefinedCorrelationError:
        undefined.append(name)
        return
    setattr(report, f"{name}_reference", ref_values)
    setattr(report, name, gen_values)
    setattr(report, f"{name}_max_diff", compare_autocorrelation(ref_values, gen_values, skip_zero=skip_zero))


def validate(
    model: CamModel,
    reference,
    generated,
    max_lag: Optional[int] = None,
    kl_base: Union[str, float] = None,
    smoothing: Optional[float] = None,
) -> ValidationReport:
    """
    Compare a generated trace with a reference trace under a model's alphabet.

    Args:
        model: Model whose spec defines the alphabet (joint PDFs in complete
            mode, marginal PDFs for separate models)
        reference: Reference CamEvents (or array-backed stream)
        generated: Generated CamEvents (or array-backed stream)
        max_lag: Correlation lags (default 15)
        kl_base: 'e' (nats) or 2 (bits)
        smoothing: Optional ε added to the generated PDF before KL

    Returns:
        ValidationReport; correlations of a constant series are left empty
        and named in undefined_correlations
    """
    from trace_io import quantize

    max_lag = VALIDATION_CONFIG["max_lag"] if max_lag is None else max_lag
    kl_base = VALIDATION_CONFIG["kl_base"] if kl_base is None else kl_base
    spec = model.spec

    ref_trace = quantize(reference, spec)
    gen_trace = quantize(generated, spec)
    ref_symbols, gen_symbols = ref_trace.symbols, gen_trace.symbols

    p = joint_pdf(ref_symbols, spec.alphabet_size)
    q = joint_pdf(gen_symbols, spec.alphabet_size)
    report = ValidationReport(
        mode=spec.mode.value,
        kl_divergence=kl_divergence(p, q, kl_base, smoothing),
        tv=total_variation(p, q),
        kl_unit="nats" if _log_base(kl_base) == 1.0 else ("bits" if str(kl_base) == "2" else f"log{kl_base}"),
        jitter_std_model=spec.jitter_std_ms if spec.models_intervals else None,
        reference_symbols=len(ref_trace),
        generated_symbols=len(gen_trace),
        reference_dropped=ref_trace.dropped_count,
        generated_dropped=gen_trace.dropped_count,
    )

    if spec.mode is ModelMode.COMPLETE:
        for keep, kl_name, tv_name in (
            (ModelMode.SIZE_ONLY, "size_kl", "size_tv"),
            (ModelMode.INTERVAL_ONLY, "interval_kl", "interval_tv"),
        ):
            p_m, q_m = marginalize(p, spec.size_card, keep), marginalize(q, spec.size_card, keep)
            setattr(report, kl_name, kl_divergence(p_m, q_m, kl_base, smoothing))
            setattr(report, tv_name, total_variation(p_m, q_m))

    ref_sizes, ref_intervals = _physical_series(model, ref_symbols)
    gen_sizes, gen_intervals = _physical_series(model, gen_symbols)
    undefined: List[str] = []
    if ref_sizes is not None:
        _correlate_pair(report, "autocorr_size", undefined,
                        lambda s: autocorrelation(s, max_lag), ref_sizes, gen_sizes)
    if ref_intervals is not None:
        _correlate_pair(report, "autocorr_interval", undefined,
                        lambda s: autocorrelation(s, max_lag), ref_intervals, gen_intervals)
        report.jitter_std_reference = estimate_jitter_std(ref_trace.residuals_ms)
        report.jitter_std_generated = estimate_jitter_std(gen_trace.residuals_ms)
    if ref_sizes is not None and ref_intervals is not None:
        _correlate_pair(report, "crosscorr", undefined,
                        lambda pair: cross_correlation(pair[0], pair[1], max_lag),
                        (ref_sizes, ref_intervals), (gen_sizes, gen_intervals), skip_zero=False)
    report.undefined_correlations = ",".join(undefined)
    if undefined:
        logger.warning(f"Correlation undefined for constant series: {report.undefined_correlations}")

    logger.info(
        f"Validation ({spec.mode.value}): KL={report.kl_divergence:.6g} {report.kl_unit}, TV={report.tv:.6g} "
        f"over {report.reference_symbols} reference / {report.generated_symbols} generated symbols"
    )
    return report
