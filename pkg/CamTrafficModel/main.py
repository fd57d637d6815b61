# # CAM Traffic Model
# Command-line surface: fit Markov source models from CAM traces, generate
# synthetic CAM streams, validate them against a reference and inspect or
# import model files.
#
# Exit codes: 0 success, 1 usage error, 2 data/validation error.

# Imports
import argparse
import logging
import os
import sys
import time
from typing import List, Optional

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import LOG_FILE, LOG_LEVEL, TRACE_CONFIG, get_preset, parse_preset_name
from errors import CamModelError
from fitting import detect_size_bins, fit_traces
from generation import GeneratedStream, generate_fleet, generate_separate, generate_stream, new_seed
from metrics import validate
from model import IntervalSet, ModelMode, ModelSpec, SizeSet
from model_file import import_matrix, read_model, write_model
from monitoring import get_global_monitor, reset_global_monitor
from shared_utils import log_structured, new_run_id
from trace_io import EventArrays, quantize, read_events, write_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    """Inconsistent command-line arguments (exit code 1)."""


class CamArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def configure_logging(level: str = LOG_LEVEL, log_file: Optional[str] = LOG_FILE) -> None:
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, mode='a'))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers
    )


def parse_int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"Expected a comma-separated list of integers, got '{value}'")


def parse_seed(value: str) -> int:
    """argparse type for --seed: an unsigned 64-bit integer."""
    try:
        seed = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed '{value}'")
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {value}")
    return seed


# ## Spec assembly
# S, G and σ come from a preset, explicit lists or size-bin detection.

def build_spec(args, events=None) -> ModelSpec:
    mode = ModelMode.parse(args.mode)
    explicit_jitter = getattr(args, "jitter_std", None)
    jitter = explicit_jitter if explicit_jitter is not None else 0.0
    sizes = intervals = None

    if getattr(args, "preset", None):
        preset = get_preset(*parse_preset_name(args.preset))
        sizes = SizeSet(preset["sizes"])
        intervals = IntervalSet(preset["intervals"], preset["quantum_ms"])
        if explicit_jitter is None:
            jitter = preset["jitter_std_ms"]
    else:
        intervals = IntervalSet(tuple(parse_int_list(args.intervals)), args.quantum)
        if getattr(args, "sizes", None):
            sizes = SizeSet(tuple(parse_int_list(args.sizes)))
        elif getattr(args, "auto_sizes", False) and events is not None:
            sizes = detect_size_bins(events)

    if mode is not ModelMode.INTERVAL_ONLY and sizes is None:
        raise UsageError("A size set is required: pass --sizes, --auto-sizes or --preset")
    if mode is ModelMode.COMPLETE:
        return ModelSpec(mode, args.m, sizes=sizes, intervals=intervals, jitter_std_ms=jitter)
    if mode is ModelMode.SIZE_ONLY:
        return ModelSpec(mode, args.m, sizes=sizes)
    return ModelSpec(mode, args.m, intervals=intervals, jitter_std_ms=jitter)


def print_summary(title: str, values: dict) -> None:
    print(f"\n{'='*80}")
    print(title)
    print(f"{'='*80}")
    for key, value in values.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{key}: {value}")
    print(f"{'='*80}\n")


# ## Commands

def cmd_fit(args, run_id: str) -> int:
    monitor = get_global_monitor()
    with monitor.stage("read") as stage:
        traces = [read_events(path) for path in args.trace]
        stage["items"] = sum(len(t.t_ms) for t in traces)

    detection_events = None
    if args.auto_sizes and not args.sizes and not args.preset:
        detection_events = EventArrays(
            np.concatenate([t.t_ms for t in traces]), np.concatenate([t.size_bytes for t in traces])
        )
    spec = build_spec(args, detection_events)

    with monitor.stage("quantize") as stage:
        quantized = [quantize(t, spec, args.size_tolerance) for t in traces]
        stage["items"] = sum(len(q) for q in quantized)
        stage["dropped"] = sum(q.dropped_count for q in quantized)
        stage["clamped"] = sum(q.clamped_count for q in quantized)
        stage["splits"] = sum(q.split_count for q in quantized)

    with monitor.stage("fit") as stage:
        result = fit_traces(quantized, spec)
        stage["items"] = result.symbol_count
        stage["dead_ends"] = len(result.dead_ends)

    dropped = sum(q.dropped_count for q in quantized)
    metadata = {
        "fit_symbols": str(result.symbol_count),
        "fit_dropped": str(dropped),
        "fit_traces": str(len(quantized)),
    }
    model = result.to_model(spec, label=args.label or "", metadata=metadata)
    with monitor.stage("write") as stage:
        write_model(model, args.out)
        stage["items"] = model.transitions.row_count

    summary = {
        "|A|": spec.alphabet_size,
        "transition_rows": model.transitions.row_count,
        "initial_contexts": len(model.initial),
        "dead_end_contexts": len(result.dead_ends),
        "dropped_events": dropped,
        "jitter_std_ms": result.jitter_std_ms if result.jitter_std_ms is not None else "n/a",
    }
    log_structured('INFO', "Model fitted", run_id=run_id, stage="fit", out=args.out, **summary)
    print_summary("MODEL FIT COMPLETE", summary)
    return EXIT_OK


def _vehicle_path(path: str, k: int) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}_v{k}{ext or '.csv'}"


def _write_stream(stream: GeneratedStream, path: str, emit_symbols: bool) -> None:
    write_trace(stream, path, symbols=stream.symbols if emit_symbols else None)


def cmd_generate(args, run_id: str) -> int:
    if args.count is None and args.duration is None:
        raise UsageError("Give --count or --duration")
    if args.count is not None and args.count < 0:
        raise UsageError("--count must be >= 0")
    if args.vehicles < 1:
        raise UsageError("--vehicles must be >= 1")
    if args.interval_model and args.vehicles > 1:
        raise UsageError("--interval-model generates a single stream; drop --vehicles")
    if args.interval_model and args.count is None:
        raise UsageError("--interval-model needs --count")
    seed = args.seed if args.seed is not None else new_seed()
    if args.seed is None:
        print(f"seed={seed}")

    monitor = get_global_monitor()
    with monitor.stage("read") as stage:
        model = read_model(args.model)
        interval_model = read_model(args.interval_model) if args.interval_model else None
        stage["items"] = model.transitions.row_count

    with monitor.stage("generate") as stage:
        if interval_model is not None:
            streams = [generate_separate(model, interval_model, args.count, seed)]
        elif args.vehicles > 1:
            streams = generate_fleet(model, args.vehicles, args.count, args.duration, seed)
        else:
            streams = [generate_stream(model, args.count, args.duration, seed)]
        stage["items"] = sum(len(s) for s in streams)
        stage["dead_ends"] = sum(s.dead_end_count for s in streams)

    with monitor.stage("write") as stage:
        if len(streams) == 1:
            paths = [args.out]
        else:
            paths = [_vehicle_path(args.out, k) for k in range(1, len(streams) + 1)]
        for stream, path in zip(streams, paths):
            _write_stream(stream, path, args.emit_symbols)
        stage["items"] = sum(len(s) for s in streams)

    summary = {
        "seed": seed,
        "cams": sum(len(s) for s in streams),
        "files": len(paths),
        "dead_end_fallbacks": sum(s.dead_end_count for s in streams),
    }
    log_structured('INFO', "Stream generated", run_id=run_id, stage="generate", out=args.out, **summary)
    print_summary("GENERATION COMPLETE", summary)
    return EXIT_OK


def cmd_validate(args, run_id: str) -> int:
    monitor = get_global_monitor()
    with monitor.stage("read") as stage:
        model = read_model(args.model)
        reference = read_events(args.reference)
        generated = read_events(args.generated)
        stage["items"] = len(reference.t_ms) + len(generated.t_ms)

    with monitor.stage("validate") as stage:
        report = validate(model, reference, generated, args.lags, args.kl_base, args.smooth)
        stage["items"] = report.reference_symbols + report.generated_symbols

    with monitor.stage("write"):
        text_path, json_path = report.write(args.report)

    summary = {
        "kl_divergence": report.kl_divergence,
        "kl_unit": report.kl_unit,
        "tv": report.tv,
        "reference_symbols": report.reference_symbols,
        "generated_symbols": report.generated_symbols,
        "report": text_path,
        "records": json_path,
    }
    log_structured('INFO', "Validation report written", run_id=run_id, stage="validate", **summary)
    print_summary("VALIDATION COMPLETE", summary)
    return EXIT_OK


def cmd_info(args, run_id: str) -> int:
    if args.model:
        model = read_model(args.model)
        summary = model.summary()
    elif args.preset:
        spec = build_spec(args)
        summary = {
            "label": args.preset,
            "mode": spec.mode.value,
            "m": spec.m,
            "|S|": spec.size_card,
            "|G|": spec.interval_card,
            "|A|": spec.alphabet_size,
            "transition_rows": 0,
            "initial_contexts": 0,
            "jitter_std_ms": spec.jitter_std_ms,
        }
    else:
        raise UsageError("Give --model or --preset")
    log_structured('DEBUG', "Model inspected", run_id=run_id, stage="info")
    for key, value in summary.items():
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_import(args, run_id: str) -> int:
    spec = build_spec(args)
    model = import_matrix(args.transitions, spec, args.initial, label=args.label or "")
    write_model(model, args.out)
    summary = model.summary()
    log_structured('INFO', "Matrix imported", run_id=run_id, stage="import", out=args.out,
                   rows=summary["transition_rows"])
    print_summary("IMPORT COMPLETE", summary)
    return EXIT_OK


# ## Argument parsing

def _add_alphabet_arguments(parser: argparse.ArgumentParser, default_m: Optional[int] = None) -> None:
    parser.add_argument("--mode", default="complete", help="complete | size | interval")
    parser.add_argument("--m", type=int, default=default_m, required=default_m is None, help="Model order")
    parser.add_argument("--preset", help="OEM preset, e.g. volkswagen or renault:highway")
    parser.add_argument("--sizes", help="Size set S in bytes, e.g. 200,300,360,455")
    parser.add_argument("--intervals", default="100,200,300,400,500,600,700,800,900,1000",
                        help="Interval set G in ms")
    parser.add_argument("--quantum", type=int, default=100, help="Interval quantum q in ms")


def build_parser() -> argparse.ArgumentParser:
    parser = CamArgumentParser(prog="cam-model", description="CAM traffic Markov source toolkit")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    parser.add_argument("--metrics-out", help="Export run metrics as JSON (and <path>.prom)")
    sub = parser.add_subparsers(dest="command", parser_class=CamArgumentParser)
    sub.required = True

    p = sub.add_parser("fit", help="Fit a model from one or more CAM traces")
    p.add_argument("--trace", nargs="+", required=True, help="Trace CSV(s); several are fitted jointly")
    _add_alphabet_arguments(p)
    p.add_argument("--auto-sizes", action="store_true", help="Detect S from the size histogram")
    p.add_argument("--size-tolerance", type=float, default=TRACE_CONFIG["size_snap_tolerance_bytes"])
    p.add_argument("--label")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("generate", help="Generate a synthetic CAM trace")
    p.add_argument("--model", required=True, help="Complete model, or size model with --interval-model")
    p.add_argument("--interval-model", help="Interval model driving a separate size/interval generation")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--count", type=int)
    group.add_argument("--duration", type=float, help="Seconds of nominal time")
    p.add_argument("--seed", type=parse_seed, help="Unsigned 64-bit seed")
    p.add_argument("--vehicles", type=int, default=1, help="Independent streams, one file each")
    p.add_argument("--emit-symbols", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("validate", help="Compare a generated trace with a reference trace")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--lags", type=int, default=15)
    p.add_argument("--kl-base", default="e", choices=["e", "2"])
    p.add_argument("--smooth", type=float, help="ε added to the generated PDF before KL")
    p.add_argument("--report", required=True)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("info", help="Summarize a model file or a preset")
    p.add_argument("--model")
    p.add_argument("--preset")
    p.add_argument("--mode", default="complete")
    p.add_argument("--m", type=int, default=1)
    p.set_defaults(handler=cmd_info)

    p = sub.add_parser("import", help="Convert headerless matrix rows into a model file")
    p.add_argument("--transitions", required=True, help="Rows of m+2 whitespace-separated fields")
    p.add_argument("--initial", help="Rows of m+1 fields; uniform over contexts when omitted")
    _add_alphabet_arguments(p)
    p.add_argument("--jitter-std", type=float, help="Jitter σ in ms")
    p.add_argument("--label")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_import)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    reset_global_monitor()
    run_id = new_run_id()
    start_time = time.time()

    try:
        code = args.handler(args, run_id)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"cam-model: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CamModelError, OSError) as e:
        log_structured('ERROR', str(e), run_id=run_id, stage=args.command, error_type=type(e).__name__)
        print(f"cam-model: {type(e).__name__}: {e}", file=sys.stderr)
        code = EXIT_DATA
    finally:
        if args.metrics_out:
            monitor = get_global_monitor()
            monitor.export_json(args.metrics_out)
            monitor.export_prometheus(f"{args.metrics_out}.prom")
            monitor.print_summary()

    logger.info(f"Command '{args.command}' finished in {time.time() - start_time:.2f}s with exit code {code}")
    return code


# Main execution
if __name__ == "__main__":
    sys.exit(main())
