"""
Generation throughput benchmark.

Fits an m=5 complete model with roughly 2,000 transition rows on a synthetic
Volkswagen-alphabet trace, then times single-threaded CAM generation.

Usage: python scripts/benchmark_generation.py [count] [seed]
"""

import sys
import os
import time

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'CamTrafficModel'))

import numpy as np

from fitting import fit
from generation import generate_stream
from model import ModelMode, preset_spec
from trace_io import QuantizedTrace

TARGET_CAMS_PER_SECOND = 100_000


def build_benchmark_model(seed: int = 7, length: int = 2_600, branching: int = 3):
    """
    m=5 model fitted on a sparse first-order walk over the 40-symbol alphabet.

    Every symbol may be followed by `branching` fixed successors, so the number
    of distinct 6-symbol windows (and thus transition rows) stays near 2,000.
    """
    spec = preset_spec("volkswagen", "highway", ModelMode.COMPLETE, m=5)
    rng = np.random.default_rng(seed)
    alphabet = spec.alphabet_size
    successors = rng.integers(1, alphabet + 1, size=(alphabet + 1, branching))
    symbols = np.empty(length, dtype=np.int64)
    symbols[0] = 1
    picks = rng.integers(0, branching, size=length)
    for k in range(1, length):
        symbols[k] = successors[symbols[k - 1], picks[k]]
    result = fit(QuantizedTrace.from_symbols(symbols, spec), spec)
    return result.to_model(spec, label="benchmark")


def run_benchmark(count: int = 1_000_000, seed: int = 1) -> dict:
    model = build_benchmark_model()
    start = time.perf_counter()
    stream = generate_stream(model, count=count, seed=seed)
    elapsed = time.perf_counter() - start
    return {
        "transition_rows": model.transitions.row_count,
        "cams": len(stream),
        "seconds": elapsed,
        "cams_per_second": len(stream) / elapsed if elapsed > 0 else float("inf"),
    }


if __name__ == "__main__":
    count = int(sys.argv[1]) if len(sys.argv) > 1 else 1_000_000
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 1
    result = run_benchmark(count, seed)

    print("=" * 80)
    print("GENERATION THROUGHPUT")
    print("=" * 80)
    print(f"Transition rows: {result['transition_rows']}")
    print(f"CAMs generated:  {result['cams']:,}")
    print(f"Elapsed:         {result['seconds']:.2f}s")
    print(f"Throughput:      {result['cams_per_second']:,.0f} CAMs/s (target {TARGET_CAMS_PER_SECOND:,})")
    print("=" * 80)
    sys.exit(0 if result["cams_per_second"] >= TARGET_CAMS_PER_SECOND else 1)
