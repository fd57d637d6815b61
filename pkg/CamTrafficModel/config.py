"""
Configuration file for the CAM Traffic Model toolkit
Contains environment overrides, OEM/scenario presets and pipeline thresholds
"""

import os
from typing import Dict, Any, List, Tuple
from dotenv import load_dotenv

from errors import ModelValidationError

# Load environment variables
load_dotenv()

# Logging
LOG_LEVEL = os.getenv("CAM_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("CAM_LOG_FILE")

# Interval grid (T_CheckCamGen = 100 ms during the test drives)
DEFAULT_QUANTUM_MS = 100
DEFAULT_INTERVALS_MS: Tuple[int, ...] = tuple(range(100, 1001, 100))

# Most probable CAM sizes per OEM (bytes)
OEM_SIZE_SETS: Dict[str, Tuple[int, ...]] = {
    "volkswagen": (200, 300, 360, 455),
    "renault": (200, 330, 480, 600, 800),
}

# Jitter standard deviation (ms) per OEM and scenario
JITTER_STD_MS: Dict[str, Dict[str, float]] = {
    "volkswagen": {
        "urban": 3.235,
        "suburban": 3.814,
        "highway": 3.444,
        "universal": 3.553,
    },
    "renault": {
        "urban": 2.817,
        "suburban": 2.769,
        "highway": 2.711,
        "universal": 2.783,
    },
}

SCENARIOS = ["urban", "suburban", "highway", "universal"]

# Trace quantization thresholds
TRACE_CONFIG = {
    "size_snap_tolerance_bytes": int(os.getenv("CAM_SIZE_SNAP_TOLERANCE_BYTES", "30")),
    "timestamp_decimals": 3,  # t_ms printed with exactly 3 decimals
    "description": "Quantization onto the model alphabet",
}

# Generator settings
GENERATION_CONFIG = {
    "jitter_truncation_ms": float(os.getenv("CAM_JITTER_TRUNCATION_MS", "20")),
    "batch_size": int(os.getenv("CAM_GENERATION_BATCH", "65536")),
    "max_jitter_redraws": 64,  # resampling rounds before giving up on a tail batch
    "description": "Markov walk + jitter emission",
}

# Fitting settings
FIT_CONFIG = {
    "hist_bin_bytes": 10,  # size histogram resolution used by bin detection
    "min_peak_prob": 0.05,
    "description": "Transition counting and bin detection",
}

# Validation settings
VALIDATION_CONFIG = {
    "max_lag": 15,  # autocorrelation compared on up to 15 consecutive symbols
    "kl_base": "e",
    "jitter_pdf_bin_ms": 1.0,
    "description": "Statistical comparison of reference and generated traces",
}

# Model file settings
MODEL_FILE_CONFIG = {
    "format_header": "# cam-model v1",
    "probability_digits": 9,  # significant digits written per probability
    "normalization_tolerance": float(os.getenv("CAM_NORMALIZATION_TOLERANCE", "1e-3")),
}

# Concurrent processing configuration
CONCURRENT_CONFIG = {
    "max_workers": int(os.getenv("CAM_MAX_WORKERS", "4")),
}


def get_preset(oem: str, scenario: str = "universal") -> Dict[str, Any]:
    """
    Get the published parameters for one OEM and scenario.

    Args:
        oem: 'volkswagen' or 'renault' (case-insensitive)
        scenario: urban, suburban, highway or universal

    Returns:
        Dict with sizes, intervals, quantum, jitter σ and a label
    """
    oem_key = oem.strip().lower()
    scenario_key = scenario.strip().lower()
    if oem_key not in OEM_SIZE_SETS:
        raise ModelValidationError(f"Unknown OEM preset '{oem}'. Choose from: {sorted(OEM_SIZE_SETS)}")
    if scenario_key not in JITTER_STD_MS[oem_key]:
        raise ModelValidationError(f"Unknown scenario '{scenario}'. Choose from: {SCENARIOS}")

    return {
        "oem": oem_key,
        "scenario": scenario_key,
        "sizes": OEM_SIZE_SETS[oem_key],
        "intervals": DEFAULT_INTERVALS_MS,
        "quantum_ms": DEFAULT_QUANTUM_MS,
        "jitter_std_ms": JITTER_STD_MS[oem_key][scenario_key],
        "label": f"{oem_key}-{scenario_key}",
    }


def parse_preset_name(name: str) -> Tuple[str, str]:
    """Split 'oem[:scenario]' into (oem, scenario); scenario defaults to universal."""
    if ":" in name:
        oem, scenario = name.split(":", 1)
        return oem, scenario
    return name, "universal"


def list_presets() -> List[Dict[str, Any]]:
    """All OEM × scenario presets, in a stable order."""
    return [get_preset(oem, scenario) for oem in sorted(OEM_SIZE_SETS) for scenario in SCENARIOS]
