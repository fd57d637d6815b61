"""
Pipeline Run Monitoring and Metrics Collection
Tracks quantize/fit/generate/validate stages: latency, item throughput and
data-quality counters, for JSON and Prometheus export
"""

import time
import json
import logging
from contextlib import contextmanager
from typing import Dict, List, Any, Optional
from datetime import datetime, timezone
from dataclasses import dataclass, asdict, field
from collections import defaultdict

from shared_utils import ensure_parent_dir

logger = logging.getLogger(__name__)


@dataclass
class StageMetric:
    """Single pipeline stage execution"""
    timestamp: str
    operation: str  # e.g., "read", "quantize", "fit", "generate", "validate", "write"
    latency_ms: float
    items: int  # events, symbols or rows processed
    items_per_second: float
    success: bool
    error: Optional[str] = None
    counters: Dict[str, float] = field(default_factory=dict)


class RunMonitor:
    """
    Monitor and track pipeline stages of one CLI run.

    Tracks:
    - Latency per stage
    - Items processed and throughput
    - Data-quality counters (dropped, clamped, split, dead_ends, ...)
    - Success/failure rates

    Export formats:
    - JSON
    - Prometheus text format
    - Console summary
    """

    def __init__(self):
        self.metrics: List[StageMetric] = []
        self.start_time = time.time()

        self.total_stages = 0
        self.total_errors = 0
        self.total_items = 0
        self.operation_stats = defaultdict(lambda: {
            "count": 0,
            "total_latency_ms": 0.0,
            "total_items": 0,
            "errors": 0,
            "counters": defaultdict(float),
        })

    def track_stage(
        self,
        operation: str,
        latency_ms: float,
        items: int = 0,
        success: bool = True,
        error: Optional[str] = None,
        **counters: float
    ) -> StageMetric:
        """Track a single stage execution"""
        throughput = items / (latency_ms / 1000) if latency_ms > 0 else 0.0
        metric = StageMetric(
            timestamp=datetime.now(timezone.utc).isoformat(),
            operation=operation,
            latency_ms=latency_ms,
            items=items,
            items_per_second=throughput,
            success=success,
            error=error,
            counters=dict(counters),
        )
        self.metrics.append(metric)

        self.total_stages += 1
        self.total_items += items
        if not success:
            self.total_errors += 1

        op_stats = self.operation_stats[operation]
        op_stats["count"] += 1
        op_stats["total_latency_ms"] += latency_ms
        op_stats["total_items"] += items
        if not success:
            op_stats["errors"] += 1
        for name, value in counters.items():
            op_stats["counters"][name] += value

        logger.info(
            f"Stage [{operation}] - Latency: {latency_ms:.0f}ms, Items: {items} "
            f"({throughput:,.0f}/s){', ' + json.dumps(counters) if counters else ''}"
        )
        return metric

    @contextmanager
    def stage(self, operation: str):
        """
        Time a block; the yielded dict collects `items` and extra counters.

            with monitor.stage("fit") as stage:
                result = fit(trace, spec)
                stage["items"] = result.symbol_count
        """
        record: Dict[str, Any] = {"items": 0}
        start = time.perf_counter()
        try:
            yield record
        except Exception as e:
            latency_ms = (time.perf_counter() - start) * 1000
            items = record.pop("items", 0)
            self.track_stage(operation, latency_ms, items, success=False, error=str(e), **record)
            raise
        latency_ms = (time.perf_counter() - start) * 1000
        items = record.pop("items", 0)
        self.track_stage(operation, latency_ms, items, **record)

    def get_summary(self) -> Dict[str, Any]:
        """Get summary statistics"""
        elapsed_time = time.time() - self.start_time
        latencies = [m.latency_ms for m in self.metrics]

        summary = {
            "overview": {
                "total_stages": self.total_stages,
                "total_errors": self.total_errors,
                "success_rate": (self.total_stages - self.total_errors) / max(self.total_stages, 1),
                "elapsed_time_seconds": round(elapsed_time, 2),
                "total_items": self.total_items,
            },
            "latency": {
                "avg_ms": round(sum(latencies) / max(len(latencies), 1), 2),
                "min_ms": round(min(latencies, default=0), 2),
                "max_ms": round(max(latencies, default=0), 2),
                "p95_ms": self._calculate_percentile(latencies, 95),
            },
            "by_operation": {}
        }

        for operation, stats in self.operation_stats.items():
            total_s = stats["total_latency_ms"] / 1000
            summary["by_operation"][operation] = {
                "count": stats["count"],
                "avg_latency_ms": round(stats["total_latency_ms"] / max(stats["count"], 1), 2),
                "total_items": stats["total_items"],
                "items_per_second": round(stats["total_items"] / total_s, 2) if total_s > 0 else 0.0,
                "errors": stats["errors"],
                "success_rate": (stats["count"] - stats["errors"]) / max(stats["count"], 1),
                "counters": dict(stats["counters"]),
            }

        return summary

    def _calculate_percentile(self, values: List[float], percentile: int) -> float:
        """Calculate percentile value"""
        if not values:
            return 0.0
        sorted_values = sorted(values)
        index = int(len(sorted_values) * percentile / 100)
        return round(sorted_values[min(index, len(sorted_values) - 1)], 2)

    def export_json(self, output_file: str = "metrics/run_metrics.json") -> str:
        """Export metrics as JSON"""
        ensure_parent_dir(output_file)

        export_data = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "summary": self.get_summary(),
            "metrics": [asdict(m) for m in self.metrics]
        }

        with open(output_file, 'w', encoding='utf-8') as f:
            json.dump(export_data, f, indent=2)

        logger.info(f"Exported {len(self.metrics)} stage metrics to {output_file}")
        return output_file

    def export_prometheus(self, output_file: str = "metrics/run_metrics.prom") -> str:
        """Export metrics in Prometheus text format"""
        ensure_parent_dir(output_file)

        lines = [
            "# HELP cam_stages_total Total number of pipeline stages run",
            "# TYPE cam_stages_total counter",
            f"cam_stages_total {self.total_stages}",
            "# HELP cam_stage_errors_total Total number of failed stages",
            "# TYPE cam_stage_errors_total counter",
            f"cam_stage_errors_total {self.total_errors}",
            "# HELP cam_items_total Events, symbols or rows processed",
            "# TYPE cam_items_total counter",
            f"cam_items_total {self.total_items}",
            "# HELP cam_stage_latency_ms Stage latency in milliseconds",
            "# TYPE cam_stage_latency_ms gauge",
        ]
        for metric in self.metrics:
            lines.append(f'cam_stage_latency_ms{{operation="{metric.operation}"}} {metric.latency_ms}')

        lines.append("# HELP cam_stage_counter Data-quality counters by stage")
        lines.append("# TYPE cam_stage_counter counter")
        for operation, stats in self.operation_stats.items():
            for name, value in sorted(stats["counters"].items()):
                lines.append(f'cam_stage_counter{{operation="{operation}",counter="{name}"}} {value}')

        with open(output_file, 'w', encoding='utf-8') as f:
            f.write('\n'.join(lines) + '\n')

        logger.info(f"Exported Prometheus metrics to {output_file}")
        return output_file

    def print_summary(self):
        """Print formatted summary to console"""
        summary = self.get_summary()

        print("\n" + "=" * 80)
        print("RUN METRICS SUMMARY")
        print("=" * 80)

        print("\nOverview:")
        print(f"  Stages:          {summary['overview']['total_stages']}")
        print(f"  Errors:          {summary['overview']['total_errors']}")
        print(f"  Success Rate:    {summary['overview']['success_rate']:.1%}")
        print(f"  Elapsed Time:    {summary['overview']['elapsed_time_seconds']:.2f}s")
        print(f"  Items:           {summary['overview']['total_items']:,}")

        if summary['by_operation']:
            print("\nBy Stage:")
            for operation, stats in summary['by_operation'].items():
                print(f"\n  {operation}:")
                print(f"    Runs:          {stats['count']}")
                print(f"    Avg Latency:   {stats['avg_latency_ms']:.0f}ms")
                print(f"    Throughput:    {stats['items_per_second']:,.0f}/s")
                for name, value in stats['counters'].items():
                    print(f"    {name + ':':<15}{value:g}")

        print("\n" + "=" * 80 + "\n")


# Global monitor instance
_global_monitor = None


def get_global_monitor() -> RunMonitor:
    """Get or create global monitor instance"""
    global _global_monitor
    if _global_monitor is None:
        _global_monitor = RunMonitor()
    return _global_monitor


def reset_global_monitor():
    """Reset global monitor (useful for testing)"""
    global _global_monitor
    _global_monitor = RunMonitor()
