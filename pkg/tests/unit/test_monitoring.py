"""
Unit tests for RunMonitor stage tracking and metric export.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import json
import tempfile
import unittest
from unittest.mock import patch

import cam_fixtures  # noqa: F401  (puts the repo root on sys.path)
from monitoring import RunMonitor, get_global_monitor, reset_global_monitor


class TestRunMonitor(unittest.TestCase):
    """Test suite for stage tracking."""

    def setUp(self):
        self.monitor = RunMonitor()

    def test_track_stage_accumulates(self):
        self.monitor.track_stage("quantize", 200.0, items=1000, dropped=3)
        self.monitor.track_stage("quantize", 100.0, items=500, dropped=1, splits=2)
        summary = self.monitor.get_summary()
        self.assertEqual(summary["overview"]["total_stages"], 2)
        self.assertEqual(summary["overview"]["total_items"], 1500)
        stats = summary["by_operation"]["quantize"]
        self.assertEqual(stats["avg_latency_ms"], 150.0)
        self.assertEqual(stats["items_per_second"], 5000.0)
        self.assertEqual(stats["counters"], {"dropped": 4.0, "splits": 2.0})

    def test_stage_context_records_items_and_counters(self):
        with self.monitor.stage("fit") as stage:
            stage["items"] = 42
            stage["dead_ends"] = 1
        metric = self.monitor.metrics[0]
        self.assertEqual(metric.operation, "fit")
        self.assertEqual(metric.items, 42)
        self.assertEqual(metric.counters, {"dead_ends": 1})
        self.assertTrue(metric.success)

    def test_stage_context_records_failure_and_reraises(self):
        with self.assertRaises(ValueError):
            with self.monitor.stage("read"):
                raise ValueError("line 3: bad row")
        metric = self.monitor.metrics[0]
        self.assertFalse(metric.success)
        self.assertEqual(metric.error, "line 3: bad row")
        self.assertEqual(self.monitor.get_summary()["overview"]["total_errors"], 1)

    def test_zero_latency_has_no_throughput(self):
        metric = self.monitor.track_stage("write", 0.0, items=10)
        self.assertEqual(metric.items_per_second, 0.0)

    def test_percentile(self):
        self.assertEqual(self.monitor._calculate_percentile([], 95), 0.0)
        self.assertEqual(self.monitor._calculate_percentile([1.0, 2.0, 3.0, 4.0], 50), 3.0)

    def test_exports(self):
        self.monitor.track_stage("generate", 10.0, items=100, dead_ends=2)
        with tempfile.TemporaryDirectory() as tmp:
            json_path = self.monitor.export_json(os.path.join(tmp, "out", "run.json"))
            prom_path = self.monitor.export_prometheus(os.path.join(tmp, "out", "run.prom"))
            with open(json_path, encoding="utf-8") as f:
                payload = json.load(f)
            with open(prom_path, encoding="utf-8") as f:
                prom = f.read().splitlines()
        self.assertEqual(payload["metrics"][0]["operation"], "generate")
        self.assertEqual(payload["summary"]["by_operation"]["generate"]["counters"], {"dead_ends": 2.0})
        self.assertIn("cam_stages_total 1", prom)
        self.assertIn('cam_stage_latency_ms{operation="generate"} 10.0', prom)
        self.assertIn('cam_stage_counter{operation="generate",counter="dead_ends"} 2.0', prom)

    @patch("builtins.print")
    def test_print_summary(self, mock_print):
        self.monitor.track_stage("fit", 5.0, items=10, dead_ends=1)
        self.monitor.print_summary()
        printed = "\n".join(str(call.args[0]) for call in mock_print.call_args_list if call.args)
        self.assertIn("RUN METRICS SUMMARY", printed)
        self.assertIn("dead_ends:", printed)


class TestGlobalMonitor(unittest.TestCase):

    def test_reset_replaces_instance(self):
        first = get_global_monitor()
        self.assertIs(get_global_monitor(), first)
        reset_global_monitor()
        self.assertIsNot(get_global_monitor(), first)


if __name__ == '__main__':
    unittest.main()
