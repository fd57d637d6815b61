"""
End-to-end tests for the cam-model command line (fit, generate, validate, info, import).
"""

import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import contextlib
import io
import json
import shutil
import tempfile
import unittest

from cam_fixtures import iid_model, tiny_spec
from generation import generate_stream
from main import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from model_file import read_model
from trace_io import CamEvent, read_trace, write_trace

DEGENERATE_MODEL = """# cam-model v1
mode=complete
m=1
S=200,300
G=100,200
q=100
jitter_std_ms=0
[initial]
1 1
[transitions]
1 1 1
"""


def run_cli(*argv):
    """Run main() and return (exit code, captured stdout)."""
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main(list(argv))
    return code, out.getvalue()


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def path(self, name):
        return os.path.join(self.tmp, name)

    def write_text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        return self.path(name)

    def read_text(self, name):
        with open(self.path(name), encoding="utf-8") as f:
            return f.read()


class TestFit(CliTestCase):

    def setUp(self):
        super().setUp()
        events = [CamEvent(100.0 * k, 200 if k % 2 else 300) for k in range(1, 101)]
        write_trace(events, self.path("toy.csv"))

    def test_toy_trace(self):
        code, out = run_cli("fit", "--trace", self.path("toy.csv"), "--m", "1",
                            "--sizes", "200,300", "--intervals", "100,200", "--out", self.path("toy.cam"))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("MODEL FIT COMPLETE", out)
        model = read_model(self.path("toy.cam"))
        self.assertEqual(model.transitions.row_count, 2)
        self.assertEqual(model.transitions.probability((1,), 2), 1.0)
        self.assertEqual(model.metadata["fit_symbols"], "99")

    def test_size_mode(self):
        code, _ = run_cli("fit", "--trace", self.path("toy.csv"), "--m", "1", "--mode", "size",
                          "--sizes", "200,300", "--out", self.path("size.cam"))
        self.assertEqual(code, EXIT_OK)
        text = self.read_text("size.cam")
        self.assertIn("mode=size\n", text)
        self.assertNotIn("G=", text)

    def test_joint_fit_over_several_traces(self):
        shutil.copy(self.path("toy.csv"), self.path("toy2.csv"))
        code, _ = run_cli("fit", "--trace", self.path("toy.csv"), self.path("toy2.csv"), "--m", "1",
                          "--preset", "volkswagen:highway", "--label", "joint", "--out", self.path("joint.cam"))
        self.assertEqual(code, EXIT_OK)
        model = read_model(self.path("joint.cam"))
        self.assertEqual(model.metadata["fit_traces"], "2")
        self.assertEqual(model.metadata["fit_symbols"], "198")
        self.assertEqual(model.label, "joint")

    def test_missing_sizes_is_usage_error(self):
        code, _ = run_cli("fit", "--trace", self.path("toy.csv"), "--m", "1", "--out", self.path("x.cam"))
        self.assertEqual(code, EXIT_USAGE)

    def test_missing_trace_is_data_error(self):
        code, _ = run_cli("fit", "--trace", self.path("absent.csv"), "--m", "1",
                          "--sizes", "200,300", "--out", self.path("x.cam"))
        self.assertEqual(code, EXIT_DATA)

    def test_invalid_utf8_trace_is_data_error(self):
        with open(self.path("binary.csv"), "wb") as f:
            f.write(b"t_ms,size_bytes\n\xff\xfe,300\n")
        code, _ = run_cli("fit", "--trace", self.path("binary.csv"), "--m", "1",
                          "--sizes", "200,300", "--out", self.path("x.cam"))
        self.assertEqual(code, EXIT_DATA)

    def test_malformed_trace_is_data_error(self):
        self.write_text("bad.csv", "t_ms,size_bytes\n0.000,200\nabc,300\n")
        code, _ = run_cli("fit", "--trace", self.path("bad.csv"), "--m", "1",
                          "--sizes", "200,300", "--out", self.path("x.cam"))
        self.assertEqual(code, EXIT_DATA)


class TestGenerate(CliTestCase):

    def setUp(self):
        super().setUp()
        self.model_path = self.write_text("degenerate.cam", DEGENERATE_MODEL)

    def test_degenerate_trace(self):
        code, _ = run_cli("generate", "--model", self.model_path, "--count", "3", "--seed", "1",
                          "--out", self.path("out.csv"))
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(self.read_text("out.csv"), "t_ms,size_bytes\n100.000,200\n200.000,200\n300.000,200\n")

    def test_same_seed_identical_files(self):
        spec = tiny_spec(1, 3.0)
        model = iid_model({1: 0.4, 2: 0.1, 3: 0.1, 4: 0.4}, spec)
        from model_file import write_model
        write_model(model, self.path("iid.cam"))
        for name in ("a.csv", "b.csv"):
            code, _ = run_cli("generate", "--model", self.path("iid.cam"), "--count", "500",
                              "--seed", "42", "--emit-symbols", "--out", self.path(name))
            self.assertEqual(code, EXIT_OK)
        self.assertEqual(self.read_text("a.csv"), self.read_text("b.csv"))
        self.assertTrue(self.read_text("a.csv").startswith("t_ms,size_bytes,symbol\n"))

    def test_seed_is_printed_when_omitted(self):
        code, out = run_cli("generate", "--model", self.model_path, "--count", "2", "--out", self.path("out.csv"))
        self.assertEqual(code, EXIT_OK)
        self.assertRegex(out.splitlines()[0], r"^seed=\d+$")

    def test_duration(self):
        code, _ = run_cli("generate", "--model", self.model_path, "--duration", "1", "--seed", "1",
                          "--out", self.path("out.csv"))
        self.assertEqual(code, EXIT_OK)
        events = read_trace(self.path("out.csv"))
        self.assertEqual(len(events), 10)
        self.assertEqual(events[-1].t_ms, 1000.0)

    def test_fleet_files(self):
        code, _ = run_cli("generate", "--model", self.model_path, "--count", "5", "--seed", "3",
                          "--vehicles", "3", "--out", self.path("fleet.csv"))
        self.assertEqual(code, EXIT_OK)
        for k in (1, 2, 3):
            self.assertEqual(len(read_trace(self.path(f"fleet_v{k}.csv"))), 5)

    def test_zero_count_writes_header_only(self):
        code, _ = run_cli("generate", "--model", self.model_path, "--count", "0", "--seed", "1",
                          "--out", self.path("empty.csv"))
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(self.read_text("empty.csv"), "t_ms,size_bytes\n")

    def test_usage_errors(self):
        with self.assertRaises(SystemExit) as ctx, contextlib.redirect_stderr(io.StringIO()):
            main(["generate", "--model", self.model_path])
        self.assertEqual(ctx.exception.code, EXIT_USAGE)
        with self.assertRaises(SystemExit) as ctx, contextlib.redirect_stderr(io.StringIO()):
            main(["generate", "--model", self.model_path, "--count", "1", "--duration", "1", "--out", "x"])
        self.assertEqual(ctx.exception.code, EXIT_USAGE)
        with contextlib.redirect_stderr(io.StringIO()):
            code, _ = run_cli("generate", "--model", self.model_path, "--out", self.path("x.csv"))
        self.assertEqual(code, EXIT_USAGE)

    def test_seed_outside_u64_is_usage_error(self):
        for seed in ("-1", str(2 ** 64), "seven"):
            with self.subTest(seed=seed):
                with self.assertRaises(SystemExit) as ctx, contextlib.redirect_stderr(io.StringIO()):
                    main(["generate", "--model", self.model_path, "--count", "3",
                          "--seed", seed, "--out", self.path("out.csv")])
                self.assertEqual(ctx.exception.code, EXIT_USAGE)
        code, _ = run_cli("generate", "--model", self.model_path, "--count", "3",
                          "--seed", str(2 ** 64 - 1), "--out", self.path("out.csv"))
        self.assertEqual(code, EXIT_OK)

    def test_interval_model_with_vehicles_is_usage_error(self):
        with contextlib.redirect_stderr(io.StringIO()):
            code, _ = run_cli("generate", "--model", self.model_path, "--interval-model", self.model_path,
                              "--count", "3", "--vehicles", "2", "--out", self.path("out.csv"))
        self.assertEqual(code, EXIT_USAGE)
        self.assertFalse(os.path.exists(self.path("out.csv")))

    def test_missing_model_file(self):
        code, _ = run_cli("generate", "--model", self.path("absent.cam"), "--count", "3",
                          "--seed", "1", "--out", self.path("out.csv"))
        self.assertEqual(code, EXIT_DATA)

    def test_malformed_model_file(self):
        bad = self.write_text("bad.cam", DEGENERATE_MODEL.replace("1 1 1\n", "1 1 0.5\n"))
        code, _ = run_cli("generate", "--model", bad, "--count", "3", "--seed", "1", "--out", self.path("out.csv"))
        self.assertEqual(code, EXIT_DATA)


class TestValidate(CliTestCase):

    def test_fit_generate_validate(self):
        spec = tiny_spec(1, 2.0)
        reference = generate_stream(iid_model({1: 0.4, 2: 0.1, 3: 0.1, 4: 0.4}, spec), count=5000, seed=9)
        write_trace(reference, self.path("reference.csv"))

        code, _ = run_cli("fit", "--trace", self.path("reference.csv"), "--m", "1", "--sizes", "200,300",
                          "--intervals", "100,200", "--out", self.path("model.cam"))
        self.assertEqual(code, EXIT_OK)
        code, _ = run_cli("generate", "--model", self.path("model.cam"), "--count", "5000", "--seed", "10",
                          "--out", self.path("generated.csv"))
        self.assertEqual(code, EXIT_OK)
        code, out = run_cli("--metrics-out", self.path("metrics/run.json"),
                            "validate", "--model", self.path("model.cam"), "--reference", self.path("reference.csv"),
                            "--generated", self.path("generated.csv"), "--lags", "5", "--report", self.path("report.tsv"))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("VALIDATION COMPLETE", out)

        report = dict(line.split("\t", 1) for line in self.read_text("report.tsv").splitlines())
        self.assertLess(float(report["kl_divergence"]), 0.01)
        self.assertLess(float(report["tv"]), 0.05)
        self.assertIn("crosscorr[-5]", report)

        with open(self.path("metrics/run.json"), encoding="utf-8") as f:
            metrics = json.load(f)
        self.assertEqual([m["operation"] for m in metrics["metrics"]], ["read", "validate", "write"])
        self.assertTrue(os.path.exists(self.path("metrics/run.json.prom")))

    def test_constant_reference_reports_undefined_correlation(self):
        events = [CamEvent(100.0 * k, 200) for k in range(1, 50)]
        write_trace(events, self.path("flat.csv"))
        model_path = self.write_text("degenerate.cam", DEGENERATE_MODEL)
        code, _ = run_cli("validate", "--model", model_path, "--reference", self.path("flat.csv"),
                          "--generated", self.path("flat.csv"), "--report", self.path("r.tsv"))
        self.assertEqual(code, EXIT_OK)
        report = dict(line.split("\t", 1) for line in self.read_text("r.tsv").splitlines())
        self.assertEqual(report["kl_divergence"], "0")
        self.assertEqual(report["tv"], "0")
        self.assertEqual(report["undefined_correlations"], "autocorr_size,autocorr_interval,crosscorr")

    def test_metrics_summary_is_printed(self):
        events = [CamEvent(100.0 * k, 200) for k in range(1, 50)]
        write_trace(events, self.path("flat.csv"))
        model_path = self.write_text("degenerate.cam", DEGENERATE_MODEL)
        code, out = run_cli("--metrics-out", self.path("m.json"), "validate", "--model", model_path,
                            "--reference", self.path("flat.csv"), "--generated", self.path("flat.csv"),
                            "--report", self.path("r.tsv"))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("RUN METRICS SUMMARY", out)


class TestInfoAndImport(CliTestCase):

    def test_preset_alphabet_sizes(self):
        code, out = run_cli("info", "--preset", "volkswagen")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("|A|: 40", out.splitlines())
        code, out = run_cli("info", "--preset", "renault:highway")
        self.assertIn("|A|: 50", out.splitlines())
        self.assertIn("jitter_std_ms: 2.711", out.splitlines())

    def test_model_summary(self):
        model_path = self.write_text("degenerate.cam", DEGENERATE_MODEL)
        code, out = run_cli("info", "--model", model_path)
        self.assertEqual(code, EXIT_OK)
        self.assertIn("transition_rows: 1", out.splitlines())
        self.assertIn("dead_end_contexts: 0", out.splitlines())

    def test_info_needs_a_target(self):
        with contextlib.redirect_stderr(io.StringIO()):
            code, _ = run_cli("info")
        self.assertEqual(code, EXIT_USAGE)

    def test_unknown_preset(self):
        code, _ = run_cli("info", "--preset", "tesla")
        self.assertEqual(code, EXIT_DATA)

    def test_explicit_zero_jitter_overrides_preset(self):
        matrix = self.write_text("rows.txt", "1 2 1\n2 1 1\n")
        code, _ = run_cli("import", "--transitions", matrix, "--m", "1", "--preset", "volkswagen:highway",
                          "--jitter-std", "0", "--out", self.path("zero.cam"))
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(read_model(self.path("zero.cam")).spec.jitter_std_ms, 0.0)

    def test_import_matrix(self):
        matrix = self.write_text("rows.txt", "13 6 15 14 13 2 0.143\n13 6 15 14 13 8 0.143\n"
                                             "13 6 15 14 13 12 0.143\n13 6 15 14 13 16 0.571\n")
        code, _ = run_cli("import", "--transitions", matrix, "--m", "5", "--preset", "volkswagen:highway",
                          "--label", "vw-published", "--out", self.path("vw.cam"))
        self.assertEqual(code, EXIT_OK)
        model = read_model(self.path("vw.cam"))
        self.assertEqual(model.spec.alphabet_size, 40)
        self.assertEqual(model.spec.jitter_std_ms, 3.444)
        self.assertEqual(model.initial.probability((13, 6, 15, 14, 13)), 1.0)
        self.assertIn("13 6 15 14 13 16 0.571\n", self.read_text("vw.cam"))


if __name__ == '__main__':
    unittest.main()
