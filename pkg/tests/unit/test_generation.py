"""
Unit tests for CAM generation: context seeding, inverse-CDF sampling,
jitter, determinism, separate models and the statistical acceptance runs.

The 5x10^6 band run and the throughput check need CAM_RUN_SLOW=1.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(__file__))
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'scripts'))

import time
import unittest
from collections import Counter

import numpy as np
from hypothesis import given, settings, strategies as st

from cam_fixtures import (
    RUN_SLOW,
    degenerate_model,
    iid_model,
    lag_source_symbols,
    make_model,
    oracle_symbols,
    tiny_spec,
)
from errors import EmptyModelError, ModelValidationError
from fitting import fit, fit_separate
from generation import (
    CamGenerator,
    GeneratorState,
    draw_jitter,
    emit_cam,
    generate_fleet,
    generate_separate,
    generate_stream,
    generate_symbols,
    next_symbol,
    seed_context,
    spawn_streams,
)
from metrics import (
    autocorrelation,
    compare_autocorrelation,
    cross_correlation,
    estimate_jitter_std,
    joint_pdf,
    kl_divergence,
    total_variation,
    validate,
)
from model import InitialDistribution, ModelMode, ModelSpec, SizeSet, IntervalSet, TransitionTable, preset_spec
from trace_io import QuantizedTrace, jitter_residuals, quantize

# one row of a published order-5 Volkswagen matrix, plus a single-successor row
PUBLISHED_ROWS = {
    (13, 6, 15, 14, 13): {2: 0.143, 8: 0.143, 12: 0.143, 16: 0.571},
    (13, 6, 7, 14, 13): {13: 1.0},
}


class TestSeedContext(unittest.TestCase):

    def test_degenerate_distribution(self):
        initial = InitialDistribution({(5, 5): 1.0}, 2)
        rng = np.random.default_rng(0)
        self.assertTrue(all(seed_context(initial, rng) == (5, 5) for _ in range(100)))

    def test_frequencies_follow_weights(self):
        weights = {(1, 1): 0.4, (1, 2): 0.4, (2, 1): 0.2}
        initial = InitialDistribution(weights, 2)
        rng = np.random.default_rng(42)
        draws = 200_000
        counts = Counter(seed_context(initial, rng) for _ in range(draws))
        for context, weight in weights.items():
            self.assertAlmostEqual(counts[context] / draws, weight, delta=0.005)

    def test_fixed_seed_is_reproducible(self):
        initial = InitialDistribution({(1, 1): 0.4, (1, 2): 0.4, (2, 1): 0.2}, 2)
        first = seed_context(initial, spawn_streams(99)[0])
        second = seed_context(initial, spawn_streams(99)[0])
        self.assertEqual(first, second)

    def test_empty_distribution(self):
        with self.assertRaises(EmptyModelError):
            seed_context(InitialDistribution({}, 1), np.random.default_rng(0))


class TestNextSymbol(unittest.TestCase):

    def setUp(self):
        self.table = TransitionTable(PUBLISHED_ROWS, 5)

    def test_single_successor_is_deterministic(self):
        state = GeneratorState(context=(13, 6, 7, 14, 13), rng=np.random.default_rng(1))
        self.assertEqual(next_symbol(self.table, state), 13)
        self.assertEqual(state.context, (6, 7, 14, 13, 13))

    def test_published_row_frequencies(self):
        rng = np.random.default_rng(7)
        counts = Counter()
        draws = 1_000_000
        for _ in range(draws):
            state = GeneratorState(context=(13, 6, 15, 14, 13), rng=rng)
            counts[next_symbol(self.table, state)] += 1
        self.assertEqual(set(counts), {2, 8, 12, 16})
        self.assertAlmostEqual(counts[16] / draws, 0.571, delta=0.002)

    def test_dead_end_falls_back_to_initial(self):
        table = TransitionTable({(1,): {2: 1.0}}, 1)
        initial = InitialDistribution({(1,): 1.0}, 1)
        state = GeneratorState(context=(2,), rng=np.random.default_rng(0))
        self.assertEqual(next_symbol(table, state, initial), 2)
        self.assertEqual(state.dead_end_count, 1)

    def test_dead_end_without_fallback(self):
        table = TransitionTable({(1,): {2: 1.0}}, 1)
        state = GeneratorState(context=(2,), rng=np.random.default_rng(0))
        with self.assertRaises(EmptyModelError):
            next_symbol(table, state)

    def test_fast_walk_matches_row_support(self):
        spec = preset_spec("volkswagen", m=5)
        model = make_model(PUBLISHED_ROWS, spec, initial={(13, 6, 15, 14, 13): 1.0})
        symbols = generate_symbols(model, 2000, seed=5)
        # every step dead-ends back into the published context
        self.assertLessEqual(set(symbols.tolist()), {2, 8, 12, 16})


class TestEmitCam(unittest.TestCase):

    def test_symbol_sixteen(self):
        spec = preset_spec("volkswagen", m=1).with_jitter(0.0)
        model = make_model({(16,): {16: 1.0}}, spec)
        state = GeneratorState(context=None, rng=np.random.default_rng(0))
        event = emit_cam(model, state, np.random.default_rng(1))
        self.assertEqual(event.size_bytes, 455)
        self.assertEqual(event.t_ms, 400.0)

    def test_jitter_free_grid(self):
        model = degenerate_model()
        state = GeneratorState(context=None, rng=np.random.default_rng(0))
        jitter_rng = np.random.default_rng(1)
        events = [emit_cam(model, state, jitter_rng) for _ in range(3)]
        self.assertEqual([e.t_ms for e in events], [100.0, 200.0, 300.0])
        self.assertEqual({e.size_bytes for e in events}, {200})

    def test_separate_model_rejected(self):
        spec = preset_spec("volkswagen", mode=ModelMode.SIZE_ONLY)
        model = make_model({(1,): {1: 1.0}}, spec)
        with self.assertRaises(ModelValidationError):
            emit_cam(model, GeneratorState(context=None, rng=np.random.default_rng(0)), np.random.default_rng(0))

    def test_jitter_std_and_truncation(self):
        model = degenerate_model(jitter_std_ms=3.444)
        stream = CamGenerator(model, seed=12).events(1_000_000)
        jitter = stream.jitter_ms
        self.assertAlmostEqual(float(np.std(jitter)), 3.444, delta=0.05 * 3.444)
        self.assertLessEqual(float(np.max(np.abs(jitter))), 20.0)

    def test_draw_jitter_resamples_tails(self):
        values = draw_jitter(np.random.default_rng(3), 30.0, 50_000, limit_ms=20.0)
        self.assertLessEqual(float(np.max(np.abs(values))), 20.0)
        self.assertAlmostEqual(float(np.mean(values)), 0.0, delta=0.2)
        np.testing.assert_array_equal(draw_jitter(np.random.default_rng(3), 0.0, 4), np.zeros(4))


class TestGenerateStream(unittest.TestCase):

    def test_zero_count(self):
        stream = generate_stream(degenerate_model(), count=0, seed=1)
        self.assertEqual(len(stream), 0)
        self.assertEqual(stream.events(), [])

    def test_same_seed_bit_identical(self):
        model = iid_model({1: 0.4, 2: 0.1, 3: 0.1, 4: 0.4}, tiny_spec(1, 3.0))
        a = generate_stream(model, count=5000, seed=77)
        b = generate_stream(model, count=5000, seed=77)
        np.testing.assert_array_equal(a.t_ms, b.t_ms)
        np.testing.assert_array_equal(a.symbols, b.symbols)
        c = generate_stream(model, count=5000, seed=78)
        self.assertFalse(np.array_equal(a.symbols, c.symbols))

    def test_degenerate_stream(self):
        stream = generate_stream(degenerate_model(), count=3, seed=1)
        self.assertEqual(stream.t_ms.tolist(), [100.0, 200.0, 300.0])
        self.assertEqual(stream.size_bytes.tolist(), [200, 200, 200])

    def test_duration_bound(self):
        stream = generate_stream(degenerate_model(), duration_s=1.0, seed=1)
        self.assertEqual(len(stream), 10)
        self.assertEqual(stream.nominal_t_ms[-1], 1000.0)

    def test_request_validation(self):
        with self.assertRaises(ModelValidationError):
            generate_stream(degenerate_model(), seed=1)
        with self.assertRaises(ModelValidationError):
            generate_stream(degenerate_model(), count=3, duration_s=1.0, seed=1)
        with self.assertRaises(ModelValidationError):
            generate_stream(degenerate_model(), duration_s=0, seed=1)

    def test_seed_recorded_when_omitted(self):
        stream = generate_stream(degenerate_model(), count=2)
        self.assertIsInstance(stream.seed, int)
        again = generate_stream(degenerate_model(), count=2, seed=stream.seed)
        np.testing.assert_array_equal(stream.t_ms, again.t_ms)

    def test_timestamps_strictly_increase(self):
        spec = preset_spec("renault", "urban", m=1)
        weights = {n: 1.0 / spec.alphabet_size for n in range(1, spec.alphabet_size + 1)}
        stream = generate_stream(iid_model(weights, spec), count=20_000, seed=3)
        self.assertTrue(np.all(np.diff(stream.t_ms) >= 60.0))

    def test_reachability(self):
        """Every (context, next) pair the generator emits was observed in training."""
        spec = tiny_spec(3)
        rng = np.random.default_rng(8)
        training = rng.integers(1, 5, size=500)
        # wrap around so the final context has a successor
        training = np.concatenate([training, training[:3]])
        model = fit(QuantizedTrace.from_symbols(training, spec), spec).to_model(spec)
        self.assertEqual(model.dead_end_contexts(), [])
        symbols = generate_symbols(model, 5000, seed=4).tolist()
        grams = {tuple(training[k:k + 4].tolist()) for k in range(len(training) - 3)}
        for k in range(len(symbols) - 3):
            self.assertIn(tuple(symbols[k:k + 4]), grams)

    def test_fleet_streams_are_independent_and_ordered(self):
        model = iid_model({1: 0.4, 2: 0.1, 3: 0.1, 4: 0.4}, tiny_spec(1, 3.0))
        fleet = generate_fleet(model, vehicles=3, count=1000, seed=5, max_workers=3)
        again = generate_fleet(model, vehicles=3, count=1000, seed=5, max_workers=1)
        self.assertEqual(len(fleet), 3)
        for a, b in zip(fleet, again):
            np.testing.assert_array_equal(a.t_ms, b.t_ms)
        self.assertFalse(np.array_equal(fleet[0].symbols, fleet[1].symbols))


class TestQuantizationRoundTrip(unittest.TestCase):

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_random_models(self, seed):
        rng = np.random.default_rng(seed)
        s_card = int(rng.integers(1, 6))
        sizes = tuple(sorted(rng.choice(np.arange(50, 1500), size=s_card, replace=False).tolist()))
        spec = ModelSpec(
            ModelMode.COMPLETE, int(rng.integers(1, 4)),
            sizes=SizeSet(sizes), intervals=IntervalSet.default(),
            jitter_std_ms=float(rng.uniform(0.0, 8.0)),
        )
        training = rng.integers(1, spec.alphabet_size + 1, size=400)
        model = fit(QuantizedTrace.from_symbols(training, spec), spec).to_model(spec)
        stream = generate_stream(model, count=600, seed=seed)
        recovered = quantize(stream, spec)
        np.testing.assert_array_equal(recovered.symbols, stream.symbols[1:])
        self.assertEqual(recovered.dropped_count, 0)
        self.assertEqual(recovered.split_count, 0)


class TestGenerateSeparate(unittest.TestCase):

    def _separate_pair(self, size_rows, interval_rows, jitter_std_ms=2.0):
        spec = tiny_spec(1, jitter_std_ms)
        size_model = make_model(size_rows, spec.separate(ModelMode.SIZE_ONLY))
        interval_model = make_model(interval_rows, spec.separate(ModelMode.INTERVAL_ONLY))
        return size_model, interval_model

    def test_deterministic_chains_match_degenerate_model(self):
        size_model, interval_model = self._separate_pair({(1,): {1: 1.0}}, {(1,): {1: 1.0}}, jitter_std_ms=0.0)
        stream = generate_separate(size_model, interval_model, 3, seed=1)
        reference = generate_stream(degenerate_model(), count=3, seed=1)
        np.testing.assert_array_equal(stream.t_ms, reference.t_ms)
        np.testing.assert_array_equal(stream.size_bytes, reference.size_bytes)
        np.testing.assert_array_equal(stream.symbols, [1, 1, 1])

    def test_independent_chains_are_uncorrelated(self):
        size_model, interval_model = self._separate_pair(
            {(1,): {1: 0.5, 2: 0.5}, (2,): {1: 0.5, 2: 0.5}},
            {(1,): {1: 0.5, 2: 0.5}, (2,): {1: 0.5, 2: 0.5}},
        )
        stream = generate_separate(size_model, interval_model, 1_000_000, seed=9)
        lag0 = dict(cross_correlation(stream.size_bytes, stream.interval_ms, 1))[0]
        self.assertLess(abs(lag0), 0.01)

    def test_wrong_modes(self):
        size_model, interval_model = self._separate_pair({(1,): {1: 1.0}}, {(1,): {1: 1.0}})
        with self.assertRaises(ModelValidationError):
            generate_separate(interval_model, size_model, 3, seed=1)

    def test_separate_models_lose_joint_structure(self):
        """Joint KL of independently generated sizes/intervals exceeds the complete model's."""
        spec = tiny_spec(1, 2.0)
        truth = iid_model({1: 0.4, 2: 0.1, 3: 0.1, 4: 0.4}, spec)
        reference = generate_stream(truth, count=200_000, seed=21)
        trace = quantize(reference, spec)
        complete = fit(trace, spec).to_model(spec)
        size_model = fit_separate(trace, spec.separate(ModelMode.SIZE_ONLY)).to_model(
            spec.separate(ModelMode.SIZE_ONLY))
        interval_model = fit_separate(trace, spec.separate(ModelMode.INTERVAL_ONLY)).to_model(
            spec.separate(ModelMode.INTERVAL_ONLY))

        from_complete = generate_stream(complete, count=200_000, seed=22)
        from_separate = generate_separate(size_model, interval_model, 200_000, seed=23)
        p = joint_pdf(trace.symbols, spec.alphabet_size)
        kl_complete = kl_divergence(p, joint_pdf(quantize(from_complete, spec).symbols, spec.alphabet_size))
        kl_separate = kl_divergence(p, joint_pdf(quantize(from_separate, spec).symbols, spec.alphabet_size))
        self.assertGreater(kl_separate, kl_complete)
        self.assertGreater(kl_separate, 0.05)


class TestStatisticalFidelity(unittest.TestCase):
    """Monte Carlo runs at 10^6 scale against known sources."""

    TRUTH = {
        (1,): {1: 0.1, 2: 0.6, 3: 0.3},
        (2,): {1: 0.5, 4: 0.5},
        (3,): {2: 0.2, 3: 0.2, 4: 0.6},
        (4,): {1: 0.25, 2: 0.25, 3: 0.25, 4: 0.25},
    }

    def test_fit_generate_refit(self):
        start = time.perf_counter()
        spec = tiny_spec(1, 3.0)
        symbols = oracle_symbols(self.TRUTH, 1, 1_000_000, seed=31, start=(1,))
        first = fit(QuantizedTrace.from_symbols(symbols, spec), spec)
        model = first.to_model(spec.with_jitter(3.0))
        stream = generate_stream(model, count=1_000_000, seed=32)
        second = fit(quantize(stream, spec), spec)
        for context in first.transitions.contexts():
            if second.counts.totals.get(context, 0) < 10_000:
                continue
            for nxt, p in first.transitions.successors(context):
                self.assertAlmostEqual(second.transitions.probability(context, nxt), p, delta=0.01)
        self.assertLess(time.perf_counter() - start, 60.0)

    def test_jitter_recovery(self):
        spec = preset_spec("volkswagen", "highway", m=1)
        weights = {n: 1.0 / spec.alphabet_size for n in range(1, spec.alphabet_size + 1)}
        model = iid_model(weights, spec)
        self.assertEqual(model.spec.jitter_std_ms, 3.444)
        stream = generate_stream(model, count=1_000_000, seed=33)
        sigma = estimate_jitter_std(jitter_residuals(stream, spec.intervals))
        self.assertAlmostEqual(sigma, 3.444, delta=0.05 * 3.444)

    def test_order_five_reproduces_autocorrelation(self):
        spec = tiny_spec(5)
        source = lag_source_symbols(1_000_000, seed=34)
        reference_sizes, _ = spec.decode_arrays(source)
        reference_acf = autocorrelation(reference_sizes, 15)

        trace = QuantizedTrace.from_symbols(source, spec)
        order5 = fit(trace, spec).to_model(spec)
        order1 = fit(trace, spec.with_order(1)).to_model(spec.with_order(1))

        sizes5, _ = spec.decode_arrays(generate_symbols(order5, 1_000_000, seed=35))
        sizes1, _ = spec.decode_arrays(generate_symbols(order1, 1_000_000, seed=36))
        self.assertLess(compare_autocorrelation(reference_acf, autocorrelation(sizes5, 15)), 0.1)
        self.assertGreater(compare_autocorrelation(reference_acf, autocorrelation(sizes1, 15)), 0.1)

    def test_cross_correlation_separation(self):
        spec = tiny_spec(1, 2.0)
        truth = iid_model({1: 0.4, 2: 0.1, 3: 0.1, 4: 0.4}, spec)
        reference = generate_stream(truth, count=1_000_000, seed=37)
        reference_lag0 = dict(cross_correlation(reference.size_bytes, reference.interval_ms, 0))[0]

        trace = quantize(reference, spec)
        spec5 = spec.with_order(5)
        complete = fit(trace, spec5).to_model(spec5)
        generated = generate_stream(complete, count=1_000_000, seed=38)
        generated_lag0 = dict(cross_correlation(generated.size_bytes, generated.interval_ms, 0))[0]
        self.assertAlmostEqual(generated_lag0, reference_lag0, delta=0.05)

        size_spec, interval_spec = spec.separate(ModelMode.SIZE_ONLY), spec.separate(ModelMode.INTERVAL_ONLY)
        size_model = fit_separate(trace, size_spec).to_model(size_spec)
        interval_model = fit_separate(trace, interval_spec).to_model(interval_spec)
        separate = generate_separate(size_model, interval_model, 1_000_000, seed=39)
        separate_lag0 = dict(cross_correlation(separate.size_bytes, separate.interval_ms, 0))[0]
        self.assertLess(abs(separate_lag0), 0.01)

    @unittest.skipUnless(RUN_SLOW, "set CAM_RUN_SLOW=1 for the 5x10^6 run")
    def test_five_million_cam_band(self):
        start = time.perf_counter()
        spec = tiny_spec(2, 3.444)
        reference = generate_stream(iid_model({1: 0.4, 2: 0.1, 3: 0.1, 4: 0.4}, spec.with_order(1)),
                                    count=5_000_000, seed=40)
        model = fit(quantize(reference, spec), spec).to_model(spec)
        generated = generate_stream(model, count=5_000_000, seed=41)
        report = validate(model, reference, generated)
        self.assertGreaterEqual(report.kl_divergence, 0.0)
        self.assertLessEqual(report.kl_divergence, 1e-3)
        self.assertLessEqual(report.tv, 5e-3)
        p = joint_pdf(quantize(reference, spec).symbols, spec.alphabet_size)
        q = joint_pdf(quantize(generated, spec).symbols, spec.alphabet_size)
        self.assertLess(total_variation(p, q), 0.005)
        self.assertLess(time.perf_counter() - start, 300.0)

    @unittest.skipUnless(RUN_SLOW, "set CAM_RUN_SLOW=1 for the throughput check")
    def test_throughput(self):
        from benchmark_generation import TARGET_CAMS_PER_SECOND, run_benchmark
        result = run_benchmark(count=1_000_000, seed=1)
        self.assertGreater(result["transition_rows"], 1000)
        self.assertGreaterEqual(result["cams_per_second"], TARGET_CAMS_PER_SECOND)


if __name__ == '__main__':
    unittest.main()
