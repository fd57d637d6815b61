"""
Synthetic CAM stream generation from a fitted Markov source.

For every CAM:
  1. draw the next symbol a_n from P(. | previous m symbols) (inverse CDF)
  2. size     = S[((a_n - 1) % |S|) + 1]
  3. interval = G[floor((a_n - 1) / |S|) + 1]; the nominal schedule advances
     by the interval and the emitted timestamp adds a Gaussian jitter
     truncated to ±CAM_JITTER_TRUNCATION_MS (tails are redrawn)

Jitter is added to the nominal schedule, never accumulated into it.

Randomness: numpy Generator(PCG64) streams derived from one seed.
SeedSequence(seed).spawn(2) gives (chain stream, jitter stream) for a single
generator. generate_separate spawns one child per model first, and
generate_fleet one child per vehicle, then applies the same rule per child.
"""

import logging
from bisect import bisect_right
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from config import CONCURRENT_CONFIG, GENERATION_CONFIG
from errors import EmptyModelError, ModelValidationError
from model import CamModel, Context, InitialDistribution, ModelMode, TransitionTable
from trace_io import CamEvent

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence, None]


def new_seed() -> int:
    """Fresh 64-bit seed from system entropy."""
    return int(np.random.SeedSequence().generate_state(1, dtype=np.uint64)[0])


def _seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(new_seed() if seed is None else int(seed))


def _seed_value(sequence: np.random.SeedSequence) -> Optional[int]:
    """The integer seed a top-level sequence was built from; None for spawned children."""
    if sequence.spawn_key or not isinstance(sequence.entropy, int):
        return None
    return int(sequence.entropy)


def spawn_streams(seed: SeedLike) -> Tuple[np.random.Generator, np.random.Generator]:
    """(chain, jitter) generators for one generator instance."""
    chain_seq, jitter_seq = _seed_sequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(chain_seq)), np.random.Generator(np.random.PCG64(jitter_seq))


@dataclass
class GeneratorState:
    """Mutable walk state of one generator: current context and jitter-free schedule time."""
    context: Optional[Context]
    rng: np.random.Generator
    nominal_t_ms: float = 0.0
    dead_end_count: int = 0


def seed_context(initial: InitialDistribution, rng: np.random.Generator) -> Context:
    """Draw a preliminary length-m context with its initial-distribution weight."""
    if not len(initial):
        raise EmptyModelError("Cannot seed a context from an empty initial distribution")
    return initial.draw(rng.random())


def next_symbol(table: TransitionTable, state: GeneratorState, initial: Optional[InitialDistribution] = None) -> int:
    """
    Sample the next symbol and shift it into the context.

    A context with no successor (dead end) is replaced by a fresh draw from
    `initial`; the replacement is counted in state.dead_end_count.
    """
    row = table.sampling_row(state.context)
    while row is None:
        if initial is None:
            raise EmptyModelError(f"Dead-end context {state.context} and no initial distribution to fall back on")
        state.dead_end_count += 1
        state.context = seed_context(initial, state.rng)
        row = table.sampling_row(state.context)
    symbols, cumulative = row
    symbol = symbols[bisect_right(cumulative, state.rng.random())]
    state.context = state.context[1:] + (symbol,)
    return symbol


def draw_jitter(
    rng: np.random.Generator,
    std_ms: float,
    size: int,
    limit_ms: Optional[float] = None,
) -> np.ndarray:
    """
    Zero-mean Gaussian jitter truncated to [-limit, +limit].

    Samples beyond the limit are redrawn; whatever survives
    max_jitter_redraws rounds is drawn from the exact truncated law.
    """
    limit_ms = GENERATION_CONFIG["jitter_truncation_ms"] if limit_ms is None else limit_ms
    if std_ms <= 0 or size == 0:
        return np.zeros(size)
    values = rng.normal(0.0, std_ms, size)
    outside = np.flatnonzero(np.abs(values) > limit_ms)
    rounds = 0
    while outside.size and rounds < GENERATION_CONFIG["max_jitter_redraws"]:
        values[outside] = rng.normal(0.0, std_ms, outside.size)
        outside = outside[np.abs(values[outside]) > limit_ms]
        rounds += 1
    if outside.size:
        bound = limit_ms / std_ms
        values[outside] = truncnorm.rvs(-bound, bound, scale=std_ms, size=outside.size, random_state=rng)
    return values


def emit_cam(model: CamModel, state: GeneratorState, rng: np.random.Generator) -> CamEvent:
    """One CAM from a complete-mode model; `rng` is the jitter stream."""
    _require_complete(model)
    if state.context is None:
        state.context = seed_context(model.initial, state.rng)
    symbol = next_symbol(model.transitions, state, model.initial)
    size, interval = model.spec.decode(symbol)
    state.nominal_t_ms += interval
    jitter = draw_jitter(rng, model.spec.jitter_std_ms, 1)[0]
    return CamEvent(state.nominal_t_ms + float(jitter), size)


def _require_complete(model: CamModel) -> None:
    if model.spec.mode is not ModelMode.COMPLETE:
        raise ModelValidationError(
            f"CAM emission needs a complete model, got {model.spec.mode.value}; use generate_separate"
        )


@dataclass
class GeneratedStream:
    """Generated CAMs as parallel arrays; symbols are complete-mode symbols."""
    t_ms: np.ndarray
    size_bytes: np.ndarray
    interval_ms: np.ndarray
    symbols: np.ndarray
    nominal_t_ms: np.ndarray
    seed: Optional[int] = None
    dead_end_count: int = 0
    metadata: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def empty(cls, seed: Optional[int] = None) -> "GeneratedStream":
        return cls(
            t_ms=np.zeros(0),
            size_bytes=np.zeros(0, dtype=np.int64),
            interval_ms=np.zeros(0, dtype=np.int64),
            symbols=np.zeros(0, dtype=np.int64),
            nominal_t_ms=np.zeros(0),
            seed=seed,
        )

    def __len__(self) -> int:
        return int(self.t_ms.shape[0])

    def events(self) -> List[CamEvent]:
        return [CamEvent(t, s) for t, s in zip(self.t_ms.tolist(), self.size_bytes.tolist())]

    @property
    def jitter_ms(self) -> np.ndarray:
        return self.t_ms - self.nominal_t_ms


class CamGenerator:
    """
    Single-threaded generator over one immutable model.

    Several instances may share a model and run on different threads.
    """

    def __init__(
        self,
        model: CamModel,
        seed: SeedLike = None,
        jitter_truncation_ms: Optional[float] = None,
        batch_size: Optional[int] = None,
    ):
        self.model = model
        sequence = _seed_sequence(seed)
        self.seed = _seed_value(sequence)
        chain_rng, self.jitter_rng = spawn_streams(sequence)
        self.state = GeneratorState(context=None, rng=chain_rng)
        self.jitter_truncation_ms = (
            GENERATION_CONFIG["jitter_truncation_ms"] if jitter_truncation_ms is None else jitter_truncation_ms
        )
        self.batch_size = batch_size or GENERATION_CONFIG["batch_size"]

        spec = model.spec
        self._m = spec.m
        self._base = spec.alphabet_size + 1
        self._modulus = self._base ** (spec.m - 1)
        self._rows: Dict[int, Tuple[Tuple[int, ...], List[float]]] = {
            self._encode(context): model.transitions.sampling_row(context)
            for context in model.transitions.contexts()
        }
        if len(model.initial) and all(self._encode(c) not in self._rows for c in model.initial.contexts()):
            raise EmptyModelError("Every initial context is a dead end; the chain cannot start")

    def _encode(self, context: Context) -> int:
        code = 0
        for symbol in context:
            code = code * self._base + symbol
        return code

    def _decode(self, code: int) -> Context:
        context = []
        for _ in range(self._m):
            code, symbol = divmod(code, self._base)
            context.append(symbol)
        return tuple(reversed(context))

    def walk(self, count: int) -> np.ndarray:
        """Next `count` symbols of the chain (any model mode)."""
        if count < 0:
            raise ModelValidationError(f"count must be >= 0, got {count}")
        if count == 0:
            return np.zeros(0, dtype=np.int64)

        state = self.state
        rng = state.rng
        initial = self.model.initial
        rows_get = self._rows.get
        base, modulus = self._base, self._modulus
        if state.context is None:
            state.context = seed_context(initial, rng)
        code = self._encode(state.context)

        out: List[int] = []
        append = out.append
        remaining = count
        dead_ends = 0
        while remaining:
            batch = min(remaining, self.batch_size)
            for u in rng.random(batch).tolist():
                row = rows_get(code)
                while row is None:
                    dead_ends += 1
                    code = self._encode(seed_context(initial, rng))
                    row = rows_get(code)
                symbols, cumulative = row
                symbol = symbols[bisect_right(cumulative, u)]
                append(symbol)
                code = (code % modulus) * base + symbol
            remaining -= batch

        state.context = self._decode(code)
        if dead_ends:
            state.dead_end_count += dead_ends
            logger.info(f"Dead-end fallback redrew the context {dead_ends} time(s)")
        return np.asarray(out, dtype=np.int64)

    def _timed(self, symbols: np.ndarray) -> GeneratedStream:
        spec = self.model.spec
        sizes, intervals = spec.decode_arrays(symbols)
        nominal = self.state.nominal_t_ms + np.cumsum(intervals, dtype=float)
        jitter = draw_jitter(self.jitter_rng, spec.jitter_std_ms, symbols.shape[0], self.jitter_truncation_ms)
        if nominal.size:
            self.state.nominal_t_ms = float(nominal[-1])
        return GeneratedStream(
            t_ms=nominal + jitter,
            size_bytes=sizes.astype(np.int64),
            interval_ms=intervals.astype(np.int64),
            symbols=symbols,
            nominal_t_ms=nominal,
            seed=self.seed,
            dead_end_count=self.state.dead_end_count,
        )

    def events(self, count: int) -> GeneratedStream:
        """Next `count` CAMs."""
        _require_complete(self.model)
        if count == 0:
            return GeneratedStream.empty(self.seed)
        return self._timed(self.walk(count))

    def until(self, duration_ms: float) -> GeneratedStream:
        """
        CAMs whose nominal time does not exceed `duration_ms`.

        The chain walks one symbol past the horizon; that symbol is discarded.
        """
        _require_complete(self.model)
        if duration_ms <= 0:
            raise ModelValidationError(f"duration must be > 0, got {duration_ms}")
        max_interval = self.model.spec.intervals.max_ms
        chunks = []
        nominal = self.state.nominal_t_ms
        while True:
            # a chunk of this size cannot cross the horizon
            safe = int((duration_ms - nominal) // max_interval)
            step = self.walk(max(safe, 1))
            _, intervals = self.model.spec.decode_arrays(step)
            ends = nominal + np.cumsum(intervals, dtype=float)
            inside = int(np.searchsorted(ends, duration_ms, side="right"))
            chunks.append(step[:inside])
            if inside < step.shape[0]:
                break
            nominal = float(ends[-1])
        symbols = np.concatenate(chunks)
        if symbols.size == 0:
            return GeneratedStream.empty(self.seed)
        return self._timed(symbols)


def _check_request(count: Optional[int], duration_s: Optional[float]) -> None:
    if (count is None) == (duration_s is None):
        raise ModelValidationError("Give exactly one of count or duration")
    if count is not None and count < 0:
        raise ModelValidationError(f"count must be >= 0, got {count}")
    if duration_s is not None and duration_s <= 0:
        raise ModelValidationError(f"duration must be > 0, got {duration_s}")


def generate_stream(
    model: CamModel,
    count: Optional[int] = None,
    duration_s: Optional[float] = None,
    seed: SeedLike = None,
) -> GeneratedStream:
    """
    Generate a CAM stream from a complete model.

    Args:
        model: Complete-mode CamModel
        count: Number of CAMs (0 gives an empty stream)
        duration_s: Alternatively, stop at this nominal time (seconds)
        seed: 64-bit seed (None draws one; see GeneratedStream.seed)

    Returns:
        GeneratedStream (bit-identical for identical seed, model and count)
    """
    _require_complete(model)
    _check_request(count, duration_s)
    generator = CamGenerator(model, seed)
    stream = generator.events(count) if count is not None else generator.until(duration_s * 1000.0)
    logger.info(f"Generated {len(stream)} CAMs (seed={generator.seed}, dead ends={stream.dead_end_count})")
    return stream


def generate_symbols(model: CamModel, count: int, seed: SeedLike = None) -> np.ndarray:
    """Bare symbol walk for a model of any mode."""
    return CamGenerator(model, seed).walk(count)


def generate_separate(
    size_model: CamModel,
    interval_model: CamModel,
    count: int,
    seed: SeedLike = None,
) -> GeneratedStream:
    """
    Independent size and interval chains combined into one CAM stream.

    Sizes and intervals share no state, so any size/interval correlation of
    the source is lost. Jitter uses the interval model's σ.
    """
    if size_model.spec.mode is not ModelMode.SIZE_ONLY or interval_model.spec.mode is not ModelMode.INTERVAL_ONLY:
        raise ModelValidationError("generate_separate needs a size model and an interval model")
    if count < 0:
        raise ModelValidationError(f"count must be >= 0, got {count}")
    sequence = _seed_sequence(seed)
    size_seq, interval_seq = sequence.spawn(2)
    seed_value = _seed_value(sequence)
    if count == 0:
        return GeneratedStream.empty(seed_value)

    size_gen = CamGenerator(size_model, size_seq)
    interval_gen = CamGenerator(interval_model, interval_seq)
    size_index = size_gen.walk(count)
    interval_index = interval_gen.walk(count)

    sizes = size_model.spec.sizes.as_array()[size_index - 1]
    intervals = interval_model.spec.intervals.as_array()[interval_index - 1]
    nominal = np.cumsum(intervals, dtype=float)
    jitter = draw_jitter(
        interval_gen.jitter_rng,
        interval_model.spec.jitter_std_ms,
        count,
        interval_gen.jitter_truncation_ms,
    )
    symbols = (interval_index - 1) * size_model.spec.size_card + size_index
    stream = GeneratedStream(
        t_ms=nominal + jitter,
        size_bytes=sizes.astype(np.int64),
        interval_ms=intervals.astype(np.int64),
        symbols=symbols,
        nominal_t_ms=nominal,
        seed=seed_value,
        dead_end_count=size_gen.state.dead_end_count + interval_gen.state.dead_end_count,
    )
    logger.info(f"Generated {count} CAMs from separate size/interval chains (seed={seed_value})")
    return stream


def generate_fleet(
    model: CamModel,
    vehicles: int,
    count: Optional[int] = None,
    duration_s: Optional[float] = None,
    seed: SeedLike = None,
    max_workers: Optional[int] = None,
) -> List[GeneratedStream]:
    """
    One independent stream per vehicle, generated concurrently.

    Returns:
        Streams in vehicle order; vehicle k always uses child k of the seed
    """
    _require_complete(model)
    _check_request(count, duration_s)
    if vehicles < 1:
        raise ModelValidationError(f"vehicles must be >= 1, got {vehicles}")
    max_workers = max_workers or CONCURRENT_CONFIG["max_workers"]
    children = _seed_sequence(seed).spawn(vehicles)

    def run(child: np.random.SeedSequence) -> GeneratedStream:
        generator = CamGenerator(model, child)
        return generator.events(count) if count is not None else generator.until(duration_s * 1000.0)

    with ThreadPoolExecutor(max_workers=min(vehicles, max_workers)) as executor:
        streams = list(executor.map(run, children))
    logger.info(f"Generated {sum(len(s) for s in streams)} CAMs for {vehicles} vehicle(s)")
    return streams
