"""Population-based search for difference-inducing transformation vectors.

One session runs the generation loop below for every seed patch (or every
batch of seed patches)::

    population = optimizer.init(...)
    repeat up to maxiter times:
        decode every vector on the seed patch(es)
        score all of them (invalid ones included)
        keep the valid, label-disagreeing ones as DIIs
        population = optimizer.step(fitness)
        stop early when best fitness and DII count stall

DIIs are buffered in memory and appended to an offload file whenever the
buffer would exceed a byte threshold.
"""

from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from hsidiff.distortions import DistortionBounds, Layout
from hsidiff.fitness import (
    DIV, JACCARD_INFLATED, JACCARD_STANDARD, OBJECTIVES, Evaluator, FitnessMode, Subjects,
)
from hsidiff.metrics import SeedRecord, SessionReport
from hsidiff.patches import DEFAULT_PSNR_THRESHOLD, PatchSet

log = logging.getLogger(__name__)

DII_MAGIC = b"DVGDIIV1"
RECORD_HEAD = struct.Struct("<QII")
RECORD_TAIL = struct.Struct("<III")
DEFAULT_OFFLOAD_BYTES = 10 * 1024 * 1024


class ConfigError(ValueError):
    """Invalid session configuration; ``field`` is a dotted path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# --- DII records -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiiRecord:
    rng_seed: int
    patch_index: int
    vector: np.ndarray  # float32
    original_label: int
    label_o: int
    label_q: int

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float32))

    def __eq__(self, other):
        return (isinstance(other, DiiRecord) and self.encode() == other.encode())

    @staticmethod
    def size_for(vector_length: int) -> int:
        return RECORD_HEAD.size + 4 * vector_length + RECORD_TAIL.size

    def encode(self) -> bytes:
        return (RECORD_HEAD.pack(self.rng_seed, self.patch_index, self.vector.size)
                + self.vector.astype("<f4").tobytes()
                + RECORD_TAIL.pack(self.original_label, self.label_o, self.label_q))


def decode_dii_bytes(data: bytes) -> List[DiiRecord]:
    if data[:8] != DII_MAGIC:
        raise ValueError(f"bad DII file magic {data[:8]!r}")
    records, off = [], 8
    while off < len(data):
        if off + RECORD_HEAD.size > len(data):
            raise ValueError(f"truncated DII record at byte {off}")
        seed, pid, n = RECORD_HEAD.unpack_from(data, off)
        off += RECORD_HEAD.size
        end = off + 4 * n + RECORD_TAIL.size
        if end > len(data):
            raise ValueError(f"truncated DII record at byte {off}")
        vec = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32)
        labels = RECORD_TAIL.unpack_from(data, off + 4 * n)
        records.append(DiiRecord(seed, pid, vec, *labels))
        off = end
    return records


def read_dii_file(path) -> List[DiiRecord]:
    return decode_dii_bytes(Path(path).read_bytes())


def write_dii_file(records: Sequence[DiiRecord], path) -> None:
    Path(path).write_bytes(DII_MAGIC + b"".join(r.encode() for r in records))


class DiiTracker:
    """Buffers DII records and appends them to ``path`` in chunks.

    The buffer never holds more than ``threshold`` bytes: an append that
    would overflow it first flushes what is buffered. Without a path the
    records are only kept in memory (``records``).
    """

    def __init__(self, path=None, threshold: int = DEFAULT_OFFLOAD_BYTES):
        if threshold <= 0:
            raise ValueError("offload threshold must be positive")
        self.path = Path(path) if path is not None else None
        self.threshold = threshold
        self.buffer: List[bytes] = []
        self.buffer_bytes = 0
        self.records: List[DiiRecord] = []
        self.flushes: List[int] = []  # append index (0-based) that triggered each flush
        self.dii = 0
        self.generated = 0
        self.valid = 0
        self._started = False

    def count(self, generated: int = 0, valid: int = 0) -> None:
        self.generated += generated
        self.valid += valid

    def append(self, record: DiiRecord) -> None:
        data = record.encode()
        if self.buffer and self.buffer_bytes + len(data) > self.threshold:
            self.flushes.append(self.dii)
            self.flush()
        self.buffer.append(data)
        self.buffer_bytes += len(data)
        self.dii += 1
        if self.path is None:
            self.records.append(record)
        if self.buffer_bytes > self.threshold:
            # A single record larger than the threshold goes straight to disk.
            self.flushes.append(self.dii - 1)
            self.flush()

    def flush(self) -> None:
        if not self.buffer:
            return
        if self.path is not None:
            mode = "ab" if self._started else "wb"
            with open(self.path, mode) as fh:
                if not self._started:
                    fh.write(DII_MAGIC)
                fh.write(b"".join(self.buffer))
            self._started = True
        self.buffer = []
        self.buffer_bytes = 0

    def close(self) -> None:
        self.flush()


# --- optimizers --------------------------------------------------------------

@dataclass(frozen=True)
class PsoConfig:
    inertia: float = 0.7
    cognitive: float = 1.5
    social: float = 1.5
    velocity_clamp: float = 0.2  # fraction of each component's range

    def __post_init__(self):
        if not 0 <= self.inertia <= 1:
            raise ConfigError("pso.inertia", "must lie in [0, 1]")
        if self.cognitive < 0 or self.social < 0:
            raise ConfigError("pso", "cognitive and social weights must be non-negative")
        if not 0 < self.velocity_clamp <= 1:
            raise ConfigError("pso.velocity_clamp", "must lie in (0, 1]")


@dataclass(frozen=True)
class GaConfig:
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    mutation_scale: float = 0.1  # fraction of each component's range
    tournament: int = 3
    elitism: int = 1

    def __post_init__(self):
        for name in ("crossover_rate", "mutation_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"ga.{name}", "must lie in [0, 1]")
        if self.mutation_scale < 0:
            raise ConfigError("ga.mutation_scale", "must be non-negative")
        if self.tournament < 2:
            raise ConfigError("ga.tournament", "must be at least 2")
        if self.elitism < 0:
            raise ConfigError("ga.elitism", "must be non-negative")


class Optimizer:
    """Maximizes fitness. ``init`` returns the first population, each
    ``step(fitness)`` consumes the scores of the current one and returns
    the next. Populations always lie within ``[lo, hi]``."""

    def init(self, size: int, lo, hi, rng: np.random.Generator) -> np.ndarray:
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.rng = rng
        self.population = rng.uniform(self.lo, self.hi, size=(size, self.lo.size))
        return self.population.copy()

    def clamp(self, x):
        return np.clip(x, self.lo, self.hi)

    def step(self, fitness) -> np.ndarray:
        raise NotImplementedError


class ParticleSwarm(Optimizer):
    """Global-best PSO."""

    def __init__(self, config: PsoConfig = PsoConfig()):
        self.config = config

    def init(self, size, lo, hi, rng):
        pop = super().init(size, lo, hi, rng)
        self.vmax = self.config.velocity_clamp * (self.hi - self.lo)
        self.velocity = rng.uniform(-self.vmax, self.vmax, size=pop.shape)
        self.pbest = pop.copy()
        self.pbest_fitness = np.full(size, -np.inf)
        self.gbest = pop[0].copy()
        self.gbest_fitness = -np.inf
        return pop

    def step(self, fitness):
        f = np.asarray(fitness, dtype=np.float64)
        better = f > self.pbest_fitness
        self.pbest[better] = self.population[better]
        self.pbest_fitness[better] = f[better]
        best = int(np.argmax(self.pbest_fitness))
        if self.pbest_fitness[best] > self.gbest_fitness:
            self.gbest = self.pbest[best].copy()
            self.gbest_fitness = float(self.pbest_fitness[best])
        c = self.config
        x = self.population
        r1 = self.rng.random(x.shape)
        r2 = self.rng.random(x.shape)
        v = (c.inertia * self.velocity + c.cognitive * r1 * (self.pbest - x)
             + c.social * r2 * (self.gbest - x))
        self.velocity = np.clip(v, -self.vmax, self.vmax)
        self.population = self.clamp(x + self.velocity)
        return self.population.copy()


class GeneticAlgorithm(Optimizer):
    """Tournament selection, uniform crossover, Gaussian mutation, elitism.

    Elites keep their slots in the population; the other slots are refilled
    with children.
    """

    def __init__(self, config: GaConfig = GaConfig()):
        self.config = config

    def init(self, size, lo, hi, rng):
        if self.config.elitism > size:
            raise ConfigError("ga.elitism", f"cannot exceed the population size {size}")
        return super().init(size, lo, hi, rng)

    def _tournament(self, f):
        entrants = self.rng.choice(f.size, size=min(self.config.tournament, f.size), replace=False)
        return int(entrants[np.argmax(f[entrants])])

    def step(self, fitness):
        f = np.asarray(fitness, dtype=np.float64)
        c = self.config
        x = self.population
        n, dim = x.shape
        order = np.argsort(-f, kind="stable")
        elites = set(order[: c.elitism].tolist())
        nxt = x.copy()
        width = self.hi - self.lo
        for i in range(n):
            if i in elites:
                continue
            p1 = x[self._tournament(f)]
            p2 = x[self._tournament(f)]
            if self.rng.random() < c.crossover_rate:
                child = np.where(self.rng.random(dim) < 0.5, p2, p1)
            else:
                child = p1.copy()
            mutate = self.rng.random(dim) < c.mutation_rate
            child = child + mutate * self.rng.normal(0.0, 1.0, dim) * c.mutation_scale * width
            nxt[i] = self.clamp(child)
        self.population = nxt
        return nxt.copy()


class RandomSampler(Optimizer):
    """Fresh uniform population every generation; ignores fitness."""

    def step(self, fitness=None):
        self.population = self.rng.uniform(self.lo, self.hi, size=self.population.shape)
        return self.population.copy()


def pso_step(state: ParticleSwarm, fitness) -> np.ndarray:
    return state.step(fitness)


def ga_step(state: GeneticAlgorithm, fitness) -> np.ndarray:
    return state.step(fitness)


def random_step(state: RandomSampler) -> np.ndarray:
    return state.step()


def early_stop(best_fitness: Sequence[float], dii_counts: Sequence[int], window: int = 5,
               tol: float = 1e-9) -> bool:
    """True when the last ``window`` generations share the same best fitness
    and the same DII count. ``window <= 0`` disables early stopping."""
    if window <= 0 or len(best_fitness) < window or len(dii_counts) < window:
        return False
    f = np.asarray(best_fitness[-window:], dtype=np.float64)
    d = np.asarray(dii_counts[-window:], dtype=np.float64)
    return bool(np.ptp(f) <= tol and np.ptp(d) <= tol)


# --- sessions ----------------------------------------------------------------

OPTIMIZERS = ("pso", "ga", "random")
CLOCKS = ("wall", "queries")


@dataclass
class SessionConfig:
    objective: str = DIV
    optimizer: str = "pso"
    batch_size: int = 1  # 1 = single-instance mode
    population: int = 10
    maxiter: int = 25
    psnr_threshold: float = DEFAULT_PSNR_THRESHOLD
    early_stop_window: int = 5
    seed: int = 0
    max_seeds: Optional[int] = None
    seed_ids: Optional[List[int]] = None
    jaccard: str = JACCARD_INFLATED
    families: Optional[List[str]] = None
    bounds: Optional[dict] = None
    pso: PsoConfig = field(default_factory=PsoConfig)
    ga: GaConfig = field(default_factory=GaConfig)
    offload_bytes: int = DEFAULT_OFFLOAD_BYTES
    threads: int = 1
    clock: str = "wall"

    def validate(self) -> "SessionConfig":
        if self.objective not in OBJECTIVES:
            raise ConfigError("objective", f"must be one of {OBJECTIVES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError("optimizer", f"must be one of {OPTIMIZERS}")
        if self.population < (2 if self.optimizer != "random" else 1):
            raise ConfigError("population", "must be at least 2 for pso/ga")
        if self.maxiter < 1:
            raise ConfigError("maxiter", "must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be at least 1")
        if not self.psnr_threshold > 0:
            raise ConfigError("psnr_threshold", "must be positive")
        if self.threads < 1:
            raise ConfigError("threads", "must be at least 1")
        if self.clock not in CLOCKS:
            raise ConfigError("clock", f"must be one of {CLOCKS}")
        if self.jaccard not in (JACCARD_INFLATED, JACCARD_STANDARD):
            raise ConfigError("jaccard", "must be 'inflated' or 'standard'")
        if self.offload_bytes <= 0:
            raise ConfigError("offload_bytes", "must be positive")
        if self.optimizer == "ga" and self.ga.elitism > self.population:
            raise ConfigError("ga.elitism", "cannot exceed the population size")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed", "must fit in an unsigned 64-bit integer")
        if self.bounds is not None:
            try:
                DistortionBounds.from_dict(self.bounds)
            except (ValueError, TypeError) as exc:
                raise ConfigError("bounds", str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        try:
            if "pso" in d:
                d["pso"] = PsoConfig(**_mapping("pso", d["pso"]))
            if "ga" in d:
                d["ga"] = GaConfig(**_mapping("ga", d["ga"]))
        except TypeError as exc:
            raise ConfigError("pso/ga", str(exc)) from exc
        cfg = cls(**d)
        for name, kind in (("population", int), ("maxiter", int), ("batch_size", int),
                           ("threads", int), ("seed", int), ("early_stop_window", int),
                           ("offload_bytes", int), ("psnr_threshold", (int, float))):
            value = getattr(cfg, name)
            if isinstance(value, bool) or not isinstance(value, kind):
                raise ConfigError(name, f"expected a number, got {value!r}")
        return cfg.validate()

    def make_optimizer(self) -> Optimizer:
        if self.optimizer == "pso":
            return ParticleSwarm(self.pso)
        if self.optimizer == "ga":
            return GeneticAlgorithm(self.ga)
        return RandomSampler()


def _mapping(name, value) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(name, "expected a mapping")
    return value


def candidate_seed(session_seed: int, unit: int, generation: int, candidate: int) -> int:
    state = np.random.SeedSequence([session_seed, unit, generation, candidate]).generate_state(
        1, dtype=np.uint64)
    return int(state[0])


class _QueryClock:
    def __init__(self):
        self.queries = 0

    def __call__(self) -> float:
        return float(self.queries)


def select_seeds(evaluator: Evaluator, config: SessionConfig) -> List[int]:
    """Patches the original model classifies correctly (the metamorphic guard)."""
    ids = config.seed_ids if config.seed_ids is not None else range(len(evaluator.patches))
    chosen = []
    for pid in ids:
        patch = evaluator.patches[pid]
        if patch.label is None or evaluator.original_label(pid) != patch.label:
            continue
        chosen.append(int(pid))
        if config.max_seeds is not None and len(chosen) >= config.max_seeds:
            break
    return chosen


def run_session(config: SessionConfig, patches: PatchSet, subjects: Subjects,
                tracker: Optional[DiiTracker] = None, offload_path=None,
                clock=None) -> SessionReport:
    config.validate()
    bounds = DistortionBounds.from_dict(config.bounds) if config.bounds else None
    lay = Layout(patches.dims, bounds, config.families)
    evaluator = Evaluator(subjects, patches, lay, config.objective, config.psnr_threshold,
                          config.jaccard)
    tracker = tracker or DiiTracker(offload_path, config.offload_bytes)
    query_clock = _QueryClock()
    if clock is None:
        clock = query_clock if config.clock == "queries" else time.perf_counter

    seeds = select_seeds(evaluator, config)
    units = [seeds[i:i + config.batch_size] for i in range(0, len(seeds), config.batch_size)]
    report = SessionReport([], config.to_dict(),
                           {"model": subjects.model.digest(),
                            "qmodel_source": subjects.qmodel.source_model_hash},
                           config.clock)
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for unit_idx, unit in enumerate(units):
            record = SeedRecord(list(unit))
            report.seeds.append(record)
            _run_unit(config, evaluator, unit_idx, unit, lay, tracker, record, clock,
                      query_clock, pool)
        tracker.close()
    except OSError as exc:
        log.error("offload failed: %s", exc)
        report.aborted = True
        report.error = str(exc)
    finally:
        if pool is not None:
            pool.shutdown()
    return report


def _run_unit(config, evaluator, unit_idx, unit, lay, tracker, record, clock, query_clock, pool):
    mode = FitnessMode(tuple(unit))
    optimizer = config.make_optimizer()
    rng = np.random.default_rng([config.seed, unit_idx])
    population = optimizer.init(config.population, lay.lo, lay.hi, rng)
    dii_history: List[int] = []
    start = None
    for generation in range(config.maxiter):
        seeds = [candidate_seed(config.seed, unit_idx, generation, j)
                 for j in range(len(population))]
        if start is None:
            start = clock()

        def score(j):
            return evaluator(population[j], mode, seeds[j])

        jobs = range(len(population))
        results = list(pool.map(score, jobs)) if pool is not None else [score(j) for j in jobs]
        query_clock.queries += len(population) * len(unit)
        fitness = np.array([r[0] for r in results])
        for j, (_, details) in enumerate(results):
            for d in details:
                record.generated += 1
                tracker.count(generated=1, valid=int(d.valid))
                if not d.valid:
                    continue
                record.valid += 1
                if d.dii:
                    record.dii += 1
                    if record.fdi is None:
                        record.fdi = clock() - start
                    tracker.append(DiiRecord(seeds[j], d.patch_id, population[j],
                                             d.label, d.label_o, d.label_q))
        record.generations = generation + 1
        record.best_fitness.append(float(fitness.max()))
        dii_history.append(record.dii)
        if generation + 1 == config.maxiter:
            break
        population = optimizer.step(fitness)
        if early_stop(record.best_fitness, dii_history, config.early_stop_window):
            break
    record.elapsed = clock() - start if start is not None else 0.0
