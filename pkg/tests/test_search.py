import numpy as np
import pytest

from hsidiff.cli import replay
from hsidiff.distortions import Layout
from hsidiff.fitness import Subjects
from hsidiff.patches import Patch3D, PatchSet
from hsidiff.quantize import quantize_weights
from hsidiff.search import (
    DII_MAGIC, ConfigError, DiiRecord, DiiTracker, GaConfig, GeneticAlgorithm, ParticleSwarm,
    PsoConfig, RandomSampler, SessionConfig, candidate_seed, decode_dii_bytes, early_stop,
    ga_step, pso_step, random_step, read_dii_file, run_session, write_dii_file,
)
from hsidiff.metrics import success_rate
from hsidiff.toy import comparison_subjects, small_mlp


def sphere(pop):
    return -np.sum(pop ** 2, axis=1)


def record(i, length=8):
    return DiiRecord(1000 + i, i, np.arange(length, dtype=np.float32) * 0.5 + i, 0, 0, 1)


# --- records and tracker -----------------------------------------------------

def test_record_size():
    assert DiiRecord.size_for(8) == 60
    assert len(record(0).encode()) == 60


def test_record_round_trip(tmp_path):
    recs = [record(i) for i in range(3)]
    write_dii_file(recs, tmp_path / "d.bin")
    assert (tmp_path / "d.bin").read_bytes()[:8] == DII_MAGIC
    assert read_dii_file(tmp_path / "d.bin") == recs


def test_dii_file_errors():
    with pytest.raises(ValueError):
        decode_dii_bytes(b"NOTMAGIC")
    with pytest.raises(ValueError):
        decode_dii_bytes(DII_MAGIC + record(0).encode()[:-1])


def test_tracker_flushes_on_second_append(tmp_path):
    t = DiiTracker(tmp_path / "d.bin", threshold=100)
    t.append(record(0))
    assert t.flushes == [] and not (tmp_path / "d.bin").exists()
    t.append(record(1))
    assert t.flushes == [1]
    assert read_dii_file(tmp_path / "d.bin") == [record(0)]


def test_tracker_reload_and_bound(tmp_path):
    t = DiiTracker(tmp_path / "d.bin", threshold=100)
    for i in range(7):
        t.append(record(i))
        assert t.buffer_bytes <= 100
    t.close()
    assert t.flushes == [1, 2, 3, 4, 5, 6]
    assert read_dii_file(tmp_path / "d.bin") == [record(i) for i in range(7)]


def test_tracker_without_records_writes_nothing(tmp_path):
    t = DiiTracker(tmp_path / "d.bin", threshold=100)
    t.close()
    assert not (tmp_path / "d.bin").exists()


def test_tracker_oversized_record(tmp_path):
    t = DiiTracker(tmp_path / "d.bin", threshold=50)
    t.append(record(0))
    assert t.buffer_bytes == 0
    t.close()
    assert read_dii_file(tmp_path / "d.bin") == [record(0)]


def test_tracker_counters():
    t = DiiTracker(threshold=1000)
    t.count(generated=5, valid=3)
    t.append(record(0))
    assert (t.generated, t.valid, t.dii) == (5, 3, 1)
    assert t.records == [record(0)]
    with pytest.raises(ValueError):
        DiiTracker(threshold=0)


# --- optimizers --------------------------------------------------------------

LO, HI = np.full(4, -1.0), np.full(4, 1.0)


def test_pso_fixed_point():
    pso = ParticleSwarm()
    pso.init(5, LO, HI, np.random.default_rng(0))
    pso.population[:] = 0.3
    pso.velocity[:] = 0.0
    nxt = pso_step(pso, np.zeros(5))
    assert np.all(nxt == 0.3)


def test_pso_social_only_moves_toward_gbest():
    pso = ParticleSwarm(PsoConfig(inertia=0.0, cognitive=0.0, social=1.0, velocity_clamp=1.0))
    pop = pso.init(8, LO, HI, np.random.default_rng(1))
    f = sphere(pop)
    nxt = pso.step(f)
    g = pop[np.argmax(f)]
    for x, y in zip(pop, nxt):
        moving = x != g
        assert np.all(np.abs(y - g)[moving] <= np.abs(x - g)[moving])
        assert np.all(np.sign(y - x)[moving] * np.sign(g - x)[moving] >= 0)


def test_pso_gbest_monotone_on_sphere():
    pso = ParticleSwarm()
    pop = pso.init(10, LO, HI, np.random.default_rng(2))
    best = []
    for _ in range(50):
        pop = pso.step(sphere(pop))
        best.append(pso.gbest_fitness)
        assert np.all((pop >= LO) & (pop <= HI))
    assert all(a <= b for a, b in zip(best, best[1:]))


def test_ga_identity_configuration():
    ga = GeneticAlgorithm(GaConfig(crossover_rate=0.0, mutation_rate=0.0, elitism=6))
    pop = ga.init(6, LO, HI, np.random.default_rng(3))
    assert np.array_equal(ga_step(ga, sphere(pop)), pop)


def test_ga_elitism_keeps_best():
    ga = GeneticAlgorithm()
    pop = ga.init(10, LO, HI, np.random.default_rng(4))
    best = -np.inf
    for _ in range(30):
        f = sphere(pop)
        assert f.max() >= best
        best = f.max()
        pop = ga.step(f)
        assert np.all((pop >= LO) & (pop <= HI))


def test_ga_improves_on_sphere():
    wins = 0
    for seed in range(100):
        ga = GeneticAlgorithm()
        pop = ga.init(10, LO, HI, np.random.default_rng(seed))
        first = sphere(pop).max()
        for _ in range(50):
            pop = ga.step(sphere(pop))
        wins += sphere(pop).max() > first
    assert wins >= 95


def test_ga_elitism_above_population():
    with pytest.raises(ConfigError):
        GeneticAlgorithm(GaConfig(elitism=4)).init(3, LO, HI, np.random.default_rng(0))


def test_random_sampler_uniform_and_reproducible():
    rs = RandomSampler()
    lo, hi = np.array([0.0, -2.0]), np.array([1.0, 6.0])
    first = rs.init(10_000, lo, hi, np.random.default_rng(5))
    second = random_step(rs)
    assert not np.array_equal(first, second)
    sigma = (hi - lo) / np.sqrt(12) / np.sqrt(10_000)
    assert np.all(np.abs(first.mean(axis=0) - (lo + hi) / 2) <= 3 * sigma)
    again = RandomSampler()
    assert np.array_equal(again.init(10_000, lo, hi, np.random.default_rng(5)), first)


@pytest.mark.parametrize("best,diis,expected", [
    ([1, 2, 3, 4, 5], [0] * 5, False),
    ([1] * 5, [0, 1, 2, 3, 4], False),
    ([1] * 5, [2] * 5, True),
    ([0, 1, 1, 1, 1], [2] * 5, False),
])
def test_early_stop(best, diis, expected):
    assert early_stop(best, diis, 5) is expected


def test_early_stop_disabled():
    assert not early_stop([1] * 9, [0] * 9, 0)
    assert not early_stop([1] * 3, [0] * 3, 5)


def test_candidate_seeds():
    assert candidate_seed(1, 2, 3, 4) == candidate_seed(1, 2, 3, 4)
    seeds = {candidate_seed(0, u, g, c) for u in range(3) for g in range(3) for c in range(3)}
    assert len(seeds) == 27


# --- config ------------------------------------------------------------------

@pytest.mark.parametrize("data,field", [
    ({"optimizer": "anneal"}, "optimizer"),
    ({"population": 1}, "population"),
    ({"maxiter": 0}, "maxiter"),
    ({"maxiter": "ten"}, "maxiter"),
    ({"pso": {"inertia": 2}}, "pso.inertia"),
    ({"ga": {"tournament": 1}}, "ga.tournament"),
    ({"optimizer": "ga", "population": 2, "ga": {"elitism": 3}}, "ga.elitism"),
    ({"colour": "red"}, "colour"),
    ({"bounds": {"zoom": {"factor": [2, 1]}}}, "bounds"),
    ({"clock": "sundial"}, "clock"),
])
def test_config_errors(data, field):
    with pytest.raises(ConfigError) as err:
        SessionConfig.from_dict(data)
    assert err.value.field == field


def test_config_round_trip():
    cfg = SessionConfig(optimizer="ga", seed=9, bounds={"zoom": {"factor": [0.9, 1.1]}})
    assert SessionConfig.from_dict(cfg.to_dict()) == cfg


# --- sessions ----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    return comparison_subjects()


def session(toy, **kw):
    model, qmodel, patches, ids = toy
    cfg = SessionConfig(seed_ids=ids[:kw.pop("n_seeds", 4)], clock="queries", **kw)
    return cfg, patches, Subjects(model, qmodel)


def test_single_generation_counters(toy):
    cfg, patches, subjects = session(toy, optimizer="random", maxiter=1, population=7)
    report = run_session(cfg, patches, subjects)
    for s in report.seeds:
        assert s.generated == 7 and s.generations == 1
        assert s.dii <= s.valid <= s.generated


def test_session_is_deterministic(toy, tmp_path):
    cfg, patches, subjects = session(toy, maxiter=6)
    a = run_session(cfg, patches, subjects, offload_path=tmp_path / "a.bin")
    b = run_session(cfg, patches, subjects, offload_path=tmp_path / "b.bin")
    assert a.dumps() == b.dumps()
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_threads_do_not_change_results(toy, tmp_path):
    cfg, patches, subjects = session(toy, optimizer="ga", maxiter=5)
    a = run_session(cfg, patches, subjects, offload_path=tmp_path / "a.bin")
    cfg.threads = 4
    b = run_session(cfg, patches, subjects, offload_path=tmp_path / "b.bin")
    assert a.to_dict()["seeds"] == b.to_dict()["seeds"]
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_every_record_satisfies_the_guard(toy):
    cfg, patches, subjects = session(toy, maxiter=10)
    tracker = DiiTracker(threshold=10_000)
    report = run_session(cfg, patches, subjects, tracker)
    assert report.total_dii == len(tracker.records) > 0
    rows = replay(tracker.records, patches, Layout(patches.dims), subjects)
    assert all(row["ok"] for row in rows)


def test_batch_mode_units(toy):
    cfg, patches, subjects = session(toy, batch_size=2, maxiter=3, population=4,
                                     early_stop_window=0)
    report = run_session(cfg, patches, subjects)
    assert [len(s.patch_ids) for s in report.seeds] == [2, 2]
    assert all(s.generated == 4 * 3 * 2 for s in report.seeds)


def test_pso_finds_dii_on_toy_boundary(toy):
    model, qmodel, patches, ids = toy
    cfg = SessionConfig(optimizer="pso", population=10, maxiter=25, seed_ids=ids,
                        early_stop_window=0, clock="queries", seed=1)
    report = run_session(cfg, patches, Subjects(model, qmodel))
    assert len(report.seeds) == 20
    assert success_rate(report) >= 90.0


def test_seeds_exclude_misclassified_patches(toy):
    model, qmodel, patches, _ = toy
    relabelled = PatchSet(tuple(p if i not in (1, 4) else Patch3D(p.values, 1 - p.label)
                                for i, p in enumerate(patches)))
    cfg = SessionConfig(maxiter=1, clock="queries", max_seeds=6)
    report = run_session(cfg, relabelled, Subjects(model, qmodel))
    assert [s.patch_ids[0] for s in report.seeds] == [0, 2, 3, 5, 6, 7]


def test_offload_failure_aborts(toy, tmp_path):
    cfg, patches, subjects = session(toy, maxiter=10)
    cfg.offload_bytes = 60
    report = run_session(cfg, patches, subjects, offload_path=tmp_path / "no" / "d.bin")
    assert report.aborted and report.error


def test_incompatible_subjects():
    model = small_mlp()
    with pytest.raises(ValueError):
        Subjects(model, quantize_weights(small_mlp(seed=5)))
    patches = PatchSet.from_array(np.zeros((2, 7, 7, 8)), [0, 1])
    with pytest.raises(ValueError):
        run_session(SessionConfig(), patches, Subjects(model, quantize_weights(model)))
