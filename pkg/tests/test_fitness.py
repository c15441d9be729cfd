import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hsidiff.distortions import Layout
from hsidiff.fitness import (
    LN2, Evaluator, FitnessMode, Subjects, evaluate, f_cov, f_div, jaccard,
    jsd, kl_divergence, signature, softmax,
)
from hsidiff.nn import NeuronIntervals, forward, profile_intervals
from hsidiff.patches import PatchSet
from hsidiff.quantize import quantize_weights
from hsidiff.toy import small_mlp

logits = arrays(np.float64, 4, elements=st.floats(-50, 50))


@pytest.mark.parametrize("l,expected", [([0, 0], [0.5, 0.5]), ([1000, 1000], [0.5, 0.5]),
                                        ([0, math.log(3)], [0.25, 0.75])])
def test_softmax_examples(l, expected):
    np.testing.assert_allclose(softmax(l), expected, atol=1e-15)


def test_kl_examples():
    assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(LN2, abs=1e-15)


def test_jsd_examples():
    assert jsd([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-12)


def test_f_div_extremes():
    assert f_div([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert f_div([800.0, 0.0], [0.0, 800.0]) == pytest.approx(LN2, abs=1e-12)


@given(logits, logits)
def test_jsd_symmetric_and_bounded(a, b):
    ab, ba = f_div(a, b), f_div(b, a)
    assert abs(ab - ba) <= 1e-12
    assert -1e-12 <= ab <= LN2 + 1e-12


@given(arrays(np.float64, 5, elements=st.floats(0.01, 1)),
       arrays(np.float64, 5, elements=st.floats(0.01, 1)))
def test_gibbs_inequality(q, r):
    assert kl_divergence(q / q.sum(), r / r.sum()) >= -1e-12


def iv(k=10):
    return NeuronIntervals((("a", 3),), [0.0, 0.0, 1.0], [1.0, 2.0, 1.0], k)


def test_signature_boundaries():
    assert signature(np.array([0.0, 2.0, 1.0]), iv()).pairs == {(0, 0), (1, 9)}
    assert signature(np.array([0.25, -0.1, 1.0]), iv()).pairs == {(0, 2)}


def test_signature_against_enumeration():
    # Section i of [0, 1] with k=10 covers [i/10, (i+1)/10).
    for v in np.linspace(0, 1, 101):
        s = signature(np.array([v, 5.0, 1.0]), iv()).pairs
        expected = next(i for i in range(10) if v < (i + 1) / 10 or i == 9)
        if not math.isclose(v * 10, round(v * 10)):
            assert s == {(0, expected)}


def test_jaccard_examples():
    same = {("x", 0), ("y", 0)}
    assert jaccard(same, same) == 1 / 3
    assert jaccard(same, same, "standard") == 1.0
    assert jaccard({1, 2}, {3, 4}) == 0.0 and jaccard({1, 2}, {3, 4}, "standard") == 0.0
    assert jaccard({1, 2, 3}, {2, 3, 4}) == 0.25
    assert jaccard({1, 2, 3}, {2, 3, 4}, "standard") == 0.5
    assert jaccard(set(), set()) == 0.0
    with pytest.raises(ValueError):
        jaccard({1}, {1}, "dice")


def test_f_cov_identical_traces():
    t = np.array([0.5, 1.0, 1.0])
    assert f_cov(t, t, iv()) == -1 / 3
    assert f_cov(t, t, iv(), "standard") == -1.0


def test_f_cov_disjoint_is_zero():
    assert f_cov(np.array([0.05, 0.05, 1.0]), np.array([0.95, 1.95, 1.0]), iv()) == 0.0


def test_removing_a_shared_pair_never_decreases_f_cov():
    universe = list(range(5))
    subsets = [frozenset(c) for r in range(6) for c in itertools.combinations(universe, r)]
    for a in subsets:
        for b in subsets:
            for x in a & b:
                for variant in ("inflated", "standard"):
                    before = -jaccard(a, b, variant)
                    after = -jaccard(a - {x}, b - {x}, variant)
                    assert after >= before


@given(st.sets(st.integers(0, 20)), st.sets(st.integers(0, 20)))
def test_f_cov_bounds(a, b):
    assert -1 / 3 <= -jaccard(a, b) <= 0
    assert -1 <= -jaccard(a, b, "standard") <= 0


# --- evaluate ----------------------------------------------------------------

@pytest.fixture
def setup():
    model = small_mlp(dims=(3, 3, 4))
    values = np.random.default_rng(3).normal(size=(6, 3, 3, 4)).astype(np.float32)
    plain = PatchSet.from_array(values)
    labels = [int(np.argmax(forward(model, p)[0])) for p in plain]
    labels[5] = (labels[5] + 1) % 3  # one patch the model gets wrong
    patches = PatchSet.from_array(values, labels)
    intervals = profile_intervals(model, patches)
    return Subjects(model, quantize_weights(model), intervals), patches


def test_subjects_check_hash(setup):
    subjects, _ = setup
    with pytest.raises(ValueError):
        Subjects(small_mlp(seed=9, dims=(3, 3, 4)), subjects.qmodel)


def test_identity_vector_sees_original(setup):
    subjects, patches = setup
    lay = Layout(patches.dims)
    fit, details = evaluate(lay.identity(), FitnessMode.single(0), "div", subjects, patches, 0)
    from hsidiff.quantize import quantized_forward
    lo = forward(subjects.model, patches[0])[0]
    lq = quantized_forward(subjects.qmodel, patches[0])[0]
    assert fit == f_div(lo, lq) >= 0
    assert details[0].psnr == math.inf and details[0].valid


def test_batch_is_the_mean(setup):
    subjects, patches = setup
    lay = Layout(patches.dims)
    v = lay.sample(np.random.default_rng(0))
    ev = Evaluator(subjects, patches, lay)
    a, _ = ev(v, FitnessMode.single(1), 5)
    b, _ = ev(v, FitnessMode.single(2), 5)
    both, details = ev(v, FitnessMode.batch([1, 2]), 5)
    assert both == (a + b) / 2 and len(details) == 2


def test_dii_flag_implies_guard(setup):
    subjects, patches = setup
    lay = Layout(patches.dims)
    ev = Evaluator(subjects, patches, lay, objective="cov")
    rng = np.random.default_rng(1)
    for _ in range(50):
        _, details = ev(lay.sample(rng), FitnessMode.batch(range(6)), int(rng.integers(1 << 30)))
        for d in details:
            if d.dii:
                assert d.valid and d.label_o != d.label_q and d.original_label == d.label
            assert -1 / 3 <= d.fitness <= 0


def test_evaluate_is_deterministic(setup):
    subjects, patches = setup
    lay = Layout(patches.dims)
    v = lay.sample(np.random.default_rng(2))
    a = evaluate(v, FitnessMode.batch([0, 3, 4]), "div", subjects, patches, 77)
    b = evaluate(v, FitnessMode.batch([0, 3, 4]), "div", subjects, patches, 77)
    assert a[0] == b[0] and a[1] == b[1]


def test_mode_and_objective_validation(setup):
    subjects, patches = setup
    with pytest.raises(ValueError):
        FitnessMode(())
    with pytest.raises(ValueError):
        Evaluator(subjects, patches, objective="entropy")
    with pytest.raises(ValueError):
        Evaluator(Subjects(subjects.model, subjects.qmodel), patches, objective="cov")
    assert FitnessMode.single(3).kind == "single" and FitnessMode.batch([1, 2]).kind == "batch"
