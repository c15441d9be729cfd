"""Divergence and coverage objectives for the two subject models.

``f_div`` is the Jensen-Shannon divergence between the softmax outputs of
the full-precision and quantized models (natural log, so it lies in
``[0, ln 2]``). ``f_cov`` is the negated Jaccard coefficient between the
KMNC activation signatures of the two models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Optional, Sequence, Tuple

import numpy as np

from hsidiff.distortions import Layout, decode
from hsidiff.nn import ModelSpec, NeuronIntervals, flatten_trace, forward, predict_label
from hsidiff.patches import DEFAULT_PSNR_THRESHOLD, PatchSet, psnr
from hsidiff.quantize import QuantizedModel, quantized_forward

DIV, COV = "div", "cov"
OBJECTIVES = (DIV, COV)
JACCARD_INFLATED, JACCARD_STANDARD = "inflated", "standard"

LN2 = math.log(2.0)


def softmax(logits) -> np.ndarray:
    l = np.asarray(logits, dtype=np.float64)
    e = np.exp(l - np.max(l))
    return e / e.sum()


def kl_divergence(q, r) -> float:
    """Natural-log KL divergence with ``0 * ln(0 / .) = 0``."""
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if q.shape != r.shape:
        raise ValueError("distributions must have the same length")
    mask = q > 0
    return float(np.sum(q[mask] * np.log(q[mask] / r[mask])))


def jsd(q, r) -> float:
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    m = 0.5 * (q + r)
    return 0.5 * (kl_divergence(q, m) + kl_divergence(r, m))


def f_div(original_logits, quantized_logits) -> float:
    return jsd(softmax(original_logits), softmax(quantized_logits))


@dataclass(frozen=True)
class ActivationSignature:
    pairs: FrozenSet[Tuple[int, int]]
    neurons: int
    k: int

    def __len__(self):
        return len(self.pairs)


def signature(trace, intervals: NeuronIntervals) -> ActivationSignature:
    """Covered ``(neuron, section)`` pairs.

    Sections split each neuron's profiled ``[low, high]`` into ``k`` equal
    parts; ``high`` itself belongs to the last one. Values outside the
    interval and neurons with a zero-width interval cover nothing.
    """
    v = flatten_trace(trace, intervals.layers) if isinstance(trace, dict) else np.asarray(trace)
    if v.size != intervals.size:
        raise ValueError(f"trace has {v.size} neurons, intervals cover {intervals.size}")
    low, high, k = intervals.low, intervals.high, intervals.k
    ok = (~intervals.degenerate) & (v >= low) & (v <= high)
    idx = np.flatnonzero(ok)
    width = high[idx] - low[idx]
    sec = np.minimum(np.floor((v[idx] - low[idx]) * k / width), k - 1).astype(np.int64)
    return ActivationSignature(frozenset(zip(idx.tolist(), sec.tolist())), intervals.size, k)


def _pairs(s):
    return s.pairs if isinstance(s, ActivationSignature) else frozenset(s)


def jaccard(a, b, variant: str = JACCARD_INFLATED) -> float:
    """Similarity of two signatures.

    ``inflated``: ``|A & B| / (|A| + |B| + |A & B|)`` (at most 1/3).
    ``standard``: ``|A & B| / |A | B|``.
    """
    a, b = _pairs(a), _pairs(b)
    inter = len(a & b)
    if variant == JACCARD_INFLATED:
        denom = len(a) + len(b) + inter
    elif variant == JACCARD_STANDARD:
        denom = len(a) + len(b) - inter
    else:
        raise ValueError(f"unknown jaccard variant {variant!r}")
    return inter / denom if denom else 0.0


jaccard_paper = jaccard  # name used by the operation contract


def f_cov(trace_o, trace_q, intervals: NeuronIntervals, variant: str = JACCARD_INFLATED) -> float:
    return -jaccard(signature(trace_o, intervals), signature(trace_q, intervals), variant)


# --- evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class Subjects:
    model: ModelSpec
    qmodel: QuantizedModel
    intervals: Optional[NeuronIntervals] = None

    def __post_init__(self):
        if tuple(self.model.input_dims) != tuple(self.qmodel.input_dims):
            raise ValueError("model and quantized model disagree on input dims")
        if self.model.class_count != self.qmodel.class_count:
            raise ValueError("model and quantized model disagree on class count")
        if self.qmodel.source_model_hash != self.model.digest():
            raise ValueError("quantized model was not derived from this model")


@dataclass(frozen=True)
class FitnessMode:
    """``single`` evaluates one seed patch, ``batch`` averages over several."""

    patch_ids: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.patch_ids)
        if not ids:
            raise ValueError("fitness mode needs at least one patch")
        object.__setattr__(self, "patch_ids", ids)

    @classmethod
    def single(cls, patch_id: int) -> "FitnessMode":
        return cls((patch_id,))

    @classmethod
    def batch(cls, patch_ids: Sequence[int]) -> "FitnessMode":
        return cls(tuple(patch_ids))

    @property
    def kind(self) -> str:
        return "single" if len(self.patch_ids) == 1 else "batch"


@dataclass(frozen=True)
class PatchOutcome:
    patch_id: int
    fitness: float
    psnr: float
    valid: bool
    label: Optional[int]
    original_label: int  # m_o on the untouched patch
    label_o: int  # m_o on the distorted patch
    label_q: int  # m_q on the distorted patch
    dii: bool


class Evaluator:
    """Caches the per-patch work that does not depend on the vector."""

    def __init__(self, subjects: Subjects, patches: PatchSet, lay: Optional[Layout] = None,
                 objective: str = DIV, psnr_threshold: float = DEFAULT_PSNR_THRESHOLD,
                 jaccard_variant: str = JACCARD_INFLATED):
        if objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if objective == COV and subjects.intervals is None:
            raise ValueError("the coverage objective needs neuron intervals")
        if tuple(patches.dims) != tuple(subjects.model.input_dims):
            raise ValueError(f"patches {patches.dims} do not fit model input {subjects.model.input_dims}")
        self.subjects = subjects
        self.patches = patches
        self.layout = lay or Layout(patches.dims)
        self.objective = objective
        self.psnr_threshold = psnr_threshold
        self.jaccard_variant = jaccard_variant
        self._original_labels: Dict[int, int] = {}

    def original_label(self, pid: int) -> int:
        if pid not in self._original_labels:
            logits, _ = forward(self.subjects.model, self.patches[pid])
            self._original_labels[pid] = predict_label(logits)
        return self._original_labels[pid]

    def outcome(self, vector, pid: int, rng_seed: int) -> PatchOutcome:
        original = self.patches[pid]
        x = decode(vector, original, rng_seed, self.layout)
        lo, to = forward(self.subjects.model, x)
        lq, tq = quantized_forward(self.subjects.qmodel, x)
        if self.objective == DIV:
            fit = f_div(lo, lq)
        else:
            fit = f_cov(to, tq, self.subjects.intervals, self.jaccard_variant)
        quality = psnr(original, x)
        valid = quality >= self.psnr_threshold
        label_o, label_q = predict_label(lo), predict_label(lq)
        orig = self.original_label(pid)
        correct = original.label is not None and orig == original.label
        return PatchOutcome(pid, fit, quality, valid, original.label, orig, label_o, label_q,
                            bool(valid and label_o != label_q and correct))

    def __call__(self, vector, mode: FitnessMode, rng_seed: int):
        details = [self.outcome(vector, pid, rng_seed) for pid in mode.patch_ids]
        # Summed in patch order so the mean is reproducible bit for bit.
        total = 0.0
        for d in details:
            total += d.fitness
        return total / len(details), details


def evaluate(t, mode: FitnessMode, objective: str, subjects: Subjects, patches: PatchSet,
             rng_seed: int, lay: Optional[Layout] = None, **kwargs):
    """Fitness of vector ``t`` and the per-patch details."""
    return Evaluator(subjects, patches, lay, objective, **kwargs)(t, mode, rng_seed)
