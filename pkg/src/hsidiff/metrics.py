"""Session reports, divergence/validity/timing metrics and the two
non-parametric comparisons (Vargha-Delaney A12, Wilcoxon signed-rank)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

EXACT_WILCOXON_MAX_N = 25


@dataclass
class SeedRecord:
    patch_ids: List[int]
    generations: int = 0
    generated: int = 0
    valid: int = 0
    dii: int = 0
    best_fitness: List[float] = field(default_factory=list)
    fdi: Optional[float] = None  # time to first DII, None when none was found
    elapsed: float = 0.0  # time spent on this seed

    def __post_init__(self):
        if not 0 <= self.dii <= self.valid <= self.generated:
            raise ValueError(f"inconsistent counters: dii={self.dii} valid={self.valid} "
                             f"generated={self.generated}")


@dataclass
class SessionReport:
    seeds: List[SeedRecord]
    config: dict = field(default_factory=dict)
    subjects: dict = field(default_factory=dict)  # name -> digest
    clock: str = "wall"  # unit of fdi/elapsed: seconds ("wall") or model queries
    aborted: bool = False
    error: Optional[str] = None

    @property
    def total_dii(self) -> int:
        return sum(s.dii for s in self.seeds)

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            for s in d["seeds"]:
                s.pop("fdi")
                s.pop("elapsed")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SessionReport":
        seeds = [SeedRecord(**s) for s in d["seeds"]]
        return cls(seeds, d.get("config", {}), d.get("subjects", {}), d.get("clock", "wall"),
                   d.get("aborted", False), d.get("error"))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SessionReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _median(values) -> float:
    values = list(values)
    return float(np.median(values)) if values else math.nan


def _seeds(report) -> List[SeedRecord]:
    if isinstance(report, SessionReport):
        return list(report.seeds)
    seeds = []
    for r in report:
        seeds.extend(r.seeds)
    return seeds


def divergence_rate(report):
    """Per-seed ``100 * dii / generated`` and their median."""
    per = [100.0 * s.dii / s.generated if s.generated else 0.0 for s in _seeds(report)]
    return per, _median(per)


def validation_rate(report):
    per = [100.0 * s.valid / s.generated if s.generated else 0.0 for s in _seeds(report)]
    return per, _median(per)


def success_rate(report) -> float:
    """Percentage of seeds with at least one DII."""
    seeds = _seeds(report)
    if not seeds:
        return math.nan
    return 100.0 * sum(1 for s in seeds if s.dii >= 1) / len(seeds)


def fdi(report, successful_only: bool = False) -> float:
    """Median time to first DII.

    Unsuccessful seeds count with their whole elapsed time unless
    ``successful_only`` drops them.
    """
    times = []
    for s in _seeds(report):
        if s.dii >= 1 and s.fdi is not None:
            times.append(s.fdi)
        elif not successful_only:
            times.append(s.elapsed)
    return _median(times)


# --- effect size -------------------------------------------------------------

MAGNITUDES = ((0.147, "negligible"), (0.33, "small"), (0.474, "medium"))


def a12_magnitude(a12: float) -> str:
    scaled = 2.0 * abs(a12 - 0.5)
    for limit, name in MAGNITUDES:
        if scaled < limit:
            return name
    return "large"


def vargha_delaney_a12(group1: Sequence[float], group2: Sequence[float]):
    """Probability that a draw from ``group1`` beats one from ``group2`` (ties count half).

    Returns ``(a12, magnitude)`` with magnitude one of negligible, small,
    medium, large.
    """
    x = np.asarray(group1, dtype=np.float64)
    y = np.asarray(group2, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValueError("both groups need at least one sample")
    greater = np.sum(x[:, None] > y[None, :])
    ties = np.sum(x[:, None] == y[None, :])
    a12 = (greater + 0.5 * ties) / (x.size * y.size)
    return float(a12), a12_magnitude(float(a12))


# --- Wilcoxon signed-rank ----------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    pvalue: float  # two-sided
    n: int  # non-zero differences
    method: str  # "exact", "normal" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def rank_abs(d: np.ndarray) -> np.ndarray:
    """Ranks of ``|d|`` starting at 1, ties averaged."""
    a = np.abs(d)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size)
    sa = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_pvalue(ranks: np.ndarray, w_plus: float) -> float:
    # Ranks are multiples of 1/2, so doubled ranks are integers.
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    probs = counts / counts.sum()
    w = int(round(2 * w_plus))
    lower = probs[: w + 1].sum()
    upper = probs[w:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def wilcoxon_signed_rank(x: Sequence[float], y: Optional[Sequence[float]] = None,
                         exact_max_n: int = EXACT_WILCOXON_MAX_N) -> WilcoxonResult:
    """Two-sided paired test on ``x - y`` (or on ``x`` when ``y`` is None).

    Zero differences are dropped and tied ranks averaged. Up to
    ``exact_max_n`` pairs the null distribution is enumerated exactly;
    beyond that a tie-corrected normal approximation with continuity
    correction is used.
    """
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        d = d - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    ranks = rank_abs(d)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        return WilcoxonResult(stat, _exact_pvalue(ranks, w_plus), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return WilcoxonResult(stat, math.erfc(z / math.sqrt(2.0)), n, "normal")
