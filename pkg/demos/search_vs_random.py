"""Compare guided search with random sampling at the same query budget.

Runs PSO, the genetic algorithm and random sampling over the same seed
patches, then compares per-seed DII counts with the Vargha-Delaney effect
size and a paired Wilcoxon signed-rank test.

    python demos/search_vs_random.py
"""

import numpy as np

from hsidiff import (
    SessionConfig, Subjects, run_session, success_rate, vargha_delaney_a12,
    wilcoxon_signed_rank,
)
from hsidiff.toy import comparison_subjects


def main(seed: int = 1):
    model, qmodel, patches, seed_ids = comparison_subjects()
    subjects = Subjects(model, qmodel)
    counts = {}
    for optimizer in ("pso", "ga", "random"):
        # Early stopping off, so every strategy spends exactly p * maxiter queries per seed.
        cfg = SessionConfig(optimizer=optimizer, population=10, maxiter=25, seed_ids=seed_ids,
                            early_stop_window=0, seed=seed, clock="queries")
        report = run_session(cfg, patches, subjects)
        counts[optimizer] = [s.dii for s in report.seeds]
        print(f"{optimizer:>6}: median #DII {np.median(counts[optimizer]):5.1f}   "
              f"SR {success_rate(report):5.1f}%")

    print()
    for name in ("pso", "ga"):
        a12, magnitude = vargha_delaney_a12(counts[name], counts["random"])
        test = wilcoxon_signed_rank(counts[name], counts["random"])
        print(f"{name} vs random: A12 {a12:.3f} ({magnitude}), p = {test.pvalue:.2g} "
              f"[{test.method}]")


if __name__ == "__main__":
    main()
