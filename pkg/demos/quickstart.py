"""Find inputs on which a model and its int8 copy disagree.

Builds a toy two-class model whose decision boundary moves slightly under
weight quantization, runs a particle-swarm session over synthetic patches,
then rebuilds one of the disagreement-inducing inputs from its record and
checks it by hand.

    python demos/quickstart.py
"""

import tempfile
from pathlib import Path

import numpy as np

from hsidiff import (
    Layout, SessionConfig, Subjects, decode, divergence_rate, fdi, predict_label, psnr,
    run_session, success_rate, validation_rate,
)
from hsidiff.nn import forward
from hsidiff.quantize import quantized_forward
from hsidiff.search import read_dii_file
from hsidiff.toy import comparison_subjects


def main():
    model, qmodel, patches, seed_ids = comparison_subjects()
    print(f"{len(patches)} patches of shape {patches.dims}, {len(seed_ids)} used as seeds")

    cfg = SessionConfig(optimizer="pso", population=10, maxiter=25, seed_ids=seed_ids,
                        seed=7, clock="queries")
    out = Path(tempfile.mkdtemp(prefix="hsidiff-quickstart-"))
    report = run_session(cfg, patches, Subjects(model, qmodel), offload_path=out / "dii.bin")

    print(f"DIIs found:       {report.total_dii}")
    print(f"success rate:     {success_rate(report):.0f}% of seeds")
    print(f"divergence rate:  {divergence_rate(report)[1]:.1f}% (median over seeds)")
    print(f"validation rate:  {validation_rate(report)[1]:.1f}% (median over seeds)")
    print(f"first DII after:  {fdi(report):.0f} model queries (median)")

    records = read_dii_file(out / "dii.bin")
    if not records:
        return
    # Each record holds just the vector and a seed; the patch is rebuilt on demand.
    rec = records[0]
    original = patches[rec.patch_index]
    distorted = decode(rec.vector.astype(np.float64), original, rec.rng_seed, Layout(patches.dims))
    label_o = predict_label(forward(model, distorted)[0])
    label_q = predict_label(quantized_forward(qmodel, distorted)[0])
    print(f"\nrecord 0: patch {rec.patch_index}, true label {original.label}")
    print(f"  PSNR {psnr(original, distorted):.1f} dB, float model says {label_o}, "
          f"int8 model says {label_q}")


if __name__ == "__main__":
    main()
