"""Regenerate the golden fixtures in this directory.

Run from the repository root: ``python3 tests/fixtures/make_fixtures.py``.
Expected logits come from the naive oracle in ``tests/oracles.py``, not
from the package's own forward pass.
"""

import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import oracles  # noqa: E402
from hsidiff.nn import save_model  # noqa: E402
from hsidiff.patches import Patch3D, PatchSet, write_patchset  # noqa: E402
from hsidiff.toy import small_mlp  # noqa: E402


def main():
    model = small_mlp()
    save_model(model, HERE / "small_mlp.json")
    x = np.random.default_rng(99).normal(size=model.input_dims)
    np.savez(HERE / "small_mlp_io.npz", input=x, logits=oracles.forward(model, x))
    write_patchset(PatchSet((Patch3D(np.zeros((1, 1, 1), dtype=np.float32)),)),
                   HERE / "zero_1x1x1.dvgp")


if __name__ == "__main__":
    main()
