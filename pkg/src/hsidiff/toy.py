"""Desk-scale subjects: synthetic hyperspectral patches and small models.

``boundary_model`` is built by hand so that int8 weight quantization moves
its decision boundary by a known amount. Its hidden layer carries an extra
"anchor" unit with one large weight and a zero head weight; the anchor does
not change the float logits but fixes the per-tensor weight scale, so the
spectral weights land a controlled fraction of a step off the int8 grid.

The discriminating feature is the spectral tilt of the patch: the sum of
the first half of the bands minus the sum of the second half.
"""

from __future__ import annotations


import numpy as np

from hsidiff.nn import Conv3D, Dense, Flatten, Head, ModelSpec, ReLU
from hsidiff.patches import PatchSet

TOY_DIMS = (7, 7, 8)


def band_pattern(d3: int) -> np.ndarray:
    """+1 on the first half of the bands, -1 on the second half."""
    p = np.ones(d3)
    p[d3 // 2:] = -1.0
    return p


def tilt(values) -> float:
    """Spectral tilt of a ``(d1, d2, d3)`` array."""
    values = np.asarray(values, dtype=np.float64)
    return float(np.sum(values * band_pattern(values.shape[2])))


def make_patches(n: int, dims=TOY_DIMS, seed: int = 0, tilts=(0.15, 0.04),
                 jitter: float = 0.3, noise: float = 0.01, provenance: str = "toy") -> PatchSet:
    """Labelled patches alternating between the two classes.

    Class ``c`` has spectrum ``1 + a * pattern`` with ``a`` drawn around
    ``tilts[c]`` (relative spread ``jitter``), a smooth spatial brightness
    field and white noise.
    """
    rng = np.random.default_rng(seed)
    d1, d2, d3 = dims
    pattern = band_pattern(d3)
    ii, jj = np.meshgrid(np.linspace(-1, 1, d1), np.linspace(-1, 1, d2), indexing="ij")
    values, labels = [], []
    for i in range(n):
        label = i % len(tilts)
        amp = tilts[label] * (1.0 + jitter * rng.uniform(-1, 1))
        gx, gy = rng.normal(0, 0.03, size=2)
        field = 1.0 + gx * ii + gy * jj
        x = field[:, :, None] * (1.0 + amp * pattern)[None, None, :]
        x = x + rng.normal(0, noise, size=dims)
        values.append(x.astype(np.float32))
        labels.append(label)
    return PatchSet.from_array(np.stack(values), labels, provenance)


def boundary_model(dims=TOY_DIMS, threshold: float = 0.0, gain: float = 1.0,
                   offset_steps: float = 0.3, weight: float = 0.01) -> ModelSpec:
    """Two-class model: logit(1) - logit(0) = gain * weight * (threshold - tilt).

    ``offset_steps`` is how far (as a fraction of an int8 step) each spectral
    weight sits off the quantization grid; quantization then rescales the
    tilt term by ``round(k) / k`` with ``k = 2 + offset_steps`` weight
    steps, which shifts the boundary.
    """
    d1, d2, d3 = dims
    n = d1 * d2 * d3
    steps = 2.0 + offset_steps
    scale = weight / steps
    u = weight * np.tile(band_pattern(d3), d1 * d2)
    anchor = np.zeros(n)
    anchor[0] = 127.0 * scale
    # Rows: +tilt, -tilt, anchor. Biases keep both tilt units in their linear range.
    bias_level = 2.0 * weight * n
    w1 = np.stack([u, -u, anchor])
    b1 = np.array([bias_level, bias_level, 0.0])
    # h0 - h1 = 2 u.x = 2 * weight * tilt, so the logit gap is
    # gain * weight * (threshold - tilt).
    head = np.array([[gain / 4, -gain / 4, 0.0],
                     [-gain / 4, gain / 4, 0.0]])
    hb = np.array([0.0, gain * weight * threshold])
    layers = (
        Flatten("flatten"),
        Dense("hidden", w1, b1),
        ReLU("hidden_relu"),
        Head("logits", head, hb),
    )
    return ModelSpec(layers, dims, 2)


def small_mlp(dims=(3, 3, 4), hidden: int = 16, classes: int = 3, seed: int = 0) -> ModelSpec:
    """Random 3-layer MLP used by oracle-equivalence tests."""
    rng = np.random.default_rng(seed)
    n = int(np.prod(dims))
    return ModelSpec((
        Flatten("flatten"),
        Dense("fc1", rng.normal(0, 1 / np.sqrt(n), (hidden, n)), rng.normal(0, 0.1, hidden)),
        ReLU("relu1"),
        Dense("fc2", rng.normal(0, 1 / np.sqrt(hidden), (hidden, hidden)), rng.normal(0, 0.1, hidden)),
        ReLU("relu2"),
        Head("logits", rng.normal(0, 1 / np.sqrt(hidden), (classes, hidden)), rng.normal(0, 0.1, classes)),
    ), dims, classes)


def small_cnn(dims=(5, 5, 6), filters: int = 4, classes: int = 3, seed: int = 0) -> ModelSpec:
    """conv3d -> relu -> flatten -> head, a miniature of 3D spectral-spatial CNNs."""
    rng = np.random.default_rng(seed)
    kernel = rng.normal(0, 0.3, (3, 3, 3, 1, filters))
    conv = Conv3D("conv", kernel, rng.normal(0, 0.1, filters), stride=1)
    out = conv.output_shape(tuple(dims))
    n = int(np.prod(out))
    return ModelSpec((
        conv,
        ReLU("conv_relu"),
        Flatten("flatten"),
        Head("logits", rng.normal(0, 1 / np.sqrt(n), (classes, n)), rng.normal(0, 0.1, classes)),
    ), dims, classes)


# Subject used by the search-vs-random comparison: a thin disagreement band
# (tilt between 52 and about 52.13) that far seeds can only reach through
# small, valid distortions.
COMPARISON = dict(threshold=52.0, gain=1000.0, offset_steps=0.005)
COMPARISON_PATCHES = dict(n=40, jitter=0.05)


def comparison_subjects():
    """``(model, qmodel, patches, seed_ids)`` for the search comparison.

    Seeds are the class-0 patches, all of which the float model classifies
    correctly.
    """
    from hsidiff.quantize import quantize_weights

    patches = make_patches(**COMPARISON_PATCHES)
    model = boundary_model(**COMPARISON)
    qmodel = quantize_weights(model)
    ids = [i for i, p in enumerate(patches) if p.label == 0]
    return model, qmodel, patches, ids
