"""Naturally-occurring HSI distortions and the flat vector encoding of them.

Each distortion family owns a slot in a fixed registry. A slot is a run of
real components: an activation switch first, then coordinates/selectors,
then parameters. Stacking every slot gives the search space the optimizers
move in. ``decode`` turns ``(vector, patch, seed)`` into a distorted patch.

Conventions that keep decoding reproducible:

* the vector is rounded to float32 (its on-disk precision) and clamped;
* a slot is active when its switch is >= 0.5;
* selectors/coordinates decode as ``min(floor(v), n - 1)``;
* active families are applied in registry order, radiometric first;
* fills (min, max, mean) always come from the ORIGINAL patch;
* stochastic choices draw from a Philox stream keyed by ``(seed, family)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from hsidiff.patches import DEFAULT_PSNR_THRESHOLD, Patch3D, PatchSet, psnr

log = logging.getLogger(__name__)

FAMILIES = (
    "continuous_dropout",
    "discontinuous_dropout",
    "stripping",
    "band_loss",
    "salt_pepper",
    "gaussian_noise",
    "rotation",
    "zoom",
)
SWITCH_ON = 0.5
MAX_LOST_BANDS = 3
MAX_HALVINGS = 10

SWITCH, COORDINATE, PARAMETER, SELECTOR = "switch", "coordinate", "parameter", "selector"

DROPOUT_VARIANTS = ("line", "column", "region")
STRIP_VARIANTS = ("line", "column")
FILLS = ("min", "max")
GAUSSIAN_AXES = ("spectral", "spatial")


class BoundsError(IndexError):
    pass


class LayoutError(ValueError):
    pass


# --- layout ----------------------------------------------------------------

@dataclass(frozen=True)
class Component:
    name: str
    kind: str
    lo: float
    hi: float
    identity: Optional[float] = None  # value a tuned range shrinks toward
    integer: bool = False  # parameter decoded with floor


@dataclass(frozen=True)
class DistortionSlot:
    family: str
    components: tuple

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.components]

    def __len__(self):
        return len(self.components)


@dataclass
class DistortionBounds:
    """Parameter ranges per family: ``{family: {param: (lo, hi)}}``.

    Only ``parameter`` components can be overridden; switches, selectors and
    coordinates are fixed by the registry and the patch dims.
    """

    ranges: Dict[str, Dict[str, tuple]] = field(default_factory=dict)

    def get(self, family: str, name: str, default: tuple) -> tuple:
        return tuple(self.ranges.get(family, {}).get(name, default))

    def to_dict(self) -> dict:
        return {f: {n: [float(lo), float(hi)] for n, (lo, hi) in p.items()}
                for f, p in self.ranges.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionBounds":
        ranges = {}
        for fam, params in d.items():
            if fam not in FAMILIES:
                raise ValueError(f"unknown distortion family {fam!r}")
            ranges[fam] = {}
            for name, (lo, hi) in params.items():
                if not lo < hi:
                    raise ValueError(f"{fam}.{name}: lo must be < hi, got [{lo}, {hi}]")
                ranges[fam][name] = (float(lo), float(hi))
        return cls(ranges)


def _default_slots(dims, bounds: DistortionBounds) -> Dict[str, tuple]:
    d1, d2, d3 = dims
    region = max(1, min(d1, d2) // 3)

    def sel(name, n):
        return Component(name, SELECTOR, 0.0, float(n))

    def coord(name, n, lo=0):
        return Component(name, COORDINATE, float(lo), float(n))

    def par(family, name, lo, hi, identity, integer=False):
        lo, hi = bounds.get(family, name, (lo, hi))
        return Component(name, PARAMETER, float(lo), float(hi), identity, integer)

    switch = Component("switch", SWITCH, 0.0, 1.0)

    def dropout(family, extra=()):
        return (switch, sel("variant", 3), coord("row", d1), coord("col", d2),
                par(family, "height", 1, region + 1, 1.0, True),
                par(family, "width", 1, region + 1, 1.0, True),
                *extra, sel("fill", 2))

    slots = {
        "continuous_dropout": dropout("continuous_dropout"),
        "discontinuous_dropout": dropout(
            "discontinuous_dropout",
            (par("discontinuous_dropout", "fraction", 0.05, 0.3, 0.0),)),
        "stripping": (switch, sel("variant", 2), coord("row", d1), coord("col", d2),
                      par("stripping", "mean_shift", -0.5, 0.5, 0.0),
                      par("stripping", "std_ratio", 0.8, 1.25, 1.0)),
        "salt_pepper": (switch, par("salt_pepper", "density", 0.001, 0.05, 0.0)),
        "gaussian_noise": (switch, sel("axis", 2),
                           par("gaussian_noise", "mean", -0.05, 0.05, 0.0),
                           par("gaussian_noise", "sigma", 0.0, 0.05, 0.0),
                           par("gaussian_noise", "fraction", 0.05, 0.5, 0.0)),
        "rotation": (switch, par("rotation", "angle", -45.0, 45.0, 0.0)),
        "zoom": (switch, par("zoom", "factor", 0.8, 1.25, 1.0)),
    }
    if d3 >= 3:
        nb = min(MAX_LOST_BANDS, d3 - 2)
        slots["band_loss"] = (
            switch, par("band_loss", "count", 1, nb + 1, 1.0, True),
            *(coord(f"band_{i}", d3 - 1, lo=1) for i in range(nb)))
    return slots


class Layout:
    """Ordered slot registry for one patch shape."""

    def __init__(self, dims, bounds: Optional[DistortionBounds] = None,
                 families: Optional[Iterable[str]] = None):
        self.dims = tuple(int(d) for d in dims)
        self.bounds = bounds or DistortionBounds()
        wanted = FAMILIES if families is None else tuple(families)
        for f in wanted:
            if f not in FAMILIES:
                raise LayoutError(f"unknown distortion family {f!r}")
        defaults = _default_slots(self.dims, self.bounds)
        self.slots = tuple(DistortionSlot(f, defaults[f]) for f in FAMILIES
                           if f in wanted and f in defaults)
        self.offsets = {}
        pos = 0
        for slot in self.slots:
            self.offsets[slot.family] = pos
            pos += len(slot)
        self.size = pos
        comps = [c for s in self.slots for c in s.components]
        for c in comps:
            if not c.lo < c.hi:
                raise LayoutError(f"component {c.name} has empty range [{c.lo}, {c.hi}]")
        self.lo = np.array([c.lo for c in comps])
        self.hi = np.array([c.hi for c in comps])
        self.components = tuple(comps)

    @property
    def families(self) -> list[str]:
        return [s.family for s in self.slots]

    def index(self, family: str, name: str) -> int:
        slot = self.slot(family)
        return self.offsets[family] + slot.names.index(name)

    def slot(self, family: str) -> DistortionSlot:
        for s in self.slots:
            if s.family == family:
                return s
        raise LayoutError(f"family {family!r} not in layout")

    def clamp(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=np.float64), self.lo, self.hi)

    def identity(self) -> np.ndarray:
        """A vector with every switch off and every other component at its lower bound."""
        return self.lo.copy()

    def sample(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        shape = (self.size,) if n is None else (n, self.size)
        return rng.uniform(self.lo, self.hi, size=shape)

    def vector(self, **settings) -> np.ndarray:
        """Build a vector from ``family={"name": value, ...}`` keyword settings.

        Unspecified components sit at their lower bound; naming a family
        turns its switch on unless ``switch`` is given explicitly.
        """
        v = self.identity()
        for family, values in settings.items():
            values = dict(values)
            values.setdefault("switch", 1.0)
            for name, value in values.items():
                v[self.index(family, name)] = value
        return v

    def describe(self) -> list[tuple]:
        return [(s.family, c.name, c.kind, c.lo, c.hi) for s in self.slots for c in s.components]


def layout(dims, bounds: Optional[DistortionBounds] = None,
           families: Optional[Iterable[str]] = None) -> Layout:
    return Layout(dims, bounds, families)


@dataclass(frozen=True, eq=False)
class TransformationVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.layout.size,):
            raise LayoutError(f"vector length {v.size} does not match layout size {self.layout.size}")
        object.__setattr__(self, "values", v)

    def clamped(self) -> "TransformationVector":
        return TransformationVector(self.layout.clamp(self.values), self.layout)


# --- helpers -----------------------------------------------------------------

def _count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` robust to float noise, within [1, n]."""
    return int(min(n, max(1, math.ceil(fraction * n - 1e-9))))


def _pick(v: float, n: int) -> int:
    return int(min(max(math.floor(v), 0), n - 1))


@dataclass(frozen=True)
class _Stats:
    lo: float
    hi: float
    mean: float
    std: float

    @classmethod
    def of(cls, x: np.ndarray) -> "_Stats":
        x = np.asarray(x, dtype=np.float64)
        return cls(float(x.min()), float(x.max()), float(x.mean()), float(x.std()))


def _unwrap(patch):
    if isinstance(patch, Patch3D):
        return patch.values.astype(np.float64), patch
    return np.array(patch, dtype=np.float64), None


def _wrap(x: np.ndarray, src):
    return src.with_values(x) if src is not None else x


def _component_mask(shape, component: str, index=None, rect=None) -> np.ndarray:
    """Spatial ``(d1, d2)`` boolean mask of a line, column or rectangle."""
    d1, d2 = shape[:2]
    mask = np.zeros((d1, d2), dtype=bool)
    if component == "line":
        if index is None or not 0 <= index < d1:
            raise BoundsError(f"line index {index} outside [0, {d1})")
        mask[index, :] = True
    elif component == "column":
        if index is None or not 0 <= index < d2:
            raise BoundsError(f"column index {index} outside [0, {d2})")
        mask[:, index] = True
    elif component == "region":
        if rect is None:
            raise BoundsError("region dropout needs rect=(row, col, height, width)")
        r, c, h, w = (int(v) for v in rect)
        if not (0 <= r < d1 and 0 <= c < d2) or h < 1 or w < 1:
            raise BoundsError(f"region {rect} outside patch {(d1, d2)}")
        mask[r:r + h, c:c + w] = True
    else:
        raise ValueError(f"unknown component {component!r}")
    return mask


def _fill_value(fill: str, stats: _Stats) -> float:
    if fill not in FILLS:
        raise ValueError(f"fill must be one of {FILLS}")
    return stats.lo if fill == "min" else stats.hi


# --- the eight families ------------------------------------------------------

def apply_continuous_dropout(patch, component: str, index: Optional[int] = None,
                             rect=None, fill: str = "max", *, stats: Optional[_Stats] = None):
    """Set every band of a line, column or rectangle to the patch min or max."""
    x, src = _unwrap(patch)
    stats = stats or _Stats.of(x)
    mask = _component_mask(x.shape, component, index, rect)
    x[mask, :] = _fill_value(fill, stats)
    return _wrap(x, src)


def apply_discontinuous_dropout(patch, component: str, index: Optional[int] = None,
                                rect=None, fraction: float = 0.5, fill: str = "max",
                                rng: Optional[np.random.Generator] = None, *,
                                stats: Optional[_Stats] = None):
    """Like continuous dropout on a uniform ``ceil(fraction * n)`` subset of the pixels."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    x, src = _unwrap(patch)
    stats = stats or _Stats.of(x)
    rng = rng if rng is not None else np.random.default_rng(0)
    pixels = np.flatnonzero(_component_mask(x.shape, component, index, rect))
    chosen = np.sort(rng.choice(pixels.size, size=_count(fraction, pixels.size), replace=False))
    rows, cols = np.unravel_index(pixels[chosen], x.shape[:2])
    x[rows, cols, :] = _fill_value(fill, stats)
    return _wrap(x, src)


def apply_stripping(patch, component: str, index: int, target_mean: float,
                    target_std: float, *, stats: Optional[_Stats] = None):
    """Re-standardize a line/column: ``(s_d/s_o) * (x - m_o + (s_o/s_d) * m_d)``.

    ``(m_o, s_o)`` are the original patch's mean and std; ``(m_d, s_d)`` the
    target statistics. Constant components and constant patches are left as is.
    """
    if component not in STRIP_VARIANTS:
        raise ValueError(f"stripping applies to {STRIP_VARIANTS}, got {component!r}")
    x, src = _unwrap(patch)
    stats = stats or _Stats.of(x)
    mask = _component_mask(x.shape, component, index)
    part = x[mask, :]
    if stats.std == 0.0 or np.ptp(part) == 0.0 or target_std <= 0.0:
        log.debug("stripping on a degenerate component is a no-op")
        return _wrap(x, src)
    ratio = target_std / stats.std
    x[mask, :] = ratio * (part - stats.mean + target_mean / ratio)
    return _wrap(x, src)


def apply_band_loss(patch, bands: Sequence[int]):
    """Replace each selected band by the mean of its two neighbours.

    Neighbours are read from the input, so adjacent selections do not cascade.
    Edge bands are moved to the nearest interior band.
    """
    x, src = _unwrap(patch)
    d3 = x.shape[2]
    if d3 < 3:
        raise ValueError("band loss needs at least 3 bands")
    chosen = []
    for b in bands:
        b = int(b)
        clamped = min(max(b, 1), d3 - 2)
        if clamped != b:
            log.warning("band %d is not interior, using band %d", b, clamped)
        chosen.append(clamped)
    chosen = np.unique(chosen)
    orig = x.copy()
    x[:, :, chosen] = 0.5 * (orig[:, :, chosen - 1] + orig[:, :, chosen + 1])
    return _wrap(x, src)


def apply_salt_pepper(patch, density: float, rng: Optional[np.random.Generator] = None,
                      salt_prob: float = 0.5, *, stats: Optional[_Stats] = None):
    """Set ``ceil(density * size)`` distinct cells to the patch max (salt) or min (pepper)."""
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    x, src = _unwrap(patch)
    stats = stats or _Stats.of(x)
    rng = rng if rng is not None else np.random.default_rng(0)
    cells = rng.choice(x.size, size=_count(density, x.size), replace=False)
    salt = rng.random(cells.size) < salt_prob
    flat = x.reshape(-1)
    flat[cells] = np.where(salt, stats.hi, stats.lo)
    return _wrap(flat.reshape(x.shape), src)


def apply_gaussian(patch, axis: str, mu: float, sigma: float, fraction: float = 1.0,
                   rng: Optional[np.random.Generator] = None):
    """Add ``N(mu, sigma)`` noise to chosen cells.

    ``spectral``: whole spectra of ``ceil(fraction * d1 * d2)`` pixels.
    ``spatial``: ``ceil(fraction * d1 * d2)`` positions within each of
    ``ceil(fraction * d3)`` bands.
    """
    if axis not in GAUSSIAN_AXES:
        raise ValueError(f"axis must be one of {GAUSSIAN_AXES}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x, src = _unwrap(patch)
    d1, d2, d3 = x.shape
    rng = rng if rng is not None else np.random.default_rng(0)
    npix = _count(fraction, d1 * d2)
    if axis == "spectral":
        pix = rng.choice(d1 * d2, size=npix, replace=False)
        rows, cols = np.unravel_index(pix, (d1, d2))
        x[rows, cols, :] += rng.normal(mu, sigma, size=(npix, d3))
    else:
        bands = rng.choice(d3, size=_count(fraction, d3), replace=False)
        for b in np.sort(bands):
            pix = rng.choice(d1 * d2, size=npix, replace=False)
            rows, cols = np.unravel_index(pix, (d1, d2))
            x[rows, cols, b] += rng.normal(mu, sigma, size=npix)
    return _wrap(x, src)


def _resample(x: np.ndarray, src_r: np.ndarray, src_c: np.ndarray, fill: float) -> np.ndarray:
    d1, d2 = x.shape[:2]
    r = np.rint(src_r).astype(np.int64)
    c = np.rint(src_c).astype(np.int64)
    inside = (r >= 0) & (r < d1) & (c >= 0) & (c < d2)
    out = np.full_like(x, fill)
    out[inside] = x[r[inside], c[inside]]
    return out


def _grid(shape):
    d1, d2 = shape[:2]
    cr, cc = (d1 - 1) / 2.0, (d2 - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(d1), np.arange(d2), indexing="ij")
    return ii - cr, jj - cc, cr, cc


def apply_rotation(patch, angle: float, *, stats: Optional[_Stats] = None):
    """Rotate every band by ``angle`` degrees (counter-clockwise) about the center.

    Nearest-neighbour resampling; cells whose source falls outside the patch
    take the patch mean.
    """
    x, src = _unwrap(patch)
    stats = stats or _Stats.of(x)
    dr, dc, cr, cc = _grid(x.shape)
    t = math.radians(angle)
    # Rounded so multiples of 90 degrees are exact permutations.
    cos, sin = round(math.cos(t), 12), round(math.sin(t), 12)
    src_r = cr + cos * dr + sin * dc
    src_c = cc - sin * dr + cos * dc
    return _wrap(_resample(x, src_r, src_c, stats.mean), src)


def apply_zoom(patch, factor: float, *, stats: Optional[_Stats] = None):
    """Zoom in (factor > 1) or out (factor < 1) about the center, keeping dims."""
    if factor <= 0:
        raise ValueError("zoom factor must be positive")
    x, src = _unwrap(patch)
    stats = stats or _Stats.of(x)
    dr, dc, cr, cc = _grid(x.shape)
    return _wrap(_resample(x, cr + dr / factor, cc + dc / factor, stats.mean), src)


# --- decoding ----------------------------------------------------------------

def family_rng(seed: int, family: str) -> np.random.Generator:
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, FAMILIES.index(family)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _apply_slot(x: np.ndarray, family: str, c: Dict[str, float], dims, stats: _Stats,
                seed: int) -> np.ndarray:
    d1, d2, d3 = dims
    if family in ("continuous_dropout", "discontinuous_dropout"):
        variant = DROPOUT_VARIANTS[_pick(c["variant"], 3)]
        row, col = _pick(c["row"], d1), _pick(c["col"], d2)
        index = row if variant == "line" else col
        rect = (row, col, c["height"], c["width"])
        fill = FILLS[_pick(c["fill"], 2)]
        if family == "continuous_dropout":
            return apply_continuous_dropout(x, variant, index, rect, fill, stats=stats)
        return apply_discontinuous_dropout(x, variant, index, rect, c["fraction"], fill,
                                           family_rng(seed, family), stats=stats)
    if family == "stripping":
        variant = STRIP_VARIANTS[_pick(c["variant"], 2)]
        index = _pick(c["row"], d1) if variant == "line" else _pick(c["col"], d2)
        return apply_stripping(x, variant, index, stats.mean + c["mean_shift"] * stats.std,
                               c["std_ratio"] * stats.std, stats=stats)
    if family == "band_loss":
        nb = len([k for k in c if k.startswith("band_")])
        count = min(max(c["count"], 1), nb)
        bands = [1 + _pick(c[f"band_{i}"] - 1, d3 - 2) for i in range(count)]
        return apply_band_loss(x, bands)
    if family == "salt_pepper":
        return apply_salt_pepper(x, c["density"], family_rng(seed, family), stats=stats)
    if family == "gaussian_noise":
        span = stats.hi - stats.lo
        axis = GAUSSIAN_AXES[_pick(c["axis"], 2)]
        return apply_gaussian(x, axis, c["mean"] * span, c["sigma"] * span, c["fraction"],
                              family_rng(seed, family))
    if family == "rotation":
        return apply_rotation(x, c["angle"], stats=stats)
    if family == "zoom":
        return apply_zoom(x, c["factor"], stats=stats)
    raise LayoutError(f"unknown family {family!r}")


def prepare_vector(vector, lay: Layout) -> np.ndarray:
    """Clamp, round to float32 (the stored precision) and clamp again.

    Clamping on both sides of the rounding makes ``v`` and ``clamp(v)``
    decode identically even when a bound is not a float32 value.
    """
    if isinstance(vector, TransformationVector):
        vector = vector.values
    v = np.asarray(vector)
    if v.shape != (lay.size,):
        raise LayoutError(f"vector length {v.size} does not match layout size {lay.size}")
    return lay.clamp(lay.clamp(v).astype(np.float32).astype(np.float64))


def decode(vector, original: Patch3D, rng_seed: int = 0,
           lay: Optional[Layout] = None) -> Patch3D:
    """Apply every active slot of ``vector`` to ``original``."""
    if lay is None:
        lay = vector.layout if isinstance(vector, TransformationVector) else Layout(original.dims)
    if tuple(lay.dims) != original.dims:
        raise LayoutError(f"layout built for {lay.dims}, patch has {original.dims}")
    v = prepare_vector(vector, lay)
    x = original.values.astype(np.float64)
    stats = _Stats.of(x)
    active = False
    for slot in lay.slots:
        off = lay.offsets[slot.family]
        c = {comp.name: (math.floor(min(val, comp.hi - 1e-9)) if comp.integer else float(val))
             for comp, val in zip(slot.components, v[off:off + len(slot)])}
        if c["switch"] < SWITCH_ON:
            continue
        active = True
        x = _apply_slot(x, slot.family, c, original.dims, stats, rng_seed)
    if not active:
        return original
    return original.with_values(x)


# --- range tuning ------------------------------------------------------------

@dataclass
class TuneStep:
    family: str
    step: int  # number of halvings applied before this sample
    median_psnr: float
    ranges: Dict[str, tuple]


@dataclass
class TuneResult:
    bounds: DistortionBounds
    audit: list  # of TuneStep
    flagged: list  # families that never reached the threshold


def _halve(rng_: tuple, identity: float) -> tuple:
    lo, hi = rng_
    return (identity + (lo - identity) / 2.0, identity + (hi - identity) / 2.0)


def _median_psnr(family, bounds, patchset, n, seed, dims):
    lay = Layout(dims, bounds, families=[family])
    rng = np.random.default_rng(seed)
    # Same draws at every halving so medians track the ranges, not the noise.
    unit = rng.random((n, lay.size))
    picks = rng.integers(0, len(patchset), size=n)
    seeds = rng.integers(0, 2**63, size=n)
    vecs = lay.lo + unit * (lay.hi - lay.lo)
    vecs[:, lay.index(family, "switch")] = 1.0
    values = [psnr(patchset[i], decode(v, patchset[i], int(s), lay))
              for v, i, s in zip(vecs, picks, seeds)]
    return float(np.median(values))


def tune_bounds(families: Optional[Iterable[str]], patchset: PatchSet,
                psnr_threshold: float = DEFAULT_PSNR_THRESHOLD, sample_budget: int = 100,
                rng: Optional[np.random.Generator] = None,
                initial: Optional[DistortionBounds] = None) -> TuneResult:
    """Halve parameter ranges toward their identity until single-distortion
    samples reach a median PSNR of ``psnr_threshold`` (at most 10 halvings)."""
    if len(patchset) == 0:
        raise ValueError("patch set is empty")
    if sample_budget < 100:
        raise ValueError("sample budget must be at least 100 per family")
    rng = rng if rng is not None else np.random.default_rng(0)
    dims = patchset.dims
    families = list(FAMILIES if families is None else families)
    bounds = DistortionBounds({f: dict(p) for f, p in (initial or DistortionBounds()).ranges.items()})
    audit, flagged = [], []
    for family in families:
        lay = Layout(dims, bounds, families=[family])
        params = {c.name: c for c in lay.slot(family).components
                  if c.kind == PARAMETER and c.identity is not None}
        ranges = {n: (c.lo, c.hi) for n, c in params.items()}
        seed = int(rng.integers(0, 2**63))
        for step in range(MAX_HALVINGS + 1):
            trial = DistortionBounds({**bounds.ranges, family: dict(ranges)})
            med = _median_psnr(family, trial, patchset, sample_budget, seed, dims)
            audit.append(TuneStep(family, step, med, dict(ranges)))
            if med >= psnr_threshold:
                break
            if step == MAX_HALVINGS:
                log.warning("%s: median PSNR %.2f dB still below %.1f dB after %d halvings",
                            family, med, psnr_threshold, MAX_HALVINGS)
                flagged.append(family)
                break
            ranges = {n: _halve(r, params[n].identity) for n, r in ranges.items()}
        bounds.ranges[family] = dict(ranges)
    return TuneResult(bounds, audit, flagged)


def audit_rows(result: TuneResult) -> list[dict]:
    rows = []
    for s in result.audit:
        row = {"family": s.family, "step": s.step, "median_psnr": s.median_psnr}
        row["ranges"] = ";".join(f"{n}=[{lo:.6g},{hi:.6g}]" for n, (lo, hi) in sorted(s.ranges.items()))
        rows.append(row)
    return rows
