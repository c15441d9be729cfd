"""A small inference engine for feed-forward and convolutional classifiers.

Arrays flow channels-last: a patch enters as ``(rows, cols, bands)``.
``conv2d`` treats the last axis as channels, ``conv3d`` treats a 3D input as
a single-channel volume and produces ``(rows, cols, depth, filters)``.
Dense layers need a 1D input, so a ``flatten`` must precede the first one.
The last layer is always a ``head`` whose outputs are the logits.

All arithmetic runs in float64; weights are stored as float32 so that a
model file round-trips exactly.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hsidiff.patches import Patch3D, PatchSet, ShapeError

MODEL_FORMAT = "hsidiff-model"
MODEL_VERSION = 1
DEFAULT_SECTIONS = 10

ActivationHook = Callable[[str, np.ndarray], np.ndarray]


def _f32(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float32, copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError("weights must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Layer:
    name: str

    kind = "layer"

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def tensors(self) -> Dict[str, np.ndarray]:
        return {}


@dataclass(frozen=True, eq=False)
class Dense(Layer):
    weights: np.ndarray = None  # (out, in)
    bias: np.ndarray = None  # (out,)

    kind = "dense"

    def __post_init__(self):
        w = _f32(self.weights)
        b = _f32(self.bias) if self.bias is not None else _f32(np.zeros(w.shape[0]))
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"layer {self.name!r}: weights {w.shape} and bias {b.shape} disagree")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weights.shape[1]:
            raise ShapeError(
                f"layer {self.name!r} expects input ({self.weights.shape[1]},), got {shape}")
        return (self.weights.shape[0],)

    def __call__(self, x):
        return self.weights.astype(np.float64) @ x + self.bias

    def tensors(self):
        return {"weights": self.weights, "bias": self.bias}


@dataclass(frozen=True, eq=False)
class Head(Dense):
    """Final dense layer producing logits."""

    kind = "head"


@dataclass(frozen=True, eq=False)
class Conv2D(Layer):
    kernel: np.ndarray = None  # (kh, kw, channels, filters)
    bias: np.ndarray = None  # (filters,)
    stride: int = 1

    kind = "conv2d"

    def __post_init__(self):
        k = _f32(self.kernel)
        b = _f32(self.bias) if self.bias is not None else _f32(np.zeros(k.shape[-1]))
        if k.ndim != 4 or b.shape != (k.shape[-1],) or self.stride < 1:
            raise ShapeError(f"layer {self.name!r}: bad conv2d kernel {k.shape} / bias {b.shape}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    def output_shape(self, shape):
        kh, kw, c, f = self.kernel.shape
        if len(shape) != 3 or shape[2] != c or shape[0] < kh or shape[1] < kw:
            raise ShapeError(f"layer {self.name!r} cannot convolve input {shape} with kernel {self.kernel.shape}")
        s = self.stride
        return ((shape[0] - kh) // s + 1, (shape[1] - kw) // s + 1, f)

    def __call__(self, x):
        kh, kw, _, _ = self.kernel.shape
        win = sliding_window_view(x, (kh, kw), axis=(0, 1))[:: self.stride, :: self.stride]
        # win: (ho, wo, c, kh, kw)
        return np.einsum("hwcij,ijcf->hwf", win, self.kernel.astype(np.float64)) + self.bias

    def tensors(self):
        return {"kernel": self.kernel, "bias": self.bias}


@dataclass(frozen=True, eq=False)
class Conv3D(Layer):
    kernel: np.ndarray = None  # (kh, kw, kd, channels, filters)
    bias: np.ndarray = None
    stride: int = 1

    kind = "conv3d"

    def __post_init__(self):
        k = _f32(self.kernel)
        b = _f32(self.bias) if self.bias is not None else _f32(np.zeros(k.shape[-1]))
        if k.ndim != 5 or b.shape != (k.shape[-1],) or self.stride < 1:
            raise ShapeError(f"layer {self.name!r}: bad conv3d kernel {k.shape} / bias {b.shape}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    def output_shape(self, shape):
        kh, kw, kd, c, f = self.kernel.shape
        if len(shape) == 3:
            shape = shape + (1,)
        if (len(shape) != 4 or shape[3] != c or shape[0] < kh or shape[1] < kw
                or shape[2] < kd):
            raise ShapeError(f"layer {self.name!r} cannot convolve input {shape} with kernel {self.kernel.shape}")
        s = self.stride
        return ((shape[0] - kh) // s + 1, (shape[1] - kw) // s + 1, (shape[2] - kd) // s + 1, f)

    def __call__(self, x):
        if x.ndim == 3:
            x = x[..., None]
        kh, kw, kd, _, _ = self.kernel.shape
        s = self.stride
        win = sliding_window_view(x, (kh, kw, kd), axis=(0, 1, 2))[::s, ::s, ::s]
        # win: (ho, wo, do, c, kh, kw, kd)
        return np.einsum("hwdcijk,ijkcf->hwdf", win, self.kernel.astype(np.float64)) + self.bias

    def tensors(self):
        return {"kernel": self.kernel, "bias": self.bias}


@dataclass(frozen=True, eq=False)
class ReLU(Layer):
    kind = "relu"

    def __call__(self, x):
        return np.maximum(x, 0.0)


@dataclass(frozen=True, eq=False)
class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def __call__(self, x):
        return x.reshape(-1)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Head, Conv2D, Conv3D, ReLU, Flatten)}


@dataclass(frozen=True, eq=False)
class ModelSpec:
    layers: tuple
    input_dims: tuple
    class_count: int

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if not layers or not isinstance(layers[-1], Head):
            raise ShapeError("the last layer must be a head")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        shape = self.input_dims
        self_shapes = []
        for layer in layers:
            shape = layer.output_shape(shape)
            self_shapes.append(shape)
        if shape != (self.class_count,):
            raise ShapeError(f"head outputs {shape}, expected ({self.class_count},)")
        object.__setattr__(self, "_shapes", tuple(self_shapes))

    def layer_shapes(self) -> tuple:
        return self._shapes

    def hidden_layers(self) -> list[str]:
        """Names of the layers whose outputs enter the activation trace.

        Every relu is traced. A linear dense/conv output is traced only when
        no relu follows it directly, so each hidden neuron appears once,
        post-activation.
        """
        names = []
        layers = self.layers
        for i, layer in enumerate(layers[:-1]):
            if isinstance(layer, ReLU):
                names.append(layer.name)
            elif isinstance(layer, (Dense, Conv2D, Conv3D)):
                if not isinstance(layers[i + 1], ReLU):
                    names.append(layer.name)
        return names

    def neuron_count(self) -> int:
        hidden = set(self.hidden_layers())
        return sum(int(np.prod(s)) for l, s in zip(self.layers, self._shapes) if l.name in hidden)

    def digest(self) -> str:
        return hashlib.sha256(dumps_model(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class NeuronIntervals:
    """Per-neuron ``[low, high]`` observed over a profiling set."""

    layers: tuple  # (name, size) in trace order
    low: np.ndarray
    high: np.ndarray
    k: int = DEFAULT_SECTIONS

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        if low.shape != high.shape or low.ndim != 1:
            raise ShapeError("low/high must be 1D arrays of equal length")
        if np.any(low > high):
            raise ValueError("interval low exceeds high")
        if self.k < 2:
            raise ValueError("section count k must be >= 2")
        if sum(n for _, n in self.layers) != low.size:
            raise ShapeError("layer sizes do not add up to the neuron count")
        object.__setattr__(self, "layers", tuple((str(n), int(s)) for n, s in self.layers))
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def size(self) -> int:
        return self.low.size

    @property
    def degenerate(self) -> np.ndarray:
        return self.low == self.high


def run_layers(layers: Sequence[Layer], x: np.ndarray, hidden: Sequence[str],
               hook: Optional[ActivationHook] = None):
    trace = {}
    hidden = set(hidden)
    for layer in layers:
        x = layer(x)
        if hook is not None and not isinstance(layer, (Head, Flatten)):
            x = hook(layer.name, x)
        if layer.name in hidden:
            trace[layer.name] = x.reshape(-1).copy()
    return x, trace


def _input_array(model: ModelSpec, patch) -> np.ndarray:
    x = patch.values if isinstance(patch, Patch3D) else np.asarray(patch)
    if tuple(x.shape) != model.input_dims:
        raise ShapeError(f"input dims {tuple(x.shape)} do not match model input {model.input_dims}")
    return x.astype(np.float64)


def forward(model: ModelSpec, patch) -> tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Logits and activation trace for one input."""
    return run_layers(model.layers, _input_array(model, patch), model.hidden_layers())


def predict_label(logits) -> int:
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ValueError("cannot take argmax of an empty vector")
    # np.argmax returns the first maximum, i.e. the lowest index on ties.
    return int(np.argmax(logits))


def flatten_trace(trace: Dict[str, np.ndarray], layers: Sequence) -> np.ndarray:
    return np.concatenate([trace[name] for name, _ in layers]) if layers else np.zeros(0)


def profile_intervals(model: ModelSpec, profiling_set: PatchSet,
                      k: int = DEFAULT_SECTIONS) -> NeuronIntervals:
    if len(profiling_set) == 0:
        raise ValueError("profiling set is empty")
    if k < 2:
        raise ValueError("section count k must be >= 2")
    names = model.hidden_layers()
    low = high = None
    layers = None
    for patch in profiling_set:
        _, trace = forward(model, patch)
        if layers is None:
            layers = tuple((n, trace[n].size) for n in names)
        v = flatten_trace(trace, layers)
        low = v.copy() if low is None else np.minimum(low, v)
        high = v.copy() if high is None else np.maximum(high, v)
    return NeuronIntervals(layers, low, high, k)


# --- persistence -----------------------------------------------------------

def encode_array(a: np.ndarray, dtype: str = "<f4") -> dict:
    a = np.ascontiguousarray(a, dtype=dtype)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict, dtype: str = "<f4") -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    shape = tuple(obj["shape"])
    arr = np.frombuffer(raw, dtype=dtype)
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"payload holds {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
    return arr.reshape(shape)


def layer_to_dict(layer: Layer) -> dict:
    d = {"name": layer.name, "kind": layer.kind}
    if isinstance(layer, (Conv2D, Conv3D)):
        d["stride"] = layer.stride
    for key, arr in layer.tensors().items():
        d[key] = encode_array(arr)
    return d


def layer_from_dict(d: dict) -> Layer:
    kind = d["kind"]
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    cls = LAYER_KINDS[kind]
    kwargs = {"name": d["name"]}
    if cls in (Conv2D, Conv3D):
        kwargs["stride"] = int(d.get("stride", 1))
        kwargs["kernel"] = decode_array(d["kernel"])
        kwargs["bias"] = decode_array(d["bias"])
    elif cls in (Dense, Head):
        kwargs["weights"] = decode_array(d["weights"])
        kwargs["bias"] = decode_array(d["bias"])
    return cls(**kwargs)


def model_to_dict(model: ModelSpec) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "input_dims": list(model.input_dims),
        "class_count": model.class_count,
        "layers": [layer_to_dict(l) for l in model.layers],
    }


def model_from_dict(d: dict) -> ModelSpec:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model document (format={d.get('format')!r})")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')!r}")
    return ModelSpec(tuple(layer_from_dict(l) for l in d["layers"]),
                     tuple(d["input_dims"]), int(d["class_count"]))


def dumps_model(model: ModelSpec) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def save_model(model: ModelSpec, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path) -> ModelSpec:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def intervals_to_dict(iv: NeuronIntervals) -> dict:
    return {
        "format": "hsidiff-intervals",
        "version": 1,
        "k": iv.k,
        "layers": [[n, s] for n, s in iv.layers],
        "low": encode_array(iv.low, "<f8"),
        "high": encode_array(iv.high, "<f8"),
    }


def intervals_from_dict(d: dict) -> NeuronIntervals:
    if d.get("format") != "hsidiff-intervals":
        raise ValueError("not an intervals document")
    return NeuronIntervals(tuple((n, s) for n, s in d["layers"]),
                           decode_array(d["low"], "<f8"), decode_array(d["high"], "<f8"),
                           int(d["k"]))


def save_intervals(iv: NeuronIntervals, path) -> None:
    Path(path).write_text(json.dumps(intervals_to_dict(iv), indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_intervals(path) -> NeuronIntervals:
    return intervals_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
