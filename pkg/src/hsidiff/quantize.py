"""Post-training int8 quantization and fake-quant inference.

Weights use per-tensor symmetric quantization (zero point 0, scale
``max|w| / 127``). Activations use per-tensor asymmetric quantization
calibrated from min/max over a calibration set. Inference dequantizes the
weights and, in ``full`` mode, snaps every layer output onto its int8 grid
before passing it on. Rounding is half-to-even throughout (``np.rint``).
Biases stay in float32, mirroring the wide-integer biases of real int8
runtimes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from hsidiff.nn import (
    Conv2D, Conv3D, Dense, Head, Layer, ModelSpec, _input_array,
    decode_array, encode_array, layer_from_dict, run_layers,
)
from hsidiff.patches import PatchSet

QMIN, QMAX = -128, 127
WEIGHTS_ONLY = "weights-only"
FULL = "full"
MODES = (WEIGHTS_ONLY, FULL)
INPUT = "input"


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero point {self.zero_point} outside int8 range")

    def quantize(self, x) -> np.ndarray:
        q = np.rint(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int8)

    def dequantize(self, q) -> np.ndarray:
        return (np.asarray(q, dtype=np.float64) - self.zero_point) * self.scale

    def fake_quant(self, x) -> np.ndarray:
        return self.dequantize(self.quantize(x))


def activation_params(lo: float, hi: float) -> QuantParams:
    """Asymmetric int8 params covering ``[lo, hi]`` (widened to include 0)."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / 255.0
    if scale == 0.0:  # constant range, or one too narrow to represent
        return QuantParams(1.0, 0)
    zp = int(QMIN - np.rint(lo / scale))
    return QuantParams(scale, int(np.clip(zp, QMIN, QMAX)))


def weight_params(w) -> QuantParams:
    scale = float(np.max(np.abs(w))) / 127.0 if np.size(w) else 0.0
    return QuantParams(scale if scale > 0 else 1.0, 0)


def quantize_tensor(w, scale: float) -> np.ndarray:
    """Symmetric int8 codes ``round_half_even(w / scale)`` clipped to [-127, 127]."""
    q = np.rint(np.asarray(w, dtype=np.float64) / scale)
    return np.clip(q, -127, 127).astype(np.int8)


def calibrate(model: ModelSpec, calibration_set: PatchSet) -> Dict[str, QuantParams]:
    """Activation params for the model input and every non-head layer output."""
    if len(calibration_set) == 0:
        raise ValueError("calibration set is empty")
    lo: Dict[str, float] = {}
    hi: Dict[str, float] = {}

    def observe(name, x):
        lo[name] = min(lo.get(name, np.inf), float(np.min(x)))
        hi[name] = max(hi.get(name, -np.inf), float(np.max(x)))
        return x

    for patch in calibration_set:
        x = _input_array(model, patch)
        observe(INPUT, x)
        run_layers(model.layers, x, (), hook=observe)
    return {name: activation_params(lo[name], hi[name]) for name in lo}


@dataclass(frozen=True, eq=False)
class QuantTensor:
    codes: np.ndarray  # int8
    params: QuantParams

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.int8, copy=True)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    def dequantize(self) -> np.ndarray:
        return self.params.dequantize(self.codes)


@dataclass(frozen=True, eq=False)
class QuantLayer:
    name: str
    kind: str
    weights: Optional[QuantTensor] = None  # dense/head weights or conv kernel
    bias: Optional[np.ndarray] = None
    stride: int = 1

    def dequantized(self) -> Layer:
        d = {"name": self.name, "kind": self.kind}
        if self.weights is None:
            return layer_from_dict(d)
        key = "kernel" if self.kind in ("conv2d", "conv3d") else "weights"
        cls = {"dense": Dense, "head": Head, "conv2d": Conv2D, "conv3d": Conv3D}[self.kind]
        kwargs = {"name": self.name, key: self.weights.dequantize().astype(np.float32),
                  "bias": self.bias}
        if self.kind in ("conv2d", "conv3d"):
            kwargs["stride"] = self.stride
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    layers: tuple
    input_dims: tuple
    class_count: int
    mode: str
    activations: Optional[Dict[str, QuantParams]]
    source_model_hash: str
    hidden: tuple

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if (self.mode == FULL) != (self.activations is not None):
            raise ValueError("activation params are required in full mode and only there")
        # Dequantized float layers, built once; the model stays immutable.
        object.__setattr__(self, "_float_layers", tuple(l.dequantized() for l in self.layers))

    @property
    def float_layers(self) -> tuple:
        return self._float_layers

    def hidden_layers(self) -> list[str]:
        return list(self.hidden)


def quantize_weights(model: ModelSpec, mode: str = WEIGHTS_ONLY,
                     calibration_set: Optional[PatchSet] = None) -> QuantizedModel:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == FULL and calibration_set is None:
        raise ValueError("full quantization needs a calibration set")
    layers = []
    for layer in model.layers:
        tensors = layer.tensors()
        if not tensors:
            layers.append(QuantLayer(layer.name, layer.kind))
            continue
        w = tensors.get("weights", tensors.get("kernel"))
        params = weight_params(w)
        layers.append(QuantLayer(layer.name, layer.kind,
                                 QuantTensor(quantize_tensor(w, params.scale), params),
                                 tensors["bias"], getattr(layer, "stride", 1)))
    acts = calibrate(model, calibration_set) if mode == FULL else None
    return QuantizedModel(tuple(layers), model.input_dims, model.class_count, mode, acts,
                          model.digest(), tuple(model.hidden_layers()))


def quantized_forward(qmodel: QuantizedModel, patch):
    x = _input_array(qmodel, patch)
    hook = None
    if qmodel.mode == FULL:
        acts = qmodel.activations
        x = acts[INPUT].fake_quant(x)

        def hook(name, y):
            return acts[name].fake_quant(y)

    return run_layers(qmodel.float_layers, x, qmodel.hidden, hook=hook)


# --- persistence -----------------------------------------------------------

def qmodel_to_dict(q: QuantizedModel) -> dict:
    layers = []
    for l in q.layers:
        d = {"name": l.name, "kind": l.kind}
        if l.kind in ("conv2d", "conv3d"):
            d["stride"] = l.stride
        if l.weights is not None:
            key = "kernel" if l.kind in ("conv2d", "conv3d") else "weights"
            d[key] = dict(encode_array(l.weights.codes, "i1"), dtype="int8",
                          scale=l.weights.params.scale, zero_point=l.weights.params.zero_point)
            d["bias"] = encode_array(l.bias)
        layers.append(d)
    return {
        "format": "hsidiff-qmodel",
        "version": 1,
        "mode": q.mode,
        "input_dims": list(q.input_dims),
        "class_count": q.class_count,
        "source_model_hash": q.source_model_hash,
        "hidden": list(q.hidden),
        "activations": None if q.activations is None else {
            k: {"scale": v.scale, "zero_point": v.zero_point} for k, v in q.activations.items()},
        "layers": layers,
    }


def qmodel_from_dict(d: dict) -> QuantizedModel:
    if d.get("format") != "hsidiff-qmodel":
        raise ValueError("not a quantized model document")
    layers = []
    for l in d["layers"]:
        key = "kernel" if l["kind"] in ("conv2d", "conv3d") else "weights"
        if key in l:
            t = l[key]
            qt = QuantTensor(decode_array(t, "i1"), QuantParams(float(t["scale"]), int(t["zero_point"])))
            layers.append(QuantLayer(l["name"], l["kind"], qt, decode_array(l["bias"]),
                                     int(l.get("stride", 1))))
        else:
            layers.append(QuantLayer(l["name"], l["kind"]))
    acts = d.get("activations")
    if acts is not None:
        acts = {k: QuantParams(float(v["scale"]), int(v["zero_point"])) for k, v in acts.items()}
    return QuantizedModel(tuple(layers), tuple(d["input_dims"]), int(d["class_count"]),
                          d["mode"], acts, d["source_model_hash"], tuple(d["hidden"]))


def dumps_qmodel(q: QuantizedModel) -> str:
    return json.dumps(qmodel_to_dict(q), indent=1, sort_keys=True) + "\n"


def save_qmodel(q: QuantizedModel, path) -> None:
    Path(path).write_text(dumps_qmodel(q), encoding="utf-8")


def load_qmodel(path) -> QuantizedModel:
    return qmodel_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
