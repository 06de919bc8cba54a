"""Small bias-free feedforward networks with multi-head classifiers.

Weights are stored as ``(out, in)`` matrices. For a convolution the ``in``
side is the flattened ``(in_channels, kh, kw)`` patch, so every layer's
gradient is projected from the right by a basis of its input space.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, FormatError, SGPError

CHECKPOINT_VERSION = 1


class MissingHeadError(SGPError, KeyError):
    pass


class InvalidLabelError(SGPError, ValueError):
    pass


class EmptyRepresentationError(SGPError, ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    activation: str = "relu"

    kind = "dense"

    def __post_init__(self):
        if self.in_features <= 0 or self.out_features <= 0:
            raise ValueError("dense dimensions must be positive")
        _check_activation(self.activation)

    @property
    def fan_in(self) -> int:
        return self.in_features

    @property
    def fan_out(self) -> int:
        return self.out_features

    @property
    def output_size(self) -> int:
        return self.out_features


@dataclass(frozen=True)
class Conv2d:
    """Valid (unpadded) 2-D convolution on ``(C, H, W)`` inputs."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    input_hw: tuple[int, int]
    stride: int = 1
    activation: str = "relu"

    kind = "conv2d"

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "input_hw", tuple(int(k) for k in self.input_hw))
        values = (self.in_channels, self.out_channels, self.stride, *self.kernel, *self.input_hw)
        if min(values) <= 0:
            raise ValueError("conv dimensions must be positive")
        if self.kernel[0] > self.input_hw[0] or self.kernel[1] > self.input_hw[1]:
            raise ValueError("kernel larger than input")
        _check_activation(self.activation)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel[0] * self.kernel[1]

    @property
    def fan_out(self) -> int:
        return self.out_channels * self.kernel[0] * self.kernel[1]

    @property
    def output_hw(self) -> tuple[int, int]:
        (h, w), (kh, kw), s = self.input_hw, self.kernel, self.stride
        return (h - kh) // s + 1, (w - kw) // s + 1

    @property
    def output_size(self) -> int:
        oh, ow = self.output_hw
        return self.out_channels * oh * ow


LayerSpec = Dense | Conv2d


def _check_activation(name):
    if name not in ("relu", "none"):
        raise ValueError(f"unknown activation {name!r}")


def _input_size(spec: LayerSpec) -> int:
    if isinstance(spec, Dense):
        return spec.in_features
    return spec.in_channels * spec.input_hw[0] * spec.input_hw[1]


def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int) -> np.ndarray:
    """Unfold ``(N, C, H, W)`` into patches of shape ``(N, P, C*kh*kw)``.

    Patch positions run row-major over the output grid; within a patch the
    order is channel, kernel row, kernel column.
    """
    kh, kw = kernel
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, shape, kernel, stride) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to an image."""
    n, c, h, w = shape
    kh, kw = kernel
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    patches = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


class Gradients(NamedTuple):
    loss: float
    layers: list[np.ndarray]
    head: np.ndarray
    task_id: int


class Network:
    """Backbone of dense/conv layers followed by one linear head per task.

    Heads are keyed by task id (1-based). ``forward(..., capture=True)``
    returns the input each backbone layer received: ``(N, in)`` for dense
    layers and ``(N, P, C*kh*kw)`` patches for convolutions.
    """

    def __init__(self, layers, weights=None, heads=None, rng=None):
        self.layers: list[LayerSpec] = list(layers)
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.output_size != _input_size(nxt):
                raise DimensionError(f"layer output {prev.output_size} does not feed {nxt}")
        if weights is None:
            rng = np.random.default_rng(rng)
            weights = [glorot(rng, s.fan_in, s.fan_out, self.weight_shape(s)) for s in self.layers]
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        for spec, w in zip(self.layers, self.weights):
            if w.shape != self.weight_shape(spec):
                raise DimensionError(f"weight shape {w.shape} does not match {spec}")
        self.heads: dict[int, np.ndarray] = {
            int(k): np.array(v, dtype=np.float64) for k, v in (heads or {}).items()
        }

    @staticmethod
    def weight_shape(spec: LayerSpec) -> tuple[int, int]:
        if isinstance(spec, Dense):
            return (spec.out_features, spec.in_features)
        return (spec.out_channels, spec.fan_in)

    @property
    def input_size(self) -> int:
        return _input_size(self.layers[0])

    @property
    def feature_size(self) -> int:
        return self.layers[-1].output_size

    def add_head(self, task_id: int, n_classes: int, rng=None) -> None:
        if task_id in self.heads:
            raise ValueError(f"task {task_id} already has a head")
        rng = np.random.default_rng(rng)
        d = self.feature_size
        self.heads[task_id] = glorot(rng, d, n_classes, (n_classes, d))

    def copy(self) -> "Network":
        return Network(self.layers, [w.copy() for w in self.weights],
                       {k: v.copy() for k, v in self.heads.items()})

    def features(self, x, capture: bool = False):
        """Backbone output (pre-head) and optionally the captured layer inputs."""
        h = np.asarray(x, dtype=np.float64)
        n = h.shape[0]
        if h.reshape(n, -1).shape[1] != self.input_size:
            raise DimensionError(f"input of size {h.reshape(n, -1).shape[1]} does not match {self.input_size}")
        acts = []
        for spec, w in zip(self.layers, self.weights):
            if isinstance(spec, Dense):
                h = h.reshape(n, -1)
                if capture:
                    acts.append(h)
                h = h @ w.T
            else:
                h = h.reshape(n, spec.in_channels, *spec.input_hw)
                cols = im2col(h, spec.kernel, spec.stride)
                if capture:
                    acts.append(cols)
                oh, ow = spec.output_hw
                h = (cols @ w.T).transpose(0, 2, 1).reshape(n, spec.out_channels, oh, ow)
            if spec.activation == "relu":
                h = np.maximum(h, 0.0)
        return h.reshape(n, -1), (acts if capture else None)

    def forward(self, x, task_id: int, capture: bool = False):
        head = self._head(task_id)
        feats, acts = self.features(x, capture)
        return feats @ head.T, acts

    def _head(self, task_id):
        try:
            return self.heads[task_id]
        except KeyError:
            raise MissingHeadError(f"no classifier head for task {task_id}") from None

    def backward(self, x, labels, task_id: int) -> Gradients:
        """Mean softmax cross-entropy and its gradient for every weight."""
        head = self._head(task_id)
        labels = np.asarray(labels)
        n_classes = head.shape[0]
        if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= n_classes):
            raise InvalidLabelError(f"labels must lie in [0, {n_classes})")
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        if labels.shape[0] != n:
            raise DimensionError("label count does not match batch size")

        # forward, keeping what backprop needs
        inputs, pre = [], []
        h = x
        for spec, w in zip(self.layers, self.weights):
            if isinstance(spec, Dense):
                a = h.reshape(n, -1)
                z = a @ w.T
            else:
                img = h.reshape(n, spec.in_channels, *spec.input_hw)
                a = im2col(img, spec.kernel, spec.stride)
                z = a @ w.T  # (N, P, out)
            inputs.append(a)
            pre.append(z)
            h = np.maximum(z, 0.0) if spec.activation == "relu" else z
            if isinstance(spec, Conv2d):
                h = h.transpose(0, 2, 1)
        feats = h.reshape(n, -1)
        logits = feats @ head.T
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(n), labels].mean())

        dlogits = np.exp(logp)
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        head_grad = dlogits.T @ feats
        dh = dlogits @ head

        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            spec, w, a, z = self.layers[i], self.weights[i], inputs[i], pre[i]
            if isinstance(spec, Dense):
                dz = dh.reshape(z.shape)
                if spec.activation == "relu":
                    dz = dz * (z > 0)
                grads[i] = dz.T @ a
                da = dz @ w
                if i:
                    dh = da
            else:
                oh, ow = spec.output_hw
                dz = dh.reshape(n, spec.out_channels, oh * ow).transpose(0, 2, 1)
                if spec.activation == "relu":
                    dz = dz * (z > 0)
                grads[i] = np.einsum("npo,npf->of", dz, a)
                if i:
                    dh = col2im(dz @ w, (n, spec.in_channels, *spec.input_hw), spec.kernel, spec.stride)
        return Gradients(loss, grads, head_grad, task_id)

    def save(self, path) -> None:
        save_network(self, path)


def glorot(rng, fan_in, fan_out, shape):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def build_representation_matrix(acts, layer: int, max_cols: int | None = None) -> np.ndarray:
    """Stack captured inputs of ``layer`` as columns (``in_dim x n``).

    Convolution patches are ordered sample-major, then by output position.
    If there are more than ``max_cols`` columns an evenly strided subset is
    kept.
    """
    if not acts or layer >= len(acts) or acts[layer] is None or acts[layer].shape[0] == 0:
        raise EmptyRepresentationError(f"no captured activations for layer {layer}")
    a = acts[layer]
    cols = a.reshape(-1, a.shape[-1])
    total = cols.shape[0]
    if max_cols is not None:
        if max_cols < 1:
            raise ValueError("max_cols must be positive")
        if total > max_cols:
            cols = cols[(np.arange(max_cols) * total) // max_cols]
    return np.ascontiguousarray(cols.T)


# --- checkpoint -----------------------------------------------------------
#
# ``.npz`` archive with keys:
#   format_version   int, currently 1
#   layer_specs      JSON list of layer dicts
#   weight_<i>       float64 (out, in)
#   head_<task_id>   float64 (classes, features)


def _spec_to_dict(spec):
    if isinstance(spec, Dense):
        return {"kind": "dense", "in_features": spec.in_features,
                "out_features": spec.out_features, "activation": spec.activation}
    return {"kind": "conv2d", "in_channels": spec.in_channels, "out_channels": spec.out_channels,
            "kernel": list(spec.kernel), "input_hw": list(spec.input_hw),
            "stride": spec.stride, "activation": spec.activation}


def spec_from_dict(d) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "dense":
        return Dense(**d)
    if kind == "conv2d":
        return Conv2d(**d)
    raise ValueError(f"unknown layer kind {kind!r}")


def save_network(net: Network, path) -> None:
    import json

    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "layer_specs": np.array(json.dumps([_spec_to_dict(s) for s in net.layers])),
    }
    for i, w in enumerate(net.weights):
        arrays[f"weight_{i}"] = w
    for t, h in net.heads.items():
        arrays[f"head_{t}"] = h
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_network(path) -> Network:
    import json

    with np.load(Path(path), allow_pickle=False) as z:
        version = int(z["format_version"]) if "format_version" in z else None
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported network checkpoint version {version}")
        specs = [spec_from_dict(d) for d in json.loads(str(z["layer_specs"]))]
        weights = [z[f"weight_{i}"] for i in range(len(specs))]
        heads = {int(k[5:]): z[k] for k in z.files if k.startswith("head_")}
    return Network(specs, weights, heads)
