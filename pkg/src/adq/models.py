"""Desk-scale architectures: a 3-block CNN and a small MLP.

Layers carry names so per-layer quantizer state (codebook, scale, activation
thresholds) can be keyed to them. forward() accepts per-layer weight
overrides so the training loop can swap in quantized reconstructions without
touching the stored parameters.
"""
import math

import numpy as np

from .tensor import (DimensionError, NumericsError, Tensor, conv2d, relu)
from .actquant import act_forward


class Conv2d:
    """3x3 convolution, padding 1, He-initialized."""

    def __init__(self, name, c_in, c_out, stride, rng):
        k = 3
        std = math.sqrt(2.0 / (c_in * k * k))
        self.name = name
        self.weight = Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)).astype(np.float32),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.channel_axis = 0  # weight is [C_out, C_in, k, k]

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, weight=None):
        w = self.weight if weight is None else weight
        y = conv2d(x, w, stride=self.stride, pad=1)
        return y + self.bias.reshape(1, -1, 1, 1)


class Linear:
    """Dense layer; weight is [n_in, n_out] so forward is x @ W + b."""

    def __init__(self, name, n_in, n_out, rng):
        std = math.sqrt(2.0 / n_in)
        self.name = name
        self.weight = Tensor(rng.normal(0.0, std, (n_in, n_out)).astype(np.float32),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True)
        self.channel_axis = 1  # output channels sit on the second axis

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, weight=None):
        w = self.weight if weight is None else weight
        return x @ w + self.bias


class ModelSpec:
    """Architecture id, input shape, class count, and which layers quantize."""

    def __init__(self, arch, input_shape, n_classes, quantized):
        self.arch = arch
        self.input_shape = tuple(int(d) for d in input_shape)
        self.n_classes = int(n_classes)
        self.quantized = tuple(quantized)

    def to_dict(self):
        return {"arch": self.arch, "input_shape": list(self.input_shape),
                "n_classes": self.n_classes, "quantized": list(self.quantized)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["arch"], d["input_shape"], d["n_classes"], d["quantized"])


class Model:
    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers
        by_name = [l.name for l in layers]
        if len(set(by_name)) != len(by_name):
            raise ValueError("duplicate layer names")

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self):
        out = []
        for layer in self.layers:
            out.append((layer.name + ".weight", layer.weight))
            out.append((layer.name + ".bias", layer.bias))
        return out

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(f"no layer named {name!r}")

    def quantized_layers(self):
        return [self.layer(n) for n in self.spec.quantized]

    def forward(self, x, weight_map=None, act_map=None, capture=None):
        """Run the network, returning logits.

        weight_map: {layer name: Tensor} replacement weights (quantized
            reconstructions). act_map: {layer name: ActQuantizer} applied to
            that layer's input. capture: dict collecting each quantized
            layer's input array (for threshold calibration).
        """
        last = self.layers[-1]
        for layer in self.layers:
            if isinstance(layer, Linear) and len(x.shape) > 2:
                x = x.reshape(x.shape[0], -1)
            if capture is not None and layer.name in self.spec.quantized:
                capture.setdefault(layer.name, []).append(x.data.copy())
            if act_map is not None and layer.name in act_map:
                x = act_forward(x, act_map[layer.name])
            try:
                x = layer.forward(x, weight=None if weight_map is None
                                  else weight_map.get(layer.name))
                if layer is not last:
                    x = relu(x)
            except NumericsError as e:
                raise NumericsError(f"layer {layer.name}: {e}") from None
        return x


def _conv_chain(h, strides):
    """Spatial sizes through the 3x3/pad-1 stack; None if an extent breaks."""
    sizes = []
    for s in strides:
        if (h + 2 - 3) % s != 0:
            return None
        h = (h + 2 - 3) // s + 1
        sizes.append(h)
    return sizes


CNN_STRIDES = (2, 1, 2, 1, 2, 1)
CNN_CHANNELS = (16, 16, 32, 32, 64, 64)


def build_model(arch, input_shape, n_classes, seed=0):
    rng = np.random.default_rng(seed)
    if arch == "cnn-small":
        if len(input_shape) != 3:
            raise DimensionError(f"cnn-small wants (C,H,W) input, got {input_shape}")
        c, h, w = input_shape
        if h != w:
            raise DimensionError(f"cnn-small wants square inputs, got {h}x{w}")
        sizes = _conv_chain(h, CNN_STRIDES)
        if sizes is None:
            raise DimensionError(
                f"cnn-small stride chain needs exact extents; {h}x{w} does not "
                f"divide (try an odd size like 17)")
        layers = []
        c_in = c
        for i, (c_out, s) in enumerate(zip(CNN_CHANNELS, CNN_STRIDES), start=1):
            layers.append(Conv2d(f"conv{i}", c_in, c_out, s, rng))
            c_in = c_out
        layers.append(Linear("fc", c_in * sizes[-1] * sizes[-1], n_classes, rng))
        quantized = tuple(f"conv{i}" for i in range(2, 7))
        spec = ModelSpec(arch, input_shape, n_classes, quantized)
        return Model(spec, layers)
    if arch == "mlp-small":
        n_in = 1
        for d in input_shape:
            n_in *= int(d)
        hidden = (256, 128, 64)
        layers = []
        prev = n_in
        for i, nh in enumerate(hidden, start=1):
            layers.append(Linear(f"fc{i}", prev, nh, rng))
            prev = nh
        layers.append(Linear("fc4", prev, n_classes, rng))
        spec = ModelSpec(arch, input_shape, n_classes, ("fc2", "fc3"))
        return Model(spec, layers)
    raise ValueError(f"unknown architecture {arch!r}")
