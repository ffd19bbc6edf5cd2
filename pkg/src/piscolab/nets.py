"""Encoder, policy/value heads, and projection MLP.

The encoder is the classic 4-layer pixel stack: three strided convolutions
and one dense layer, GELU after every layer, no normalization anywhere.
Freezing is prefix-closed: you freeze Conv1..k, never an interior hole.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, conv2d, gelu, matmul, reshape
from .errors import ConfigError

LAYER_NAMES = ("Conv1", "Conv2", "Conv3", "Linear")

# (out_channels, kernel, stride) for the conv layers; dense size after them
_CONV_SPECS = {
    "Conv1": (32, 8, 4),
    "Conv2": (64, 4, 2),
    "Conv3": (64, 3, 1),
}
FEATURE_DIM = 512
_FLAT_DIM = 64 * 7 * 7


class Encoder:
    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def _layer(self, name: str, x: Tensor) -> Tensor:
        if name == "Linear":
            b = x.shape[0]
            h = reshape(x, (b, _FLAT_DIM))
            h = matmul(h, self.params["encoder.Linear.weight"])
            return gelu(h + self.params["encoder.Linear.bias"])
        _, _, stride = _CONV_SPECS[name]
        return gelu(conv2d(x, self.params[f"encoder.{name}.weight"],
                           bias=self.params[f"encoder.{name}.bias"],
                           stride=stride))

    def forward(self, x: Tensor) -> Tensor:
        for name in LAYER_NAMES:
            x = self._layer(name, x)
        return x

    def forward_per_layer(self, x: Tensor) -> dict[str, Tensor]:
        """Post-activation output of every layer, in depth order."""
        outs = {}
        for name in LAYER_NAMES:
            x = self._layer(name, x)
            outs[name] = x
        return outs

    def forward_upto(self, x: Tensor, layer: str) -> Tensor:
        _check_layer(layer)
        for name in LAYER_NAMES:
            x = self._layer(name, x)
            if name == layer:
                return x
        raise AssertionError

    def forward_from(self, h: Tensor, after_layer: str) -> Tensor:
        """Resume the stack given the post-activation output of a layer.

        Feeding back a cached forward_upto result reproduces forward() bit
        for bit; the trainer uses this to memoize frozen prefixes.
        """
        _check_layer(after_layer)
        start = LAYER_NAMES.index(after_layer) + 1
        for name in LAYER_NAMES[start:]:
            h = self._layer(name, h)
        return h


class Agent:
    """Encoder plus linear policy/value heads plus the projection MLP."""

    def __init__(self, params: dict[str, Tensor]):
        self._params = params
        self.encoder = Encoder(params)
        self.frozen_upto: str | None = None

    def params(self) -> dict[str, Tensor]:
        return self._params

    def policy_logits(self, z: Tensor) -> Tensor:
        return matmul(z, self._params["policy.weight"]) + self._params["policy.bias"]

    def value(self, z: Tensor) -> Tensor:
        v = matmul(z, self._params["value.weight"]) + self._params["value.bias"]
        return reshape(v, (z.shape[0],))

    def project(self, z: Tensor) -> Tensor:
        h = matmul(z, self._params["projector.l1.weight"])
        h = gelu(h + self._params["projector.l1.bias"])
        return matmul(h, self._params["projector.l2.weight"]) + self._params["projector.l2.bias"]

    def freeze_upto(self, layer: str | None) -> None:
        """Freeze encoder layers Conv1..layer (inclusive); None freezes nothing."""
        if layer is None:
            self.frozen_upto = None
            return
        _check_layer(layer)
        depth = LAYER_NAMES.index(layer)
        for name in LAYER_NAMES[:depth + 1]:
            self._params[f"encoder.{name}.weight"].requires_grad = False
            self._params[f"encoder.{name}.bias"].requires_grad = False
        self.frozen_upto = layer

    def trainable_encoder_params(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._params.items()
                if k.startswith("encoder.") and t.requires_grad}


def _check_layer(layer: str) -> None:
    if layer not in LAYER_NAMES:
        raise ConfigError(f"unknown encoder layer {layer!r}; "
                          f"expected one of {LAYER_NAMES}")


def init_agent(seed: int) -> Agent:
    """Fan-in-scaled uniform init, one seeded stream, fixed draw order."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def draw(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True)

    in_ch = 1
    for name, (out_ch, k, _) in _CONV_SPECS.items():
        fan = in_ch * k * k
        draw(f"encoder.{name}.weight", (out_ch, in_ch, k, k), fan)
        draw(f"encoder.{name}.bias", (out_ch,), fan)
        in_ch = out_ch
    draw("encoder.Linear.weight", (_FLAT_DIM, FEATURE_DIM), _FLAT_DIM)
    draw("encoder.Linear.bias", (FEATURE_DIM,), _FLAT_DIM)
    draw("policy.weight", (FEATURE_DIM, 2), FEATURE_DIM)
    draw("policy.bias", (2,), FEATURE_DIM)
    draw("value.weight", (FEATURE_DIM, 1), FEATURE_DIM)
    draw("value.bias", (1,), FEATURE_DIM)
    draw("projector.l1.weight", (FEATURE_DIM, FEATURE_DIM), FEATURE_DIM)
    draw("projector.l1.bias", (FEATURE_DIM,), FEATURE_DIM)
    draw("projector.l2.weight", (FEATURE_DIM, FEATURE_DIM), FEATURE_DIM)
    draw("projector.l2.bias", (FEATURE_DIM,), FEATURE_DIM)
    return Agent(params)
