"""Sequential network of quantized (and full-precision boundary) layers."""
from __future__ import annotations

import numpy as np

from .netbwd import backward_layer
from .fxcore import clip_symmetric, q_direct
from .netfwd import LayerSpec, LayerState, forward_layer
from .quantfn import BitWidthConfig, Quantizer


def init_weights(spec: LayerSpec, cfg: BitWidthConfig, rng: np.random.Generator) -> np.ndarray:
    """He-style normal init with std ``1/sqrt(n_in)``, then stored on the k_WU grid.

    Full-precision layers keep the raw sample.
    """
    w = rng.normal(0.0, 1.0 / np.sqrt(spec.n_in), size=spec.weight_shape)
    if not spec.quantized:
        return w
    return clip_symmetric(q_direct(w, cfg.k_WU), cfg.k_WU)


class Model:
    def __init__(self, layers: list[LayerState], input_shape: tuple):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for st in layers:
            shape = st.spec.output_shape(shape if st.spec.kind == "conv2d" else (int(np.prod(shape)),))
        self.output_shape = shape

    @classmethod
    def build(cls, specs, cfg: BitWidthConfig, rng: np.random.Generator, input_shape):
        layers = []
        for spec in specs:
            w = init_weights(spec, cfg, rng)
            gamma = beta = None
            if spec.has_bn:
                gamma = np.ones(spec.fan_out)
                if spec.quantized:
                    gamma = clip_symmetric(gamma, cfg.k_gammaU)
                beta = np.zeros(spec.fan_out)
            layers.append(LayerState(spec, w, gamma, beta))
        return cls(layers, input_shape)

    @property
    def specs(self) -> list[LayerSpec]:
        return [st.spec for st in self.layers]

    def parameters(self):
        """Yield ``(name, layer_index, attribute)`` for every trainable tensor."""
        for i, st in enumerate(self.layers):
            yield f"{i}.W", i, "W"
            if st.spec.has_bn:
                yield f"{i}.gamma", i, "gamma"
                yield f"{i}.beta", i, "beta"

    def forward(self, x: np.ndarray, q: Quantizer, train: bool = True) -> np.ndarray:
        prev_quantized = False
        for st in self.layers:
            if st.spec.quantized and not prev_quantized:
                x = q.qa(x)  # boundary into the quantized stack
            x = forward_layer(st, x, q, train=train)
            prev_quantized = st.spec.quantized
        return x

    def backward(self, e_top: np.ndarray, q: Quantizer, rng=None, bn_backward: str = "full"):
        grads = [None] * len(self.layers)
        e = e_top
        for i in range(len(self.layers) - 1, -1, -1):
            out, grads[i] = backward_layer(self.layers[i], e, q, rng, bn_backward,
                                           need_input_error=i > 0)
            e = out.values if out is not None else None
        return grads

    def clear_cache(self) -> None:
        for st in self.layers:
            st.cache = {}


def desk_convnet(channels=(8, 16), hidden: int = 64, classes: int = 10) -> list[LayerSpec]:
    """Full-precision conv, quantized conv + dense hidden stack, full-precision head."""
    c1, c2 = channels
    return [
        LayerSpec("conv2d", 1, c1, kernel=3, stride=2, quantized=False),
        LayerSpec("conv2d", c1, c2, kernel=3, stride=2),
        LayerSpec("dense", c2 * 7 * 7, hidden),
        LayerSpec("dense", hidden, classes, has_bn=False, relu=False, quantized=False),
    ]
