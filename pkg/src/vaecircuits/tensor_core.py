"""Dense layers with explicit reverse-mode passes, Adam, and a seeded RNG.

Matrices are plain ``numpy`` float64 arrays. Every function accepts either a
single vector or a batch of row vectors; batches are the fast path used by
training and the intervention scans.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


class StaleCacheError(RuntimeError):
    """A forward cache was reused after the layers it came from changed."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`adam_step` when a gradient contains NaN or Inf."""


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation = Activation.RELU
    version: int = 0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        self.activation = Activation(self.activation)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ConfigurationError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


@dataclass
class LayerCache:
    inputs: np.ndarray
    pre: np.ndarray
    post: np.ndarray


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    versions: tuple[int, ...]
    layer_ids: tuple[int, ...]
    squeeze: bool

    @property
    def post_activations(self) -> list[np.ndarray]:
        return [c.post for c in self.layers]


def _apply(activation: Activation, pre: np.ndarray) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(pre, 0.0)
    return pre


def forward(layers: Sequence[DenseLayer], x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run ``x`` through ``layers``; returns the output and the per-layer cache."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if not layers:
        raise ConfigurationError("empty layer stack")
    if h.shape[1] != layers[0].in_features:
        raise ConfigurationError(
            f"input width {h.shape[1]} does not match first layer ({layers[0].in_features})"
        )
    caches = []
    for i, layer in enumerate(layers):
        if h.shape[1] != layer.in_features:
            raise ConfigurationError(f"layer {i}: got width {h.shape[1]}, expects {layer.in_features}")
        pre = h @ layer.weight.T + layer.bias
        post = _apply(layer.activation, pre)
        caches.append(LayerCache(h, pre, post))
        h = post
    cache = ForwardCache(
        caches,
        tuple(l.version for l in layers),
        tuple(id(l) for l in layers),
        squeeze,
    )
    return (h[0] if squeeze else h), cache


def run_from(layers: Sequence[DenseLayer], h: np.ndarray, start: int) -> np.ndarray:
    """Propagate an activation that is the *input* of ``layers[start]`` to the end."""
    for layer in layers[start:]:
        h = _apply(layer.activation, h @ layer.weight.T + layer.bias)
    return h


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray


def backward(
    layers: Sequence[DenseLayer], cache: ForwardCache, output_grad: np.ndarray
) -> tuple[list[LayerGrad], np.ndarray]:
    """Reverse pass: parameter gradients (summed over the batch) and the input gradient."""
    if cache.layer_ids != tuple(id(l) for l in layers) or cache.versions != tuple(
        l.version for l in layers
    ):
        raise StaleCacheError("cache does not belong to the current layer parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    grads: list[LayerGrad] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        layer, c = layers[i], cache.layers[i]
        if layer.activation is Activation.RELU:
            g = g * (c.pre > 0.0)
        grads[i] = LayerGrad(g.T @ c.inputs, g.sum(axis=0))
        g = g @ layer.weight
    return grads, (g[0] if cache.squeeze else g)


class SeededRng:
    """Philox counter-based generator (numpy's implementation, 4x64 rounds=10).

    ``spawn`` derives independent child streams from the parent seed and a
    string key, so the stream a component sees does not depend on how many
    draws other components made.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def spawn(self, key: str) -> "SeededRng":
        digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        return SeededRng(int.from_bytes(digest[:8], "little"))


def init_layer(
    rng: SeededRng, n_in: int, n_out: int, activation: Activation | str = Activation.RELU
) -> DenseLayer:
    """Kaiming-uniform fan-in init; zero bias.

    The bound is sqrt(6 / fan_in) ahead of a ReLU and sqrt(3 / fan_in) for
    linear outputs, which keeps activation variance roughly constant.
    """
    activation = Activation(activation)
    gain = 6.0 if activation is Activation.RELU else 3.0
    bound = np.sqrt(gain / n_in)
    w = rng.uniform(-bound, bound, size=(n_out, n_in))
    return DenseLayer(w, np.zeros(n_out), activation)


def init_mlp(
    rng: SeededRng, widths: Sequence[int], final_activation: Activation | str = Activation.IDENTITY
) -> list[DenseLayer]:
    """Chain of layers ``widths[0] -> ... -> widths[-1]``; ReLU on all but the last."""
    layers = []
    for i in range(len(widths) - 1):
        act = Activation.RELU if i < len(widths) - 2 else Activation(final_activation)
        layers.append(init_layer(rng, widths[i], widths[i + 1], act))
    return layers


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs
        )


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
) -> Sequence[np.ndarray]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ConfigurationError("params, grads and optimizer state differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient at Adam step {state.step_count + 1}"
            )
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or m.shape != p.shape:
            raise ConfigurationError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


def layer_params(layers: Sequence[DenseLayer]) -> list[np.ndarray]:
    return [p for layer in layers for p in layer.params()]


def flatten_grads(grads: Sequence[LayerGrad]) -> list[np.ndarray]:
    return [a for g in grads for a in (g.weight, g.bias)]


def bump_versions(layers: Sequence[DenseLayer]) -> None:
    for layer in layers:
        layer.version += 1


# Matrix blobs: <u4 rows, <u4 cols, then rows*cols little-endian float64.

def write_matrix(fh: BinaryIO, m: np.ndarray) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    rows, cols = struct.unpack("<II", fh.read(8))
    buf = fh.read(8 * rows * cols)
    if len(buf) != 8 * rows * cols:
        raise ConfigurationError("truncated matrix blob")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(rows, cols)
