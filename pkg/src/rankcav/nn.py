# nn.py
"""Dense MLP encoder, linear head and explicit backpropagation.

Layer indices are 0-based and address the post-activation output of a layer;
the input is addressed separately through `grad_wrt_input`. All arithmetic is
float64.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import NamedTuple

import numpy as np

from rankcav.exceptions import ConfigError, ShapeError
from rankcav.helpers import array_digest, as_matrix, as_vector


class Activation(StrEnum):
    RELU = "relu"
    IDENTITY = "identity"

    def apply(self, z: np.ndarray) -> np.ndarray:
        match self:
            case Activation.RELU:
                return np.maximum(z, 0.0)
            case Activation.IDENTITY:
                return z

    def derivative(self, z: np.ndarray) -> np.ndarray:
        """Elementwise derivative; the ReLU subgradient at 0 is 0."""
        match self:
            case Activation.RELU:
                return (z > 0.0).astype(np.float64)
            case Activation.IDENTITY:
                return np.ones_like(z)


@dataclass(frozen=True, eq=False, slots=True)
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation

    def __post_init__(self) -> None:
        weights = as_matrix(self.weights, "layer weights")
        bias = as_vector(self.bias, "layer bias")
        if bias.shape[0] != weights.shape[0]:
            raise ShapeError(
                "Bias length must equal the layer's output width",
                context={"weights": weights.shape, "bias": bias.shape},
            )
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False, slots=True)
class MlpEncoder:
    layers: tuple[Layer, ...]
    frozen: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("An encoder needs at least one layer")
        for index, (lower, upper) in enumerate(zip(self.layers, self.layers[1:])):
            if lower.out_dim != upper.in_dim:
                raise ShapeError(
                    "Adjacent layer dimensions do not chain",
                    context={"layer": index + 1, "expected_in": lower.out_dim, "got": upper.in_dim},
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *(layer.out_dim for layer in self.layers))

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in (W0, b0, W1, b1, ...) order."""
        return [arr for layer in self.layers for arr in (layer.weights, layer.bias)]

    def digest(self) -> str:
        return array_digest(self.parameters())

    def copy(self) -> MlpEncoder:
        """Writable deep copy (never frozen)."""
        return MlpEncoder(
            tuple(
                Layer(layer.weights.copy(), layer.bias.copy(), layer.activation)
                for layer in self.layers
            )
        )

    def freeze(self) -> MlpEncoder:
        """Copy with read-only parameter arrays; in-place updates raise."""
        layers = []
        for layer in self.copy().layers:
            layer.weights.flags.writeable = False
            layer.bias.flags.writeable = False
            layers.append(layer)
        return MlpEncoder(tuple(layers), frozen=True)

    def check_layer(self, layer_index: int) -> int:
        if not 0 <= layer_index < self.depth:
            raise ShapeError(
                "Invalid layer index",
                context={"layer_index": layer_index, "depth": self.depth},
            )
        return layer_index


@dataclass(frozen=True, eq=False, slots=True)
class LinearHead:
    weights: np.ndarray  # (embedding_dim,)
    bias: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", as_vector(self.weights, "head weights"))
        if not np.isfinite(self.bias):
            raise ShapeError("Head bias must be finite", context={"bias": self.bias})
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


class ActivationTrace(NamedTuple):
    inputs: np.ndarray
    pre_activations: tuple[np.ndarray, ...]
    activations: tuple[np.ndarray, ...]

    @property
    def embedding(self) -> np.ndarray:
        """Last post-activation; the input itself for a trace that ran no layers."""
        return self.activations[-1] if self.activations else self.inputs

    @property
    def entries(self) -> tuple[np.ndarray, ...]:
        """Input batch followed by every layer's post-activation batch."""
        return (self.inputs, *self.activations)


class LayerGrad(NamedTuple):
    weights: np.ndarray
    bias: np.ndarray


def init_encoder(
    sizes: Sequence[int],
    seed: int,
    *,
    hidden_activation: Activation = Activation.RELU,
    final_activation: Activation = Activation.IDENTITY,
) -> MlpEncoder:
    """Fan-in scaled uniform init, U[-s, s] with s = sqrt(6 / fan_in); zero biases."""
    sizes = [int(size) for size in sizes]
    if len(sizes) < 2:
        raise ConfigError(
            "Encoder sizes need an input width and at least one layer width",
            context={"sizes": sizes},
        )
    if any(size <= 0 for size in sizes):
        raise ConfigError("Encoder widths must be positive", context={"sizes": sizes})
    rng = np.random.default_rng(seed)
    layers = []
    for index, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        scale = np.sqrt(6.0 / fan_in)
        last = index == len(sizes) - 2
        layers.append(
            Layer(
                rng.uniform(-scale, scale, size=(fan_out, fan_in)),
                np.zeros(fan_out),
                final_activation if last else hidden_activation,
            )
        )
    return MlpEncoder(tuple(layers))


def _run(layers: Sequence[Layer], inputs: np.ndarray) -> ActivationTrace:
    pre, post = [], []
    current = inputs
    for layer in layers:
        z = current @ layer.weights.T + layer.bias
        current = layer.activation.apply(z)
        pre.append(z)
        post.append(current)
    return ActivationTrace(inputs, tuple(pre), tuple(post))


def forward(encoder: MlpEncoder, batch) -> ActivationTrace:
    """Run a batch (rows = instances) through every layer."""
    batch = as_matrix(batch, "batch")
    if batch.shape[1] != encoder.input_dim:
        raise ShapeError(
            "Batch width does not match the encoder input",
            context={"batch": batch.shape, "input_dim": encoder.input_dim},
        )
    return _run(encoder.layers, batch)


def forward_from(encoder: MlpEncoder, activations, layer_index: int) -> ActivationTrace:
    """Continue a forward pass from given post-activations of `layer_index`."""
    encoder.check_layer(layer_index)
    activations = as_matrix(activations, "activations")
    if activations.shape[1] != encoder.layers[layer_index].out_dim:
        raise ShapeError(
            "Activation width does not match the layer",
            context={"shape": activations.shape, "layer_index": layer_index},
        )
    return _run(encoder.layers[layer_index + 1 :], activations)


def head_output(head: LinearHead, embedding) -> float:
    """h(e) = w . e + b"""
    embedding = as_vector(embedding, "embedding")
    if embedding.shape[0] != head.dim:
        raise ShapeError(
            "Embedding length does not match the head",
            context={"embedding": embedding.shape[0], "head": head.dim},
        )
    return float(embedding @ head.weights + head.bias)


def head_outputs(head: LinearHead, embeddings) -> np.ndarray:
    embeddings = as_matrix(embeddings, "embeddings")
    if embeddings.shape[1] != head.dim:
        raise ShapeError(
            "Embedding width does not match the head",
            context={"embeddings": embeddings.shape, "head": head.dim},
        )
    return embeddings @ head.weights + head.bias


def _propagate(
    layers: Sequence[Layer], pre_activations: Sequence[np.ndarray], grad: np.ndarray
) -> np.ndarray:
    """Push d/d(output of last layer) down to d/d(input of first layer)."""
    for layer, z in zip(reversed(layers), reversed(pre_activations)):
        grad = (grad * layer.activation.derivative(z)) @ layer.weights
    return grad


def _check_head(encoder: MlpEncoder, head: LinearHead) -> None:
    if head.dim != encoder.embedding_dim:
        raise ShapeError(
            "Head width does not match the encoder embedding",
            context={"head": head.dim, "embedding_dim": encoder.embedding_dim},
        )


def _as_batch(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def grads_at_activations(
    encoder: MlpEncoder, head: LinearHead, activations, layer_index: int
) -> np.ndarray:
    """Rows of dh/da at arbitrary post-activation points a of `layer_index`."""
    _check_head(encoder, head)
    trace = forward_from(encoder, activations, layer_index)
    seed_grad = np.broadcast_to(head.weights, trace.inputs.shape[:1] + head.weights.shape)
    return _propagate(
        encoder.layers[layer_index + 1 :], trace.pre_activations, np.array(seed_grad)
    )


def grads_wrt_layer(encoder: MlpEncoder, head: LinearHead, batch, layer_index: int) -> np.ndarray:
    encoder.check_layer(layer_index)
    _check_head(encoder, head)
    trace = forward(encoder, batch)
    seed_grad = np.broadcast_to(head.weights, (trace.inputs.shape[0], head.dim))
    return _propagate(
        encoder.layers[layer_index + 1 :],
        trace.pre_activations[layer_index + 1 :],
        np.array(seed_grad),
    )


def grad_wrt_layer(encoder: MlpEncoder, head: LinearHead, x, layer_index: int) -> np.ndarray:
    """Exact dh/d(f_l(x)) for a single instance."""
    return grads_wrt_layer(encoder, head, _as_batch(x), layer_index)[0]


def grads_wrt_input(encoder: MlpEncoder, head: LinearHead, batch) -> np.ndarray:
    _check_head(encoder, head)
    trace = forward(encoder, batch)
    seed_grad = np.broadcast_to(head.weights, (trace.inputs.shape[0], head.dim))
    return _propagate(encoder.layers, trace.pre_activations, np.array(seed_grad))


def grad_wrt_input(encoder: MlpEncoder, head: LinearHead, x) -> np.ndarray:
    return grads_wrt_input(encoder, head, _as_batch(x))[0]


def backward(
    encoder: MlpEncoder, trace: ActivationTrace, grad_embedding: np.ndarray
) -> list[LayerGrad]:
    """Parameter gradients of a loss given dLoss/d(embedding batch)."""
    grad = as_matrix(grad_embedding, "embedding gradient")
    if grad.shape != trace.embedding.shape:
        raise ShapeError(
            "Gradient shape does not match the embedding batch",
            context={"grad": grad.shape, "embedding": trace.embedding.shape},
        )
    grads: list[LayerGrad] = []
    for index in reversed(range(encoder.depth)):
        layer = encoder.layers[index]
        below = trace.activations[index - 1] if index else trace.inputs
        grad_z = grad * layer.activation.derivative(trace.pre_activations[index])
        grads.append(LayerGrad(grad_z.T @ below, grad_z.sum(axis=0)))
        grad = grad_z @ layer.weights
    grads.reverse()
    return grads


def flat_grads(grads: Sequence[LayerGrad]) -> list[np.ndarray]:
    """Gradients in the order of `MlpEncoder.parameters()`."""
    return [arr for grad in grads for arr in grad]
