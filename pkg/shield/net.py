"""
Feed-forward network with sigmoid output heads.

Weight matrices are stored (out, in), so a layer computes ``W @ a + b``.
Gradients are always requested with respect to the logits; the sigmoid chain
is composed by callers that start from a loss on the outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from .errors import BadArchitecture, DimensionMismatch, ModelFormatError, TraceMismatch
from .logs import log_event

MODEL_FORMAT_VERSION = "tnorm-shield-model-v1"


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


@dataclass
class Model:
    layer_sizes: Tuple[int, ...]
    activation: Activation
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    seed: int = 0

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Model":
        return Model(
            layer_sizes=self.layer_sizes,
            activation=self.activation,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            seed=self.seed,
        )


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]
    logits: np.ndarray
    outputs: np.ndarray
    single: bool = False
    model_id: int = field(default=0, repr=False)
    layer_sizes: Tuple[int, ...] = ()


@dataclass
class LayerGradient:
    weight: np.ndarray
    bias: np.ndarray


def sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def init_model(
    layer_sizes: Sequence[int],
    activation: Union[Activation, str] = Activation.RELU,
    seed: int = 0,
) -> Model:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise BadArchitecture(f"Need at least an input and an output layer, got {list(sizes)}")
    if any(s < 1 for s in sizes):
        raise BadArchitecture(f"Layer sizes must be >= 1, got {list(sizes)}")
    try:
        act = Activation(activation)
    except ValueError:
        raise BadArchitecture(f"Unknown activation {activation!r}") from None

    rng = np.random.default_rng(seed)
    weights: List[np.ndarray] = []
    biases: List[np.ndarray] = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    log_event("model_init", layer_sizes=list(sizes), activation=act.value, seed=seed)
    return Model(sizes, act, weights, biases, seed)


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0.0).astype(float)
    return 1.0 - np.tanh(z) ** 2


def forward(model: Model, x: np.ndarray | Sequence[float]) -> ForwardTrace:
    """Forward pass for one input vector (d,) or a batch (n, d)."""
    arr = np.array(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != model.n_inputs:
        raise DimensionMismatch(
            f"Expected input of dimension {model.n_inputs}, got shape {np.shape(x)}"
        )

    pre: List[np.ndarray] = []
    acts: List[np.ndarray] = [arr]
    a = arr
    last = len(model.weights) - 1
    logits = a
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        if k == last:
            logits = z
        else:
            pre.append(z)
            a = _activate(model.activation, z)
            acts.append(a)

    outputs = sigmoid(logits)
    if single:
        logits, outputs = logits[0], outputs[0]
    return ForwardTrace(
        inputs=arr,
        pre_activations=pre,
        activations=acts,
        logits=logits,
        outputs=outputs,
        single=single,
        model_id=id(model),
        layer_sizes=model.layer_sizes,
    )


def predict_outputs(model: Model, x: np.ndarray | Sequence[float]) -> np.ndarray:
    return forward(model, x).outputs


def _check_trace(model: Model, trace: ForwardTrace, upstream: np.ndarray) -> np.ndarray:
    if trace.model_id != id(model) or trace.layer_sizes != model.layer_sizes:
        raise TraceMismatch("Trace was not produced by this model")
    up = np.asarray(upstream, dtype=float)
    if trace.single and up.ndim == 1:
        up = up[None, :]
    if up.shape != (trace.inputs.shape[0], model.n_outputs):
        raise DimensionMismatch(
            f"Upstream gradient shape {np.shape(upstream)} does not match the logits"
        )
    return up


def _backprop(
    model: Model, trace: ForwardTrace, upstream: np.ndarray, want_weights: bool
) -> Tuple[List[LayerGradient], np.ndarray]:
    delta = _check_trace(model, trace, upstream)
    grads: List[LayerGradient] = []
    for k in range(len(model.weights) - 1, -1, -1):
        if want_weights:
            grads.append(LayerGradient(delta.T @ trace.activations[k], delta.sum(axis=0)))
        delta = delta @ model.weights[k]
        if k > 0:
            delta = delta * _activate_grad(model.activation, trace.pre_activations[k - 1])
    grads.reverse()
    return grads, delta


def grad_weights(model: Model, trace: ForwardTrace, upstream: np.ndarray) -> List[LayerGradient]:
    """Gradient of <upstream, logits> w.r.t. every weight and bias, summed over the batch."""
    grads, _ = _backprop(model, trace, upstream, want_weights=True)
    return grads


def grad_input(model: Model, trace: ForwardTrace, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, logits> w.r.t. the input; (d,) for a single input."""
    _, dx = _backprop(model, trace, upstream, want_weights=False)
    return dx[0] if trace.single else dx


def model_to_dict(model: Model) -> Dict[str, Any]:
    return {
        "version": MODEL_FORMAT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "activation": model.activation.value,
        "seed": model.seed,
        "layers": [
            {"weight": w.tolist(), "bias": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }


def model_from_dict(data: Dict[str, Any]) -> Model:
    if data.get("version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"Unsupported model version {data.get('version')!r}")
    try:
        sizes = tuple(int(s) for s in data["layer_sizes"])
        activation = Activation(data["activation"])
        layers = data["layers"]
        weights = [np.array(layer["weight"], dtype=float) for layer in layers]
        biases = [np.array(layer["bias"], dtype=float) for layer in layers]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"Malformed model document: {exc}") from None

    if len(weights) != len(sizes) - 1:
        raise ModelFormatError("Layer count does not match the architecture header")
    for k, (w, b) in enumerate(zip(weights, biases)):
        if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
            raise ModelFormatError(f"Layer {k} has shape {w.shape}/{b.shape}")
    return Model(sizes, activation, weights, biases, int(data.get("seed", 0)))


def save_model(model: Model, path: Union[str, Path]) -> None:
    # json writes floats with the shortest round-trip repr, so reloads are bit-exact
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")
    log_event("model_saved", path=str(path))


def load_model(path: Union[str, Path]) -> Model:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"Model file is not valid JSON: {exc}") from None
    model = model_from_dict(data)
    log_event("model_loaded", path=str(path), layer_sizes=list(model.layer_sizes))
    return model
