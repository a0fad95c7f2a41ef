"""Small dense networks with optional additive conditioning, trained by plain SGD.

A model is a chain of dense layers. Any layer may carry a conditioning
projection ``C``; its pre-activation becomes ``W a + b + C c`` where ``c`` is
a condition vector shared by all layers. Inputs are row batches of shape
``(n, d)``; a 1-D input is treated as a batch of one.

Every trainable container in the package exposes the same three methods
(``parameters``, ``with_parameters``, ``copy``) so that :func:`sgd_step` and
:func:`grad_check` work on all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import InvalidInputError, ModelError, make_rng

ACTIVATIONS = ("relu", "identity")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ModelError(
                f"layer shapes do not agree: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class MlpModel:
    layers: tuple[Layer, ...]
    # one entry per layer; None means the layer is not conditioned
    conditioning: tuple[np.ndarray | None, ...] | None = None

    def __post_init__(self):
        if not self.layers:
            raise ModelError("a model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ModelError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        if self.conditioning is not None:
            if len(self.conditioning) != len(self.layers):
                raise ModelError("conditioning list must have one entry per layer")
            cond_dims = set()
            for layer, proj in zip(self.layers, self.conditioning):
                if proj is None:
                    continue
                if proj.ndim != 2 or proj.shape[0] != layer.out_dim:
                    raise ModelError(
                        f"conditioning projection {proj.shape} does not map to hidden dim {layer.out_dim}"
                    )
                cond_dims.add(proj.shape[1])
            if len(cond_dims) > 1:
                raise ModelError("all conditioning projections must read the same condition dim")
            if not cond_dims:
                object.__setattr__(self, "conditioning", None)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def is_conditioned(self) -> bool:
        return self.conditioning is not None

    @property
    def condition_dim(self) -> int | None:
        if self.conditioning is None:
            return None
        return next(p.shape[1] for p in self.conditioning if p is not None)

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        if self.conditioning is not None:
            params.extend(p for p in self.conditioning if p is not None)
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "MlpModel":
        params = list(params)
        expected = self.parameters()
        if len(params) != len(expected):
            raise InvalidInputError(f"expected {len(expected)} parameter arrays, got {len(params)}")
        for new, old in zip(params, expected):
            if np.shape(new) != old.shape:
                raise InvalidInputError(f"parameter shape mismatch: {np.shape(new)} vs {old.shape}")
        it = iter(params)
        layers = tuple(
            Layer(np.asarray(next(it), dtype=np.float64), np.asarray(next(it), dtype=np.float64), layer.activation)
            for layer in self.layers
        )
        conditioning = None
        if self.conditioning is not None:
            conditioning = tuple(
                None if p is None else np.asarray(next(it), dtype=np.float64) for p in self.conditioning
            )
        return MlpModel(layers, conditioning)

    def copy(self) -> "MlpModel":
        return self.with_parameters([p.copy() for p in self.parameters()])

    def without_conditioning(self) -> "MlpModel":
        return MlpModel(self.layers, None)

    def zero_conditioning(self) -> "MlpModel":
        if self.conditioning is None:
            return self
        return MlpModel(
            self.layers,
            tuple(None if p is None else np.zeros_like(p) for p in self.conditioning),
        )


def init_mlp(
    dims: Sequence[int],
    rng: np.random.Generator,
    activations: Sequence[str] | None = None,
    condition_dim: int | None = None,
    conditioned_layers: Sequence[int] | None = None,
) -> MlpModel:
    """Glorot-uniform initialisation with zero biases.

    By default hidden layers use ReLU and the last layer is linear.
    ``conditioned_layers`` defaults to every hidden layer when
    ``condition_dim`` is given.
    """
    if len(dims) < 2:
        raise InvalidInputError("dims must list at least an input and an output size")
    n_layers = len(dims) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["identity"]
    if len(activations) != n_layers:
        raise InvalidInputError("one activation per layer is required")

    def glorot(fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    layers = tuple(
        Layer(glorot(dims[i + 1], dims[i]), np.zeros(dims[i + 1]), activations[i]) for i in range(n_layers)
    )
    conditioning = None
    if condition_dim is not None:
        if conditioned_layers is None:
            conditioned_layers = [i for i, act in enumerate(activations) if act == "relu"]
        wanted = set(conditioned_layers)
        conditioning = tuple(
            glorot(dims[i + 1], condition_dim) if i in wanted else None for i in range(n_layers)
        )
    return MlpModel(layers, conditioning)


@dataclass
class ForwardCache:
    model: MlpModel
    inputs: np.ndarray
    condition: np.ndarray | None
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    conditioning: list[np.ndarray | None] | None
    d_input: np.ndarray
    d_condition: np.ndarray | None

    def as_list(self) -> list[np.ndarray]:
        """Parameter gradients in the order of :meth:`MlpModel.parameters`."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        if self.conditioning is not None:
            out.extend(g for g in self.conditioning if g is not None)
        return out


def _as_batch(x, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise InvalidInputError(f"{name} has shape {np.shape(x)}, expected (n, {dim})")
    return arr


def mlp_forward(model: MlpModel, x, condition=None) -> ForwardCache:
    a = _as_batch(x, model.in_dim, "input")
    c = None
    if model.is_conditioned:
        if condition is None:
            raise InvalidInputError("conditioned model requires a condition input")
        c = _as_batch(condition, model.condition_dim, "condition")
        if c.shape[0] != a.shape[0]:
            raise InvalidInputError("input and condition batch sizes differ")
    elif condition is not None:
        raise InvalidInputError("model has no conditioning projections but a condition was given")

    cache = ForwardCache(model, a, c)
    cache.activations.append(a)
    for i, layer in enumerate(model.layers):
        z = a @ layer.weight.T + layer.bias
        if c is not None and model.conditioning[i] is not None:
            z = z + c @ model.conditioning[i].T
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        cache.pre_activations.append(z)
        cache.activations.append(a)
    return cache


def mlp_backward(model: MlpModel, cache: ForwardCache, grad_output) -> MlpGrads:
    if cache.model is not model:
        raise InvalidInputError("forward cache was produced by a different model")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise InvalidInputError(f"output gradient shape {g.shape} != output shape {cache.output.shape}")

    n_layers = len(model.layers)
    d_weights: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    d_cond_proj: list[np.ndarray | None] | None = None
    d_condition = None
    if model.is_conditioned:
        d_cond_proj = [None] * n_layers
        d_condition = np.zeros_like(cache.condition)

    for i in range(n_layers - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            g = g * (cache.pre_activations[i] > 0.0)
        d_weights[i] = g.T @ cache.activations[i]
        d_biases[i] = g.sum(axis=0)
        if d_cond_proj is not None and model.conditioning[i] is not None:
            d_cond_proj[i] = g.T @ cache.condition
            d_condition += g @ model.conditioning[i]
        g = g @ layer.weight
    return MlpGrads(d_weights, d_biases, d_cond_proj, g, d_condition)


def sgd_step(model, grads, lr: float):
    """Return a new model with ``p - lr * grad`` for every parameter."""
    if isinstance(grads, MlpGrads):
        grads = grads.as_list()
    params = model.parameters()
    grads = list(grads)
    if len(grads) != len(params):
        raise InvalidInputError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    updated = []
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        updated.append(p - lr * g)
    return model.with_parameters(updated)


class ParamBundle:
    """Plain list of arrays exposing the trainable-container protocol.

    Lets :func:`grad_check` probe loss functions whose "parameters" are just
    their input arrays.
    """

    def __init__(self, arrays: Sequence[np.ndarray]):
        self.arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def parameters(self) -> list[np.ndarray]:
        return self.arrays

    def with_parameters(self, params) -> "ParamBundle":
        return ParamBundle(params)

    def copy(self) -> "ParamBundle":
        return ParamBundle(self.arrays)


def grad_check(
    loss_fn: Callable[[object], tuple[float, Sequence[np.ndarray]]],
    model,
    probe_count: int = 20,
    epsilon: float = 1e-6,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(model)`` returns ``(loss, grads)`` with ``grads`` aligned to
    ``model.parameters()``. ``probe_count`` entries are drawn uniformly over
    all parameters.
    """
    loss, grads = loss_fn(model)
    if not np.isfinite(loss):
        raise InvalidInputError("loss is not finite")
    params = model.parameters()
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = make_rng(seed)
    n_probe = min(probe_count, total)
    flat_ids = rng.choice(total, size=n_probe, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in np.sort(flat_ids):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[k]), params[k].shape)
        analytic = float(np.asarray(grads[k])[idx])
        values = []
        for sign in (1.0, -1.0):
            probe = model.copy()
            probe.parameters()[k][idx] += sign * epsilon
            value, _ = loss_fn(probe)
            if not np.isfinite(value):
                raise InvalidInputError("loss is not finite under perturbation")
            values.append(value)
        numeric = (values[0] - values[1]) / (2.0 * epsilon)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def mlp_to_dict(model: MlpModel) -> dict:
    layers = [
        {
            "rows": layer.out_dim,
            "cols": layer.in_dim,
            "weights": layer.weight.ravel().tolist(),
            "bias": layer.bias.tolist(),
            "activation": layer.activation,
        }
        for layer in model.layers
    ]
    conditioning = []
    if model.conditioning is not None:
        for proj in model.conditioning:
            if proj is None:
                conditioning.append(None)
            else:
                conditioning.append(
                    {"rows": proj.shape[0], "cols": proj.shape[1], "weights": proj.ravel().tolist()}
                )
    return {"version": FORMAT_VERSION, "layers": layers, "conditioning": conditioning}


def _matrix(doc: dict) -> np.ndarray:
    rows, cols = int(doc["rows"]), int(doc["cols"])
    values = np.asarray(doc["weights"], dtype=np.float64)
    if rows <= 0 or cols <= 0 or values.size != rows * cols:
        raise ModelError(f"matrix of {rows}x{cols} cannot hold {values.size} values")
    if not np.all(np.isfinite(values)):
        raise ModelError("matrix contains non-finite values")
    return values.reshape(rows, cols)


def mlp_from_dict(doc: dict) -> MlpModel:
    try:
        if doc.get("version") != FORMAT_VERSION:
            raise ModelError(f"unsupported model format version {doc.get('version')!r}")
        layers = tuple(
            Layer(_matrix(ld), np.asarray(ld["bias"], dtype=np.float64), ld["activation"])
            for ld in doc["layers"]
        )
        cond_doc = doc.get("conditioning") or []
        conditioning = None
        if cond_doc:
            conditioning = tuple(None if cd is None else _matrix(cd) for cd in cond_doc)
        return MlpModel(layers, conditioning)
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model document: {exc}") from exc
