from contextlib import ExitStack
from unittest.mock import patch

import numpy as np

from mqreid.mlp import mlp_forward


def jitter(model, rng, scale=0.1):
    """Perturb every parameter so no ReLU sits exactly on its kink.

    Freshly initialised networks have zero biases, so inputs that are zero
    in some coordinate give pre-activations of exactly 0 and a finite
    difference straddles the kink. Real training moves the biases away.
    """
    return model.with_parameters([p + scale * rng.normal(size=p.shape) for p in model.parameters()])


def relu_margin(loss_fn, model, modules) -> float:
    """Smallest |pre-activation| over every ReLU unit touched by ``loss_fn(model)``.

    ``modules`` are the modules whose ``mlp_forward`` name should be observed.
    """
    smallest = [np.inf]

    def observed(m, x, condition=None):
        cache = mlp_forward(m, x, condition)
        for layer, z in zip(m.layers, cache.pre_activations):
            if layer.activation == "relu":
                smallest[0] = min(smallest[0], float(np.min(np.abs(z))))
        return cache

    with ExitStack() as stack:
        for module in modules:
            stack.enter_context(patch.object(module, "mlp_forward", observed))
        loss_fn(model)
    return smallest[0]


def smooth_jitter(base, loss_fn, rng, modules, margin=1e-4, attempts=200):
    """Jitter ``base`` until every ReLU is at least ``margin`` from its kink.

    Returns the model and the number of rejected draws.
    """
    for rejected in range(attempts):
        model = jitter(base, rng)
        if relu_margin(loss_fn, model, modules) >= margin:
            return model, rejected
    raise RuntimeError(f"no kink-free draw in {attempts} attempts")
