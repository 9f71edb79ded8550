"""Small dense networks and the differentiation machinery built on them.

Networks are JAX pytrees, so input-gradients (reverse mode), input-Hessians
(forward-over-reverse) and parameter gradients of any scalar built from those
quantities come from the same traced program.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .errors import InvalidParameterError, NonFiniteLossError, ShapeError

ACTIVATIONS = ("tanh", "smoothed_relu", "identity")
DEFAULT_KNOT = 0.1


def smoothed_relu(x, d=DEFAULT_KNOT):
    """C^2 ReLU: 0 below 0, quartic blend on (0, d], then x - d/2."""
    if isinstance(d, (int, float)) and not d > 0:
        raise InvalidParameterError(f"smoothed_relu knot must be positive, got {d}")
    x = jnp.asarray(x)
    # clip inside the quartic branch so that unused branches stay bounded under grad
    t = jnp.clip(x, 0.0, d) / d
    # (2dx^3 - x^4)/(2d^3) in the scaled variable; keeps sigma(d) == d/2 exact
    quartic = d * t**3 * (2.0 - t) / 2.0
    return jnp.where(x <= 0.0, 0.0, jnp.where(x <= d, quartic, x - d / 2.0))


def _activate(name, z, knot):
    if name == "tanh":
        return jnp.tanh(z)
    if name == "smoothed_relu":
        return smoothed_relu(z, knot)
    if name == "identity":
        return z
    raise InvalidParameterError(f"unknown activation {name!r}")


@functools.partial(
    jax.tree_util.register_dataclass,
    data_fields=["layers"],
    meta_fields=["activation", "knot", "out_activation"],
)
@dataclass(frozen=True)
class MlpNet:
    """Dense feedforward net. ``layers`` holds ``(W, b)`` pairs with W of shape (out, in)."""

    layers: tuple
    activation: str = "tanh"
    knot: float = DEFAULT_KNOT
    out_activation: str = "identity"

    @property
    def input_dim(self) -> int:
        return int(self.layers[0][0].shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1][0].shape[0])

    @property
    def arch(self) -> list[int]:
        return [self.input_dim] + [int(W.shape[0]) for W, _ in self.layers]

    def validate(self) -> "MlpNet":
        if self.activation not in ACTIVATIONS or self.out_activation not in ACTIVATIONS:
            raise InvalidParameterError("unknown activation")
        if not self.knot > 0:
            raise InvalidParameterError("knot must be positive")
        prev = None
        for W, b in self.layers:
            W, b = np.asarray(W), np.asarray(b)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"bad layer shapes W{W.shape} b{b.shape}")
            if prev is not None and W.shape[1] != prev:
                raise ShapeError(f"layer expects {W.shape[1]} inputs, previous layer gives {prev}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise InvalidParameterError("non-finite network parameter")
            prev = W.shape[0]
        return self

    def __call__(self, x):
        return mlp_forward(self, x)


def init_mlp(
    sizes: Sequence[int],
    activation: str = "tanh",
    seed: int = 0,
    knot: float = DEFAULT_KNOT,
    out_activation: str = "identity",
) -> MlpNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases."""
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((jnp.asarray(W), jnp.asarray(b)))
    return MlpNet(tuple(layers), activation, float(knot), out_activation).validate()


def mlp_forward(net: MlpNet, x):
    x = jnp.asarray(x)
    if x.shape[-1:] != (net.input_dim,):
        raise ShapeError(f"network expects input dim {net.input_dim}, got shape {x.shape}")
    h = x
    last = len(net.layers) - 1
    for i, (W, b) in enumerate(net.layers):
        h = h @ W.T + b
        h = _activate(net.out_activation if i == last else net.activation, h, net.knot)
    return h


def input_gradient(F: Callable, x):
    """Exact gradient of scalar ``F`` at ``x`` (reverse mode)."""
    return jax.grad(F)(jnp.asarray(x, dtype=jnp.float64))


def input_hessian(F: Callable, x):
    """Exact Hessian of scalar ``F`` at ``x``: forward-mode over the reverse-mode gradient."""
    return jax.jacfwd(jax.grad(F))(jnp.asarray(x, dtype=jnp.float64))


def param_gradient(per_sample_loss: Callable, params):
    """Mean of ``per_sample_loss(params)`` and its gradient w.r.t. every leaf of ``params``.

    ``per_sample_loss`` returns one loss term per sample; the first non-finite
    term is reported by index.
    """

    def total(p):
        terms = per_sample_loss(p)
        return jnp.mean(terms), terms

    (value, terms), grads = jax.value_and_grad(total, has_aux=True)(params)
    check_finite_loss(value, terms)
    return float(value), grads


def check_finite_loss(value, terms):
    if not np.isfinite(float(value)):
        bad = np.flatnonzero(~np.isfinite(np.asarray(terms)))
        index = int(bad[0]) if bad.size else None
        raise NonFiniteLossError(f"non-finite loss (first bad sample: {index})", index=index)


# --- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: object
    v: object
    step: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(m=zeros, v=zeros, step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


@jax.jit
def _adam_update(params, grads, m, v, step, lr, beta1, beta2, eps):
    m = jax.tree_util.tree_map(lambda m_, g: beta1 * m_ + (1 - beta1) * g, m, grads)
    v = jax.tree_util.tree_map(lambda v_, g: beta2 * v_ + (1 - beta2) * g * g, v, grads)
    c1 = 1 - beta1**step
    c2 = 1 - beta2**step
    params = jax.tree_util.tree_map(
        lambda p, m_, v_: p - lr * (m_ / c1) / (jnp.sqrt(v_ / c2) + eps), params, m, v
    )
    return params, m, v


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if jax.tree_util.tree_structure(params) != jax.tree_util.tree_structure(grads):
        raise ShapeError("gradient tree does not match parameter tree")
    step = state.step + 1
    new_params, m, v = _adam_update(
        params, grads, state.m, state.v, step, state.lr, state.beta1, state.beta2, state.eps
    )
    new_state = AdamState(m, v, step, state.lr, state.beta1, state.beta2, state.eps)
    return new_params, new_state


# --- Lipschitz bound -----------------------------------------------------------

_ACT_LIPSCHITZ = {"tanh": 1.0, "smoothed_relu": 1.0, "identity": 1.0}


def spectral_norm(W) -> float:
    """Largest singular value of ``W``."""
    return float(np.linalg.norm(np.asarray(W, dtype=float), 2))


def lipschitz_upper_bound(net: MlpNet) -> float:
    """Product of layer spectral norms times activation Lipschitz constants."""
    bound = 1.0
    last = len(net.layers) - 1
    for i, (W, _) in enumerate(net.layers):
        act = net.out_activation if i == last else net.activation
        bound *= spectral_norm(W) * _ACT_LIPSCHITZ[act]
    return bound


# --- serialization -------------------------------------------------------------


def net_to_dict(net: MlpNet) -> dict:
    return {
        "arch": net.arch,
        "activation": net.activation,
        "out_activation": net.out_activation,
        "d_knot": net.knot,
        "layers": [
            {"W": np.asarray(W, dtype=float).ravel().tolist(), "b": np.asarray(b, dtype=float).tolist()}
            for W, b in net.layers
        ],
    }


def net_from_dict(data: dict) -> MlpNet:
    arch = data["arch"]
    if len(data["layers"]) != len(arch) - 1:
        raise ShapeError("arch does not match number of layers")
    layers = []
    for (fan_in, fan_out), layer in zip(zip(arch[:-1], arch[1:]), data["layers"]):
        W = np.asarray(layer["W"], dtype=float).reshape(fan_out, fan_in)
        b = np.asarray(layer["b"], dtype=float)
        layers.append((jnp.asarray(W), jnp.asarray(b)))
    return MlpNet(
        tuple(layers),
        data.get("activation", "tanh"),
        float(data.get("d_knot", DEFAULT_KNOT)),
        data.get("out_activation", "identity"),
    ).validate()


def save_net(net: MlpNet, path) -> None:
    with open(path, "w") as fh:
        json.dump(net_to_dict(net), fh)


def load_net(path) -> MlpNet:
    with open(path) as fh:
        return net_from_dict(json.load(fh))
