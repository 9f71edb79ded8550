"""Candidate Lyapunov functions and the generator of the controlled SDE.

Two constructions, both with V(0) = 0 and V(x) >= eps |x|^2:

* :class:`IcnnV` - sigma(g(F(x)) - g(F(0))) + eps |x|^2 with g an input convex
  network (positive U_i via softplus, smoothed-ReLU activations);
* :class:`QuadraticV` - x^T [eps I + M(x)^T M(x)] x, M(x) an m x d tanh network.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .diffnet import DEFAULT_KNOT, MlpNet, init_mlp, mlp_forward, net_from_dict, net_to_dict, smoothed_relu
from .errors import ConfigurationError, ShapeError
from .sde import controlled_coeffs

DEFAULT_EPS = 1e-3


@functools.partial(
    jax.tree_util.register_dataclass,
    data_fields=["W", "b", "U_raw"],
    meta_fields=["knot", "eps", "inner"],
)
@dataclass(frozen=True)
class IcnnV:
    """``W[i]``/``b[i]`` act on the input for every layer; ``U_raw[i-1]`` (softplus'd)
    maps layer i-1 activations into layer i for i >= 1.  The last layer has width 1."""

    W: tuple
    b: tuple
    U_raw: tuple
    knot: float = DEFAULT_KNOT
    eps: float = DEFAULT_EPS
    inner: Callable | None = None

    @property
    def d(self) -> int:
        return int(self.W[0].shape[1])

    def inner_g(self, x):
        z = smoothed_relu(self.W[0] @ x + self.b[0], self.knot)
        for W, b, U in zip(self.W[1:], self.b[1:], self.U_raw):
            z = smoothed_relu(jax.nn.softplus(U) @ z + W @ x + b, self.knot)
        return z[0]

    def __call__(self, x):
        x = jnp.asarray(x)
        F = (lambda v: v) if self.inner is None else self.inner
        shift = self.inner_g(F(x)) - self.inner_g(F(jnp.zeros_like(x)))
        return smoothed_relu(shift, self.knot) + self.eps * jnp.sum(x * x)


@functools.partial(
    jax.tree_util.register_dataclass,
    data_fields=["net"],
    meta_fields=["eps", "m"],
)
@dataclass(frozen=True)
class QuadraticV:
    net: MlpNet
    eps: float = DEFAULT_EPS
    m: int = 1

    @property
    def d(self) -> int:
        return self.net.input_dim

    def __call__(self, x):
        x = jnp.asarray(x)
        M = mlp_forward(self.net, x).reshape(self.m, self.d)
        Mx = M @ x
        return self.eps * jnp.sum(x * x) + jnp.sum(Mx * Mx)


def init_icnn(d, hidden=(32, 32), seed=0, knot=DEFAULT_KNOT, eps=DEFAULT_EPS, inner=None) -> IcnnV:
    if not eps > 0:
        raise ConfigurationError("eps must be positive")
    rng = np.random.default_rng(seed)
    widths = [*hidden, 1]
    W, b, U = [], [], []
    prev = None
    for width in widths:
        bound = 1.0 / np.sqrt(d if prev is None else prev + d)
        W.append(jnp.asarray(rng.uniform(-bound, bound, (width, d))))
        b.append(jnp.asarray(rng.uniform(-bound, bound, width)))
        if prev is not None:
            U.append(jnp.asarray(rng.uniform(-bound, bound, (width, prev))))
        prev = width
    return IcnnV(tuple(W), tuple(b), tuple(U), float(knot), float(eps), inner)


def init_quadratic(d, hidden=(32, 32), m=None, seed=0, eps=DEFAULT_EPS) -> QuadraticV:
    if not eps > 0:
        raise ConfigurationError("eps must be positive")
    m = d if m is None else int(m)
    net = init_mlp([d, *hidden, m * d], activation="tanh", seed=seed)
    return QuadraticV(net, float(eps), m)


def lyap_value(V, x):
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape != (V.d,):
        raise ShapeError(f"Lyapunov function expects shape ({V.d},), got {x.shape}")
    return V(x)


def lyap_grad_hess(V, x):
    """Exact (grad V(x), Hessian V(x))."""
    x = jnp.asarray(x, dtype=jnp.float64)
    grad = jax.grad(V)
    return grad(x), jax.jacfwd(grad)(x)


def generator_terms(V, sys, u, x):
    """(V, LV, |grad V^T g_u|^2) at one state; V is evaluated in target coordinates."""
    e, fe, gu, _ = controlled_coeffs(sys, u, x)
    v = V(e)
    dv, hv = lyap_grad_hess(V, e)
    lv = dv @ fe + 0.5 * jnp.sum((gu @ gu.T) * hv)
    row = dv @ gu
    return v, lv, jnp.sum(row * row)


def generator_LV(V, sys, u, x):
    """grad V . f + 1/2 trace(g_u g_u^T Hess V) with g_u = g + u."""
    return generator_terms(V, sys, u, jnp.asarray(x, dtype=jnp.float64))[1]


# --- serialization -------------------------------------------------------------


def lyapunov_to_dict(V) -> dict:
    if isinstance(V, QuadraticV):
        return {"lyapunov_kind": "quadratic", "eps": V.eps, "m": V.m, "net": net_to_dict(V.net)}
    if V.inner is not None:
        raise ConfigurationError("only the identity inner map can be serialised")
    return {
        "lyapunov_kind": "icnn",
        "eps": V.eps,
        "d_knot": V.knot,
        "arch": [V.d] + [int(W.shape[0]) for W in V.W],
        "layers": [
            {
                "W": np.asarray(W, dtype=float).ravel().tolist(),
                "b": np.asarray(b, dtype=float).tolist(),
                **({"U_raw": np.asarray(V.U_raw[i - 1], dtype=float).ravel().tolist()} if i else {}),
            }
            for i, (W, b) in enumerate(zip(V.W, V.b))
        ],
    }


def lyapunov_from_dict(data: dict):
    kind = data["lyapunov_kind"]
    if kind == "quadratic":
        return QuadraticV(net_from_dict(data["net"]), float(data["eps"]), int(data["m"]))
    if kind != "icnn":
        raise ConfigurationError(f"unknown lyapunov_kind {kind!r}")
    arch = data["arch"]
    d = arch[0]
    W, b, U = [], [], []
    for i, layer in enumerate(data["layers"]):
        width = arch[i + 1]
        W.append(jnp.asarray(np.asarray(layer["W"], dtype=float).reshape(width, d)))
        b.append(jnp.asarray(np.asarray(layer["b"], dtype=float)))
        if i:
            U.append(jnp.asarray(np.asarray(layer["U_raw"], dtype=float).reshape(width, arch[i])))
    return IcnnV(tuple(W), tuple(b), tuple(U), float(data["d_knot"]), float(data["eps"]))
