"""Stochastic controllers u: R^d -> R^{d x r} with u(0) = 0.

Three shapes are supported:

* ``shift``  - u(x) = NN(x) - NN(0), the net emitting d*r values reshaped row-major;
* ``diag``   - u(x) = diag(x) NN(x), requires r = d;
* ``linear`` - u(x) = k x (a column when r = 1, k diag(x) when r = d).

Rows switched off by ``pin_mask`` are identically zero (pinning control).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .diffnet import DEFAULT_KNOT, MlpNet, init_mlp, mlp_forward, net_from_dict, net_to_dict
from .errors import ConfigurationError, ShapeError

KINDS = ("shift", "diag", "linear")


@functools.partial(
    jax.tree_util.register_dataclass,
    data_fields=["net", "k"],
    meta_fields=["kind", "d", "r", "pin_mask"],
)
@dataclass(frozen=True)
class Controller:
    kind: str
    d: int
    r: int
    net: MlpNet | None = None
    k: object = None
    pin_mask: tuple | None = None

    def validate(self) -> "Controller":
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown controller kind {self.kind!r}")
        if self.pin_mask is not None and len(self.pin_mask) != self.d:
            raise ConfigurationError("pin_mask length must equal d")
        if self.kind == "diag":
            if self.r != self.d:
                raise ConfigurationError(f"diag controller needs r == d, got d={self.d}, r={self.r}")
            if self.net.input_dim != self.d or self.net.output_dim != self.d:
                raise ShapeError("diag controller net must map R^d -> R^d")
        elif self.kind == "shift":
            if self.net.input_dim != self.d or self.net.output_dim != self.d * self.r:
                raise ShapeError("shift controller net must map R^d -> R^{d*r}")
        else:
            if self.r not in (1, self.d):
                raise ConfigurationError("linear controller needs r == 1 or r == d")
            k = np.asarray(self.k, dtype=float)
            if k.shape not in ((), (self.d, self.d)):
                raise ShapeError("linear gain must be a scalar or a d x d matrix")
        return self

    def __call__(self, x):
        return control_eval(self, x)


def neural_shift(d, r=1, hidden=(32,), seed=0, activation="tanh", pin_mask=None, knot=DEFAULT_KNOT) -> Controller:
    net = init_mlp([d, *hidden, d * r], activation=activation, seed=seed, knot=knot)
    return Controller("shift", d, r, net=net, pin_mask=_mask(pin_mask)).validate()


def neural_diag(d, hidden=(32,), seed=0, activation="tanh", pin_mask=None, knot=DEFAULT_KNOT) -> Controller:
    net = init_mlp([d, *hidden, d], activation=activation, seed=seed, knot=knot)
    return Controller("diag", d, d, net=net, pin_mask=_mask(pin_mask)).validate()


def linear(k, d=1, r=1, pin_mask=None) -> Controller:
    return Controller("linear", d, r, k=jnp.asarray(k, dtype=jnp.float64), pin_mask=_mask(pin_mask)).validate()


def quadratic_diag(c, d=1, pin_mask=None) -> Controller:
    """u(x) = diag(c * x_i^2): a diag controller whose net is the linear map x -> c x."""
    net = MlpNet(((c * jnp.eye(d), jnp.zeros(d)),), activation="identity")
    return Controller("diag", d, d, net=net, pin_mask=_mask(pin_mask)).validate()


def _mask(pin_mask):
    return None if pin_mask is None else tuple(bool(p) for p in pin_mask)


def control_eval(u: Controller, x):
    """Evaluate u at a single state ``x`` (shape (d,)); returns a (d, r) matrix."""
    x = jnp.asarray(x)
    if x.shape != (u.d,):
        raise ShapeError(f"controller expects state of shape ({u.d},), got {x.shape}")
    if u.kind == "shift":
        out = (mlp_forward(u.net, x) - mlp_forward(u.net, jnp.zeros_like(x))).reshape(u.d, u.r)
    elif u.kind == "diag":
        if u.r != u.d:
            raise ConfigurationError("diag controller needs r == d")
        out = jnp.diag(x * mlp_forward(u.net, x))
    else:
        kx = u.k @ x if jnp.ndim(u.k) == 2 else u.k * x
        out = kx[:, None] if u.r == 1 else jnp.diag(kx)
    if u.pin_mask is not None:
        out = out * jnp.asarray(u.pin_mask, dtype=out.dtype)[:, None]
    return out


def control_energy_density(u: Controller, x):
    """Squared Frobenius norm of u(x)."""
    return jnp.sum(control_eval(u, x) ** 2)


# --- serialization -------------------------------------------------------------


def controller_to_dict(u: Controller) -> dict:
    data = {
        "controller_kind": u.kind,
        "d": u.d,
        "r": u.r,
        "pin_mask": None if u.pin_mask is None else list(u.pin_mask),
    }
    if u.kind == "linear":
        k = np.asarray(u.k, dtype=float)
        data["k"] = k.tolist()
    else:
        data["net"] = net_to_dict(u.net)
    return data


def controller_from_dict(data: dict) -> Controller:
    kind = data["controller_kind"]
    net = net_from_dict(data["net"]) if "net" in data else None
    k = jnp.asarray(data["k"], dtype=jnp.float64) if kind == "linear" else None
    return Controller(kind, int(data["d"]), int(data["r"]), net=net, k=k, pin_mask=_mask(data.get("pin_mask"))).validate()
