"""Benchmark systems, each shifted so that the control target sits at 0."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import jax.numpy as jnp
import numpy as np

from .errors import ConfigurationError
from .sde import SdeSystem


def _xlogabs(x):
    # continuous extension x log|x| -> 0 at x = 0
    safe = jnp.where(x == 0.0, 1.0, x)
    return jnp.where(x == 0.0, 0.0, x * jnp.log(jnp.abs(safe)))


def make_prop1() -> SdeSystem:
    """dx = x log|x| dt (+ control), the system with no stabilising linear controller."""
    return SdeSystem(
        d=1,
        r=1,
        f=_xlogabs,
        g=lambda x: jnp.zeros((1, 1), dtype=x.dtype),
        label="prop1",
    )


def make_example1() -> SdeSystem:
    def f(x):
        return jnp.stack([x[1], -2.0 * x[0] - x[1]])

    def g(x):
        return jnp.stack([jnp.zeros_like(x[0]), x[0]])[:, None]

    return SdeSystem(d=2, r=1, f=f, g=g, label="example1")


def make_harmonic(w2=1.0, beta=0.5, zeta1=-3.0, zeta2=2.15, channels=1) -> SdeSystem:
    """Damped oscillator y'' + (2 beta + xi2) y' + (w2 + xi1) y = 0 with white-noise
    coefficient perturbations xi_i = zeta_i * noise, state (y, y').

    ``channels=1`` drives both perturbations by one Brownian motion,
    g = (0, -(zeta1 y + zeta2 y'))^T; ``channels=2`` uses independent ones.
    """
    if not beta > 0:
        raise ConfigurationError("damping beta must be positive")

    def f(x):
        return jnp.stack([x[1], -w2 * x[0] - 2.0 * beta * x[1]])

    if channels == 1:

        def g(x):
            return jnp.stack([jnp.zeros_like(x[0]), -(zeta1 * x[0] + zeta2 * x[1])])[:, None]

    elif channels == 2:

        def g(x):
            z = jnp.zeros_like(x[0])
            return jnp.stack([jnp.stack([z, z]), jnp.stack([-zeta1 * x[0], -zeta2 * x[1]])])

    else:
        raise ConfigurationError("channels must be 1 or 2")
    params = dict(w2=w2, beta=beta, zeta1=zeta1, zeta2=zeta2, channels=channels)
    return SdeSystem(d=2, r=channels, f=f, g=g, label="harmonic", params=params)


def make_log1p() -> SdeSystem:
    """dx = x log(1 + x) dt on x > -1."""
    return SdeSystem(
        d=1,
        r=1,
        f=lambda x: x * jnp.log1p(x),
        g=lambda x: jnp.zeros((1, 1), dtype=x.dtype),
        label="log1p",
        domain=lambda x: bool(np.all(x > -1.0)),
    )


def make_stuart_single(beta=-25.0, gamma=1.0, mu=1.0) -> SdeSystem:
    """Radial deviation e = rho - rho* of Z' = (beta + i gamma + mu |Z|^2) Z.

    In polar form rho' = (beta + mu rho^2) rho and theta' = gamma; the limit cycle
    rho* = sqrt(-beta/mu) is the radial equilibrium e = 0.  Only e is exported;
    use :func:`stuart_to_cartesian` to rebuild (x, y).
    """
    if not (beta < 0 and mu > 0):
        raise ConfigurationError("need beta < 0 and mu > 0 for a limit cycle")
    rho_star = float(np.sqrt(-beta / mu))

    def f(x):
        rho = x + rho_star
        return (beta + mu * rho**2) * rho

    return SdeSystem(
        d=1,
        r=1,
        f=f,
        g=lambda x: jnp.zeros((1, 1), dtype=x.dtype),
        label="stuart-single",
        params=dict(beta=beta, gamma=gamma, mu=mu, rho_star=rho_star),
    )


def stuart_to_cartesian(e, theta, rho_star):
    rho = np.asarray(e) + rho_star
    return rho * np.cos(theta), rho * np.sin(theta)


def stuart_from_cartesian(x, y, rho_star):
    return np.hypot(x, y) - rho_star, np.arctan2(y, x)


def sync_projection(n: int) -> np.ndarray:
    """Deviation-from-mean operator on interleaved (Re Z_j, Im Z_j) coordinates."""
    P = np.eye(n) - np.full((n, n), 1.0 / n)
    return np.kron(P, np.eye(2))


def make_stuart_coupled(n=20, sigma=0.01, c1=-1.8, c2=4.0, channels=None) -> SdeSystem:
    """n diffusively coupled Stuart-Landau oscillators

        Z_j' = Z_j - (1 + i c2)|Z_j|^2 Z_j - sigma (1 + i c1) sum_k L_jk Z_k,
        L_jk = delta_jk - 1/n,

    in interleaved real coordinates.  The target is the synchronisation manifold,
    exposed through ``error_map`` (deviations Z_j - mean(Z)).  ``channels`` is the
    number of Brownian channels available to a controller (default n).
    """
    if n < 2:
        raise ConfigurationError("need at least two oscillators")
    r = n if channels is None else int(channels)
    laplacian = np.eye(n) - np.full((n, n), 1.0 / n)
    L = jnp.asarray(laplacian)

    def f(x):
        a, b = x[0::2], x[1::2]
        r2 = a**2 + b**2
        p, q = L @ a, L @ b
        da = a - r2 * (a - c2 * b) - sigma * (p - c1 * q)
        db = b - r2 * (b + c2 * a) - sigma * (q + c1 * p)
        return jnp.stack([da, db], axis=1).reshape(-1)

    return SdeSystem(
        d=2 * n,
        r=r,
        f=f,
        g=lambda x: jnp.zeros((2 * n, r), dtype=x.dtype),
        label="stuart-coupled",
        params=dict(n=n, sigma=sigma, c1=c1, c2=c2, laplacian=laplacian),
        error_map=sync_projection(n),
    )


def sync_error(x, n: int):
    """Mean modulus of Z_j - mean(Z) for states with trailing dimension 2n."""
    x = np.asarray(x)
    z = x[..., 0::2] + 1j * x[..., 1::2]
    return np.mean(np.abs(z - z.mean(axis=-1, keepdims=True)), axis=-1)


def make_gbm(a=0.5, b=1.0) -> SdeSystem:
    """Geometric Brownian motion with its exact solution x0 exp((a - b^2/2) t + b W_t)."""

    def exact(x0, t, W):
        return np.asarray(x0) * np.exp((a - 0.5 * b * b) * t + b * np.asarray(W))

    return SdeSystem(
        d=1,
        r=1,
        f=lambda x: a * x,
        g=lambda x: (b * x)[:, None],
        label="gbm",
        params=dict(a=a, b=b),
        exact=exact,
    )


@dataclass
class SystemSpec:
    name: str
    build: Callable
    defaults: dict = field(default_factory=dict)


CATALOGUE = {
    "prop1": SystemSpec("prop1", make_prop1),
    "example1": SystemSpec("example1", make_example1),
    "harmonic": SystemSpec(
        "harmonic", make_harmonic, dict(w2=1.0, beta=0.5, zeta1=-3.0, zeta2=2.15, channels=1)
    ),
    "log1p": SystemSpec("log1p", make_log1p),
    "stuart-single": SystemSpec("stuart-single", make_stuart_single, dict(beta=-25.0, gamma=1.0, mu=1.0)),
    "stuart-coupled": SystemSpec(
        "stuart-coupled", make_stuart_coupled, dict(n=20, sigma=0.01, c1=-1.8, c2=4.0, channels=None)
    ),
    "gbm": SystemSpec("gbm", make_gbm, dict(a=0.5, b=1.0)),
}


def get_system(name: str, **overrides) -> SdeSystem:
    """Build a catalogued system; ``overrides`` replace its default parameters."""
    try:
        spec = CATALOGUE[name]
    except KeyError:
        raise ConfigurationError(f"unknown system {name!r}; choose from {sorted(CATALOGUE)}") from None
    unknown = set(overrides) - set(spec.defaults)
    if unknown:
        raise ConfigurationError(f"{name} has no parameters {sorted(unknown)}")
    params = {**spec.defaults, **overrides}
    return spec.build(**params)


def parse_overrides(pairs) -> dict:
    """``["beta=0.3", "n=10"]`` -> ``{"beta": 0.3, "n": 10}``."""
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        try:
            num = float(value)
            out[key] = int(num) if num.is_integer() and "." not in value and "e" not in value.lower() else num
        except ValueError:
            out[key] = value
    return out
