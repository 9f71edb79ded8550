import jax.numpy as jnp
import numpy as np

from nsc.sde import SdeSystem


def scalar_system(f, g=lambda x: 0.0 * x, label="toy"):
    """1-D system from scalar callables (broadcast over a shape-(1,) state)."""
    return SdeSystem(1, 1, lambda x: f(x), lambda x: jnp.reshape(g(x), (1, 1)), label)


def central_grad(F, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (float(F(x + e)) - float(F(x - e))) / (2 * h)
    return out


def central_hessian(F, x, h=1e-4):
    """Hessian by central differences of function values (fourth-point stencil)."""
    x = np.asarray(x, dtype=float)
    d = x.size
    H = np.empty((d, d))
    E = np.eye(d) * h
    for i in range(d):
        for j in range(d):
            H[i, j] = (
                float(F(x + E[i] + E[j])) - float(F(x + E[i] - E[j])) - float(F(x - E[i] + E[j])) + float(F(x - E[i] - E[j]))
            ) / (4 * h * h)
    return H


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))

