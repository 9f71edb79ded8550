"""Neural stochastic controllers: train diffusion-term controllers that stabilize
unstable equilibria of SDEs, simulate the controlled systems, and evaluate
convergence-time / energy-cost bounds."""

import jax

# everything in this package assumes double precision
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
