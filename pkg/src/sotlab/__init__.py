"""sotlab: a desk-scale numerical laboratory for stochastic optimal transport
with power costs |u|^r.

Submodules: measures (P, Q representations), transport (Monge-Kantorovich
costs), kernels (closed-form transition densities), schrodinger (static
entropic projection), sde (pinned-bridge simulation and cost functionals),
bounds (inequality suite and rate fits), cli (batch experiment runner).
"""

__version__ = "0.1.0"

from . import errors, measures, kernels, transport, schrodinger, sde, bounds, cli  # noqa: F401
