"""Numerical maximum principle for control systems driven by fractional Brownian motion.

Modules: ``grid`` (time grids and paths), ``frac`` (fractional calculus),
``fbm`` (fBm generation), ``fbm_ops`` (Malliavin operators), ``dynamics``
(controlled SDEs), ``adjoint`` (adjoint pairs and gradients),
``max_principle`` (residuals and optimizer), ``mc`` (ensembles and
regression), ``experiments`` and ``cli``.
"""

__version__ = "0.1.0"
