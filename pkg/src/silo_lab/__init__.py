"""Desk-scale lab for latent-diffusion inverse problems.

Modules: ``tensor`` (gradient tape), ``data`` (synthetic images), ``codec``
(PCA autoencoder), ``diffusion`` (schedule, denoisers), ``degradations``,
``operator`` (learned latent degradation), ``solvers``, ``metrics``,
``config``/``checkpoint``/``cli`` (pipeline plumbing).
"""

__version__ = "0.1.0"
