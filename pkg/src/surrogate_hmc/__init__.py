"""Hamiltonian Monte Carlo accelerated by a random-basis surrogate potential.

Modules
-------
models
    Posterior targets with analytic gradients, MAP search and Laplace fits.
surrogate
    Random softplus basis, online ridge score matching, regularized potential.
samplers
    HMC, surrogate-accelerated HMC (VHMC) and SGLD.
diagnostics
    ESS, running-moment errors, grid KL and score distances, Amari distance.
harness
    Run configuration, experiments and the command line interface.
"""

__version__ = "0.1.0"
