"""Mixed survival models for longevity data: discrete and continuous time
with a common Poisson-likelihood engine."""

__version__ = "0.1.0"
