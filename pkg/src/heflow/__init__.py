"""Numerical Donaldson heat flow for Higgs bundles over flat complex tori."""

from .geometry import TorusGeometry, TwistedMatrixField, integrate, laplacian, poisson_solve
from .higgs import HiggsBundle, MetricState, phi, preset

__all__ = [
    "TorusGeometry",
    "TwistedMatrixField",
    "HiggsBundle",
    "MetricState",
    "integrate",
    "laplacian",
    "poisson_solve",
    "phi",
    "preset",
]

__version__ = "0.1.0"
