"""Numerical laboratory for fast-slow partially hyperbolic torus maps.

The map under study is F_eps(x, theta) = (f(x, theta), theta + eps*omega(x,
theta)) mod 1 with uniformly expanding fibre maps f(., theta).  The package
computes the constructive objects attached to such systems (invariant fibre
densities, averaged drift, invariant slope fields, expansion factors,
standard pairs and patches) and runs the statistical experiments that probe
their quantitative behaviour (central Lyapunov exponents, sink
localization, decay of correlations, total-variation contraction).
"""

from .errors import FastslowError
from .reference import mostly_expanding_reference, scan_system, sys_a, sys_b
from .system import FastSlowSystem, load_system, save_system, system_from_toml, system_to_toml
from .trig import TrigPoly2

__all__ = [
    "FastslowError",
    "FastSlowSystem",
    "TrigPoly2",
    "load_system",
    "save_system",
    "system_from_toml",
    "system_to_toml",
    "sys_a",
    "sys_b",
    "scan_system",
    "mostly_expanding_reference",
]

__version__ = "0.1.0"
