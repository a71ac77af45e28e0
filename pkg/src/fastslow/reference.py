"""Concrete systems used throughout the tests and demos.

SYS-A is the decoupled skew product f = 4x, omega = sin(2*pi*theta): every
object of interest has a closed form.  SYS-B adds mild coupling in both
coordinates.  The scan family couples theta into the fibre map strongly
enough that the fibre-averaged centre derivative at the sink can change
sign; `mostly_expanding_reference` pins the member found by scanning.
"""

from __future__ import annotations

import math

from .system import FastSlowSystem
from .trig import TrigPoly2


def sys_a(epsilon=0.01):
    """f = 4x, omega = sin(2 pi theta)."""
    return FastSlowSystem(
        4, TrigPoly2({}), TrigPoly2({(0, 1): (0.0, 1.0)}), epsilon
    )


def sys_b(epsilon=0.01):
    """f = 4x + 0.1 sin(2 pi (x+theta)), omega = sin(2 pi theta) + 0.5 cos(2 pi x)."""
    return FastSlowSystem(
        4,
        TrigPoly2({(1, 1): (0.0, 0.1)}),
        TrigPoly2({(0, 1): (0.0, 1.0), (1, 0): (0.5, 0.0)}),
        epsilon,
    )


def scan_system(a, phase, epsilon=0.01, fibre_degree=6, a_res=0.028, check_diffeo=True):
    """Member of the scan family.

    f = d*x + a*sin(2 pi (x+theta)) + a_res*sin(2 pi (d*x+theta)),
    omega = cos(2 pi (x + phase)).

    The resonant (d, 1) term survives the branch sum of the transfer
    operator and gives the invariant densities a theta-dependent first
    Fourier mode (hence a genuine sink/source pair for omega_bar), while
    the (1, 1) term tilts the centre slope field so that the product
    dx(omega) * s_* has a nonzero fibre average.  The phase rotates the
    sink position; `a` moves the centre-derivative average through zero.
    """
    c = math.cos(2 * math.pi * phase)
    s = math.sin(2 * math.pi * phase)
    return FastSlowSystem(
        fibre_degree,
        TrigPoly2({(1, 1): (0.0, a), (fibre_degree, 1): (0.0, a_res)}),
        # cos(2 pi x + 2 pi phase) = c*cos(2 pi x) - s*sin(2 pi x)
        TrigPoly2({(1, 0): (c, -s)}),
        epsilon,
        check_diffeo=check_diffeo,
    )


# Frozen coordinates of the mostly-expanding reference member; chosen by
# running the scan (see demos/05_scan_mostly_expanding.py) and picking a
# point with a comfortable positive margin at the sink.
REFERENCE_A = 0.25
REFERENCE_PHASE = 0.0


def mostly_expanding_reference(epsilon=0.01):
    return scan_system(REFERENCE_A, REFERENCE_PHASE, epsilon=epsilon)
