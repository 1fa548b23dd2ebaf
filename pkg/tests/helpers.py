"""Shared test utilities."""

import numpy as np

from gld.model import ComponentParams, ComponentProperty, MaterialParams

MONOLAYER = dict(alpha=-1.54e9, beta=-2.65e12, gamma=2.6e15, g=1e-8,
                 rho_v=40.0)
EPS0 = 8.8541878128e-12


def monolayer_params():
    comp = ComponentParams(prop=ComponentProperty.FE, **MONOLAYER)
    return MaterialParams(epsilon=5.0 * EPS0, components=(comp, comp))


def unchecked(cls, **kw):
    """Frozen dataclass instance without validation (diagnostic regimes)."""
    obj = cls.__new__(cls)
    for key, val in kw.items():
        object.__setattr__(obj, key, val)
    return obj


def linear_material(epsilon=1.0, alpha=1.0, rho_v=1.0, g=1.0):
    """beta = gamma = 0: the implicit system is affine."""
    comp = unchecked(ComponentParams, alpha=alpha, beta=0.0, gamma=0.0, g=g,
                     rho_v=rho_v, prop=ComponentProperty.FE)
    return unchecked(MaterialParams, epsilon=epsilon, components=(comp, comp))


def random_fe_material(rng):
    comp = ComponentParams(
        alpha=float(rng.uniform(-2.0, 2.0)),
        beta=float(rng.uniform(-2.0, 2.0)),
        gamma=float(rng.uniform(0.1, 3.0)),
        g=float(rng.uniform(0.1, 2.0)),
        rho_v=float(rng.uniform(0.1, 2.0)),
        prop=ComponentProperty.FE)
    return MaterialParams(epsilon=float(rng.uniform(0.5, 2.0)),
                          components=(comp, comp))
