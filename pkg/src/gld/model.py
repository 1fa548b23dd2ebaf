"""Material parameters and the Landau polynomial machinery.

The free-energy density per polarization component is the even sextic
F(p) = alpha*p^2 + beta*p^4 + gamma*p^6.  The semi-implicit scheme splits F
into a difference of convex parts F = F+ - F- by taking positive/negative
parts of each coefficient.  All evaluation functions accept scalars or
numpy arrays.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "ComponentProperty",
    "ComponentParams",
    "MaterialParams",
    "SplitCoefficients",
    "UniquenessStatus",
    "landau_F",
    "dF_times_p",
    "split",
    "dF_plus",
    "dF_minus",
    "d2F_plus",
    "d2F_minus",
    "check_uniqueness_conditions",
]


class ComponentProperty(Enum):
    FE = "fe"
    DIELECTRIC = "dielectric"


class UniquenessStatus(Enum):
    SATISFIED = "satisfied"
    VIOLATED = "violated"
    NOT_APPLICABLE = "not_applicable"


@dataclass(frozen=True)
class ComponentParams:
    """Landau coefficients and dynamics constants of one component."""

    alpha: float
    beta: float = 0.0
    gamma: float = 0.0
    g: float = 0.0
    rho_v: float = 0.0
    prop: ComponentProperty = ComponentProperty.FE


@dataclass(frozen=True)
class MaterialParams:
    """Permittivity and per-component parameters (2 components in 2D)."""

    epsilon: float
    components: tuple

    def __post_init__(self):
        errors = []
        if not self.epsilon > 0:
            errors.append(f"epsilon must be positive, got {self.epsilon}")
        for i, c in enumerate(self.components):
            if c.prop is ComponentProperty.DIELECTRIC:
                if not c.alpha > 0:
                    errors.append(f"component {i}: dielectric requires alpha > 0")
                if c.beta != 0 or c.gamma != 0 or c.g != 0:
                    errors.append(
                        f"component {i}: dielectric requires beta = gamma = g = 0")
                if c.rho_v != 0:
                    errors.append(f"component {i}: dielectric requires rho_v = 0")
            else:
                if not c.g > 0:
                    errors.append(f"component {i}: FE requires g > 0")
                if not (c.gamma > 0 or (c.gamma == 0 and c.beta > 0)):
                    errors.append(
                        f"component {i}: FE requires gamma > 0, or gamma = 0 with beta > 0")
                if c.gamma < 0:
                    errors.append(f"component {i}: gamma must be >= 0")
                if not c.rho_v > 0:
                    errors.append(f"component {i}: FE requires rho_v > 0")
        if errors:
            raise ConfigurationError(errors)

    @property
    def dim(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class SplitCoefficients:
    """Positive/negative parts of (alpha, beta, gamma) per component.

    plus[i] - minus[i] reproduces the original coefficients exactly and all
    entries are nonnegative.
    """

    plus: tuple  # of (a+, b+, c+) triples
    minus: tuple


def landau_F(params: MaterialParams, component: int, p):
    """Energy density alpha*p^2 + beta*p^4 + gamma*p^6."""
    c = params.components[component]
    p2 = np.square(p)
    return p2 * (c.alpha + p2 * (c.beta + p2 * c.gamma))


def dF_times_p(params: MaterialParams, component: int, p):
    """d/dp of landau_F: 2*alpha*p + 4*beta*p^3 + 6*gamma*p^5."""
    c = params.components[component]
    p2 = np.square(p)
    return p * (2.0 * c.alpha + p2 * (4.0 * c.beta + p2 * 6.0 * c.gamma))


def split(params: MaterialParams) -> SplitCoefficients:
    """Componentwise positive/negative parts of the Landau coefficients."""
    plus, minus = [], []
    for c in params.components:
        plus.append((max(c.alpha, 0.0), max(c.beta, 0.0), max(c.gamma, 0.0)))
        minus.append((max(-c.alpha, 0.0), max(-c.beta, 0.0), max(-c.gamma, 0.0)))
    return SplitCoefficients(tuple(plus), tuple(minus))


def _d_sextic(coeffs, p):
    a, b, g = coeffs
    p2 = np.square(p)
    return p * (2.0 * a + p2 * (4.0 * b + p2 * 6.0 * g))


def _d2_sextic(coeffs, p):
    a, b, g = coeffs
    p2 = np.square(p)
    return 2.0 * a + p2 * (12.0 * b + p2 * 30.0 * g)


def dF_plus(params: MaterialParams, component: int, p):
    """Derivative of the convex part F+."""
    return _d_sextic(split(params).plus[component], p)


def dF_minus(params: MaterialParams, component: int, p):
    """Derivative of the convex part F-."""
    return _d_sextic(split(params).minus[component], p)


def d2F_plus(params: MaterialParams, component: int, p):
    """Second derivative of F+; nonnegative for all p."""
    return _d2_sextic(split(params).plus[component], p)


def d2F_minus(params: MaterialParams, component: int, p):
    """Second derivative of F-; nonnegative for all p."""
    return _d2_sextic(split(params).minus[component], p)


def check_uniqueness_conditions(params: MaterialParams):
    """Sufficient convexity conditions for uniqueness, per component.

    A ferroelectric component satisfies the check when the quadratic
    30*gamma*t^2 + 12*beta*t + 2*alpha is strictly positive for t > 0,
    i.e. when (alpha > 0 and beta > 0) or
    (gamma > 0 and beta < 0 and 3*beta^2/(5*gamma) < alpha).
    Dielectric components are not applicable.
    """
    report = []
    for c in params.components:
        if c.prop is ComponentProperty.DIELECTRIC:
            report.append(UniquenessStatus.NOT_APPLICABLE)
            continue
        ok = (c.alpha > 0 and c.beta > 0) or (
            c.gamma > 0 and c.beta < 0 and 3.0 * c.beta**2 / (5.0 * c.gamma) < c.alpha)
        report.append(UniquenessStatus.SATISFIED if ok else UniquenessStatus.VIOLATED)
    return report
