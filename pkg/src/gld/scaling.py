"""Nondimensionalization of SI inputs.

The raw SI Landau coefficients (gamma ~ 1e15) span ~20 orders of magnitude
against the permittivity, which would make the Newton systems hopelessly
ill-conditioned in double precision.  All SI quantities are therefore
rescaled by characteristic values before discretization:

    L0 = diam(Omega)  (bounding-box diagonal, m)
    t0 = T            (final time, s)
    P0 = 1 C/m^2
    V0 = L0 * P0 / epsilon

With these choices the rescaled permittivity is 1, the domain diagonal is 1
and the stabilization constants become tau_V = tau_P = 1.  Outputs are
converted back to SI by the inverse factors.
"""

import math
from dataclasses import dataclass

from .model import ComponentParams, MaterialParams

__all__ = ["Scaling", "identity_scaling", "scaling_for", "nondimensionalize"]


@dataclass(frozen=True)
class Scaling:
    """Characteristic scales; every field stores the SI value of one unit."""

    length: float
    time: float
    polarization: float
    voltage: float
    epsilon: float

    # conversions SI -> nondimensional
    def bias(self, volts):
        return volts / self.voltage

    def charge_density(self, rho_si):
        """Volume charge density rho -> rho * L0 / P0."""
        return rho_si * self.length / self.polarization

    def time_nd(self, seconds):
        return seconds / self.time

    def length_nd(self, meters):
        return meters / self.length

    # conversions nondimensional -> SI
    @property
    def energy_density_factor(self) -> float:
        """Energy per volume: one nondimensional unit in J/m^3."""
        return self.polarization**2 / self.epsilon

    @property
    def displacement_factor(self) -> float:
        """Line-integrated displacement flux: one unit in C/m."""
        return self.polarization * self.length

    @property
    def electric_field_factor(self) -> float:
        return self.voltage / self.length


def identity_scaling() -> Scaling:
    """No-op scaling for problems already posed in O(1) units."""
    return Scaling(1.0, 1.0, 1.0, 1.0, 1.0)


def scaling_for(params: MaterialParams, width: float, height: float,
                final_time: float) -> Scaling:
    """Characteristic scales for an SI problem on a width x height domain."""
    length = math.hypot(width, height)
    polarization = 1.0
    voltage = length * polarization / params.epsilon
    return Scaling(length, final_time, polarization, voltage, params.epsilon)


def nondimensionalize(params: MaterialParams, scaling: Scaling) -> MaterialParams:
    """Material parameters in the rescaled unit system.

    Derivation: divide the polarization equation by V0/L0 (the scale of
    grad V) and the Poisson equation by P0/L0; each Landau coefficient then
    picks up a factor epsilon * P0^(2n) and the gradient/viscosity constants
    pick up epsilon/L0^2 and epsilon/t0.
    """
    eps, L0, t0 = scaling.epsilon, scaling.length, scaling.time
    P0 = scaling.polarization
    comps = []
    for c in params.components:
        comps.append(ComponentParams(
            alpha=c.alpha * eps,
            beta=c.beta * eps * P0**2,
            gamma=c.gamma * eps * P0**4,
            g=c.g * eps / L0**2,
            rho_v=c.rho_v * eps / t0,
            prop=c.prop,
        ))
    return MaterialParams(epsilon=params.epsilon / eps, components=tuple(comps))
