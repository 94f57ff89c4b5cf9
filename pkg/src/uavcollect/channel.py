"""Air-to-ground LoS geometry and uplink link-budget calculations.

Angles at this module's boundary are in degrees: the sigmoid constants of the
LoS-probability model are calibrated for degree-valued elevation angles.
Distances are in meters and powers in linear watts unless a name says dB
(interpreted as dBW).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from scipy.special import erfcinv

SPEED_OF_LIGHT = 2.998e8  # m/s


class GroundPosition(NamedTuple):
    """Planar device location, meters."""

    x: float
    y: float


class UavPosition(NamedTuple):
    """UAV location, meters; ``h`` is altitude above the ground plane."""

    x: float
    y: float
    h: float


@dataclass(frozen=True)
class ChannelParams:
    """Environment constants of the air-to-ground channel.

    Parameters
    ----------
    psi, beta:
        Constants of the elevation-angle sigmoid for the LoS probability.
        They depend on carrier frequency and environment type; the defaults
        are the urban values at 2 GHz.
    f_c:
        Carrier frequency, Hz.
    alpha:
        Path-loss exponent for LoS propagation (dimensionless).
    eta:
        Excess path loss added to free space, dB.
    epsilon:
        LoS-probability threshold in (0, 1) a device must meet to be
        considered connectable to a UAV.
    c:
        Speed of light, m/s (fixed constant).
    """

    psi: float = 11.95
    beta: float = 0.14
    f_c: float = 2e9
    alpha: float = 2.0
    eta: float = 5.0
    epsilon: float = 0.95
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if self.psi <= 0:
            raise ValueError(f"psi must be positive, got {self.psi}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.f_c <= 0:
            raise ValueError(f"f_c must be positive, got {self.f_c}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class LinkParams:
    """Uplink budget constants.

    ``delta`` is the target bit error rate in (0, 0.5], ``r_b`` the bit rate
    in bit/s, ``n_o`` the noise power spectral density in W/Hz, and
    ``bandwidth`` the per-device bandwidth in Hz (carried for configuration
    completeness; the minimum-power formula does not use it).
    """

    delta: float = 1e-8
    r_b: float = 2e5
    n_o: float = 1e-20
    bandwidth: float = 2e5

    def __post_init__(self):
        if not 0.0 < self.delta <= 0.5:
            raise ValueError(f"delta must lie in (0, 0.5], got {self.delta}")
        if self.r_b <= 0:
            raise ValueError(f"r_b must be positive, got {self.r_b}")
        if self.n_o <= 0:
            raise ValueError(f"n_o must be positive, got {self.n_o}")
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


#: Urban environment at 2 GHz; the default simulation setting.
URBAN_CHANNEL = ChannelParams()

#: Default uplink budget (QPSK at BER 1e-8, 200 kbps, -170 dBm/Hz noise).
DEFAULT_LINK = LinkParams()


def los_probability(theta_deg: float, params: ChannelParams) -> float:
    """LoS probability at elevation angle ``theta_deg`` (degrees, in (0, 90]).

    Strictly increasing in the elevation angle: the closer a device is to
    being directly under the UAV, the more likely an unobstructed path.
    """
    if not 0.0 < theta_deg <= 90.0:
        raise ValueError(f"elevation angle must lie in (0, 90] degrees, got {theta_deg}")
    return 1.0 / (1.0 + params.psi * math.exp(-params.beta * (theta_deg - params.psi)))


def min_elevation_angle(params: ChannelParams) -> float:
    """Smallest elevation angle (degrees) whose LoS probability meets ``epsilon``.

    Closed-form inversion of the LoS sigmoid. Raises if the threshold exceeds
    the LoS probability at 90 degrees, where no angle can achieve it.
    """
    ceiling = los_probability(90.0, params)
    if params.epsilon >= ceiling:
        raise ValueError(
            f"LoS threshold {params.epsilon} is unachievable: "
            f"probability at 90 degrees is only {ceiling:.6f}"
        )
    return params.psi - math.log((1.0 - params.epsilon) / (params.epsilon * params.psi)) / params.beta


def max_los_radius(h: float, theta_min_deg: float) -> float:
    """Maximum 3D distance (meters) at which the LoS constraint holds.

    A device farther than ``h / sin(theta_min)`` from a UAV at altitude ``h``
    sees it under an elevation angle below ``theta_min_deg``.
    """
    if h < 0:
        raise ValueError(f"altitude must be nonnegative, got {h}")
    if not 0.0 < theta_min_deg <= 90.0:
        raise ValueError(f"theta_min must lie in (0, 90] degrees, got {theta_min_deg}")
    return h / math.sin(math.radians(theta_min_deg))


def distance_3d(device: GroundPosition, uav: UavPosition) -> float:
    """Euclidean distance (meters) between a ground device and a UAV."""
    return math.sqrt((device.x - uav.x) ** 2 + (device.y - uav.y) ** 2 + uav.h**2)


def elevation_angle_deg(device: GroundPosition, uav: UavPosition) -> float:
    """Elevation angle (degrees) under which the device sees the UAV."""
    d = distance_3d(device, uav)
    if d <= 0.0:
        raise ValueError("device and UAV coincide; elevation angle undefined")
    return math.degrees(math.asin(min(1.0, uav.h / d)))


def received_power_db(p_t_db: float, d: float, params: ChannelParams) -> float:
    """Received signal power in dB for transmit power ``p_t_db`` at distance ``d``.

    Free-space loss with exponent ``alpha`` plus the excess loss ``eta``.
    Exposed for diagnostics; the optimization path works in linear watts.
    """
    if d <= 0:
        raise ValueError(f"distance must be positive, got {d}")
    return p_t_db - 10.0 * params.alpha * math.log10(4.0 * math.pi * params.f_c * d / params.c) - params.eta


def inverse_q(p: float) -> float:
    """Inverse of the Gaussian tail function Q(x) = 0.5*erfc(x/sqrt(2))."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"inverse_q defined on (0, 1), got {p}")
    return math.sqrt(2.0) * float(erfcinv(2.0 * p))


def power_law_coefficient(link: LinkParams, ch: ChannelParams) -> float:
    """Coefficient ``k`` of the minimum-power law P(d) = k * d^2, in W/m^2.

    Quadratic dependence on distance is exact for the LoS exponent 2, so the
    total power of a device set is this coefficient times its total squared
    distance to the serving UAVs.
    """
    q = inverse_q(link.delta)
    return q * q * (link.r_b * link.n_o / 2.0) * 10.0 ** (ch.eta / 10.0) * (4.0 * math.pi * ch.f_c / ch.c) ** 2


def min_transmit_power(d: float, link: LinkParams, ch: ChannelParams) -> float:
    """Minimum transmit power (watts) for a QPSK uplink at distance ``d`` meters.

    The smallest power meeting the bit-error-rate target ``link.delta`` given
    the bit rate, noise density, and LoS path loss. At delta = 0.5 the
    required power is exactly zero (a coin flip needs no signal).
    """
    if d <= 0:
        raise ValueError(f"distance must be positive, got {d}")
    return power_law_coefficient(link, ch) * d * d
