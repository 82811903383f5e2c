"""Working coordinates for the kinetic curve.

Instead of rates and times, inference works with coordinates read off the
(s, u) plane: the steady-state coordinates (u_off, u_on, s_on) bounded by
``a``, the u-coordinate of the switching point instead of the ON duration,
and an angle ``phi`` in [0, 2*pi] instead of the elapsed time.  The angle
sweeps the induced branch on [0, (2*pi-p)/2), the repressed branch on
[(2*pi-p)/2, 2*pi-p), and a sector of amplitude ``p`` that maps exactly to
the lower steady state, carrying the point mass of the induced time prior.

Scalar operations wrap vectorized kernels (``positions_from_phi``,
``times_from_phi``) that the model and sampler share.  Everything here is
pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kinetics import EQUAL_RATE_TOL, Position, RateParams

__all__ = [
    "AlmondCoords",
    "AngularPosition",
    "coords_to_rates",
    "switching_u_to_omega",
    "phi_to_position",
    "position_to_time",
    "induced_time_logpdf",
    "induced_time_atom",
    "induced_omega_logpdf",
    "positions_from_phi",
    "times_from_phi",
]

TWO_PI = 2.0 * math.pi

# Default sector amplitude: a quarter turn, i.e. prior mass 1/8 on the
# steady state.  Exposed as configuration everywhere it is consumed.
DEFAULT_SECTOR_P = math.pi / 2.0


@dataclass(frozen=True)
class AlmondCoords:
    """Steady-state coordinates of one gene's kinetic curve.

    ``u_off``/``u_on`` are the unspliced coordinates of the lower and upper
    steady states, ``s_on`` the spliced coordinate of the upper one, all
    bounded by ``a``.  The spliced coordinate of the lower steady state is
    derived: sigma_off = u_off * s_on / u_on.
    """

    u_off: float
    u_on: float
    s_on: float
    a: float = math.inf

    def __post_init__(self):
        if not (0 <= self.u_off < self.u_on <= self.a):
            raise ValueError("need 0 <= u_off < u_on <= a")
        if not (0 < self.s_on <= self.a):
            raise ValueError("need 0 < s_on <= a")

    @property
    def sigma_off(self) -> float:
        return self.u_off * self.s_on / self.u_on


@dataclass(frozen=True)
class AngularPosition:
    """Angle on the curve plus the amplitude of the steady-state sector."""

    phi: float
    p: float = DEFAULT_SECTOR_P

    def __post_init__(self):
        if not (0 <= self.phi <= TWO_PI):
            raise ValueError("phi must lie in [0, 2*pi]")
        if not (0 < self.p < TWO_PI):
            raise ValueError("p must lie in (0, 2*pi)")


def coords_to_rates(c: AlmondCoords, beta: float) -> tuple[RateParams, float]:
    """Invert the steady-state relations back to kinetic rates.

    Returns the rates and the derived spliced coordinate of the lower
    steady state.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    gamma = beta * c.u_on / c.s_on
    theta = RateParams(beta * c.u_off, beta * c.u_on, beta, gamma)
    return theta, c.sigma_off


def switching_u_to_omega(u_sw: float, c: AlmondCoords, beta: float) -> float:
    """ON duration that puts the switching point at u-coordinate ``u_sw``."""
    if not (c.u_off < u_sw < c.u_on):
        raise ValueError("u_sw must lie strictly between u_off and u_on")
    return -math.log((c.u_on - u_sw) / (c.u_on - c.u_off)) / beta


def _pow_diff(lx, x, gamma, beta, safe_delta):
    """x**(gamma/beta) - x without cancellation or spurious overflow.

    For small exponent gaps the series form x*expm1((gamma-beta)*log(x)/beta)
    is exact; once the gap exceeds one e-fold the direct difference is safe.
    """
    w = safe_delta * lx / beta
    small = np.abs(w) < 1.0
    direct = np.exp(gamma * lx / beta) - x
    series = x * np.expm1(np.where(small, w, 0.0))
    return np.where(small, series, direct)


def _s_on_curve(x, u_off, u_on, s_on, sigma_off, gamma, beta):
    """Spliced coordinate on the induced branch as a function of
    x = exp(-beta * elapsed).  Vectorized; broadcasts all arguments."""
    x, u_off, u_on, s_on, sigma_off, gamma = np.broadcast_arrays(
        x, u_off, u_on, s_on, sigma_off, gamma
    )
    delta = gamma - beta
    degenerate = np.abs(delta) < beta * EQUAL_RATE_TOL
    safe_delta = np.where(degenerate, 1.0, delta)
    lx = np.log(x)
    general = (
        s_on
        + beta * (s_on - sigma_off) / safe_delta * _pow_diff(lx, x, gamma, beta, safe_delta)
        - x * beta * (u_on - u_off) / gamma
    )
    limit = u_on * (1.0 - x) + u_off * x + (u_on - u_off) * x * lx
    return np.where(degenerate, limit, general)


def _s_off_curve(y, s_sw, u_sw, u_off, sigma_off, gamma, beta):
    """Spliced coordinate on the repressed branch as a function of
    y = exp(-beta * (elapsed - omega))."""
    y, s_sw, u_sw, u_off, sigma_off, gamma = np.broadcast_arrays(
        y, s_sw, u_sw, u_off, sigma_off, gamma
    )
    delta = gamma - beta
    degenerate = np.abs(delta) < beta * EQUAL_RATE_TOL
    safe_delta = np.where(degenerate, 1.0, delta)
    ly = np.log(y)
    general = (
        sigma_off
        + np.exp(gamma * ly / beta) * (s_sw - sigma_off)
        - beta * (u_sw - u_off) / safe_delta * _pow_diff(ly, y, gamma, beta, safe_delta)
    )
    limit = s_sw * y + u_off * (1.0 - y) + (u_off - u_sw) * y * ly
    return np.where(degenerate, limit, general)


def positions_from_phi(phi, u_sw, u_off, u_on, s_on, p, beta=1.0):
    """Map angles to (s, u) positions on the kinetic curve.

    Parameters broadcast against each other; typical shapes are ``phi``
    and ``u_sw`` of shape (R, G) with gene coordinates of shape (G,).

    Returns
    -------
    (s, u) : pair of ndarrays
    """
    phi, u_sw, u_off, u_on, s_on = np.broadcast_arrays(phi, u_sw, u_off, u_on, s_on)
    gamma = beta * u_on / s_on
    sigma_off = u_off * s_on / u_on
    half = (TWO_PI - p) / 2.0

    on = phi < half
    off = (phi >= half) & (phi < TWO_PI - p)

    tiny = np.finfo(float).tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.clip(phi / half, 0.0, 1.0)
        x = 1.0 - frac * (u_sw - u_off) / (u_on - u_off)
        x = np.clip(x, tiny, 1.0)
        u_on_branch = u_off + frac * (u_sw - u_off)
        s_on_branch = _s_on_curve(x, u_off, u_on, s_on, sigma_off, gamma, beta)

        y = np.clip(1.0 - (phi - half) / half, tiny, 1.0)
        u_off_branch = u_sw * y + u_off * (1.0 - y)
        x_sw = (u_on - u_sw) / (u_on - u_off)
        s_sw = _s_on_curve(x_sw, u_off, u_on, s_on, sigma_off, gamma, beta)
        s_off_branch = _s_off_curve(y, s_sw, u_sw, u_off, sigma_off, gamma, beta)

    s = np.where(on, s_on_branch, np.where(off, s_off_branch, sigma_off))
    u = np.where(on, u_on_branch, np.where(off, u_off_branch, u_off))
    return s, u


def times_from_phi(phi, u_sw, u_off, u_on, p, beta=1.0):
    """Elapsed time since onset for each angle; +inf inside the sector."""
    phi, u_sw, u_off, u_on = np.broadcast_arrays(phi, u_sw, u_off, u_on)
    half = (TWO_PI - p) / 2.0
    on = phi < half
    off = (phi >= half) & (phi < TWO_PI - p)
    tiny = np.finfo(float).tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.clip(phi / half, 0.0, 1.0)
        x = np.clip(1.0 - frac * (u_sw - u_off) / (u_on - u_off), tiny, 1.0)
        t_on = -np.log(x) / beta
        x_sw = (u_on - u_sw) / (u_on - u_off)
        omega = -np.log(x_sw) / beta
        y = np.clip(1.0 - (phi - half) / half, tiny, 1.0)
        t_off = omega - np.log(y) / beta
    return np.where(on, t_on, np.where(off, t_off, np.inf))


def phi_to_position(ap: AngularPosition, u_sw: float, c: AlmondCoords, beta: float) -> Position:
    """Scalar wrapper around :func:`positions_from_phi`."""
    if not (c.u_off < u_sw < c.u_on):
        raise ValueError("u_sw must lie strictly between u_off and u_on")
    s, u = positions_from_phi(ap.phi, u_sw, c.u_off, c.u_on, c.s_on, ap.p, beta)
    return Position(float(s), float(u))


def position_to_time(ap: AngularPosition, u_sw: float, c: AlmondCoords, beta: float) -> float:
    """Elapsed time since onset matching ``phi_to_position``.

    Returns ``math.inf`` inside the steady-state sector, where the
    position carries no time information.
    """
    if not (c.u_off < u_sw < c.u_on):
        raise ValueError("u_sw must lie strictly between u_off and u_on")
    return float(times_from_phi(ap.phi, u_sw, c.u_off, c.u_on, ap.p, beta))


def induced_time_atom(p: float) -> float:
    """Prior mass placed on the steady state by the sector of amplitude p."""
    if not (0 < p < TWO_PI):
        raise ValueError("p must lie in (0, 2*pi)")
    return p / TWO_PI


def induced_time_logpdf(t, omega, beta, p):
    """Log density of the elapsed-time prior induced by phi ~ U(0, 2*pi).

    Continuous part only: a truncated exponential on (0, omega) and a
    translated exponential on [omega, inf), each carrying mass
    (1 - p/(2*pi))/2.  The remaining mass p/(2*pi) is an atom at the
    steady state, exposed separately as :func:`induced_time_atom`.
    Vectorized in ``t``.
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    if beta <= 0:
        raise ValueError("beta must be positive")
    q = induced_time_atom(p)
    t = np.asarray(t, dtype=float)
    log_w = math.log((1.0 - q) / 2.0)
    if math.isinf(omega):
        # The repressed-branch component escapes to infinity; only the
        # (0, inf) exponential remains at finite times.
        out = np.where(t >= 0, log_w + math.log(beta) - beta * t, -np.inf)
        return out if out.ndim else float(out)
    log_trunc_norm = math.log(-math.expm1(-beta * omega))
    on_piece = log_w + math.log(beta) - beta * t - log_trunc_norm
    off_piece = log_w + math.log(beta) - beta * (t - omega)
    out = np.where(t < 0, -np.inf, np.where(t < omega, on_piece, off_piece))
    return out if out.ndim else float(out)


def induced_omega_logpdf(omega, beta):
    """Log density of the ON-duration prior induced by the uniform prior on
    the switching u-coordinate: an exponential with rate ``beta``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    omega = np.asarray(omega, dtype=float)
    out = np.where(omega >= 0, math.log(beta) - beta * omega, -np.inf)
    return out if out.ndim else float(out)
