"""Closed-form kinetics of the transcription / splicing / degradation system.

A gene is transcribed at a piecewise-constant rate that switches from a
basal OFF level to a higher ON level at ``t0_on`` and back OFF at
``t0_on + omega``.  Unspliced transcripts mature at rate ``beta`` and
spliced transcripts degrade at rate ``gamma``.  The mean trajectory in the
(spliced, unspliced) plane has a closed form, implemented here together
with its steady states, the switching point and the RNA velocity.

All functions are pure and safe to call from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

__all__ = [
    "EQUAL_RATE_TOL",
    "Position",
    "RateParams",
    "solve",
    "steady_states",
    "switching_point",
    "velocity",
]

# Relative |gamma - beta| below which the degenerate-rate solution is used.
# The general solution carries a 1/(gamma - beta) factor whose numerator
# also vanishes in the limit; below this width the limit form is exact to
# more digits than the general one.
EQUAL_RATE_TOL = 1e-8


class Position(NamedTuple):
    """A point in the (spliced, unspliced) plane."""

    s: float
    u: float


@dataclass(frozen=True)
class RateParams:
    """Kinetic rates of one gene.

    Attributes
    ----------
    alpha_off : float
        Basal transcription rate while repressed, >= 0.
    alpha_on : float
        Transcription rate while induced, > 0 and >= alpha_off.
    beta : float
        Splicing (maturation) rate, > 0.  Fixed to 1 in inference.
    gamma : float
        Degradation rate of spliced transcripts, > 0.
    """

    alpha_off: float
    alpha_on: float
    beta: float
    gamma: float

    def __post_init__(self):
        vals = (self.alpha_off, self.alpha_on, self.beta, self.gamma)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("rate parameters must be finite")
        if self.alpha_off < 0:
            raise ValueError("alpha_off must be >= 0")
        if self.alpha_on <= 0 or self.beta <= 0 or self.gamma <= 0:
            raise ValueError("alpha_on, beta and gamma must be > 0")
        if self.alpha_on < self.alpha_off:
            raise ValueError("alpha_on must be >= alpha_off")


def _on_branch(tt, theta):
    """Mean (s, u) on the induced branch, ``tt`` units after onset."""
    a0, a1, b, g = theta.alpha_off, theta.alpha_on, theta.beta, theta.gamma
    eb = math.exp(-b * tt)
    one_m_eb = -math.expm1(-b * tt)
    u = (a0 / b) * eb + (a1 / b) * one_m_eb
    if abs(g - b) < b * EQUAL_RATE_TOL:
        s = (a0 / b) * eb + (a1 / b) * one_m_eb - (a1 - a0) * tt * eb
    else:
        eg = math.exp(-g * tt)
        one_m_eg = -math.expm1(-g * tt)
        # e^{-g t} - e^{-b t} written as e^{-b t} expm1((b - g) t): no
        # cancellation even when g is within a few ulp of b.
        bracket = eb * math.expm1((b - g) * tt)
        s = (a0 / g) * eg + (a1 / g) * one_m_eg + (a1 - a0) * bracket / (g - b)
    return s, u


def _off_branch(tau, s_w, u_w, theta):
    """Mean (s, u) on the repressed branch, ``tau`` units after the switch
    at position (s_w, u_w)."""
    a0, b, g = theta.alpha_off, theta.beta, theta.gamma
    eb = math.exp(-b * tau)
    one_m_eb = -math.expm1(-b * tau)
    u = u_w * eb + (a0 / b) * one_m_eb
    if abs(g - b) < b * EQUAL_RATE_TOL:
        s = s_w * eb + (a0 / b) * one_m_eb - (a0 - b * u_w) * tau * eb
    else:
        eg = math.exp(-g * tau)
        one_m_eg = -math.expm1(-g * tau)
        bracket = eb * math.expm1((b - g) * tau)
        s = s_w * eg + (a0 / g) * one_m_eg + (a0 - b * u_w) * bracket / (g - b)
    return s, u


def solve(t, t0_on, omega, theta: RateParams) -> Position:
    """Mean spliced/unspliced abundances at time ``t``.

    Parameters
    ----------
    t : float
        Evaluation time, >= 0 and finite.
    t0_on : float
        Onset of the induced phase, >= 0.
    omega : float
        Duration of the induced phase, > 0.  ``math.inf`` means the gene
        never switches back off.
    theta : RateParams
        Kinetic rates.

    Returns
    -------
    Position
        The three-regime piecewise solution: the OFF steady state before
        onset, the induced branch up to ``t0_on + omega`` (inclusive) and
        the repressed branch afterwards.
    """
    if not (math.isfinite(t) and math.isfinite(t0_on)):
        raise ValueError("t and t0_on must be finite")
    if not omega > 0:
        raise ValueError("omega must be positive")
    tt = t - t0_on
    if tt < 0:
        return Position(theta.alpha_off / theta.gamma, theta.alpha_off / theta.beta)
    if tt <= omega or math.isinf(omega):
        return Position(*_on_branch(tt, theta))
    s_w, u_w = _on_branch(omega, theta)
    return Position(*_off_branch(tt - omega, s_w, u_w, theta))


def steady_states(theta: RateParams) -> tuple[Position, Position]:
    """The repressed and induced fixed points (SS_off, SS_on)."""
    ss_off = Position(theta.alpha_off / theta.gamma, theta.alpha_off / theta.beta)
    ss_on = Position(theta.alpha_on / theta.gamma, theta.alpha_on / theta.beta)
    return ss_off, ss_on


def switching_point(omega, t0_on, theta: RateParams) -> Position:
    """Position at which the trajectory leaves the induced branch.

    Invariant to ``t0_on``; tends to SS_on as ``omega`` grows and to
    SS_off as ``omega`` shrinks to zero.
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    if math.isinf(omega):
        return steady_states(theta)[1]
    return solve(t0_on + omega, t0_on, omega, theta)


def velocity(pos, beta, gamma) -> float:
    """Instantaneous rate of change of the spliced abundance, beta*u - gamma*s."""
    s, u = pos
    return beta * u - gamma * s
