"""Synthetic data generation and a stochastic simulation oracle.

``gen_parameters`` draws a full generating parameter set for a scenario
(genes, cells, groups, subgroups), ``gen_counts_nb`` produces Negative
Binomial counts from it, and ``gen_in_data`` / ``gen_deming_data`` emit
the two continuous benchmark variants (independent normals around the
curve, and normally distributed signed point-to-curve residuals).
``gillespie`` simulates the underlying continuous-time Markov chain
exactly, for checking the product-Poisson transient law.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np

from . import geometry, model
from .kinetics import RateParams

__all__ = [
    "SimulationTruth",
    "omega_grid",
    "gen_parameters",
    "gen_counts_nb",
    "gen_in_data",
    "gen_deming_data",
    "gillespie",
]

# Grid construction constants: the first ON duration puts the switching
# u-coordinate at 30% of the steady-state range; durations whose switching
# coordinate lands within 0.5% of the upper steady state are dropped.
GRID_FIRST_FRACTION = 0.3
GRID_TAIL_FRACTION = 0.005
GRID_MAX_STEPS = 20
# Subgroup elapsed times scatter around their packet mean with this
# variance (not standard deviation).
TIME_SPREAD_VARIANCE = 0.5


@dataclass
class SimulationTruth:
    """Generating parameter set for one synthetic scenario."""

    u_off: np.ndarray
    u_on: np.ndarray
    s_on: np.ndarray
    eta: np.ndarray
    lam: np.ndarray
    u_sw: np.ndarray         # (K, G)
    omega: np.ndarray        # (K, G)
    phi: np.ndarray          # (R, G)
    t_tilde: np.ndarray      # (R, G)
    s_pos: np.ndarray        # (R, G)
    u_pos: np.ndarray        # (R, G)
    group_of_cell: np.ndarray
    subgroup_of_cell: np.ndarray
    group_of_subgroup: np.ndarray
    n_genes: int
    n_cells: int
    n_groups: int
    n_subgroups: int
    n_packets: int
    seed: int
    p: float = geometry.DEFAULT_SECTOR_P
    beta: float = 1.0

    @property
    def gamma(self) -> np.ndarray:
        return self.beta * self.u_on / self.s_on

    @property
    def sigma_off(self) -> np.ndarray:
        return self.u_off * self.s_on / self.u_on

    def velocity(self) -> np.ndarray:
        """True velocity per (subgroup, gene)."""
        return self.beta * self.u_pos - self.gamma[None, :] * self.s_pos

    def mean_matrices(self):
        """Expected spliced/unspliced counts per (cell, gene)."""
        soc = self.subgroup_of_cell
        mu_s = self.lam[:, None] * self.s_pos[soc, :]
        mu_u = self.lam[:, None] * self.u_pos[soc, :]
        return mu_s, mu_u

    def to_state(self, a: float) -> model.ModelState:
        return model.ModelState(
            self.u_off.copy(), self.u_on.copy(), self.s_on.copy(), self.eta.copy(),
            self.u_sw.copy(), self.phi.copy(), self.lam.copy(), a, self.p, self.beta,
        )


def omega_grid(beta: float = 1.0) -> np.ndarray:
    """Equispaced ON-duration grid with the near-steady-state tail removed.

    The removal criterion compares the switching u-coordinate against the
    upper steady state relative to the full u-range, so it does not depend
    on the gene's rates: it reduces to exp(-beta * w) > tail fraction.
    """
    w1 = -math.log(1.0 - GRID_FIRST_FRACTION) / beta
    grid = w1 * np.arange(1, GRID_MAX_STEPS + 1)
    keep = np.exp(-beta * grid) > GRID_TAIL_FRACTION
    grid = grid[keep]
    assert grid.size > 0, "duration grid came out empty"
    return grid


def draw_time_prior(rng: np.random.Generator, omega, beta: float, p: float, size) -> np.ndarray:
    """Sample elapsed times from the prior induced by a uniform angle.

    Draws the angle uniformly; the steady-state sector maps to time 0 (the
    point mass sits at the onset, where the position equals the lower
    steady state).  ``omega`` broadcasts against ``size``.
    """
    phi = rng.uniform(0.0, geometry.TWO_PI, size=size)
    half = (geometry.TWO_PI - p) / 2.0
    omega = np.broadcast_to(np.asarray(omega, dtype=float), phi.shape)
    out = np.zeros_like(phi)
    on = phi < half
    off = (phi >= half) & (phi < geometry.TWO_PI - p)
    with np.errstate(divide="ignore"):
        out[on] = -np.log1p(-(phi[on] / half) * (-np.expm1(-beta * omega[on]))) / beta
        out[off] = omega[off] - np.log(1.0 - (phi[off] - half) / half) / beta
    return out


def _phi_from_time(t_tilde, omega, p, beta):
    """Invert elapsed time to the angle, given the group's ON duration."""
    half = (geometry.TWO_PI - p) / 2.0
    on = t_tilde <= omega
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = -np.expm1(-beta * t_tilde) / (-np.expm1(-beta * omega))
        phi_on = half * np.clip(frac, 0.0, 1.0)
        y = np.exp(-beta * (t_tilde - omega))
        phi_off = half * (2.0 - np.clip(y, 0.0, 1.0))
    return np.where(on, phi_on, phi_off)


def gen_parameters(G, C, K, R, L=None, seed=0, p=geometry.DEFAULT_SECTOR_P) -> SimulationTruth:
    """Draw a full generating parameter set.

    Rates: alpha_off ~ U(1, 5), alpha_on ~ U(6, 10), gamma ~ U(0.5, 1.5),
    beta = 1.  ON durations are drawn uniformly from the filtered grid,
    per (group, gene).  Elapsed times follow a two-level hierarchy: L
    packet means from the induced time prior, then R/L subgroup times
    max(0, N(mean, 0.5)) around each.  Overdispersion ~ U(0.5, 1).
    Capture efficiencies ~ U(0.5, 1), normalized to mean 1 with the
    compensating rescaling of the curve coordinates.  Cells are split into
    equal-size subgroups, subgroups into equal groups.
    """
    if L is None:
        L = K if K > 1 else min(10, R)
    if R % L or R % K or C % R:
        raise ValueError("need L | R, K | R and R | C for an even scenario")
    if K > 1 and L != K:
        raise ValueError("with several groups the time packets follow the groups")
    beta = 1.0
    rng = np.random.default_rng(seed)

    alpha_off = rng.uniform(1.0, 5.0, size=G)
    alpha_on = rng.uniform(6.0, 10.0, size=G)
    gamma = rng.uniform(0.5, 1.5, size=G)
    u_off = alpha_off / beta
    u_on = alpha_on / beta
    s_on = alpha_on / gamma

    grid = omega_grid(beta)
    omega = grid[rng.integers(0, grid.size, size=(K, G))]

    # Packet means from the induced time prior, conditioned on the packet's
    # group duration, then subgroup times scattered around them.
    packet_group = np.arange(L) // (L // K) if K > 1 else np.zeros(L, dtype=int)
    mu = draw_time_prior(rng, omega[packet_group, :], beta, p, size=(L, G))
    packet_of_subgroup = np.arange(R) // (R // L)
    z = rng.normal(mu[packet_of_subgroup, :], math.sqrt(TIME_SPREAD_VARIANCE), size=(R, G))
    t_tilde = np.maximum(0.0, z)

    group_of_subgroup = packet_group[packet_of_subgroup] if K > 1 else np.zeros(R, dtype=int)
    subgroup_of_cell = np.repeat(np.arange(R), C // R)
    group_of_cell = group_of_subgroup[subgroup_of_cell]

    eta = rng.uniform(0.5, 1.0, size=G)
    lam = rng.uniform(0.5, 1.0, size=C)
    m = lam.mean()
    lam = lam / m
    # Compensating rescale keeps every mean count identical (capture-scale
    # invariance); time parameters are untouched.
    u_off, u_on, s_on = u_off * m, u_on * m, s_on * m

    u_sw = u_on[None, :] + (u_off - u_on)[None, :] * np.exp(-beta * omega)
    phi = _phi_from_time(t_tilde, omega[group_of_subgroup, :], p, beta)
    s_pos, u_pos = geometry.positions_from_phi(
        phi, u_sw[group_of_subgroup, :], u_off, u_on, s_on, p, beta
    )

    return SimulationTruth(
        u_off=u_off, u_on=u_on, s_on=s_on, eta=eta, lam=lam,
        u_sw=u_sw, omega=omega, phi=phi, t_tilde=t_tilde,
        s_pos=s_pos, u_pos=u_pos,
        group_of_cell=group_of_cell, subgroup_of_cell=subgroup_of_cell,
        group_of_subgroup=group_of_subgroup,
        n_genes=G, n_cells=C, n_groups=K, n_subgroups=R, n_packets=L,
        seed=seed, p=p, beta=beta,
    )


def _nb_draws(rng, mu, eta):
    """NB(mu, eta) variates; Poisson when the overdispersion vanishes."""
    mu = np.asarray(mu, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), mu.shape)
    out = np.empty(mu.shape, dtype=np.int64)
    pois = eta < model.POISSON_ETA
    if pois.any():
        out[pois] = rng.poisson(mu[pois])
    nb = ~pois
    if nb.any():
        r = 1.0 / eta[nb]
        out[nb] = rng.negative_binomial(r, r / (r + mu[nb]))
    return out


def gen_counts_nb(truth: SimulationTruth, seed=None) -> model.Dataset:
    """Draw the count matrices implied by the generating parameters."""
    rng = np.random.default_rng(truth.seed + 1 if seed is None else seed)
    mu_s, mu_u = truth.mean_matrices()
    eta_row = truth.eta[None, :]
    ys = _nb_draws(rng, mu_s, eta_row)
    yu = _nb_draws(rng, mu_u, eta_row)
    return model.Dataset(
        ys, yu, truth.group_of_cell.copy(), truth.subgroup_of_cell.copy()
    )


def in_variances(truth: SimulationTruth):
    """Shared normal variances of the independent-normal benchmark data:
    8% of the 0.99 quantile of the per-cell curve coordinates."""
    s_flat = truth.s_pos[truth.subgroup_of_cell, :]
    u_flat = truth.u_pos[truth.subgroup_of_cell, :]
    var_s = 0.8 / 10.0 * np.quantile(s_flat, 0.99)
    var_u = 0.8 / 10.0 * np.quantile(u_flat, 0.99)
    return float(var_s), float(var_u)


def gen_in_data(truth: SimulationTruth, seed=None):
    """Independent normal observations centered on the curve positions."""
    rng = np.random.default_rng(truth.seed + 2 if seed is None else seed)
    var_s, var_u = in_variances(truth)
    soc = truth.subgroup_of_cell
    m_s = rng.normal(truth.s_pos[soc, :], math.sqrt(var_s))
    m_u = rng.normal(truth.u_pos[soc, :], math.sqrt(var_u))
    return m_s, m_u


def gen_deming_data(truth: SimulationTruth, sigma2=None, seed=None):
    """Observations with normal signed point-to-position residuals.

    Each observation displaces the curve position by a radius drawn from
    N(0, sigma2) along a direction uniform over the left half-circle, so
    the signed Euclidean residual is exactly N(0, sigma2) distributed.
    """
    rng = np.random.default_rng(truth.seed + 3 if seed is None else seed)
    if sigma2 is None:
        var_s, var_u = in_variances(truth)
        sigma2 = 0.5 * (var_s + var_u)
    soc = truth.subgroup_of_cell
    shape = (truth.n_cells, truth.n_genes)
    psi = rng.uniform(math.pi / 2.0, 3.0 * math.pi / 2.0, size=shape)
    rho = rng.normal(0.0, math.sqrt(sigma2), size=shape)
    m_s = rho * np.cos(psi) + truth.s_pos[soc, :]
    m_u = rho * np.sin(psi) + truth.u_pos[soc, :]
    return m_s, m_u


def gillespie(theta: RateParams, t0_on, omega, T, init=None, seed=None):
    """Exact stochastic simulation of the count process up to time ``T``.

    Events: transcription (u + 1) at the phase-dependent rate, splicing
    (u - 1, s + 1) at beta * u, degradation (s - 1) at gamma * s.  The
    transcription rate is piecewise constant, so waiting times are redrawn
    from each phase boundary (memorylessness makes the restart exact).
    ``init`` defaults to a product-Poisson draw at the OFF steady state.

    Returns the integer pair (S, U) at time ``T``; with ``T`` an array,
    returns arrays sampled along a single trajectory.
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    times = np.atleast_1d(np.asarray(T, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("snapshot times must be nonnegative and sorted")
    rng = random.Random(seed)
    if init is None:
        np_rng = np.random.default_rng(rng.getrandbits(63))
        s = int(np_rng.poisson(theta.alpha_off / theta.gamma))
        u = int(np_rng.poisson(theta.alpha_off / theta.beta))
    else:
        s, u = (int(v) for v in init)

    boundaries = [t0_on]
    if math.isfinite(omega):
        boundaries.append(t0_on + omega)

    def alpha_at(t):
        if t < t0_on:
            return theta.alpha_off
        if math.isfinite(omega) and t >= t0_on + omega:
            return theta.alpha_off
        return theta.alpha_on

    out_s = np.empty(times.size, dtype=np.int64)
    out_u = np.empty(times.size, dtype=np.int64)
    t = 0.0
    for i, t_end in enumerate(times):
        while t < t_end:
            cuts = [b for b in boundaries if t < b < t_end]
            phase_end = min(cuts) if cuts else t_end
            alpha = alpha_at(t)
            while True:
                rate = alpha + theta.beta * u + theta.gamma * s
                if rate <= 0.0:
                    t = phase_end
                    break
                dt = rng.expovariate(rate)
                if t + dt >= phase_end:
                    t = phase_end
                    break
                t += dt
                x = rng.random() * rate
                if x < alpha:
                    u += 1
                elif x < alpha + theta.beta * u:
                    u -= 1
                    s += 1
                else:
                    s -= 1
        out_s[i] = s
        out_u[i] = u
    if np.isscalar(T) or np.ndim(T) == 0:
        return int(out_s[0]), int(out_u[0])
    return out_s, out_u
