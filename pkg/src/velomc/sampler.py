"""Adaptive Metropolis sampling over the full model state.

Each sweep updates, in fixed order: per gene the joint coordinate block
(u_off, u_on, s_on) with an adaptive multivariate normal proposal on an
unconstrained scale, then the overdispersions, the switching coordinates,
the angles, and the capture efficiencies, each with a symmetric random
walk and per-parameter adaptive step sizes.  Adaptation starts at
iteration ``adapt_start``, is damped by ``gamma_c1 / (k + gamma_c2)`` and
freezes after ``adapt_end``; the target acceptance probability is 0.25.

Blocks within one family have mutually independent conditionals (disjoint
likelihood terms given the other families), so their accept/reject
decisions are evaluated vectorized; this is equivalent to updating them
one by one and keeps the chain deterministic under a fixed seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit

from . import geometry, model

__all__ = [
    "ChainConfig",
    "PosteriorDraws",
    "InitializationError",
    "gamma_k",
    "adapt_univariate",
    "adapt_joint_block",
    "default_init",
    "run_chain",
]

# Proposal-covariance ridge; keeps early degenerate empirical covariances
# positive definite.
COV_EPS = 1e-10
_LUT_YMAX = 4096


class InitializationError(RuntimeError):
    pass


def gamma_k(k, c1=2500.0, c2=20000.0):
    """Adaptation damping factor at iteration k."""
    return c1 / (k + c2)


def adapt_univariate(window_rate, log_sd, k, c1=2500.0, c2=20000.0, target=0.25):
    """Robbins-Monro update of a log step size from a window acceptance rate."""
    return log_sd + gamma_k(k, c1, c2) * (window_rate - target)


def adapt_joint_block(mean, cov, log_scale, z, alpha, k,
                      c1=2500.0, c2=20000.0, target=0.25):
    """One damped update of the multivariate proposal state.

    Running mean and covariance track the chain in the unconstrained
    coordinates; a global log scale chases the target acceptance
    probability.  Operates in place on batched arrays (mean (G, d),
    cov (G, d, d), log_scale (G,)) and returns the new proposal
    covariance ``exp(log_scale) * cov + eps * I``.
    """
    g = gamma_k(k, c1, c2)
    log_scale += g * (np.asarray(alpha) - target)
    d = z - mean
    mean += g * d
    cov += g * (np.einsum("gi,gj->gij", d, d) - cov)
    return np.exp(log_scale)[:, None, None] * cov + COV_EPS * np.eye(cov.shape[-1])


@dataclass
class ChainConfig:
    """Chain length, adaptation schedule and bookkeeping options.

    ``adapt_end`` defaults to floor(0.9 * n_burnin).  ``a`` (coordinate
    bound) defaults to twice the largest observed count; ``p`` is the
    steady-state sector amplitude.
    """

    n_iter: int = 250_000
    n_burnin: int = 200_000
    thin: int = 25
    seed: int = 0
    target_accept: float = 0.25
    adapt_start: int = 100
    adapt_end: int | None = None
    gamma_c1: float = 2500.0
    gamma_c2: float = 20000.0
    univariate_adapt_interval: int = 100
    a: float | None = None
    p: float = geometry.DEFAULT_SECTOR_P
    store_loglik: bool = True
    loglik_dtype: str = "float32"
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    debug_validate_every: int = 0

    def resolved_adapt_end(self) -> int:
        return self.adapt_end if self.adapt_end is not None else int(0.9 * self.n_burnin)

    def validate(self):
        if not (0 <= self.n_burnin < self.n_iter):
            raise ValueError("need 0 <= n_burnin < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.resolved_adapt_end() > self.n_burnin:
            raise ValueError("adapt_end must not exceed n_burnin")
        if not (0 < self.target_accept < 1):
            raise ValueError("target_accept must lie in (0, 1)")
        if not (0 < self.p < geometry.TWO_PI):
            raise ValueError("p must lie in (0, 2*pi)")


@dataclass
class PosteriorDraws:
    """Thinned, capture-rescaled draws plus per-draw pointwise log likelihoods.

    Parameter arrays carry the draw index first: u_off/u_on/s_on/eta are
    (D, G), u_sw is (D, K, G), phi is (D, R, G), lam is (D, C).
    ``log_posterior`` holds the chain state's (pre-rescaling) posterior
    density.  ``loglik`` is (D, C, G) or None.
    """

    u_off: np.ndarray
    u_on: np.ndarray
    s_on: np.ndarray
    eta: np.ndarray
    u_sw: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    log_posterior: np.ndarray
    loglik: np.ndarray | None
    a: float
    p: float
    beta: float
    group_of_cell: np.ndarray
    subgroup_of_cell: np.ndarray
    group_of_subgroup: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.u_off.shape[0]

    def state_at(self, i: int) -> model.ModelState:
        return model.ModelState(
            self.u_off[i], self.u_on[i], self.s_on[i], self.eta[i],
            self.u_sw[i], self.phi[i], self.lam[i], self.a, self.p, self.beta,
        )


def default_init(data: model.Dataset, a: float, p: float) -> model.ModelState:
    """Moment-matched starting point.

    Capture efficiencies proportional to cell totals (capped at 0.999),
    gene coordinates from percentiles of detection-corrected counts, the
    switching coordinate at the midpoint, angles mid-way up the induced
    branch, overdispersion at 0.5.
    """
    ys = data.y_spliced.astype(float)
    yu = data.y_unspliced.astype(float)
    tot = ys.sum(axis=1) + yu.sum(axis=1)
    lam0 = tot / max(tot.max(), 1.0)
    lam0 = np.clip(lam0, 1e-3, 0.999)
    ratio_s = ys / lam0[:, None]
    ratio_u = yu / lam0[:, None]
    u_on0 = np.clip(np.percentile(ratio_u, 99, axis=0), 0.02 * a, 0.98 * a)
    u_off0 = np.clip(np.percentile(ratio_u, 5, axis=0), 0.005 * a, 0.5 * u_on0)
    s_on0 = np.clip(np.percentile(ratio_s, 99, axis=0), 0.02 * a, 0.98 * a)
    k, r = data.n_groups, data.n_subgroups
    return model.ModelState(
        u_off=u_off0,
        u_on=u_on0,
        s_on=s_on0,
        eta=np.full(data.n_genes, 0.5),
        u_sw=np.tile(0.5 * (u_off0 + u_on0), (k, 1)),
        phi=np.full((r, data.n_genes), math.pi / 2.0),
        lam=lam0,
        a=a,
        p=p,
    )


def _softplus(x):
    return np.logaddexp(0.0, x)


class _Chain:
    """Mutable sampler workspace; not part of the public surface."""

    FAMILIES = ("joint", "eta", "u_sw", "phi", "lam")

    def __init__(self, data: model.Dataset, cfg: ChainConfig, init=None):
        cfg.validate()
        self.data = data
        self.cfg = cfg
        self.a = cfg.a if cfg.a is not None else 2.0 * max(data.max_count(), 1)
        self.p = cfg.p
        self.beta = 1.0
        self.adapt_end = cfg.resolved_adapt_end()
        self.rng = np.random.default_rng(cfg.seed)

        self.C, self.G = data.y_spliced.shape
        self.K = data.n_groups
        self.R = data.n_subgroups
        self.gos = data.group_of_subgroup

        # Cells are held internally sorted by (group, subgroup): per-group
        # and per-subgroup likelihood sums become contiguous segment
        # reductions with no per-sweep gather.  ``unsort`` maps back.
        order = np.lexsort((data.subgroup_of_cell, data.group_of_cell))
        self.cell_order = order
        self.unsort = np.empty_like(order)
        self.unsort[order] = np.arange(self.C)
        self.soc = data.subgroup_of_cell[order]
        self.goc = data.group_of_cell[order]
        self.ys = data.y_spliced[order].astype(float)
        self.yu = data.y_unspliced[order].astype(float)
        self.ytot = self.ys + self.yu
        self.sub_starts = np.concatenate(([0], np.flatnonzero(np.diff(self.soc)) + 1))
        self.sub_seg_ids = self.soc[self.sub_starts]
        self.grp_starts = np.concatenate(([0], np.flatnonzero(np.diff(self.goc)) + 1))
        self.grp_seg_ids = self.goc[self.grp_starts]

        ymax = data.max_count()
        self.use_lut = ymax <= _LUT_YMAX
        if self.use_lut:
            # hist[g, y] counts spliced plus unspliced observations equal to
            # y in gene g; turns per-cell gammaln sums into a row dot with a
            # cumulative-log table when the overdispersion moves.
            hist = np.zeros((self.G, ymax + 1))
            for g in range(self.G):
                hist[g] += np.bincount(data.y_spliced[:, g], minlength=ymax + 1)
                hist[g] += np.bincount(data.y_unspliced[:, g], minlength=ymax + 1)
            self.hist = hist
            self.lut_y = np.arange(ymax, dtype=float)

        state = init if init is not None else default_init(data, self.a, self.p)
        if init is not None and cfg.a is not None and init.a != self.a:
            raise ValueError("init.a disagrees with configured bound")
        bad = model.validate_state(state, data)
        if bad:
            raise InitializationError(
                "initial state has zero posterior density; offending blocks: "
                + ", ".join(bad)
            )
        self._load_state(state)
        self._init_adaptation()
        self._init_accounting()
        self.k = 0
        self.retained = []
        self.retained_lp = []
        self.retained_ll = []
        self.lp0 = model.log_posterior(state, data)
        self.cum_delta = 0.0

    # -- state <-> caches ------------------------------------------------

    def _load_state(self, state: model.ModelState):
        self.u_off = state.u_off.astype(float).copy()
        self.u_on = state.u_on.astype(float).copy()
        self.s_on = state.s_on.astype(float).copy()
        self.eta = state.eta.astype(float).copy()
        self.u_sw = state.u_sw.astype(float).reshape(self.K, self.G).copy()
        self.phi = state.phi.astype(float).reshape(self.R, self.G).copy()
        self.lam = state.lam.astype(float)[self.cell_order].copy()
        self.z = np.column_stack([
            _logit(self.u_off / self.u_on),
            _logit(self.u_on / self.a),
            _logit(self.s_on / self.a),
        ])
        self._refresh_caches()

    def _refresh_caches(self):
        self.r = 1.0 / np.maximum(self.eta, 1e-12)
        self.pois = self.eta < model.POISSON_ETA
        self.any_pois = bool(self.pois.any())
        self.ysr = self.ys + self.r[None, :]
        self.yur = self.yu + self.r[None, :]
        S, U = geometry.positions_from_phi(
            self.phi, self.u_sw[self.gos, :], self.u_off, self.u_on, self.s_on,
            self.p, self.beta,
        )
        self.S, self.U = S, U
        self.Ms = self.lam[:, None] * S[self.soc, :]
        self.Mu = self.lam[:, None] * U[self.soc, :]
        self.logJ = self._log_jacobian(self.z)
        self.sgl = self._const_col(self.r, self.pois)

    def current_state(self) -> model.ModelState:
        return model.ModelState(
            self.u_off.copy(), self.u_on.copy(), self.s_on.copy(), self.eta.copy(),
            self.u_sw.copy(), self.phi.copy(), self.lam[self.unsort].copy(),
            self.a, self.p, self.beta,
        )

    # -- adaptation ------------------------------------------------------

    def _init_adaptation(self):
        g = self.G
        self.joint_mean = self.z.copy()
        self.joint_cov = np.tile(0.01 * np.eye(3), (g, 1, 1))
        self.joint_logscale = np.full(g, math.log(2.38**2 / 3.0))
        self.joint_chol = None
        self._update_joint_chol()
        self.logsd = {
            "eta": np.full(g, math.log(0.1)),
            "u_sw": np.full((self.K, g), math.log(0.05 * self.a)),
            "phi": np.full((self.R, g), math.log(0.3)),
            "lam": np.full(self.C, math.log(0.05)),
        }
        self.window_acc = {k: np.zeros_like(v) for k, v in self.logsd.items()}

    def _update_joint_chol(self):
        cov = self.joint_cov * np.exp(self.joint_logscale)[:, None, None]
        cov = cov + COV_EPS * np.eye(3)
        self.joint_chol = np.linalg.cholesky(cov)

    def _init_accounting(self):
        self.acc = {f: 0 for f in self.FAMILIES}
        self.prop = {f: 0 for f in self.FAMILIES}
        self.acc_frozen = {f: 0 for f in self.FAMILIES}
        self.prop_frozen = {f: 0 for f in self.FAMILIES}
        self.diag_snapshots = {}

    def _record_accept(self, family, accepted, total):
        self.acc[family] += int(accepted)
        self.prop[family] += int(total)
        if self.k > self.adapt_end:
            self.acc_frozen[family] += int(accepted)
            self.prop_frozen[family] += int(total)

    # -- likelihood pieces -----------------------------------------------

    def _const_col(self, r, pois):
        """Per-gene column sum of the count/size terms of the NB log pmf,
        excluding pieces constant in eta; zero for Poisson columns."""
        if self.use_lut:
            lut = np.cumsum(np.log(r[:, None] + self.lut_y[None, :]), axis=1)
            glrow = np.concatenate([np.zeros((self.G, 1)), lut], axis=1)
            sums = np.einsum("gy,gy->g", self.hist, glrow)
        else:
            from scipy.special import gammaln

            sums = (
                gammaln(self.ys + r[None, :]).sum(axis=0)
                + gammaln(self.yu + r[None, :]).sum(axis=0)
                - 2.0 * self.C * gammaln(r)
            )
        sums = sums + 2.0 * self.C * r * np.log(r)
        return np.where(pois, 0.0, sums)

    def _t_col(self, r, pois):
        """Per-gene column sum of the mean-dependent log-pmf terms that do
        not cancel between overdispersion regimes.  The y*log(mu) pieces
        are shared by both regimes and drop out of every eta delta."""
        rr = r[None, :]
        nb = -((self.ys + rr) * np.log(rr + self.Ms)).sum(axis=0) - (
            (self.yu + rr) * np.log(rr + self.Mu)
        ).sum(axis=0)
        if not pois.any():
            return nb
        po = -self.Ms.sum(axis=0) - self.Mu.sum(axis=0)
        return np.where(pois, po, nb)

    def _delta_positions(self, S2, U2):
        """Log-likelihood change matrix for proposed curve positions.

        The mean ratio factors through the positions, so its log is taken
        on the small (R, G) ratio and gathered to cells.  Entries for
        invalid proposals may be NaN; callers mask them before use.
        """
        soc = self.soc
        Ms2 = self.lam[:, None] * S2[soc, :]
        Mu2 = self.lam[:, None] * U2[soc, :]
        lr_s = np.log(S2 / self.S)[soc, :]
        lr_u = np.log(U2 / self.U)[soc, :]
        r = self.r[None, :]
        dT = (
            self.ys * lr_s
            - self.ysr * np.log((r + Ms2) / (r + self.Ms))
            + self.yu * lr_u
            - self.yur * np.log((r + Mu2) / (r + self.Mu))
        )
        if self.any_pois:
            dP = self.ys * lr_s - (Ms2 - self.Ms) + self.yu * lr_u - (Mu2 - self.Mu)
            dT = np.where(self.pois[None, :], dP, dT)
        return dT, Ms2, Mu2

    def _delta_lam(self, lam2):
        """Log-likelihood change matrix for proposed capture efficiencies."""
        Ms2 = lam2[:, None] * self.S[self.soc, :]
        Mu2 = lam2[:, None] * self.U[self.soc, :]
        lr = np.log(lam2 / self.lam)[:, None]
        r = self.r[None, :]
        dT = (
            self.ytot * lr
            - self.ysr * np.log((r + Ms2) / (r + self.Ms))
            - self.yur * np.log((r + Mu2) / (r + self.Mu))
        )
        if self.any_pois:
            dP = self.ytot * lr - (Ms2 - self.Ms) - (Mu2 - self.Mu)
            dT = np.where(self.pois[None, :], dP, dT)
        return dT, Ms2, Mu2

    def _segment_sums(self, mat, starts, seg_ids, n_out):
        sums = np.add.reduceat(mat, starts, axis=0)
        out = np.empty((n_out, self.G))
        out[seg_ids] = sums
        return out

    def _log_jacobian(self, z):
        def logsig(v):
            return -_softplus(-v)

        def logsigp(v):
            return -_softplus(v) - _softplus(-v)

        return (
            3.0 * math.log(self.a)
            + logsigp(z[:, 0])
            + logsig(z[:, 1])
            + logsigp(z[:, 1])
            + logsigp(z[:, 2])
        )

    def _write_means(self, mask_cg, Ms2, Mu2):
        np.copyto(self.Ms, Ms2, where=mask_cg)
        np.copyto(self.Mu, Mu2, where=mask_cg)

    # -- family updates ---------------------------------------------------

    def _update_joint(self, k):
        rng = self.rng
        eps = rng.standard_normal((self.G, 3))
        z2 = self.z + np.einsum("gij,gj->gi", self.joint_chol, eps)
        sig1 = expit(z2[:, 0])
        sig2 = expit(z2[:, 1])
        sig3 = expit(z2[:, 2])
        u_on2 = self.a * sig2
        u_off2 = u_on2 * sig1
        s_on2 = self.a * sig3
        ok = (
            (u_off2 > 0)
            & (u_off2 < u_on2)
            & (s_on2 > 0)
            & (self.u_sw > u_off2[None, :]).all(axis=0)
            & (self.u_sw < u_on2[None, :]).all(axis=0)
        )
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            S2, U2 = geometry.positions_from_phi(
                self.phi, self.u_sw[self.gos, :], u_off2, u_on2, s_on2, self.p, self.beta
            )
            dT, Ms2, Mu2 = self._delta_positions(S2, U2)
            dll = dT.sum(axis=0)
            dlp = np.log(s_on2 / self.s_on) + self.K * (
                np.log(self.u_on - self.u_off) - np.log(u_on2 - u_off2)
            )
            logJ2 = self._log_jacobian(z2)
            delta = np.where(ok, dll + dlp + logJ2 - self.logJ, -np.inf)
            logu = np.log(rng.random(self.G))
        accept = logu < delta
        alpha = np.where(np.isnan(delta), 0.0, np.exp(np.minimum(delta, 0.0)))

        if accept.any():
            self.cum_delta += float((dll + dlp)[accept].sum())
            self._write_means(accept[None, :], Ms2, Mu2)
            np.copyto(self.S, S2, where=accept[None, :])
            np.copyto(self.U, U2, where=accept[None, :])
            self.z[accept] = z2[accept]
            self.u_off[accept] = u_off2[accept]
            self.u_on[accept] = u_on2[accept]
            self.s_on[accept] = s_on2[accept]
            self.logJ[accept] = logJ2[accept]
        self._record_accept("joint", accept.sum(), self.G)

        if self.cfg.adapt_start <= k <= self.adapt_end:
            proposal_cov = adapt_joint_block(
                self.joint_mean, self.joint_cov, self.joint_logscale,
                self.z, alpha, k,
                self.cfg.gamma_c1, self.cfg.gamma_c2, self.cfg.target_accept,
            )
            self.joint_chol = np.linalg.cholesky(proposal_cov)

    def _update_eta(self, k):
        rng = self.rng
        eta2 = self.eta + np.exp(self.logsd["eta"]) * rng.standard_normal(self.G)
        ok = eta2 >= 0
        r2 = 1.0 / np.maximum(eta2, 1e-12)
        pois2 = eta2 < model.POISSON_ETA
        with np.errstate(divide="ignore", invalid="ignore"):
            sgl2 = self._const_col(r2, pois2)
            d_const = sgl2 - self.sgl
            d_t = self._t_col(r2, pois2) - self._t_col(self.r, self.pois)
            d_prior = -(eta2**2 - self.eta**2) / (2.0 * model.ETA_PRIOR_SD**2)
            delta = np.where(ok, d_const + d_t + d_prior, -np.inf)
            logu = np.log(rng.random(self.G))
        accept = logu < delta
        if accept.any():
            self.cum_delta += float(delta[accept].sum())
            self.eta[accept] = eta2[accept]
            self.r[accept] = r2[accept]
            self.pois[accept] = pois2[accept]
            self.sgl[accept] = sgl2[accept]
            self.any_pois = bool(self.pois.any())
            m = accept[None, :]
            np.copyto(self.ysr, self.ys + self.r[None, :], where=m)
            np.copyto(self.yur, self.yu + self.r[None, :], where=m)
        self._record_accept("eta", accept.sum(), self.G)
        self.window_acc["eta"] += accept

    def _update_u_sw(self, k):
        rng = self.rng
        usw2 = self.u_sw + np.exp(self.logsd["u_sw"]) * rng.standard_normal((self.K, self.G))
        ok = (usw2 > self.u_off[None, :]) & (usw2 < self.u_on[None, :])
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            S2, U2 = geometry.positions_from_phi(
                self.phi, usw2[self.gos, :], self.u_off, self.u_on, self.s_on,
                self.p, self.beta,
            )
            dT, Ms2, Mu2 = self._delta_positions(S2, U2)
            if self.K == 1:
                dkg = dT.sum(axis=0, keepdims=True)
            else:
                dkg = self._segment_sums(dT, self.grp_starts, self.grp_seg_ids, self.K)
            delta = np.where(ok, dkg, -np.inf)
            logu = np.log(rng.random((self.K, self.G)))
        accept = logu < delta
        if accept.any():
            self.cum_delta += float(delta[accept].sum())
            self._write_means(accept[self.goc, :], Ms2, Mu2)
            mask_rg = accept[self.gos, :]
            np.copyto(self.S, S2, where=mask_rg)
            np.copyto(self.U, U2, where=mask_rg)
            self.u_sw[accept] = usw2[accept]
        self._record_accept("u_sw", accept.sum(), self.K * self.G)
        self.window_acc["u_sw"] += accept

    def _update_phi(self, k):
        rng = self.rng
        phi2 = self.phi + np.exp(self.logsd["phi"]) * rng.standard_normal((self.R, self.G))
        ok = (phi2 >= 0) & (phi2 <= geometry.TWO_PI)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            S2, U2 = geometry.positions_from_phi(
                phi2, self.u_sw[self.gos, :], self.u_off, self.u_on, self.s_on,
                self.p, self.beta,
            )
            dT, Ms2, Mu2 = self._delta_positions(S2, U2)
            drg = self._segment_sums(dT, self.sub_starts, self.sub_seg_ids, self.R)
            delta = np.where(ok, drg, -np.inf)
            logu = np.log(rng.random((self.R, self.G)))
        accept = logu < delta
        if accept.any():
            self.cum_delta += float(delta[accept].sum())
            self._write_means(accept[self.soc, :], Ms2, Mu2)
            np.copyto(self.S, S2, where=accept)
            np.copyto(self.U, U2, where=accept)
            self.phi[accept] = phi2[accept]
        self._record_accept("phi", accept.sum(), self.R * self.G)
        self.window_acc["phi"] += accept

    def _update_lam(self, k):
        rng = self.rng
        lam2 = self.lam + np.exp(self.logsd["lam"]) * rng.standard_normal(self.C)
        ok = (lam2 > 0) & (lam2 <= 1)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            dT, Ms2, Mu2 = self._delta_lam(lam2)
            delta = np.where(ok, dT.sum(axis=1), -np.inf)
            logu = np.log(rng.random(self.C))
        accept = logu < delta
        if accept.any():
            self.cum_delta += float(delta[accept].sum())
            self._write_means(accept[:, None], Ms2, Mu2)
            self.lam[accept] = lam2[accept]
        self._record_accept("lam", accept.sum(), self.C)
        self.window_acc["lam"] += accept

    # -- schedule ----------------------------------------------------------

    def _adapt_univariates(self, k):
        interval = self.cfg.univariate_adapt_interval
        for name in ("eta", "u_sw", "phi", "lam"):
            rate = self.window_acc[name] / interval
            self.logsd[name] = adapt_univariate(
                rate, self.logsd[name], k, self.cfg.gamma_c1, self.cfg.gamma_c2,
                self.cfg.target_accept,
            )

    def _reset_windows(self):
        for v in self.window_acc.values():
            v[:] = 0.0

    def sweep(self, k):
        self.k = k
        self._update_joint(k)
        self._update_eta(k)
        self._update_u_sw(k)
        self._update_phi(k)
        self._update_lam(k)
        if k % self.cfg.univariate_adapt_interval == 0:
            if self.cfg.adapt_start <= k <= self.adapt_end:
                self._adapt_univariates(k)
            self._reset_windows()
        if k == self.adapt_end:
            self.diag_snapshots["joint_chol_freeze"] = self.joint_chol.copy()
            self.diag_snapshots["logsd_freeze"] = {
                n: v.copy() for n, v in self.logsd.items()
            }

    def retain(self):
        state = self.current_state()
        ll, mat = model.log_likelihood(state, self.data, return_matrix=True)
        lp = ll + model.log_prior(state)
        rescaled = model.rescale_capture(state)
        self.retained.append(rescaled)
        self.retained_lp.append(lp)
        if self.cfg.store_loglik:
            self.retained_ll.append(mat.astype(self.cfg.loglik_dtype))

    def debug_validate(self):
        lp_now = model.log_posterior(self.current_state(), self.data)
        drift = abs(lp_now - (self.lp0 + self.cum_delta))
        if drift > 1e-6 * max(1.0, abs(lp_now)):
            raise AssertionError(
                f"cached posterior drifted from reference by {drift:.3e} at k={self.k}"
            )

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path):
        stacks = {}
        if self.retained:
            stacks = _stack_draws(self.retained, self.retained_lp, self.retained_ll)
        np.savez(
            path,
            k=self.k,
            a=self.a,
            p=self.p,
            z=self.z,
            u_off=self.u_off, u_on=self.u_on, s_on=self.s_on, eta=self.eta,
            u_sw=self.u_sw, phi=self.phi, lam=self.lam,
            joint_mean=self.joint_mean, joint_cov=self.joint_cov,
            joint_logscale=self.joint_logscale,
            logsd_eta=self.logsd["eta"], logsd_u_sw=self.logsd["u_sw"],
            logsd_phi=self.logsd["phi"], logsd_lam=self.logsd["lam"],
            win_eta=self.window_acc["eta"], win_u_sw=self.window_acc["u_sw"],
            win_phi=self.window_acc["phi"], win_lam=self.window_acc["lam"],
            rng_state=np.frombuffer(
                json.dumps(self.rng.bit_generator.state).encode(), dtype=np.uint8
            ),
            lp0=self.lp0,
            cum_delta=self.cum_delta,
            acc=json.dumps({f: self.acc[f] for f in self.FAMILIES}),
            prop=json.dumps({f: self.prop[f] for f in self.FAMILIES}),
            acc_frozen=json.dumps({f: self.acc_frozen[f] for f in self.FAMILIES}),
            prop_frozen=json.dumps({f: self.prop_frozen[f] for f in self.FAMILIES}),
            **{f"ret_{name}": v for name, v in stacks.items() if v is not None},
        )

    def load_checkpoint(self, path):
        with np.load(path, allow_pickle=False) as ck:
            self.k = int(ck["k"])
            self.u_off = ck["u_off"].copy()
            self.u_on = ck["u_on"].copy()
            self.s_on = ck["s_on"].copy()
            self.eta = ck["eta"].copy()
            self.u_sw = ck["u_sw"].copy()
            self.phi = ck["phi"].copy()
            self.lam = ck["lam"].copy()
            self.z = ck["z"].copy()
            self.joint_mean = ck["joint_mean"].copy()
            self.joint_cov = ck["joint_cov"].copy()
            self.joint_logscale = ck["joint_logscale"].copy()
            for name in ("eta", "u_sw", "phi", "lam"):
                self.logsd[name] = ck[f"logsd_{name}"].copy()
                self.window_acc[name] = ck[f"win_{name}"].copy()
            self.rng.bit_generator.state = json.loads(ck["rng_state"].tobytes().decode())
            self.lp0 = float(ck["lp0"])
            self.cum_delta = float(ck["cum_delta"])
            self.acc = {k: int(v) for k, v in json.loads(str(ck["acc"])).items()}
            self.prop = {k: int(v) for k, v in json.loads(str(ck["prop"])).items()}
            self.acc_frozen = {
                k: int(v) for k, v in json.loads(str(ck["acc_frozen"])).items()
            }
            self.prop_frozen = {
                k: int(v) for k, v in json.loads(str(ck["prop_frozen"])).items()
            }
            self.retained = []
            self.retained_lp = []
            self.retained_ll = []
            if "ret_u_off" in ck:
                n = ck["ret_u_off"].shape[0]
                for i in range(n):
                    st = model.ModelState(
                        ck["ret_u_off"][i], ck["ret_u_on"][i], ck["ret_s_on"][i],
                        ck["ret_eta"][i], ck["ret_u_sw"][i], ck["ret_phi"][i],
                        ck["ret_lam"][i], self.a, self.p, self.beta,
                    )
                    self.retained.append(st)
                    self.retained_lp.append(float(ck["ret_log_posterior"][i]))
                    if "ret_loglik" in ck:
                        self.retained_ll.append(ck["ret_loglik"][i])
        self._refresh_caches()
        self._update_joint_chol()


def _logit(x):
    return np.log(x) - np.log1p(-x)


def _stack_draws(states, lps, lls):
    out = {
        "u_off": np.stack([s.u_off for s in states]),
        "u_on": np.stack([s.u_on for s in states]),
        "s_on": np.stack([s.s_on for s in states]),
        "eta": np.stack([s.eta for s in states]),
        "u_sw": np.stack([s.u_sw for s in states]),
        "phi": np.stack([s.phi for s in states]),
        "lam": np.stack([s.lam for s in states]),
        "log_posterior": np.asarray(lps, dtype=float),
    }
    out["loglik"] = np.stack(lls) if lls else None
    return out


def run_chain(
    data: model.Dataset,
    cfg: ChainConfig,
    init: model.ModelState | None = None,
    resume_from: str | None = None,
) -> PosteriorDraws:
    """Run the sampler and return thinned, capture-rescaled draws.

    Fully deterministic given ``cfg.seed``.  With ``resume_from`` pointing
    at a checkpoint written by a run with identical data and config, the
    chain continues bitwise-identically to an uninterrupted run.
    """
    chain = _Chain(data, cfg, init)
    start_k = 0
    if resume_from is not None:
        chain.load_checkpoint(resume_from)
        start_k = chain.k
    t0 = time.time()
    for k in range(start_k + 1, cfg.n_iter + 1):
        chain.sweep(k)
        if k > cfg.n_burnin and (k - cfg.n_burnin) % cfg.thin == 0:
            chain.retain()
        if cfg.checkpoint_every and k % cfg.checkpoint_every == 0 and cfg.checkpoint_path:
            chain.save_checkpoint(cfg.checkpoint_path)
        if cfg.debug_validate_every and k % cfg.debug_validate_every == 0:
            chain.debug_validate()
    runtime = time.time() - t0

    stacks = _stack_draws(chain.retained, chain.retained_lp, chain.retained_ll)
    diagnostics = {
        "acceptance_rate": {
            f: (chain.acc[f] / chain.prop[f] if chain.prop[f] else float("nan"))
            for f in chain.FAMILIES
        },
        "acceptance_rate_frozen": {
            f: (
                chain.acc_frozen[f] / chain.prop_frozen[f]
                if chain.prop_frozen[f]
                else float("nan")
            )
            for f in chain.FAMILIES
        },
        "joint_chol_freeze": chain.diag_snapshots.get("joint_chol_freeze"),
        "joint_chol_final": chain.joint_chol.copy(),
        "logsd_freeze": chain.diag_snapshots.get("logsd_freeze"),
        "logsd_final": {n: v.copy() for n, v in chain.logsd.items()},
        "runtime_seconds": runtime,
    }
    cfg_echo = asdict(cfg)
    cfg_echo["a"] = chain.a
    return PosteriorDraws(
        u_off=stacks["u_off"], u_on=stacks["u_on"], s_on=stacks["s_on"],
        eta=stacks["eta"], u_sw=stacks["u_sw"], phi=stacks["phi"], lam=stacks["lam"],
        log_posterior=stacks["log_posterior"], loglik=stacks["loglik"],
        a=chain.a, p=chain.p, beta=chain.beta,
        group_of_cell=data.group_of_cell.copy(),
        subgroup_of_cell=data.subgroup_of_cell.copy(),
        group_of_subgroup=data.group_of_subgroup.copy(),
        diagnostics=diagnostics,
        config=cfg_echo,
    )
