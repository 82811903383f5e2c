"""Hierarchical count model: data layout, likelihood, priors, rescaling.

Counts are Negative Binomial around cell-scaled curve positions: for a
cell ``c`` in group ``k`` and subgroup ``r``, the spliced/unspliced means
are ``lam_c * s_pos[r, g]`` and ``lam_c * u_pos[r, g]`` with gene-specific
overdispersion ``eta_g`` (Var = mu + mu^2 * eta).  Positions come from the
angular geometry; ``beta`` is fixed to 1 for identifiability and the mean
capture efficiency is pinned to 1 by post-hoc rescaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from . import geometry

__all__ = [
    "Dataset",
    "ModelState",
    "nb_logpmf",
    "log_likelihood",
    "log_prior",
    "log_prior_components",
    "log_posterior",
    "rescale_capture",
    "validate_state",
]

# Below this overdispersion the NB is numerically Poisson.
POISSON_ETA = 1e-10
# Scale of the half-normal prior on the overdispersion.
ETA_PRIOR_SD = 10000.0
# r = 1/eta above which gammaln(y + r) - gammaln(r) is evaluated as a
# rising-factorial log sum; the direct difference loses ~r*eps absolute.
_BIG_R = 1e4
_BIG_R_YMAX = 4096


class DataError(ValueError):
    """Raised when input matrices or labels violate the data contract."""


@dataclass
class Dataset:
    """Paired spliced/unspliced count matrices with a two-level cell grouping.

    Attributes
    ----------
    y_spliced, y_unspliced : (C, G) integer arrays
    group_of_cell : (C,) int array with values in 0..K-1
    subgroup_of_cell : (C,) int array with values in 0..R-1
    group_of_subgroup : (R,) int array, derived; every subgroup belongs to
        exactly one group.
    group_names, subgroup_names : optional original label vocabularies.
    """

    y_spliced: np.ndarray
    y_unspliced: np.ndarray
    group_of_cell: np.ndarray
    subgroup_of_cell: np.ndarray
    group_of_subgroup: np.ndarray = field(default=None)
    group_names: list = field(default=None)
    subgroup_names: list = field(default=None)

    def __post_init__(self):
        ys = np.asarray(self.y_spliced)
        yu = np.asarray(self.y_unspliced)
        if ys.ndim != 2 or yu.shape != ys.shape:
            raise DataError(
                f"spliced and unspliced matrices must share one (C, G) shape, "
                f"got {ys.shape} and {yu.shape}"
            )
        for name, y in (("spliced", ys), ("unspliced", yu)):
            if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(y != np.floor(y)):
                raise DataError(f"{name} matrix must contain nonnegative integers")
        self.y_spliced = ys.astype(np.int64)
        self.y_unspliced = yu.astype(np.int64)
        c = ys.shape[0]
        goc = np.asarray(self.group_of_cell, dtype=np.int64)
        soc = np.asarray(self.subgroup_of_cell, dtype=np.int64)
        if goc.shape != (c,) or soc.shape != (c,):
            raise DataError("label vectors must have one entry per cell")
        k = int(goc.max()) + 1 if c else 0
        r = int(soc.max()) + 1 if c else 0
        if goc.min() < 0 or soc.min() < 0:
            raise DataError("labels must be nonnegative indices")
        if not set(range(k)) <= set(np.unique(goc).tolist()):
            raise DataError("group indices must be contiguous from 0")
        if not set(range(r)) <= set(np.unique(soc).tolist()):
            raise DataError("subgroup indices must be contiguous from 0")
        gos = np.full(r, -1, dtype=np.int64)
        for sub, grp in zip(soc, goc):
            if gos[sub] == -1:
                gos[sub] = grp
            elif gos[sub] != grp:
                raise DataError(
                    f"subgroup {sub} spans groups {gos[sub]} and {grp}; cells of "
                    f"different groups cannot share a subgroup"
                )
        if not (k <= r <= c):
            raise DataError(f"need K <= R <= C, got K={k}, R={r}, C={c}")
        self.group_of_cell = goc
        self.subgroup_of_cell = soc
        self.group_of_subgroup = gos

    @property
    def n_cells(self) -> int:
        return self.y_spliced.shape[0]

    @property
    def n_genes(self) -> int:
        return self.y_spliced.shape[1]

    @property
    def n_groups(self) -> int:
        return len(np.unique(self.group_of_cell))

    @property
    def n_subgroups(self) -> int:
        return len(self.group_of_subgroup)

    def max_count(self) -> int:
        return int(max(self.y_spliced.max(initial=0), self.y_unspliced.max(initial=0)))


@dataclass
class ModelState:
    """One point in parameter space.

    Gene-level: ``u_off``, ``u_on``, ``s_on`` (curve coordinates, shape (G,))
    and overdispersion ``eta`` (G,).  Group-level: switching u-coordinate
    ``u_sw`` (K, G).  Subgroup-level: angle ``phi`` (R, G).  Cell-level:
    capture efficiency ``lam`` (C,).  Globals: coordinate bound ``a``,
    sector amplitude ``p`` and the fixed splicing rate ``beta``.
    """

    u_off: np.ndarray
    u_on: np.ndarray
    s_on: np.ndarray
    eta: np.ndarray
    u_sw: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    a: float
    p: float = geometry.DEFAULT_SECTOR_P
    beta: float = 1.0

    def __post_init__(self):
        for name in ("u_off", "u_on", "s_on", "eta", "u_sw", "phi", "lam"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def copy(self) -> "ModelState":
        return ModelState(
            self.u_off.copy(), self.u_on.copy(), self.s_on.copy(), self.eta.copy(),
            self.u_sw.copy(), self.phi.copy(), self.lam.copy(),
            self.a, self.p, self.beta,
        )

    def positions(self, group_of_subgroup):
        """Curve positions (s, u) per (subgroup, gene), each (R, G)."""
        u_sw_rows = self.u_sw[np.asarray(group_of_subgroup), :]
        return geometry.positions_from_phi(
            self.phi, u_sw_rows, self.u_off, self.u_on, self.s_on, self.p, self.beta
        )


def _lgamma_ratio(y, r):
    """gammaln(y + r) - gammaln(r), elementwise, precise for large r.

    For r > _BIG_R and moderate integer y the difference is the log of a
    rising factorial and is summed directly; otherwise the two gammaln
    calls are accurate enough.
    """
    y = np.asarray(y, dtype=float)
    r = np.asarray(r, dtype=float)
    out = np.asarray(gammaln(y + r) - gammaln(r))
    scalar = out.ndim == 0
    big = np.broadcast_to((r > _BIG_R) & (y > 0) & (y <= _BIG_R_YMAX), out.shape)
    if np.any(big):
        shape = out.shape
        flat = np.ascontiguousarray(out).reshape(-1)
        yb = np.broadcast_to(y, shape).reshape(-1)
        rb = np.broadcast_to(r, shape).reshape(-1)
        for i in np.flatnonzero(big.reshape(-1)):
            flat[i] = np.log(rb[i] + np.arange(int(yb[i]))).sum()
        out = flat.reshape(shape)
    return float(out) if scalar else out


def nb_logpmf(y, mu, eta):
    """Log pmf of the mean/overdispersion Negative Binomial.

    ``Y ~ NB(mu, eta)`` has mean ``mu`` and variance ``mu + mu^2 * eta``;
    the size parameter is ``r = 1/eta``.  For ``eta < 1e-10`` the Poisson
    log pmf is returned.  ``mu = 0`` degenerates to a point mass at 0.
    Broadcasts over array arguments.
    """
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("counts must be nonnegative integers")
    y = y.astype(float)
    mu = np.asarray(mu, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise ValueError("mu must be finite and nonnegative")
    if np.any(eta < 0):
        raise ValueError("eta must be nonnegative")
    y, mu, eta = np.broadcast_arrays(y, mu, eta)

    safe_mu = np.where(mu > 0, mu, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_mu = np.log(safe_mu)
        pois = y * log_mu - safe_mu - gammaln(y + 1.0)
        safe_eta = np.where(eta > 0, eta, 1.0)
        r = 1.0 / safe_eta
        nb = (
            _lgamma_ratio(y, r)
            - gammaln(y + 1.0)
            - r * np.log1p(mu / r)
            + y * (log_mu - np.log(r + mu))
        )
    out = np.where(eta < POISSON_ETA, pois, nb)
    out = np.where(mu > 0, out, np.where(y == 0, 0.0, -np.inf))
    return out if out.ndim else float(out)


def log_likelihood(state: ModelState, data: Dataset, return_matrix: bool = False):
    """Total log likelihood; optionally also the per-(cell, gene) terms.

    Each (c, g) term is the sum of the spliced and unspliced contributions,
    so the matrix sums to the scalar along either axis.
    """
    s_pos, u_pos = state.positions(data.group_of_subgroup)
    soc = data.subgroup_of_cell
    mu_s = state.lam[:, None] * s_pos[soc, :]
    mu_u = state.lam[:, None] * u_pos[soc, :]
    if not (np.all(np.isfinite(mu_s)) and np.all(np.isfinite(mu_u))):
        raise RuntimeError("non-finite likelihood means; curve geometry is invalid")
    mat = nb_logpmf(data.y_spliced, mu_s, state.eta[None, :]) + nb_logpmf(
        data.y_unspliced, mu_u, state.eta[None, :]
    )
    total = float(mat.sum())
    if return_matrix:
        return total, mat
    return total


def log_prior_components(state: ModelState) -> dict:
    """Per-block log prior contributions.

    Blocks: 'coords' (flat ordered-triple prior on (u_off, u_on) within
    [0, a]), 's_on' (Beta(2, 1) on s_on/a), 'u_sw' (uniform between the
    steady-state u-coordinates), 'phi' (uniform on [0, 2*pi]), 'eta'
    (half-normal, unnormalized), 'lam' (uniform on (0, 1]).  Any support
    violation makes its block -inf.
    """
    a = state.a
    out = {}

    ok = (
        np.all(state.u_off >= 0)
        and np.all(state.u_off < state.u_on)
        and np.all(state.u_on <= a)
    )
    g = state.u_off.size
    out["coords"] = g * (math.log(2.0) - 2.0 * math.log(a)) if ok else -math.inf

    if np.all((state.s_on > 0) & (state.s_on <= a)):
        out["s_on"] = float(np.sum(np.log(2.0 * state.s_on) - 2.0 * math.log(a)))
    else:
        out["s_on"] = -math.inf

    inside = (state.u_sw > state.u_off[None, :]) & (state.u_sw < state.u_on[None, :])
    if np.all(inside):
        k = state.u_sw.shape[0]
        out["u_sw"] = float(-k * np.sum(np.log(state.u_on - state.u_off)))
    else:
        out["u_sw"] = -math.inf

    if np.all((state.phi >= 0) & (state.phi <= geometry.TWO_PI)):
        out["phi"] = -state.phi.size * math.log(geometry.TWO_PI)
    else:
        out["phi"] = -math.inf

    if np.all(state.eta >= 0):
        # Normalizing constant dropped: it cancels in every MH ratio.
        out["eta"] = float(-np.sum(state.eta**2) / (2.0 * ETA_PRIOR_SD**2))
    else:
        out["eta"] = -math.inf

    out["lam"] = 0.0 if np.all((state.lam > 0) & (state.lam <= 1)) else -math.inf
    return out


def log_prior(state: ModelState) -> float:
    comps = log_prior_components(state)
    total = 0.0
    for v in comps.values():
        if v == -math.inf:
            return -math.inf
        total += v
    return total


def log_posterior(state: ModelState, data: Dataset) -> float:
    lp = log_prior(state)
    if lp == -math.inf:
        return -math.inf
    return lp + log_likelihood(state, data)


def rescale_capture(draw: ModelState) -> ModelState:
    """Pin the mean capture efficiency to 1.

    Divides every ``lam`` by its mean and multiplies the curve coordinates
    by the same factor; the likelihood is invariant under this joint
    scaling.
    """
    m = float(np.mean(draw.lam))
    out = draw.copy()
    out.lam /= m
    out.u_off *= m
    out.u_on *= m
    out.s_on *= m
    out.u_sw *= m
    return out


def validate_state(state: ModelState, data: Dataset) -> list:
    """Names of prior blocks at -inf, plus 'likelihood' if it is not finite."""
    bad = [name for name, v in log_prior_components(state).items() if v == -math.inf]
    if not bad:
        try:
            ll = log_likelihood(state, data)
        except RuntimeError:
            bad.append("likelihood")
        else:
            if not math.isfinite(ll):
                bad.append("likelihood")
    return bad
