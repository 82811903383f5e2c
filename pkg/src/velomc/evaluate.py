"""Posterior summaries and evaluation metrics.

Turns retained draws into the derived quantities of interest (steady-state
coordinates, switching points, subgroup positions, velocities), compares
them against a generating truth via relative/absolute errors and credible
interval coverage, scores fits with WAIC, and provides the linear PCA
projection used to display positions and velocity arrows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import linkage, to_tree
from scipy.special import logsumexp

from . import geometry, model
from .sampler import PosteriorDraws

__all__ = [
    "FAMILIES",
    "SummaryTable",
    "ProjectionResult",
    "derived_draws",
    "derived_truth",
    "relative_error",
    "credible_interval",
    "coverage",
    "median_ci_length",
    "waic",
    "map_estimate",
    "posterior_median",
    "summary_table",
    "pca_project",
    "future_state",
    "derive_subgroups",
]

# Parameter families reported in the summary table, in display order.
FAMILIES = (
    "u_off", "s_off", "u_on", "s_on", "u_sw", "s_sw",
    "u_pos", "s_pos", "velocity", "eta", "lam",
)


def _switch_s(u_off, u_on, s_on, u_sw, p, beta):
    """Spliced coordinate of the switching point, vectorized."""
    gamma = beta * u_on / s_on
    sigma_off = u_off * s_on / u_on
    x_sw = (u_on - u_sw) / (u_on - u_off)
    return geometry._s_on_curve(x_sw, u_off, u_on, s_on, sigma_off, gamma, beta)


def derived_draws(draws: PosteriorDraws) -> dict:
    """Per-draw arrays for every reported family.

    Gene families are (D, G); switching families (D, K, G); position and
    velocity families (D, R, G); capture efficiency (D, C).
    """
    d, g = draws.u_off.shape
    gos = draws.group_of_subgroup
    out = {
        "u_off": draws.u_off,
        "s_off": draws.u_off * draws.s_on / draws.u_on,
        "u_on": draws.u_on,
        "s_on": draws.s_on,
        "u_sw": draws.u_sw,
        "eta": draws.eta,
        "lam": draws.lam,
    }
    out["s_sw"] = _switch_s(
        draws.u_off[:, None, :], draws.u_on[:, None, :], draws.s_on[:, None, :],
        draws.u_sw, draws.p, draws.beta,
    )
    u_sw_rows = draws.u_sw[:, gos, :]
    s_pos, u_pos = geometry.positions_from_phi(
        draws.phi, u_sw_rows,
        draws.u_off[:, None, :], draws.u_on[:, None, :], draws.s_on[:, None, :],
        draws.p, draws.beta,
    )
    out["s_pos"] = s_pos
    out["u_pos"] = u_pos
    gamma = draws.beta * draws.u_on / draws.s_on
    out["velocity"] = draws.beta * u_pos - gamma[:, None, :] * s_pos
    return out


def derived_truth(truth) -> dict:
    """The same families computed from a generating truth."""
    return {
        "u_off": truth.u_off,
        "s_off": truth.sigma_off,
        "u_on": truth.u_on,
        "s_on": truth.s_on,
        "u_sw": truth.u_sw,
        "s_sw": _switch_s(truth.u_off, truth.u_on, truth.s_on, truth.u_sw,
                          truth.p, truth.beta),
        "u_pos": truth.u_pos,
        "s_pos": truth.s_pos,
        "velocity": truth.velocity(),
        "eta": truth.eta,
        "lam": truth.lam,
    }


def relative_error(estimate, truth):
    """|(estimate - truth) / truth|, elementwise; NaN where truth is zero."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.abs((estimate - truth) / truth)
    out = np.where(truth == 0, np.nan, out)
    return out if out.ndim else float(out)


def credible_interval(samples, level=0.95, axis=0):
    """Equal-tailed interval from quantiles along ``axis``."""
    samples = np.asarray(samples)
    if samples.shape[axis] < 2:
        raise ValueError("need at least two draws for an interval")
    tail = (1.0 - level) / 2.0
    lo = np.quantile(samples, tail, axis=axis)
    hi = np.quantile(samples, 1.0 - tail, axis=axis)
    return lo, hi


def coverage(lo, hi, truth) -> float:
    """Fraction of true values inside their intervals."""
    inside = (np.asarray(truth) >= lo) & (np.asarray(truth) <= hi)
    return float(np.mean(inside))


def median_ci_length(lo, hi) -> float:
    return float(np.median(np.asarray(hi) - np.asarray(lo)))


def waic(loglik, return_parts=False):
    """Widely applicable information criterion from a (draws, terms) matrix.

    waic = -2 * (lppd - p), with lppd the summed log pointwise predictive
    density (log of the draw-averaged likelihood) and p the summed
    across-draw variance of the log likelihood terms.  Lower is better.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim > 2:
        ll = ll.reshape(ll.shape[0], -1)
    if ll.shape[0] < 2:
        raise ValueError("need at least two draws")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihood matrix must be finite")
    d = ll.shape[0]
    lppd = float(np.sum(logsumexp(ll, axis=0) - math.log(d)))
    p = float(np.sum(np.var(ll, axis=0, ddof=1)))
    value = -2.0 * (lppd - p)
    if return_parts:
        return value, lppd, p
    return value


def map_estimate(draws: PosteriorDraws) -> model.ModelState:
    """Retained draw with the highest stored log posterior (first on ties)."""
    idx = int(np.argmax(draws.log_posterior))
    return draws.state_at(idx)


def posterior_median(draws: PosteriorDraws) -> model.ModelState:
    """Componentwise posterior medians assembled into a state."""
    med = lambda arr: np.median(arr, axis=0)
    return model.ModelState(
        med(draws.u_off), med(draws.u_on), med(draws.s_on), med(draws.eta),
        med(draws.u_sw), med(draws.phi), med(draws.lam),
        draws.a, draws.p, draws.beta,
    )


@dataclass
class SummaryTable:
    """Per-family posterior summaries against an optional truth."""

    rows: dict = field(default_factory=dict)
    excluded_zero_truth: dict = field(default_factory=dict)

    def to_csv(self, path):
        cols = ["family", "median_rel_error", "median_abs_error",
                "coverage_95", "median_ci_length", "n_zero_truth_excluded"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for fam, row in self.rows.items():
                vals = [fam] + [
                    _fmt(row.get(c)) for c in cols[1:-1]
                ] + [str(self.excluded_zero_truth.get(fam, 0))]
                fh.write(",".join(vals) + "\n")


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


def summary_table(draws: PosteriorDraws, truth=None, level=0.95) -> SummaryTable:
    """Median relative/absolute errors, CI coverage and CI length per family.

    Error and coverage columns need a truth; otherwise only interval
    lengths are reported.  Entries with zero true value are excluded from
    the relative error and counted.
    """
    der = derived_draws(draws)
    tru = derived_truth(truth) if truth is not None else None
    table = SummaryTable()
    for fam in FAMILIES:
        sample = der[fam]
        lo, hi = credible_interval(sample, level=level)
        row = {"median_ci_length": median_ci_length(lo, hi)}
        if tru is not None:
            t = tru[fam]
            est = np.median(sample, axis=0)
            rel = relative_error(est, t)
            n_zero = int(np.isnan(rel).sum())
            row["median_rel_error"] = (
                float(np.nanmedian(rel)) if n_zero < rel.size else None
            )
            row["median_abs_error"] = float(np.median(np.abs(est - t)))
            row["coverage_95"] = coverage(lo, hi, t)
            table.excluded_zero_truth[fam] = n_zero
        table.rows[fam] = row
    return table


@dataclass
class ProjectionResult:
    """Column-centered PCA basis plus the projected data scores."""

    loadings: np.ndarray   # (G, d), orthonormal columns
    scores: np.ndarray     # (C, d)
    center: np.ndarray     # (G,)
    explained_variance: np.ndarray

    def project(self, x):
        """Project rows of ``x`` with the stored centering and basis."""
        return (np.asarray(x, dtype=float) - self.center) @ self.loadings

    def project_directions(self, v):
        """Project displacement vectors (no centering)."""
        return np.asarray(v, dtype=float) @ self.loadings


def pca_project(matrix, d) -> ProjectionResult:
    """Principal components of a (cells, genes) matrix.

    Columns are centered, not scaled.  Loadings are the top-``d`` right
    singular vectors; scores are the centered data times the loadings.
    """
    x = np.asarray(matrix, dtype=float)
    if d < 1:
        raise ValueError("d must be >= 1")
    center = x.mean(axis=0)
    xc = x - center
    u, sing, vt = np.linalg.svd(xc, full_matrices=False)
    rank = int(np.sum(sing > sing[0] * max(x.shape) * np.finfo(float).eps)) if sing.size else 0
    if d > rank:
        raise ValueError(f"requested {d} components but the matrix has rank {rank}")
    loadings = vt[:d].T
    scores = xc @ loadings
    n = max(x.shape[0] - 1, 1)
    return ProjectionResult(loadings, scores, center, (sing[:d] ** 2) / n)


def future_state(s_now, v, dt=0.001):
    """First-order future spliced state s + v * dt."""
    return np.asarray(s_now, dtype=float) + dt * np.asarray(v, dtype=float)


def derive_subgroups(counts, group_labels, min_size=30, n_components=2,
                     height_ratio=2.0):
    """Split each cell group into subgroups by top-down Ward clustering.

    Cells of one group are projected onto their first two principal
    components; the Ward merge tree is then descended from the root.  A
    split is accepted while both children keep at least ``min_size`` cells
    and the merge height clearly dominates the children's heights (factor
    ``height_ratio``), so homogeneous clouds are not shredded into
    arbitrary halves.  Groups smaller than ``2 * min_size`` (or too small
    to project) stay whole.  Returns subgroup labels, contiguous from 0
    and nested in the group labels.
    """
    counts = np.asarray(counts, dtype=float)
    group_labels = np.asarray(group_labels)
    sub = np.full(counts.shape[0], -1, dtype=np.int64)
    next_id = 0
    for grp in np.unique(group_labels):
        idx = np.flatnonzero(group_labels == grp)
        if idx.size < 2 * min_size:
            sub[idx] = next_id
            next_id += 1
            continue
        block = counts[idx]
        d = min(n_components, *block.shape)
        try:
            proj = pca_project(block, d).scores
        except ValueError:
            proj = block - block.mean(axis=0)
        tree = to_tree(linkage(proj, method="ward"))
        clusters = []

        def descend(node):
            big_enough = (
                not node.is_leaf()
                and node.left.get_count() >= min_size
                and node.right.get_count() >= min_size
            )
            separated = not node.is_leaf() and node.dist > height_ratio * max(
                node.left.dist, node.right.dist
            )
            if big_enough and separated:
                descend(node.left)
                descend(node.right)
            else:
                clusters.append(node.pre_order(lambda n: n.id))

        descend(tree)
        for members in clusters:
            sub[idx[np.asarray(members, dtype=int)]] = next_id
            next_id += 1
    return sub
