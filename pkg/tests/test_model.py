import math

import numpy as np
import pytest

from velomc import model, simulate
from velomc.model import (
    DataError,
    Dataset,
    ModelState,
    log_likelihood,
    log_posterior,
    log_prior,
    log_prior_components,
    nb_logpmf,
    rescale_capture,
)

from oracles import nb_logpmf_mp


def small_state(a=30.0):
    return ModelState(
        u_off=np.array([1.0, 0.5]),
        u_on=np.array([6.0, 4.0]),
        s_on=np.array([8.0, 9.0]),
        eta=np.array([0.5, 0.8]),
        u_sw=np.array([[3.0, 2.0]]),
        phi=np.array([[1.0, 2.0], [4.0, 0.5], [6.0, 3.0]]),
        lam=np.array([0.9, 0.6, 1.0]),
        a=a,
    )


def small_data():
    return Dataset(
        y_spliced=np.array([[3, 1], [0, 2], [5, 4]]),
        y_unspliced=np.array([[2, 0], [1, 1], [3, 2]]),
        group_of_cell=np.array([0, 0, 0]),
        subgroup_of_cell=np.array([0, 1, 2]),
    )


# -- nb_logpmf ----------------------------------------------------------------

def test_nb_poisson_limit_at_zero_count():
    assert nb_logpmf(0, 1.0, 0.0) == pytest.approx(-1.0, abs=1e-12)
    assert nb_logpmf(0, 1.0, 1e-12) == pytest.approx(-1.0, abs=1e-9)


def test_nb_matches_high_precision_oracle():
    assert nb_logpmf(3, 2.0, 0.5) == pytest.approx(
        nb_logpmf_mp(3, 2.0, 0.5), abs=1e-12
    )


def test_nb_zero_mean_degenerates():
    assert nb_logpmf(0, 0.0, 0.5) == 0.0
    assert nb_logpmf(2, 0.0, 0.5) == -math.inf


def test_nb_rejects_bad_inputs():
    with pytest.raises(ValueError):
        nb_logpmf(-1, 1.0, 0.5)
    with pytest.raises(ValueError):
        nb_logpmf(1, -1.0, 0.5)
    with pytest.raises(ValueError):
        nb_logpmf(1, 1.0, -0.5)


def test_nb_sampling_moments():
    rng = np.random.default_rng(2)
    mu, eta, n = 5.0, 0.8, 1_000_000
    r = 1.0 / eta
    x = rng.negative_binomial(r, r / (r + mu), size=n)
    var = mu + mu * mu * eta
    se_mean = math.sqrt(var / n)
    assert x.mean() == pytest.approx(mu, abs=3 * se_mean)
    m4 = np.mean((x - x.mean()) ** 4)
    se_var = math.sqrt((m4 - var**2) / n)
    assert x.var(ddof=1) == pytest.approx(var, abs=3 * se_var)


def test_nb_vectorized_consistency():
    ys = np.arange(6).reshape(2, 3)
    mus = np.array([[0.5, 1.0, 2.0], [3.0, 4.0, 5.0]])
    etas = np.array([0.3, 0.0, 2.0])
    got = nb_logpmf(ys, mus, etas[None, :])
    for i in range(2):
        for j in range(3):
            assert got[i, j] == pytest.approx(
                nb_logpmf(int(ys[i, j]), mus[i, j], etas[j]), abs=1e-14
            )


# -- likelihood ----------------------------------------------------------------

def test_likelihood_brute_force_agreement():
    state, data = small_state(), small_data()
    total, mat = log_likelihood(state, data, return_matrix=True)
    s_pos, u_pos = state.positions(data.group_of_subgroup)
    acc = 0.0
    for c in range(3):
        r = data.subgroup_of_cell[c]
        for g in range(2):
            acc += nb_logpmf(
                int(data.y_spliced[c, g]), state.lam[c] * s_pos[r, g], state.eta[g]
            )
            acc += nb_logpmf(
                int(data.y_unspliced[c, g]), state.lam[c] * u_pos[r, g], state.eta[g]
            )
    assert total == pytest.approx(acc, abs=1e-9)
    assert mat.sum(axis=0).sum() == pytest.approx(total, abs=1e-9)
    assert mat.sum(axis=1).sum() == pytest.approx(total, abs=1e-9)


def test_likelihood_single_cell_sector_is_nb_at_lower_steady_state():
    state = ModelState(
        u_off=np.array([2.0]), u_on=np.array([8.0]), s_on=np.array([16.0]),
        eta=np.array([0.4]), u_sw=np.array([[5.0]]),
        phi=np.array([[2 * math.pi - 0.1]]), lam=np.array([1.0]), a=50.0,
    )
    data = Dataset(
        y_spliced=np.array([[3]]), y_unspliced=np.array([[1]]),
        group_of_cell=np.array([0]), subgroup_of_cell=np.array([0]),
    )
    expected = nb_logpmf(3, 4.0, 0.4) + nb_logpmf(1, 2.0, 0.4)
    assert log_likelihood(state, data) == pytest.approx(expected, abs=1e-12)


def test_capture_scaling_invariance():
    state, data = small_state(), small_data()
    base = log_likelihood(state, data)
    for a3 in (2.0, 0.37):
        scaled = state.copy()
        scaled.lam = state.lam / a3
        scaled.u_off = state.u_off * a3
        scaled.u_on = state.u_on * a3
        scaled.s_on = state.s_on * a3
        scaled.u_sw = state.u_sw * a3
        assert log_likelihood(scaled, data) == pytest.approx(base, abs=1e-9)


def test_poisson_reduction_at_tiny_eta():
    state, data = small_state(), small_data()
    state.eta = np.array([1e-12, 1e-12])
    near = log_likelihood(state, data)
    s_pos, u_pos = state.positions(data.group_of_subgroup)
    mu_s = state.lam[:, None] * s_pos[data.subgroup_of_cell, :]
    mu_u = state.lam[:, None] * u_pos[data.subgroup_of_cell, :]
    pois = (
        np.sum(data.y_spliced * np.log(mu_s) - mu_s
               - [[math.lgamma(y + 1) for y in row] for row in data.y_spliced])
        + np.sum(data.y_unspliced * np.log(mu_u) - mu_u
                 - [[math.lgamma(y + 1) for y in row] for row in data.y_unspliced])
    )
    assert near == pytest.approx(pois, abs=1e-9)


# -- prior ----------------------------------------------------------------------

def test_prior_support_violations():
    state = small_state()
    state.u_on[0] = state.a + 1.0
    assert log_prior(state) == -math.inf
    state = small_state()
    state.lam[1] = 1.5
    assert log_prior(state) == -math.inf
    state = small_state()
    state.u_sw[0, 0] = state.u_off[0]
    assert log_prior(state) == -math.inf
    state = small_state()
    state.phi[0, 0] = -0.2
    assert log_prior(state) == -math.inf
    state = small_state()
    state.eta[0] = -1e-9
    assert log_prior(state) == -math.inf


def test_prior_beta_density_on_upper_spliced_coordinate():
    state = small_state(a=30.0)
    state.s_on = np.array([15.0, 15.0])
    comps = log_prior_components(state)
    assert comps["s_on"] == pytest.approx(2 * math.log(1.0 / 30.0))


def test_prior_flat_in_phi():
    state = small_state()
    base = log_prior(state)
    state.phi = np.full_like(state.phi, 5.5)
    assert log_prior(state) == pytest.approx(base, abs=1e-12)


def test_log_posterior_composition():
    state, data = small_state(), small_data()
    lp = log_posterior(state, data)
    assert lp == pytest.approx(log_prior(state) + log_likelihood(state, data), abs=1e-12)
    assert math.isfinite(lp)
    state.lam[0] = 2.0
    assert log_posterior(state, data) == -math.inf


# -- rescaling --------------------------------------------------------------------

def test_rescale_capture_constant_lambda():
    state = small_state()
    state.lam = np.array([0.5, 0.5, 0.5])
    out = rescale_capture(state)
    assert np.allclose(out.lam, 1.0)
    assert np.allclose(out.u_off, state.u_off * 0.5)
    assert np.allclose(out.u_sw, state.u_sw * 0.5)


def test_rescale_capture_identity_at_unit_mean():
    state = small_state()
    state.lam = np.array([0.8, 1.0, 1.2])
    out = rescale_capture(state)
    assert np.allclose(out.lam, state.lam)
    assert np.allclose(out.u_on, state.u_on)


def test_rescale_capture_preserves_likelihood():
    state, data = small_state(), small_data()
    out = rescale_capture(state)
    assert log_likelihood(out, data) == pytest.approx(
        log_likelihood(state, data), abs=1e-9
    )
    assert np.mean(out.lam) == pytest.approx(1.0, abs=1e-14)


# -- dataset validation --------------------------------------------------------------

def test_dataset_rejects_subgroup_across_groups():
    with pytest.raises(DataError, match="spans groups"):
        Dataset(
            y_spliced=np.zeros((2, 1), dtype=int),
            y_unspliced=np.zeros((2, 1), dtype=int),
            group_of_cell=np.array([0, 1]),
            subgroup_of_cell=np.array([0, 0]),
        )


def test_dataset_rejects_non_integer_counts():
    with pytest.raises(DataError, match="nonnegative integers"):
        Dataset(
            y_spliced=np.array([[0.5]]),
            y_unspliced=np.array([[1.0]]),
            group_of_cell=np.array([0]),
            subgroup_of_cell=np.array([0]),
        )


def test_dataset_rejects_shape_mismatch():
    with pytest.raises(DataError, match="shape"):
        Dataset(
            y_spliced=np.zeros((2, 2), dtype=int),
            y_unspliced=np.zeros((2, 3), dtype=int),
            group_of_cell=np.array([0, 0]),
            subgroup_of_cell=np.array([0, 1]),
        )
