import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
import scipy.io
import scipy.sparse

from velomc import cli, io, model, simulate
from velomc.model import DataError


def write_dataset(tmp_path, ys, yu, groups, subs=None, ids=None):
    sp = tmp_path / "s.csv"
    up = tmp_path / "u.csv"
    np.savetxt(sp, ys, delimiter=",", fmt="%d")
    np.savetxt(up, yu, delimiter=",", fmt="%d")
    lp = tmp_path / "labels.csv"
    ids = ids or [f"c{i}" for i in range(len(groups))]
    io.write_labels(lp, ids, groups, subs)
    return str(sp), str(up), str(lp)


def test_ingest_two_by_two(tmp_path):
    sp, up, lp = write_dataset(
        tmp_path, np.array([[1, 2], [3, 4]]), np.array([[0, 1], [1, 0]]),
        groups=["a", "b"],
    )
    ds = io.ingest(sp, up, lp)
    assert ds.n_cells == 2 and ds.n_genes == 2
    assert ds.n_groups == 2 and ds.n_subgroups == 2  # subgroup defaults to group


def test_ingest_rejects_subgroup_across_groups(tmp_path):
    sp, up, lp = write_dataset(
        tmp_path, np.zeros((2, 1), int), np.zeros((2, 1), int),
        groups=["a", "b"], subs=["x", "x"],
    )
    with pytest.raises(DataError, match="spans groups"):
        io.ingest(sp, up, lp)


def test_ingest_rejects_non_integer(tmp_path):
    sp = tmp_path / "s.csv"
    np.savetxt(sp, np.array([[0.5, 1.0]]), delimiter=",")
    up = tmp_path / "u.csv"
    np.savetxt(up, np.array([[1, 1]]), delimiter=",", fmt="%d")
    lp = tmp_path / "labels.csv"
    io.write_labels(lp, ["c0"], ["a"])
    with pytest.raises(DataError, match="nonnegative integers"):
        io.ingest(str(sp), str(up), str(lp))


def test_ingest_rejects_dimension_mismatch(tmp_path):
    sp, up, lp = write_dataset(
        tmp_path, np.zeros((2, 2), int), np.zeros((2, 2), int), groups=["a", "a"]
    )
    bad = tmp_path / "u2.csv"
    np.savetxt(bad, np.zeros((2, 3), int), delimiter=",", fmt="%d")
    with pytest.raises(DataError, match="differ"):
        io.ingest(sp, str(bad), lp)


def test_matrix_market_and_csv_ingest_identically(tmp_path):
    rng = np.random.default_rng(0)
    ys = rng.poisson(2.0, size=(5, 3))
    yu = rng.poisson(1.0, size=(5, 3))
    sp, up, lp = write_dataset(tmp_path, ys, yu, groups=["a"] * 5)
    scipy.io.mmwrite(str(tmp_path / "s.mtx"), scipy.sparse.coo_matrix(ys))
    scipy.io.mmwrite(str(tmp_path / "u.mtx"), scipy.sparse.coo_matrix(yu))
    d_csv = io.ingest(sp, up, lp)
    d_mtx = io.ingest(str(tmp_path / "s.mtx"), str(tmp_path / "u.mtx"), lp)
    assert np.array_equal(d_csv.y_spliced, d_mtx.y_spliced)
    assert np.array_equal(d_csv.y_unspliced, d_mtx.y_unspliced)


def test_posterior_save_load_round_trip(tmp_path):
    truth = simulate.gen_parameters(G=3, C=12, K=1, R=2, seed=0)
    data = simulate.gen_counts_nb(truth)
    from velomc import sampler

    draws = sampler.run_chain(data, sampler.ChainConfig(n_iter=60, n_burnin=30, thin=3, seed=1))
    out = tmp_path / "posterior"
    io.save_posterior(draws, out)
    back = io.load_posterior(out)
    for name in ("u_off", "u_on", "s_on", "eta", "u_sw", "phi", "lam", "log_posterior"):
        assert np.array_equal(getattr(draws, name), getattr(back, name))
    assert np.array_equal(draws.loglik, back.loglik)
    assert back.a == draws.a and back.p == draws.p


def test_truth_save_load_round_trip(tmp_path):
    truth = simulate.gen_parameters(G=3, C=12, K=1, R=2, seed=5)
    io.save_truth(truth, tmp_path / "truth")
    back = io.load_truth(tmp_path / "truth")
    assert np.array_equal(back.s_pos, truth.s_pos)
    assert back.n_packets == truth.n_packets


def test_config_file_parsing(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("# comment\nseed=4\ngenes = 7 # inline\n\n")
    cfg = io.read_config_file(path)
    assert cfg == {"seed": "4", "genes": "7"}
    with pytest.raises(DataError):
        io.read_config_file(tmp_path / "bad.txt") if (tmp_path / "bad.txt").write_text("oops\n") else None


# -- CLI pipelines ---------------------------------------------------------------

def run_cli(*argv):
    return cli.main(list(argv))


def test_simulate_fit_summarize_project_pipeline(tmp_path):
    sim_dir = tmp_path / "sim"
    assert run_cli(
        "simulate", "--out", str(sim_dir), "--genes", "4", "--cells", "30",
        "--groups", "1", "--subgroups", "2", "--seed", "3",
    ) == 0
    for fname in ("spliced.csv", "unspliced.csv", "labels.csv", "config.txt"):
        assert (sim_dir / fname).exists()
    assert (sim_dir / "truth" / "meta.json").exists()

    fit_dir = tmp_path / "fit"
    assert run_cli(
        "fit", "--spliced", str(sim_dir / "spliced.csv"),
        "--unspliced", str(sim_dir / "unspliced.csv"),
        "--labels", str(sim_dir / "labels.csv"),
        "--out", str(fit_dir), "--seed", "1",
        "--iters", "400", "--burnin", "200", "--thin", "10",
    ) == 0
    assert (fit_dir / "posterior" / "u_off.npy").exists()
    assert (fit_dir / "config.txt").exists()

    summ_dir = tmp_path / "summ"
    assert run_cli(
        "summarize", "--posterior", str(fit_dir / "posterior"),
        "--truth", str(sim_dir / "truth"), "--out", str(summ_dir),
    ) == 0
    waic = json.loads((summ_dir / "waic.json").read_text())
    assert "waic" in waic and math.isfinite(waic["waic"])
    table = (summ_dir / "summary.csv").read_text().splitlines()
    assert table[0].startswith("family,")
    assert len(table) == 12

    proj_dir = tmp_path / "proj"
    assert run_cli(
        "project", "--spliced", str(sim_dir / "spliced.csv"),
        "--posterior", str(fit_dir / "posterior"), "--out", str(proj_dir),
        "--components", "2", "--dt", "0.001",
    ) == 0
    scores = np.loadtxt(proj_dir / "scores.csv", delimiter=",")
    assert scores.shape == (30, 2)
    arrows = (proj_dir / "arrows.csv").read_text().splitlines()
    assert arrows[0] == "subgroup,base_0,base_1,dir_0,dir_1"
    assert len(arrows) == 3


def test_summarize_without_truth_keeps_interval_columns(tmp_path):
    sim_dir = tmp_path / "sim"
    run_cli("simulate", "--out", str(sim_dir), "--genes", "3", "--cells", "12",
            "--subgroups", "2", "--seed", "0")
    fit_dir = tmp_path / "fit"
    run_cli("fit", "--spliced", str(sim_dir / "spliced.csv"),
            "--unspliced", str(sim_dir / "unspliced.csv"),
            "--labels", str(sim_dir / "labels.csv"), "--out", str(fit_dir),
            "--iters", "100", "--burnin", "50", "--thin", "5")
    out = tmp_path / "summ"
    assert run_cli("summarize", "--posterior", str(fit_dir / "posterior"),
                   "--out", str(out)) == 0
    rows = (out / "summary.csv").read_text().splitlines()
    header = rows[0].split(",")
    i_len = header.index("median_ci_length")
    i_err = header.index("median_rel_error")
    cells = rows[1].split(",")
    assert cells[i_len] != ""
    assert cells[i_err] == ""


def test_fit_identical_seeds_identical_files(tmp_path):
    sim_dir = tmp_path / "sim"
    run_cli("simulate", "--out", str(sim_dir), "--genes", "3", "--cells", "12",
            "--subgroups", "2", "--seed", "2")
    outs = []
    for name in ("f1", "f2"):
        fit_dir = tmp_path / name
        run_cli("fit", "--spliced", str(sim_dir / "spliced.csv"),
                "--unspliced", str(sim_dir / "unspliced.csv"),
                "--labels", str(sim_dir / "labels.csv"), "--out", str(fit_dir),
                "--seed", "7", "--iters", "200", "--burnin", "100", "--thin", "5")
        outs.append(fit_dir / "posterior")
    for fname in sorted(os.listdir(outs[0])):
        if fname.endswith(".npy"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_simulate_kinds_write_real_matrices(tmp_path):
    for kind in ("in", "deming"):
        out = tmp_path / kind
        assert run_cli("simulate", "--out", str(out), "--genes", "3", "--cells", "12",
                       "--subgroups", "2", "--seed", "1", "--kind", kind) == 0
        m = np.loadtxt(out / "spliced.csv", delimiter=",", ndmin=2)
        assert m.shape == (12, 3)
        assert not np.all(m == np.floor(m))


def test_subgroups_command(tmp_path):
    rng = np.random.default_rng(0)
    counts = np.vstack([
        rng.normal(0, 0.5, size=(40, 4)),
        rng.normal(9, 0.5, size=(40, 4)),
    ])
    counts = np.abs(np.round(counts))
    sp = tmp_path / "s.csv"
    np.savetxt(sp, counts, delimiter=",", fmt="%d")
    lp = tmp_path / "labels.csv"
    io.write_labels(lp, [f"c{i}" for i in range(80)], ["t"] * 80)
    out = tmp_path / "out"
    assert run_cli("subgroups", "--spliced", str(sp), "--labels", str(lp),
                   "--out", str(out), "--min-size", "20") == 0
    cells, groups, subs = io.read_labels(out / "labels.csv")
    assert len(set(subs)) >= 2
    assert len(set(groups)) == 1


def test_cli_error_exit_code(tmp_path, capsys):
    code = run_cli("fit", "--spliced", "missing.csv", "--unspliced", "missing.csv",
                   "--labels", "missing.csv", "--out", str(tmp_path / "x"))
    assert code != 0
    assert "fit" in capsys.readouterr().err


def test_config_echo_contains_resolved_values(tmp_path):
    out = tmp_path / "sim"
    run_cli("simulate", "--out", str(out), "--genes", "3", "--cells", "12",
            "--subgroups", "2", "--seed", "9")
    echo = (out / "config.txt").read_text()
    assert "seed=9" in echo and "command=simulate" in echo
