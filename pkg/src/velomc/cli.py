"""Command-line surface: simulate, fit, summarize, project, subgroups.

Every command takes an optional flat key=value ``--config`` file; explicit
flags win over the file, which wins over built-in defaults.  Each output
directory receives a ``config.txt`` echo of the fully resolved settings,
sufficient to reproduce the run bit-exactly.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__, evaluate, io, model, sampler, simulate

_FLOAT_FMT = "%.17g"


def _merge(defaults: dict, file_cfg: dict, args: argparse.Namespace, keys) -> dict:
    """Resolve settings with precedence flags > config file > defaults."""
    out = dict(defaults)
    for key, caster in keys.items():
        if key in file_cfg:
            out[key] = caster(file_cfg[key])
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            out[key] = flag_val
    return out


def _echo(out_dir, command, cfg: dict):
    echo = {"command": command, "version": __version__}
    echo.update(cfg)
    io.write_config_echo(os.path.join(out_dir, "config.txt"), echo)


def _bool(v):
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def _thread_limit(n):
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=int(n))
    except Exception:
        return None


# -- simulate ----------------------------------------------------------------

_SIM_DEFAULTS = dict(
    genes=100, cells=300, groups=1, subgroups=5, packets=0, seed=0,
    kind="nb", sector_p=math.pi / 2.0,
)
_SIM_KEYS = dict(
    genes=int, cells=int, groups=int, subgroups=int, packets=int, seed=int,
    kind=str, sector_p=float,
)


def cmd_simulate(args) -> int:
    file_cfg = io.read_config_file(args.config) if args.config else {}
    cfg = _merge(_SIM_DEFAULTS, file_cfg, args, _SIM_KEYS)
    if cfg["kind"] not in ("nb", "in", "deming"):
        raise ValueError(f"unknown data kind '{cfg['kind']}'")
    os.makedirs(args.out, exist_ok=True)
    truth = simulate.gen_parameters(
        cfg["genes"], cfg["cells"], cfg["groups"], cfg["subgroups"],
        L=cfg["packets"] or None, seed=cfg["seed"], p=cfg["sector_p"],
    )
    if cfg["kind"] == "nb":
        data = simulate.gen_counts_nb(truth)
        io.write_matrix(os.path.join(args.out, "spliced.csv"), data.y_spliced, integer=True)
        io.write_matrix(os.path.join(args.out, "unspliced.csv"), data.y_unspliced, integer=True)
    elif cfg["kind"] == "in":
        m_s, m_u = simulate.gen_in_data(truth)
        io.write_matrix(os.path.join(args.out, "spliced.csv"), m_s)
        io.write_matrix(os.path.join(args.out, "unspliced.csv"), m_u)
    else:
        m_s, m_u = simulate.gen_deming_data(truth)
        io.write_matrix(os.path.join(args.out, "spliced.csv"), m_s)
        io.write_matrix(os.path.join(args.out, "unspliced.csv"), m_u)
    cell_ids = [f"cell{i}" for i in range(cfg["cells"])]
    io.write_labels(
        os.path.join(args.out, "labels.csv"), cell_ids,
        truth.group_of_cell, truth.subgroup_of_cell,
    )
    io.save_truth(truth, os.path.join(args.out, "truth"))
    _echo(args.out, "simulate", cfg)
    return 0


# -- fit ---------------------------------------------------------------------

_FIT_DEFAULTS = dict(
    seed=0, iters=250_000, burnin=200_000, thin=25,
    sector_p=math.pi / 2.0, bound_a=0.0, checkpoint_every=0, threads=0,
    groups="keep", subgroups="keep", export_csv=False, resume=False,
    store_loglik=True,
)
_FIT_KEYS = dict(
    seed=int, iters=int, burnin=int, thin=int, sector_p=float, bound_a=float,
    checkpoint_every=int, threads=int, groups=str, subgroups=str,
    export_csv=_bool, resume=_bool, store_loglik=_bool,
)


def _collapse_labels(data: model.Dataset, groups_mode, subgroups_mode) -> model.Dataset:
    goc = data.group_of_cell.copy()
    soc = data.subgroup_of_cell.copy()
    if groups_mode == "single":
        goc[:] = 0
    elif groups_mode != "keep":
        raise ValueError("--groups must be 'keep' or 'single' for fit")
    if subgroups_mode == "single":
        # One subgroup per group keeps the nesting invariant.
        soc = goc.copy()
    elif subgroups_mode == "cell":
        soc = np.arange(data.n_cells, dtype=np.int64)
    elif subgroups_mode != "keep":
        raise ValueError("--subgroups must be 'keep', 'single' or 'cell' for fit")
    if groups_mode == "keep" and subgroups_mode == "keep":
        return data
    return model.Dataset(data.y_spliced, data.y_unspliced, goc, soc)


def cmd_fit(args) -> int:
    file_cfg = io.read_config_file(args.config) if args.config else {}
    cfg = _merge(_FIT_DEFAULTS, file_cfg, args, _FIT_KEYS)
    os.makedirs(args.out, exist_ok=True)
    data = io.ingest(args.spliced, args.unspliced, args.labels)
    data = _collapse_labels(data, cfg["groups"], cfg["subgroups"])
    checkpoint = os.path.join(args.out, "checkpoint.npz")
    chain_cfg = sampler.ChainConfig(
        n_iter=cfg["iters"], n_burnin=cfg["burnin"], thin=cfg["thin"],
        seed=cfg["seed"], p=cfg["sector_p"],
        a=cfg["bound_a"] if cfg["bound_a"] > 0 else None,
        checkpoint_every=cfg["checkpoint_every"],
        checkpoint_path=checkpoint if cfg["checkpoint_every"] else None,
        store_loglik=cfg["store_loglik"],
    )
    resume_from = checkpoint if cfg["resume"] else None
    if resume_from and not os.path.exists(resume_from):
        raise FileNotFoundError(f"no checkpoint to resume at {resume_from}")
    limiter = _thread_limit(cfg["threads"])
    try:
        draws = sampler.run_chain(data, chain_cfg, resume_from=resume_from)
    finally:
        if limiter is not None:
            limiter.unregister()
    io.save_posterior(draws, os.path.join(args.out, "posterior"))
    if cfg["export_csv"]:
        _export_draws_csv(draws, os.path.join(args.out, "posterior_csv"))
    cfg_echo = dict(cfg)
    cfg_echo.update(
        spliced=args.spliced, unspliced=args.unspliced, labels=args.labels,
        bound_a_resolved=draws.a,
    )
    _echo(args.out, "fit", cfg_echo)
    rates = draws.diagnostics["acceptance_rate"]
    print("acceptance rates:", {k: round(v, 3) for k, v in rates.items()})
    return 0


def _export_draws_csv(draws, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name in ("u_off", "u_on", "s_on", "eta", "lam", "log_posterior"):
        arr = getattr(draws, name)
        np.savetxt(
            os.path.join(out_dir, f"{name}.csv"),
            arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr,
            delimiter=",", fmt=_FLOAT_FMT,
        )
    for name in ("u_sw", "phi"):
        arr = getattr(draws, name)
        np.savetxt(
            os.path.join(out_dir, f"{name}.csv"),
            arr.reshape(arr.shape[0], -1), delimiter=",", fmt=_FLOAT_FMT,
        )


# -- summarize -----------------------------------------------------------------

def cmd_summarize(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    draws = io.load_posterior(args.posterior)
    truth = io.load_truth(args.truth) if args.truth else None
    table = evaluate.summary_table(draws, truth)
    table.to_csv(os.path.join(args.out, "summary.csv"))
    record = {"n_draws": draws.n_draws}
    if draws.loglik is not None:
        value, lppd, p_eff = evaluate.waic(draws.loglik, return_parts=True)
        record.update(waic=value, lppd=lppd, p_waic=p_eff)
    with open(os.path.join(args.out, "waic.json"), "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    _echo(args.out, "summarize", {
        "posterior": args.posterior, "truth": args.truth or "",
    })
    return 0


# -- project -------------------------------------------------------------------

def cmd_project(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    d = args.components if args.components is not None else 2
    dt = args.dt if args.dt is not None else 0.001
    counts = io.read_matrix(args.spliced)
    draws = io.load_posterior(args.posterior)
    proj = evaluate.pca_project(counts, d)
    best = evaluate.map_estimate(draws)
    s_pos, u_pos = best.positions(draws.group_of_subgroup)
    gamma = best.beta * best.u_on / best.s_on
    vel = best.beta * u_pos - gamma[None, :] * s_pos

    np.savetxt(os.path.join(args.out, "scores.csv"), proj.scores,
               delimiter=",", fmt=_FLOAT_FMT)
    np.savetxt(os.path.join(args.out, "loadings.csv"), proj.loadings,
               delimiter=",", fmt=_FLOAT_FMT)
    expected = best.lam[:, None] * s_pos[draws.subgroup_of_cell, :]
    np.savetxt(os.path.join(args.out, "projected_estimates.csv"),
               proj.project(expected), delimiter=",", fmt=_FLOAT_FMT)

    base = proj.project(s_pos)
    tips = proj.project(evaluate.future_state(s_pos, vel, dt))
    arrows = tips - base
    norms = np.linalg.norm(arrows, axis=1, keepdims=True)
    arrows = np.where(norms > 0, arrows / np.where(norms > 0, norms, 1.0), 0.0)
    header = ",".join(
        ["subgroup"]
        + [f"base_{i}" for i in range(d)]
        + [f"dir_{i}" for i in range(d)]
    )
    rows = np.column_stack([np.arange(base.shape[0]), base, arrows])
    np.savetxt(os.path.join(args.out, "arrows.csv"), rows, delimiter=",",
               fmt=_FLOAT_FMT, header=header, comments="")
    _echo(args.out, "project", {
        "spliced": args.spliced, "posterior": args.posterior,
        "components": d, "dt": dt,
    })
    return 0


# -- subgroups -------------------------------------------------------------------

def cmd_subgroups(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    d = args.components if args.components is not None else 2
    min_size = args.min_size if args.min_size is not None else 30
    counts = io.read_matrix(args.spliced)
    cells, groups_raw, _ = io.read_labels(args.labels)
    sub = evaluate.derive_subgroups(counts, np.asarray(groups_raw), min_size, d)
    io.write_labels(os.path.join(args.out, "labels.csv"), cells, groups_raw, sub)
    _echo(args.out, "subgroups", {
        "spliced": args.spliced, "labels": args.labels,
        "components": d, "min_size": min_size,
    })
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="velomc",
        description="Bayesian RNA-velocity kinetics from spliced/unspliced counts",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("--out", required=True)
    sim.add_argument("--config")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--genes", type=int)
    sim.add_argument("--cells", type=int)
    sim.add_argument("--groups", type=int)
    sim.add_argument("--subgroups", type=int)
    sim.add_argument("--packets", type=int)
    sim.add_argument("--kind", choices=("nb", "in", "deming"))
    sim.add_argument("--sector-p", dest="sector_p", type=float)
    sim.set_defaults(func=cmd_simulate)

    fit = subs.add_parser("fit", help="run the sampler on a dataset")
    fit.add_argument("--spliced", required=True)
    fit.add_argument("--unspliced", required=True)
    fit.add_argument("--labels", required=True)
    fit.add_argument("--out", required=True)
    fit.add_argument("--config")
    fit.add_argument("--seed", type=int)
    fit.add_argument("--iters", type=int)
    fit.add_argument("--burnin", type=int)
    fit.add_argument("--thin", type=int)
    fit.add_argument("--groups", choices=("keep", "single"))
    fit.add_argument("--subgroups", choices=("keep", "single", "cell"))
    fit.add_argument("--sector-p", dest="sector_p", type=float)
    fit.add_argument("--bound-a", dest="bound_a", type=float)
    fit.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    fit.add_argument("--threads", type=int)
    fit.add_argument("--export-csv", dest="export_csv", action="store_const", const=True)
    fit.add_argument("--resume", action="store_const", const=True)
    fit.set_defaults(func=cmd_fit)

    summ = subs.add_parser("summarize", help="error/coverage tables and WAIC")
    summ.add_argument("--posterior", required=True)
    summ.add_argument("--truth")
    summ.add_argument("--out", required=True)
    summ.set_defaults(func=cmd_summarize)

    proj = subs.add_parser("project", help="PCA scores, estimates and arrows")
    proj.add_argument("--spliced", required=True)
    proj.add_argument("--posterior", required=True)
    proj.add_argument("--out", required=True)
    proj.add_argument("--components", type=int)
    proj.add_argument("--dt", type=float)
    proj.set_defaults(func=cmd_project)

    sub = subs.add_parser("subgroups", help="derive subgroup labels by clustering")
    sub.add_argument("--spliced", required=True)
    sub.add_argument("--labels", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--components", type=int)
    sub.add_argument("--min-size", dest="min_size", type=int)
    sub.set_defaults(func=cmd_subgroups)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # diagnostics to stderr, nonzero exit
        print(f"velomc {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
