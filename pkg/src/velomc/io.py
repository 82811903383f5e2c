"""File formats: count-matrix ingestion, posterior persistence, config echo.

Count matrices are dense CSV (cells x genes, no header) or Matrix Market
coordinate files; labels are a CSV with a ``cell,group[,subgroup]``
header.  Posterior draws are persisted as a directory with one ``.npy``
file per parameter family (deterministic bytes) plus a JSON sidecar.
"""

from __future__ import annotations

import json
import os

import numpy as np
import scipy.io
import scipy.sparse

from .model import DataError, Dataset
from .sampler import PosteriorDraws

__all__ = [
    "read_matrix",
    "write_matrix",
    "read_labels",
    "write_labels",
    "ingest",
    "save_posterior",
    "load_posterior",
    "save_truth",
    "load_truth",
    "write_config_echo",
    "read_config_file",
]

# One array per parameter family, stored as posterior/<name>.npy.
_POSTERIOR_FAMILIES = (
    "u_off", "u_on", "s_on", "eta", "u_sw", "phi", "lam", "log_posterior",
)


def read_matrix(path) -> np.ndarray:
    """Dense (cells x genes) array from a .mtx or CSV file."""
    path = str(path)
    if path.endswith((".mtx", ".mtx.gz")):
        m = scipy.io.mmread(path)
        if scipy.sparse.issparse(m):
            m = m.toarray()
        return np.asarray(m)
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: not a numeric CSV matrix ({exc})") from exc
    return arr


def write_matrix(path, matrix, integer=False):
    path = str(path)
    matrix = np.asarray(matrix)
    if path.endswith(".mtx"):
        scipy.io.mmwrite(path, scipy.sparse.coo_matrix(matrix))
        return
    fmt = "%d" if integer else "%.17g"
    np.savetxt(path, matrix, delimiter=",", fmt=fmt)


def read_labels(path):
    """Parse the label CSV; returns (cell ids, group labels, subgroup labels).

    The subgroup column is optional; subgroup labels come back as None
    when absent.
    """
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty labels file")
    header = [h.strip().lower() for h in lines[0].split(",")]
    if header[:2] != ["cell", "group"] or len(header) > 3 or (
        len(header) == 3 and header[2] != "subgroup"
    ):
        raise DataError(f"{path}: expected header 'cell,group[,subgroup]'")
    has_sub = len(header) == 3
    cells, groups, subs = [], [], []
    for ln in lines[1:]:
        parts = [p.strip() for p in ln.split(",")]
        if len(parts) != len(header):
            raise DataError(f"{path}: row '{ln}' does not match the header")
        cells.append(parts[0])
        groups.append(parts[1])
        if has_sub:
            subs.append(parts[2])
    return cells, groups, (subs if has_sub else None)


def write_labels(path, cell_ids, group_labels, subgroup_labels=None):
    with open(path, "w") as fh:
        if subgroup_labels is None:
            fh.write("cell,group\n")
            for c, g in zip(cell_ids, group_labels):
                fh.write(f"{c},{g}\n")
        else:
            fh.write("cell,group,subgroup\n")
            for c, g, s in zip(cell_ids, group_labels, subgroup_labels):
                fh.write(f"{c},{g},{s}\n")


def _index_labels(raw):
    """Map labels to contiguous indices in order of first appearance."""
    vocab = {}
    idx = np.empty(len(raw), dtype=np.int64)
    for i, label in enumerate(raw):
        if label not in vocab:
            vocab[label] = len(vocab)
        idx[i] = vocab[label]
    return idx, list(vocab)


def ingest(spliced_path, unspliced_path, labels_path) -> Dataset:
    """Validated dataset from matrix and label files.

    Distinct diagnostics for shape mismatches, non-integer count entries
    and subgroups crossing groups.  Without a subgroup column every group
    is a single subgroup.
    """
    ys = read_matrix(spliced_path)
    yu = read_matrix(unspliced_path)
    if ys.shape != yu.shape:
        raise DataError(
            f"matrix shapes differ: spliced {ys.shape} vs unspliced {yu.shape}"
        )
    cells, groups_raw, subs_raw = read_labels(labels_path)
    if len(cells) != ys.shape[0]:
        raise DataError(
            f"labels list {len(cells)} cells but matrices have {ys.shape[0]} rows"
        )
    goc, group_names = _index_labels(groups_raw)
    if subs_raw is None:
        soc, sub_names = goc.copy(), list(group_names)
    else:
        soc, sub_names = _index_labels(subs_raw)
    ds = Dataset(ys, yu, goc, soc, group_names=group_names, subgroup_names=sub_names)
    ds.cell_ids = cells
    return ds


def save_posterior(draws: PosteriorDraws, out_dir):
    """One .npy per family plus meta.json; bytes are reproducible."""
    os.makedirs(out_dir, exist_ok=True)
    for name in _POSTERIOR_FAMILIES:
        np.save(os.path.join(out_dir, f"{name}.npy"), getattr(draws, name))
    if draws.loglik is not None:
        np.save(os.path.join(out_dir, "loglik.npy"), draws.loglik)
    np.save(os.path.join(out_dir, "group_of_cell.npy"), draws.group_of_cell)
    np.save(os.path.join(out_dir, "subgroup_of_cell.npy"), draws.subgroup_of_cell)
    np.save(os.path.join(out_dir, "group_of_subgroup.npy"), draws.group_of_subgroup)
    diag = {
        k: v for k, v in draws.diagnostics.items()
        if isinstance(v, (int, float, dict)) and not isinstance(v, np.ndarray)
    }
    diag = json.loads(json.dumps(diag, default=_jsonable))
    meta = {
        "a": draws.a,
        "p": draws.p,
        "beta": draws.beta,
        "n_draws": draws.n_draws,
        "config": draws.config,
        "diagnostics": diag,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))


def load_posterior(out_dir) -> PosteriorDraws:
    def arr(name):
        return np.load(os.path.join(out_dir, f"{name}.npy"))

    with open(os.path.join(out_dir, "meta.json")) as fh:
        meta = json.load(fh)
    ll_path = os.path.join(out_dir, "loglik.npy")
    return PosteriorDraws(
        u_off=arr("u_off"), u_on=arr("u_on"), s_on=arr("s_on"), eta=arr("eta"),
        u_sw=arr("u_sw"), phi=arr("phi"), lam=arr("lam"),
        log_posterior=arr("log_posterior"),
        loglik=np.load(ll_path) if os.path.exists(ll_path) else None,
        a=meta["a"], p=meta["p"], beta=meta["beta"],
        group_of_cell=arr("group_of_cell"),
        subgroup_of_cell=arr("subgroup_of_cell"),
        group_of_subgroup=arr("group_of_subgroup"),
        diagnostics=meta.get("diagnostics", {}),
        config=meta.get("config", {}),
    )


_TRUTH_ARRAYS = (
    "u_off", "u_on", "s_on", "eta", "lam", "u_sw", "omega", "phi", "t_tilde",
    "s_pos", "u_pos", "group_of_cell", "subgroup_of_cell", "group_of_subgroup",
)


def save_truth(truth, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name in _TRUTH_ARRAYS:
        np.save(os.path.join(out_dir, f"{name}.npy"), getattr(truth, name))
    meta = {
        "n_genes": truth.n_genes, "n_cells": truth.n_cells,
        "n_groups": truth.n_groups, "n_subgroups": truth.n_subgroups,
        "n_packets": truth.n_packets, "seed": truth.seed,
        "p": truth.p, "beta": truth.beta,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_truth(out_dir):
    from .simulate import SimulationTruth

    with open(os.path.join(out_dir, "meta.json")) as fh:
        meta = json.load(fh)
    arrays = {
        name: np.load(os.path.join(out_dir, f"{name}.npy")) for name in _TRUTH_ARRAYS
    }
    return SimulationTruth(**arrays, **meta)


def write_config_echo(path, config: dict):
    """Flat key=value echo with round-trip float precision."""
    with open(path, "w") as fh:
        for key in sorted(config):
            fh.write(f"{key}={_render(config[key])}\n")


def _render(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list, tuple)):
        return json.dumps(v)
    return str(v)


def read_config_file(path) -> dict:
    """Flat key=value file; '#' starts a comment, values stay strings."""
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}: malformed config line '{raw.strip()}'")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out
