"""CSV artifacts.  Comma separated, header row, '.' decimal point, fixed
float formatting so that identical runs give byte-identical files."""
from __future__ import annotations

import csv
import io
import os
from typing import Iterable, Sequence

import numpy as np

FLOAT_FORMAT = "%.12g"


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if v != v:
            return "nan"
        if v in (float("inf"), float("-inf")):
            return "inf" if v > 0 else "-inf"
        return FLOAT_FORMAT % (v + 0.0)  # + 0.0 folds -0.0 into 0
    return str(v)


def csv_text(rows: Iterable[dict], columns: Sequence[str] | None = None) -> str:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(path, rows: Iterable[dict], columns: Sequence[str] | None = None) -> str:
    text = csv_text(rows, columns)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(text)
    return str(path)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


STATE_COLUMNS = ("i", "t", "component", "mean", "sd", "min", "max")
MSOLUTION_COLUMNS = ("i", "t", "component", "meanY", "sdY", "m_residual")
DUALITY_COLUMNS = ("lhs", "rhs", "se_lhs", "se_rhs", "tol", "verdict")
COMPARISON_COLUMNS = ("instance", "theorem", "node", "t", "worst_violation", "tolerance", "verdict")
TRACE_COLUMNS = ("iteration", "J", "SE", "step", "certificate")


def msolution_rows(sol, grid):
    Y = sol.Y
    mean, sd = Y.mean(axis=0), Y.std(axis=0, ddof=1) if Y.shape[0] > 1 else np.zeros(Y.shape[1:])
    res = sol.m_residual if sol.m_residual is not None else np.full(grid.N + 1, np.nan)
    for i, t in enumerate(grid.nodes):
        for k in range(Y.shape[2]):
            yield {"i": i, "t": t, "component": k, "meanY": mean[i, k], "sdY": sd[i, k], "m_residual": res[i]}


def z_slice_rows(sol, grid, i: int):
    """Mean and sd of Z(t_i, t_j) over particles, all j."""
    Z = sol.Z[:, i]
    for j in range(grid.N):
        for k in range(Z.shape[2]):
            yield {"i": i, "j": j, "s": grid.nodes[j], "component": k, "meanZ": Z[:, j, k].mean(),
                   "sdZ": Z[:, j, k].std()}


def particle_rows(X, grid):
    M, _, n = X.shape
    for m in range(M):
        for i, t in enumerate(grid.nodes):
            for k in range(n):
                yield {"particle": m, "i": i, "t": t, "component": k, "value": X[m, i, k]}
