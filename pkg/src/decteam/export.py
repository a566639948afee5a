"""CSV and JSON writers for trajectories, strategies and covariance schedules."""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .filters import lower_triangle


def _fmt(v) -> str:
    return repr(float(v))


def _rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def trajectory_header(n, dims_y, dims_xhat, dims_u, path_column=False) -> list:
    head = (["path_id"] if path_column else []) + ["t"] + [f"x_{j + 1}" for j in range(n)]
    for i, (ky, kx, ku) in enumerate(zip(dims_y, dims_xhat, dims_u), start=1):
        head += [f"y{i}_{j + 1}" for j in range(ky)]
        head += [f"xhat{i}_{j + 1}" for j in range(kx)]
        head += [f"u{i}_{j + 1}" for j in range(ku)]
    return head


def ensemble_csv(ens, t, first_path: int = 0, layout: str = "long") -> dict:
    """Recorded ensemble as CSV text; returns ``{filename: text}``.

    ``layout="long"`` gives one file with a ``path_id`` column,
    ``"per-path"`` one file per path.
    """
    P = ens.x.shape[0]
    N = len(ens.u)
    head = trajectory_header(ens.x.shape[2], [a.shape[2] for a in ens.y], [a.shape[2] for a in ens.xhat],
                             [a.shape[2] for a in ens.u], path_column=layout == "long")
    files, rows = {}, []
    for p in range(P):
        block = np.concatenate(
            [t[:, None], ens.x[p]] + [np.concatenate([ens.y[i][p], ens.xhat[i][p], ens.u[i][p]], axis=1)
                                      for i in range(N)], axis=1)
        lines = [[_fmt(v) for v in row] for row in block]
        if layout == "long":
            rows += [[str(first_path + p)] + ln for ln in lines]
        else:
            files[f"trajectory_{first_path + p:06d}.csv"] = _rows_to_csv(head, lines)
    if layout == "long":
        files["trajectories.csv"] = _rows_to_csv(head, rows)
    return files


def strategy_csv(strategy, t) -> str:
    """Columns ``t``, then per DM the vectorized gain and offset, then ``ubar``."""
    head, cols = ["t"], [t[:, None]]
    for i, (g, o) in enumerate(zip(strategy.gains, strategy.offsets), start=1):
        head += [f"gain{i}_{a + 1}_{b + 1}" for a in range(g.shape[1]) for b in range(g.shape[2])]
        head += [f"offset{i}_{a + 1}" for a in range(o.shape[1])]
        cols += [g.reshape(g.shape[0], -1), o]
    head += [f"ubar_{a + 1}" for a in range(strategy.mean_control.shape[1])]
    cols.append(strategy.mean_control)
    data = np.concatenate(cols, axis=1)
    return _rows_to_csv(head, [[_fmt(v) for v in row] for row in data])


def covariance_csv(P, t) -> str:
    """``t`` and the row-wise lower triangle of ``P`` at each node."""
    n = P.shape[-1]
    head = ["t"] + [f"P_{a + 1}_{b + 1}" for a in range(n) for b in range(a + 1)]
    data = np.concatenate([t[:, None], lower_triangle(P)], axis=1)
    return _rows_to_csv(head, [[_fmt(v) for v in row] for row in data])


def schedule_csv(name, values, t) -> str:
    values = np.asarray(values)
    flat = values.reshape(values.shape[0], -1)
    idx = np.ndindex(*values.shape[1:])
    head = ["t"] + [name + "_" + "_".join(str(j + 1) for j in ix) for ix in idx]
    data = np.concatenate([t[:, None], flat], axis=1)
    return _rows_to_csv(head, [[_fmt(v) for v in row] for row in data])


def to_json(obj) -> str:
    """Deterministic JSON (sorted keys, numpy arrays as lists)."""

    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer, np.bool_)):
            return o.item()
        raise TypeError(f"not serializable: {type(o).__name__}")

    return json.dumps(obj, default=default, sort_keys=True, indent=2, allow_nan=True) + "\n"
