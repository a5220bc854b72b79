"""Deterministic CSV/JSON output with atomic file replacement."""
from __future__ import annotations

import io
import json
import math
import os
import sys
import tempfile

import numpy as np

MOMENT_COLUMNS = ["t", "q_mean", "p_mean", "var_q", "var_p", "covar"]
GRID_COLUMNS = MOMENT_COLUMNS + ["norm_drift"]


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": _jsonable(obj.real), "im": _jsonable(obj.imag)}
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename.

    ``path`` of None or ``"-"`` writes text to stdout.
    """
    if path is None or str(path) == "-":
        sys.stdout.write(data if isinstance(data, str) else data.decode())
        return
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "w" if isinstance(data, str) else "wb"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **({"newline": ""} if mode == "w" else {})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_csv(traj) -> str:
    """CSV for a moment (6 columns) or grid (7 columns) trajectory."""
    arr = traj.array()
    columns = GRID_COLUMNS if arr.shape[1] == 7 else MOMENT_COLUMNS
    return csv_text(columns, arr)


def stats_csv(stats) -> str:
    from .ensemble import MOMENT_NAMES

    columns = ["t", "count"]
    for name in MOMENT_NAMES:
        columns += [f"{name}_mean", f"{name}_var", f"{name}_sem"]
    columns += ["defect_mean", "defect_std"]
    rows = []
    for j, t in enumerate(stats.times):
        row = [t, stats.count[j]]
        for i in range(len(MOMENT_NAMES)):
            row += [stats.mean[j, i], stats.var[j, i], stats.sem[j, i]]
        row += [stats.defect_mean[j], stats.defect_std[j]]
        rows.append(row)
    return csv_text(columns, rows)
