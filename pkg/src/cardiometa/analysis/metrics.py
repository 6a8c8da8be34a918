"""Accuracy metrics for emulators, computed per output column."""
from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


def _columns(y_true, y_pred):
    yt = np.asarray(y_true, dtype=float)
    yp = np.asarray(y_pred, dtype=float)
    if yt.shape != yp.shape:
        raise ValueError(f"shape mismatch {yt.shape} vs {yp.shape}")
    single = yt.ndim == 1
    return (yt[:, None], yp[:, None], single) if single else (yt, yp, single)


def q2(y_true, y_pred):
    """1 - SSE / SST per output column (scalar for vectors)."""
    yt, yp, single = _columns(y_true, y_pred)
    if yt.shape[0] < 2:
        raise ValueError("Q2 needs at least two samples")
    sst = np.sum((yt - yt.mean(axis=0)) ** 2, axis=0)
    if np.any(sst == 0.0):
        raise ValueError("Q2 is undefined for a constant true output")
    out = 1.0 - np.sum((yt - yp) ** 2, axis=0) / sst
    return float(out[0]) if single else out


def max_rel_error(y_true, y_pred, return_flags=False):
    """max_i |y_i - yhat_i| / |y_i| per column.

    Columns containing an exact zero switch to normalising by the column
    range; the switch is logged and reported through ``return_flags``.
    """
    yt, yp, single = _columns(y_true, y_pred)
    err = np.abs(yt - yp)
    out = np.empty(yt.shape[1])
    flags = np.zeros(yt.shape[1], dtype=bool)
    for k in range(yt.shape[1]):
        if np.all(np.abs(yt[:, k]) > 0):
            out[k] = np.max(err[:, k] / np.abs(yt[:, k]))
        else:
            span = np.ptp(yt[:, k])
            flags[k] = True
            logger.info("column %d contains zeros; using range-normalised relative error", k)
            out[k] = np.max(err[:, k]) / span if span > 0 else float(np.max(err[:, k]) > 0) * np.inf
    res = float(out[0]) if single else out
    if return_flags:
        return res, (bool(flags[0]) if single else flags)
    return res
