"""Morris elementary-effects screening."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .sobol import as_predictor


@dataclass
class MorrisResult:
    mu_star: np.ndarray     # (outputs, inputs)
    sigma: np.ndarray
    mu: np.ndarray
    r: int
    levels: int
    evaluations: int
    input_names: tuple = ()
    meta: dict = field(default_factory=dict)


def morris_trajectories(d: int, r: int, levels: int, seed: Optional[int], names: Sequence[str]) -> np.ndarray:
    """Unit-cube trajectories, shape (r, d + 1, d).

    Every input draws its own random stream keyed by its name, so reordering
    the inputs reorders the design columns and nothing else.
    """
    delta = levels / (2.0 * (levels - 1))
    grid = np.arange(levels) / (levels - 1)
    base = np.empty((r, d))
    keys = np.empty((r, d))
    for i, name in enumerate(names):
        rng = np.random.default_rng([0 if seed is None else int(seed), zlib.crc32(str(name).encode())])
        base[:, i] = grid[rng.integers(0, levels, r)]
        keys[:, i] = rng.random(r)
    traj = np.empty((r, d + 1, d))
    for t in range(r):
        x = base[t].copy()
        traj[t, 0] = x
        for k, i in enumerate(np.argsort(keys[t], kind="stable")):
            x[i] = x[i] + delta if x[i] + delta <= 1.0 + 1e-12 else x[i] - delta
            traj[t, k + 1] = x
    return traj


def morris_screen(model, ranges: Sequence[Sequence[float]], r: int = 40, levels: int = 8, seed: Optional[int] = 0,
                  input_names: Sequence[str] = ()) -> MorrisResult:
    """mu*, mu and sigma of the elementary effects (unit-cube scale), r (d + 1) runs."""
    if r < 4:
        raise ValueError("need at least 4 trajectories")
    if levels < 2 or levels % 2:
        raise ValueError("levels must be an even number >= 2")
    ranges = np.asarray(ranges, dtype=float)
    d = ranges.shape[0]
    names = tuple(input_names) or tuple(f"x{i}" for i in range(d))
    if len(set(names)) != d:
        raise ValueError("input names must be unique")
    traj = morris_trajectories(d, r, levels, seed, names)
    lows, highs = ranges[:, 0], ranges[:, 1]
    pts = lows + traj.reshape(-1, d) * (highs - lows)
    Y = as_predictor(model)(pts).reshape(r, d + 1, -1)
    m = Y.shape[2]
    ee = np.empty((r, d, m))
    for t in range(r):
        step = np.diff(traj[t], axis=0)          # (d, d), one nonzero per row
        moved = np.argmax(np.abs(step), axis=1)
        dy = np.diff(Y[t], axis=0)               # (d, m)
        ee[t, moved] = dy / step[np.arange(d), moved][:, None]
    return MorrisResult(np.mean(np.abs(ee), axis=0).T, np.std(ee, axis=0, ddof=1).T, np.mean(ee, axis=0).T, r,
                        levels, int(pts.shape[0]), names, {"seed": seed})
