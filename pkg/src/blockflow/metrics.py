"""Two-sample distances and per-gene mean agreement between cell populations."""

from __future__ import annotations

import csv
import dataclasses
import math
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

SPACES = ("raw", "preprocessed", "latent")


@dataclasses.dataclass(frozen=True)
class SamplePair:
    real: np.ndarray
    generated: np.ndarray
    space: str = "preprocessed"

    def __post_init__(self):
        real = np.atleast_2d(np.asarray(self.real, dtype=np.float64))
        gen = np.atleast_2d(np.asarray(self.generated, dtype=np.float64))
        if real.shape[1] != gen.shape[1]:
            raise ValueError(f"dimension mismatch: real has {real.shape[1]} columns, generated {gen.shape[1]}")
        if not (np.all(np.isfinite(real)) and np.all(np.isfinite(gen))):
            raise ValueError("samples must be finite")
        if self.space not in SPACES:
            raise ValueError(f"unknown space {self.space!r}")
        object.__setattr__(self, "real", real)
        object.__setattr__(self, "generated", gen)


class WassersteinResult(NamedTuple):
    distance: float
    mode: str  # "exact" or "approx"


class GeneMeanStats(NamedTuple):
    pcc: float
    r2: float
    mse: float


def _pair(real, generated) -> SamplePair:
    return real if isinstance(real, SamplePair) else SamplePair(real, generated)


def wasserstein2(real, generated=None, max_exact: int = 512, rng: np.random.Generator | None = None,
                 sinkhorn_iters: int = 400) -> WassersteinResult:
    """2-Wasserstein distance between two point clouds with uniform weights.

    Up to ``max_exact`` points per side the larger cloud is subsampled (seeded)
    to the size of the smaller and the exact assignment problem is solved.
    Larger inputs use annealed entropic OT and are reported as ``approx``.
    """
    pair = _pair(real, generated)
    x, y = pair.real, pair.generated
    rng = rng or np.random.default_rng(0)
    m = min(len(x), len(y))
    if m <= max_exact:
        if len(x) > m:
            x = x[np.sort(rng.choice(len(x), m, replace=False))]
        if len(y) > m:
            y = y[np.sort(rng.choice(len(y), m, replace=False))]
        cost = cdist(x, y, "sqeuclidean")
        r, c = linear_sum_assignment(cost)
        return WassersteinResult(math.sqrt(max(float(cost[r, c].mean()), 0.0)), "exact")
    return WassersteinResult(_sinkhorn_w2(x, y, sinkhorn_iters), "approx")


def _sinkhorn_w2(x: np.ndarray, y: np.ndarray, iters: int) -> float:
    cost = cdist(x, y, "sqeuclidean")
    log_a = np.full(len(x), -np.log(len(x)))
    log_b = np.full(len(y), -np.log(len(y)))
    f = np.zeros(len(x))
    g = np.zeros(len(y))
    scale = max(float(cost.mean()), 1e-12)
    schedule = scale * np.geomspace(1.0, 1e-3, 8)
    per_stage = max(1, iters // len(schedule))
    for eps in schedule:
        for _ in range(per_stage):
            f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
            g = eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))
    plan = np.exp((f[:, None] + g[None, :] - cost) / schedule[-1])
    plan /= plan.sum()
    return math.sqrt(max(float((plan * cost).sum()), 0.0))


def median_bandwidth(x: np.ndarray, y: np.ndarray, floor: float = 1e-8) -> float:
    pooled = np.vstack([x, y])
    d = pdist(pooled)
    return max(float(np.median(d)) if d.size else 0.0, floor)


def mmd_rbf(real, generated=None, bandwidth: float | None = None) -> float:
    """sqrt of the clamped unbiased MMD^2 with an RBF kernel (median-heuristic bandwidth)."""
    pair = _pair(real, generated)
    x, y = pair.real, pair.generated
    if len(x) < 2 or len(y) < 2:
        raise ValueError("MMD needs at least two points per sample")
    bw = bandwidth if bandwidth is not None else median_bandwidth(x, y)
    gamma = 1.0 / (2.0 * bw * bw)
    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    m, n = len(x), len(y)
    mmd2 = (
        (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        - 2.0 * kxy.mean()
    )
    return math.sqrt(max(float(mmd2), 0.0))


def gene_mean_stats(real, generated=None) -> GeneMeanStats:
    """PCC, R^2 (real means as truth) and MSE between per-dimension means.

    A constant mean vector leaves PCC undefined; it is reported as NaN.
    """
    pair = _pair(real, generated)
    if pair.real.shape[1] < 2:
        raise ValueError("need at least two dimensions")
    mr = pair.real.mean(axis=0)
    mg = pair.generated.mean(axis=0)
    dr, dg = mr - mr.mean(), mg - mg.mean()
    denom = math.sqrt(float(dr @ dr) * float(dg @ dg))
    pcc = float(dr @ dg) / denom if denom > 0 else float("nan")
    if not math.isnan(pcc):
        pcc = min(1.0, max(-1.0, pcc))
    ss_res = float(((mr - mg) ** 2).sum())
    ss_tot = float(dr @ dr)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else float("-inf"))
    return GeneMeanStats(pcc, r2, ss_res / mr.size)


REPORT_COLUMNS = ("n_real", "n_gen", "WD", "WD_mode", "MMD", "PCC", "R2", "MSE")


def evaluate_by_condition(
    real: np.ndarray,
    real_labels: Sequence[tuple[str, ...]],
    generated: np.ndarray,
    gen_labels: Sequence[tuple[str, ...]],
    max_exact: int = 512,
    seed: int = 0,
) -> list[dict]:
    """One metrics row per distinct condition label tuple present in ``real``."""
    real_labels = [tuple(l) for l in real_labels]
    gen_labels = [tuple(l) for l in gen_labels]
    rows = []
    for key in sorted(set(real_labels)):
        r = real[[i for i, l in enumerate(real_labels) if l == key]]
        g = generated[[i for i, l in enumerate(gen_labels) if l == key]]
        row = {"labels": key, "n_real": len(r), "n_gen": len(g)}
        if len(g) == 0:
            row.update(WD=float("nan"), WD_mode="none", MMD=float("nan"), PCC=float("nan"), R2=float("nan"),
                       MSE=float("nan"))
        else:
            wd = wasserstein2(r, g, max_exact=max_exact, rng=np.random.default_rng(seed))
            stats = gene_mean_stats(r, g)
            mmd = mmd_rbf(r, g) if len(r) >= 2 and len(g) >= 2 else float("nan")
            row.update(WD=wd.distance, WD_mode=wd.mode, MMD=mmd, PCC=stats.pcc, R2=stats.r2, MSE=stats.mse)
        rows.append(row)
    return rows


def write_report(rows: list[dict], condition_names: Sequence[str], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*condition_names, *REPORT_COLUMNS])
        for row in rows:
            vals = [row[c] for c in REPORT_COLUMNS]
            w.writerow([*row["labels"], *(repr(float(v)) if isinstance(v, float) else v for v in vals)])
