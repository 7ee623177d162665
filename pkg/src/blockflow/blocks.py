"""Balanced gene blocks from gene embeddings by iterative optimal transport.

Genes are assigned to ``L = ceil(G / K)`` blocks of exactly ``K`` slots. The
``L*K - G`` spare slots are filled by padding genes that cost nothing in any
block. Each outer iteration solves an entropic balanced transport problem
between genes (uniform mass ``1/G'``) and blocks (uniform mass ``1/L``),
moves the centroids to the mass-weighted gene means, and rounds the plan to a
hard layout.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .checkpoint import atomic_write_bytes
from .preprocess import ExpressionMatrix

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class GeneEmbeddingTable:
    gene_ids: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.gene_ids):
            raise ValueError(f"need one embedding row per gene: {emb.shape} vs {len(self.gene_ids)} ids")
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise ValueError("duplicate gene ids in embedding table")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings contain non-finite values")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))

    def __len__(self) -> int:
        return len(self.gene_ids)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gene_id", *(f"e{k}" for k in range(self.embeddings.shape[1]))])
            for gid, row in zip(self.gene_ids, self.embeddings):
                w.writerow([gid, *(repr(float(v)) for v in row)])

    @classmethod
    def read_csv(cls, path) -> "GeneEmbeddingTable":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(tuple(r[0] for r in rows), np.array([[float(v) for v in r[1:]] for r in rows]))


@dataclasses.dataclass
class TransportPlan:
    plan: np.ndarray
    a: np.ndarray
    b: np.ndarray
    marginal_error: float  # before the feasibility projection
    iterations: int
    converged: bool

    def marginal_residuals(self) -> tuple[float, float]:
        return (
            float(np.abs(self.plan.sum(axis=1) - self.a).max()),
            float(np.abs(self.plan.sum(axis=0) - self.b).max()),
        )


@dataclasses.dataclass(frozen=True)
class BlockLayout:
    n_blocks: int
    block_size: int
    slots: np.ndarray  # length L*K, gene index or -1 for padding
    gene_ids: tuple[str, ...]
    centroids: np.ndarray | None = None
    objective_trace: tuple[float, ...] = ()

    def __post_init__(self):
        slots = np.asarray(self.slots, dtype=np.int64)
        if slots.shape != (self.n_blocks * self.block_size,):
            raise ValueError(f"expected {self.n_blocks * self.block_size} slots, got {slots.shape}")
        real = np.sort(slots[slots >= 0])
        if not np.array_equal(real, np.arange(len(self.gene_ids))):
            raise ValueError("every gene must occupy exactly one slot")
        object.__setattr__(self, "slots", slots)
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def n_padding(self) -> int:
        return self.n_blocks * self.block_size - self.n_genes

    def slot_mask(self) -> np.ndarray:
        """(L, K) array, 1.0 where the slot holds a real gene."""
        return (self.slots >= 0).reshape(self.n_blocks, self.block_size).astype(np.float64)

    def blocks(self) -> list[list[str]]:
        grid = self.slots.reshape(self.n_blocks, self.block_size)
        return [[self.gene_ids[i] for i in row if i >= 0] for row in grid]

    def signature(self) -> str:
        """Compact identity used to detect layout mismatches between checkpoints."""
        return f"L{self.n_blocks}K{self.block_size}:" + ",".join(map(str, self.slots.tolist()))

    def to_json(self) -> dict:
        return {
            "L": self.n_blocks,
            "K": self.block_size,
            "slots": self.slots.tolist(),
            "gene_ids": list(self.gene_ids),
            "n_padding": self.n_padding,
            "centroids": None if self.centroids is None else np.asarray(self.centroids).tolist(),
            "objective_trace": list(self.objective_trace),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BlockLayout":
        centroids = doc.get("centroids")
        return cls(doc["L"], doc["K"], np.array(doc["slots"]), tuple(doc["gene_ids"]),
                   None if centroids is None else np.array(centroids, dtype=np.float64),
                   tuple(doc.get("objective_trace", ())))

    def save(self, path) -> None:
        atomic_write_bytes(path, json.dumps(self.to_json()).encode())

    @classmethod
    def load(cls, path) -> "BlockLayout":
        return cls.from_json(json.loads(Path(path).read_text()))


def block_count(n_genes: int, block_size: int) -> int:
    if block_size < 1:
        raise ValueError("block size must be at least 1")
    return math.ceil(n_genes / block_size)


def cost_matrix(embeddings: np.ndarray, centroids: np.ndarray, n_padding: int = 0) -> np.ndarray:
    """Squared Euclidean gene-to-centroid costs; padding rows cost 0 everywhere."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if embeddings.shape[1] != centroids.shape[1]:
        raise ValueError(f"embedding dim {embeddings.shape[1]} != centroid dim {centroids.shape[1]}")
    sq = (
        (embeddings**2).sum(axis=1)[:, None]
        - 2.0 * embeddings @ centroids.T
        + (centroids**2).sum(axis=1)[None, :]
    )
    sq = np.maximum(sq, 0.0)
    if n_padding:
        sq = np.vstack([sq, np.zeros((n_padding, centroids.shape[0]))])
    return sq


def entropic_objective(plan: np.ndarray, cost: np.ndarray, a: np.ndarray, b: np.ndarray, epsilon: float) -> float:
    """<T, C> + eps * KL(T || a b^T)."""
    ref = np.outer(a, b)
    pos = plan > 0
    kl = float(np.sum(plan[pos] * np.log(plan[pos] / ref[pos])) - plan.sum() + ref.sum())
    return float(np.sum(plan * cost)) + epsilon * kl


def _project_to_marginals(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Round a near-feasible plan onto the transport polytope of (a, b)."""
    rows = plan.sum(axis=1)
    x = plan * np.minimum(a / np.maximum(rows, 1e-300), 1.0)[:, None]
    cols = x.sum(axis=0)
    x = x * np.minimum(b / np.maximum(cols, 1e-300), 1.0)[None, :]
    err_r = a - x.sum(axis=1)
    err_c = b - x.sum(axis=0)
    total = err_r.sum()
    if total > 0:
        x = x + np.outer(err_r, err_c) / total
    return x


def sinkhorn_balanced(
    cost: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    epsilon: float,
    max_iters: int = 1000,
    tol: float = 1e-6,
) -> TransportPlan:
    """Log-domain Sinkhorn for entropic OT between histograms ``a`` and ``b``.

    When the marginal error has not dropped below ``tol`` after ``max_iters``
    sweeps the plan is still returned (``converged=False``). In both cases it is
    finally projected onto the exact marginal constraints.
    """
    cost = np.asarray(cost, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if cost.shape != (a.size, b.size):
        raise ValueError(f"cost shape {cost.shape} does not match marginals {a.size} x {b.size}")
    if not (np.isclose(a.sum(), 1.0) and np.isclose(b.sum(), 1.0)) or a.min() < 0 or b.min() < 0:
        raise ValueError("marginals must be probability vectors")

    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    err = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        f = epsilon * (log_a - logsumexp((g[None, :] - cost) / epsilon, axis=1))
        g = epsilon * (log_b - logsumexp((f[:, None] - cost) / epsilon, axis=0))
        if it % 10 == 0 or it == max_iters:
            plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
            err = float(np.abs(plan.sum(axis=1) - a).max())
            if err < tol:
                break
    plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
    err = float(np.abs(plan.sum(axis=1) - a).max())
    converged = err < tol
    if not converged:
        log.warning("sinkhorn stopped after %d iterations with marginal error %.3g", it, err)
    return TransportPlan(_project_to_marginals(plan, a, b), a, b, err, it, converged)


def round_to_capacity(plan: np.ndarray, block_size: int) -> np.ndarray:
    """Greedy hard assignment: visit (row, block) pairs by descending mass.

    Returns the block index of every row. Each block receives exactly
    ``block_size`` rows when ``rows == blocks * block_size``.
    """
    plan = np.asarray(plan)
    n_rows, n_blocks = plan.shape
    if n_rows > n_blocks * block_size:
        raise ValueError(f"{n_rows} rows do not fit in {n_blocks} blocks of {block_size}")
    order = np.argsort(-plan, axis=None, kind="stable")
    assign = np.full(n_rows, -1, dtype=np.int64)
    fill = np.zeros(n_blocks, dtype=np.int64)
    remaining = n_rows
    for flat in order:
        i, j = divmod(int(flat), n_blocks)
        if assign[i] >= 0 or fill[j] >= block_size:
            continue
        assign[i] = j
        fill[j] += 1
        remaining -= 1
        if remaining == 0:
            break
    return assign


def update_centroids(plan: np.ndarray, embeddings: np.ndarray, previous: np.ndarray) -> np.ndarray:
    """Mass-weighted mean of the real genes in each column of the plan.

    Padding rows (beyond ``len(embeddings)``) carry no embedding and are
    ignored. Columns without real-gene mass keep their previous centroid.
    """
    real = plan[: embeddings.shape[0]]
    mass = real.sum(axis=0)
    out = np.array(previous, dtype=np.float64, copy=True)
    ok = mass > 0
    out[ok] = (real[:, ok].T @ embeddings) / mass[ok, None]
    return out


def partition_cost(embeddings: np.ndarray, assign: np.ndarray, n_blocks: int) -> float:
    """Sum of squared distances of real genes to their block mean."""
    assign = np.asarray(assign[: embeddings.shape[0]])
    counts = np.bincount(assign, minlength=n_blocks).astype(np.float64)
    sums = np.zeros((n_blocks, embeddings.shape[1]))
    np.add.at(sums, assign, embeddings)
    means = sums / np.maximum(counts, 1.0)[:, None]
    return float(((embeddings - means[assign]) ** 2).sum())


def _seed_centroids(embeddings: np.ndarray, n_blocks: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted picks after a uniform first pick."""
    n = embeddings.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((embeddings - embeddings[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < n_blocks:
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((embeddings - embeddings[idx]) ** 2).sum(axis=1))
    return embeddings[chosen].copy()


def _layout_from_assignment(assign: np.ndarray, n_genes: int, n_blocks: int, block_size: int) -> np.ndarray:
    slots = np.full(n_blocks * block_size, -1, dtype=np.int64)
    for j in range(n_blocks):
        members = np.flatnonzero(assign == j)
        real = np.sort(members[members < n_genes])
        slots[j * block_size : j * block_size + len(real)] = real
    return slots


def build_blocks(
    table: GeneEmbeddingTable,
    block_size: int,
    seed: int = 0,
    outer_iters: int = 50,
    epsilon: float | None = None,
    epsilon_scale: float = 0.05,
    sinkhorn_iters: int = 1000,
    tol: float = 1e-6,
    shift_tol: float = 1e-6,
) -> BlockLayout:
    """Partition genes into balanced blocks.

    ``epsilon`` defaults to ``epsilon_scale`` times the mean real-gene cost of
    the current iteration. The returned layout is the lowest-cost hard
    partition seen; ``objective_trace`` records that running best after each
    outer iteration.
    """
    emb = table.embeddings
    n_genes = len(table)
    n_blocks = block_count(n_genes, block_size)
    n_pad = n_blocks * block_size - n_genes

    if n_blocks == 1 or block_size == 1:
        # every balanced partition is equivalent (one block, or singletons)
        assign = np.zeros(n_genes, dtype=np.int64) if n_blocks == 1 else np.arange(n_genes)
        slots = _layout_from_assignment(assign, n_genes, n_blocks, block_size)
        centroids = emb.mean(axis=0, keepdims=True) if n_blocks == 1 else emb.copy()
        cost = partition_cost(emb, assign, n_blocks)
        return BlockLayout(n_blocks, block_size, slots, table.gene_ids, centroids, (cost,))

    rng = np.random.default_rng(seed)
    centroids = _seed_centroids(emb, n_blocks, rng)
    n_rows = n_genes + n_pad
    a = np.full(n_rows, 1.0 / n_rows)
    b = np.full(n_blocks, 1.0 / n_blocks)

    best_cost, best_assign, best_centroids = np.inf, None, centroids
    trace: list[float] = []
    for it in range(outer_iters):
        cost = cost_matrix(emb, centroids, n_pad)
        eps = epsilon if epsilon is not None else epsilon_scale * max(float(cost[:n_genes].mean()), 1e-12)
        tp = sinkhorn_balanced(cost, a, b, eps, sinkhorn_iters, tol)
        assign = round_to_capacity(tp.plan, block_size)
        hard = partition_cost(emb, assign, n_blocks)
        if hard < best_cost:
            best_cost, best_assign, best_centroids = hard, assign, centroids
        trace.append(best_cost)
        new_centroids = update_centroids(tp.plan, emb, centroids)
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        log.debug("outer %d: hard cost %.6g, best %.6g, centroid shift %.3g", it, hard, best_cost, shift)
        if shift < shift_tol:
            break

    slots = _layout_from_assignment(best_assign, n_genes, n_blocks, block_size)
    return BlockLayout(n_blocks, block_size, slots, table.gene_ids, best_centroids, tuple(trace))


def reshape_to_blocks(m: ExpressionMatrix, layout: BlockLayout) -> np.ndarray:
    """Gather expression columns into an (N, L, K) tensor; padding slots are 0."""
    col = {g: j for j, g in enumerate(m.gene_ids)}
    try:
        layout_cols = np.array([col[g] for g in layout.gene_ids], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"layout gene {exc.args[0]!r} is not in the expression matrix") from None
    src = np.where(layout.slots >= 0, layout_cols[np.maximum(layout.slots, 0)], 0)
    out = m.values[:, src] * (layout.slots >= 0)
    return out.reshape(m.shape[0], layout.n_blocks, layout.block_size)


def scatter_from_blocks(x: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Inverse of :func:`reshape_to_blocks`: (N, L, K) -> (N, G) in layout gene order."""
    x = np.asarray(x)
    flat = x.reshape(x.shape[0], -1)
    real = layout.slots >= 0
    out = np.zeros((x.shape[0], layout.n_genes))
    out[:, layout.slots[real]] = flat[:, real]
    return out
