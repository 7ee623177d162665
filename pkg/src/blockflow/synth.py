"""Synthetic count data with known condition signatures.

Each condition level may shift a set of genes by a fixed amount in log-rate
space. Counts are Poisson draws around a log-normal base profile, optionally
thinned to a target zero fraction. Gene embeddings place genes that share a
signature close together, so block construction has structure to recover.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .blocks import GeneEmbeddingTable
from .conditioning import ConditionSchema, ConditionTable
from .preprocess import ExpressionMatrix


@dataclasses.dataclass
class Factor:
    name: str
    levels: list[str]
    # level -> {"genes": [...], "effects": [...]} (log-space shifts)
    signatures: dict[str, dict] = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class SyntheticSpec:
    n_cells: int
    n_genes: int
    factors: list[Factor]
    base_log_mean: float = 0.5
    base_log_sd: float = 1.0
    cell_noise_sd: float = 0.2
    library_sd: float = 0.2
    sparsity: float | None = None
    embedding_dim: int = 16

    def validate(self) -> None:
        if self.n_cells < 1 or self.n_genes < 2:
            raise ValueError("need at least one cell and two genes")
        if self.sparsity is not None and not 0 <= self.sparsity < 1:
            raise ValueError("sparsity target must be in [0, 1)")
        for f in self.factors:
            if len(set(f.levels)) != len(f.levels) or not f.levels:
                raise ValueError(f"factor {f.name!r} needs distinct, non-empty levels")
            for level, sig in f.signatures.items():
                if level not in f.levels:
                    raise ValueError(f"signature for unknown level {level!r} of {f.name!r}")
                genes = np.asarray(sig["genes"])
                effects = np.asarray(sig["effects"], dtype=float)
                if effects.size not in (1, genes.size):
                    raise ValueError(f"{f.name}={level}: {effects.size} effects for {genes.size} genes")
                if genes.size and (genes.min() < 0 or genes.max() >= self.n_genes):
                    raise ValueError(f"signature genes of {f.name}={level} fall outside [0, {self.n_genes})")
                if not np.all(np.isfinite(effects)):
                    raise ValueError(f"non-finite effect sizes for {f.name}={level}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        doc = dict(doc)
        doc["factors"] = [Factor(**f) for f in doc["factors"]]
        return cls(**doc)


@dataclasses.dataclass
class SyntheticData:
    counts: ExpressionMatrix
    conditions: ConditionTable
    embeddings: GeneEmbeddingTable
    truth: dict


def _effects(sig: dict) -> tuple[np.ndarray, np.ndarray]:
    genes = np.asarray(sig["genes"], dtype=np.int64)
    return genes, np.broadcast_to(np.asarray(sig["effects"], dtype=float), genes.shape)


def log_rate_shift(spec: SyntheticSpec, levels: dict[str, str]) -> np.ndarray:
    shift = np.zeros(spec.n_genes)
    for f in spec.factors:
        sig = f.signatures.get(levels[f.name])
        if sig:
            genes, eff = _effects(sig)
            np.add.at(shift, genes, eff)
    return shift


def generate(spec: SyntheticSpec, seed: int) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(seed)
    n, g = spec.n_cells, spec.n_genes

    base = rng.normal(spec.base_log_mean, spec.base_log_sd, size=g)
    level_idx = np.stack([rng.integers(len(f.levels), size=n) for f in spec.factors], axis=1) \
        if spec.factors else np.zeros((n, 0), dtype=np.int64)

    log_rate = np.tile(base, (n, 1))
    for k, f in enumerate(spec.factors):
        for li, level in enumerate(f.levels):
            sig = f.signatures.get(level)
            if not sig:
                continue
            genes, eff = _effects(sig)
            rows = np.flatnonzero(level_idx[:, k] == li)
            shift = np.zeros(g)
            np.add.at(shift, genes, eff)
            log_rate[rows] += shift
    log_rate += rng.normal(0.0, spec.cell_noise_sd, size=(n, g))
    log_rate += rng.normal(0.0, spec.library_sd, size=(n, 1))
    counts = rng.poisson(np.exp(log_rate)).astype(np.float64)

    if spec.sparsity is not None:
        zero_frac = float((counts == 0).mean())
        if spec.sparsity > zero_frac:
            drop = (spec.sparsity - zero_frac) / (1.0 - zero_frac)
            counts[(counts > 0) & (rng.random((n, g)) < drop)] = 0.0
    for i in np.flatnonzero(counts.sum(axis=1) == 0):
        counts[i, rng.integers(g)] = 1.0

    gene_ids = tuple(f"g{j:04d}" for j in range(g))
    cell_ids = tuple(f"c{i:05d}" for i in range(n))
    schema = ConditionSchema(tuple(f.name for f in spec.factors), tuple(tuple(f.levels) for f in spec.factors))
    conds = ConditionTable(level_idx + 1, schema)

    emb = _embeddings(spec, rng)

    truth = {
        "seed": seed,
        "spec": spec.to_json(),
        "base_log_mean": base.tolist(),
        "signature_genes": sorted({int(j) for f in spec.factors for s in f.signatures.values() for j in s["genes"]}),
    }
    return SyntheticData(
        ExpressionMatrix(counts, gene_ids, cell_ids, "raw"),
        conds,
        GeneEmbeddingTable(gene_ids, emb),
        truth,
    )


def _embeddings(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    dim = spec.embedding_dim
    emb = rng.normal(0.0, 1.0, size=(spec.n_genes, dim))
    centers_sum = np.zeros((spec.n_genes, dim))
    n_groups = np.zeros(spec.n_genes)
    for f in spec.factors:
        for level in f.levels:
            sig = f.signatures.get(level)
            if not sig:
                continue
            center = rng.normal(0.0, 4.0, size=dim)
            genes = np.asarray(sig["genes"], dtype=np.int64)
            centers_sum[genes] += center
            n_groups[genes] += 1
    grouped = n_groups > 0
    emb[grouped] = centers_sum[grouped] / n_groups[grouped, None] + rng.normal(0.0, 0.3, size=(grouped.sum(), dim))
    return emb


def write(data: SyntheticData, out_dir) -> dict[str, Path]:
    """Write counts, conditions, embeddings, schema and ground truth into ``out_dir``."""
    from .preprocess import write_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "expression": out / "expression.csv",
        "conditions": out / "conditions.csv",
        "embeddings": out / "embeddings.csv",
        "schema": out / "schema.json",
        "truth": out / "truth.json",
    }
    write_csv(data.counts, paths["expression"])
    data.conditions.write_csv(paths["conditions"], data.counts.cell_ids)
    data.embeddings.write_csv(paths["embeddings"])
    data.conditions.schema.save(paths["schema"])
    paths["truth"].write_text(json.dumps(data.truth, indent=1))
    return paths


def acceptance_spec(n_cells: int = 2000, n_genes: int = 200, effect: float = 1.5, genes_per_signature: int = 15,
                    sparsity: float | None = None) -> SyntheticSpec:
    """3 cell types x 2 batches, each level with its own disjoint gene signature."""
    factors = [Factor("cell_type", ["A", "B", "C"]), Factor("batch", ["b1", "b2"])]
    start = 0
    for f in factors:
        for level in f.levels:
            genes = list(range(start, start + genes_per_signature))
            f.signatures[level] = {"genes": genes, "effects": [effect] * len(genes)}
            start += genes_per_signature
    if start > n_genes:
        raise ValueError("signatures do not fit in the gene count")
    # deep, low-noise profiles: a decoder that outputs means cannot reproduce per-cell noise,
    # so heavy Poisson noise would dominate any distribution distance
    return SyntheticSpec(n_cells, n_genes, factors, base_log_mean=4.0, base_log_sd=0.5, cell_noise_sd=0.1,
                         sparsity=sparsity)


def perturbation_spec(n_cells: int = 2000, n_genes: int = 200, n_cell_types: int = 4, shift: float = 1.5,
                      n_shift_genes: int = 20, seed: int = 0) -> SyntheticSpec:
    """Cell types with their own signatures plus a stimulation that shifts 20 genes (mixed signs)."""
    rng = np.random.default_rng(seed)
    types = [f"T{i}" for i in range(n_cell_types)]
    cell_type = Factor("cell_type", types)
    start = 0
    for t in types:
        cell_type.signatures[t] = {"genes": list(range(start, start + 15)), "effects": [1.5] * 15}
        start += 15
    shift_genes = list(range(start, start + n_shift_genes))
    signs = np.where(np.arange(n_shift_genes) % 2 == 0, 1.0, -1.0)
    effects = (signs * shift * rng.uniform(0.8, 1.2, size=n_shift_genes)).tolist()
    perturb = Factor("condition", ["control", "stimulated"], {"stimulated": {"genes": shift_genes, "effects": effects}})
    # high base rates keep down-regulated genes well above zero counts
    return SyntheticSpec(n_cells, n_genes, [cell_type, perturb], base_log_mean=4.0, base_log_sd=0.5,
                         cell_noise_sd=0.1)
