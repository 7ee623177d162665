"""Depth normalization, log transform and per-gene max-abs scaling, with inverses.

The chain is strictly ordered ``raw -> depth-normalized -> logged ->
maxabs-scaled``; each step checks the stage of its input.
"""

from __future__ import annotations

import csv
import dataclasses
import struct
from pathlib import Path

import numpy as np

TARGET_DEPTH = 1e4
STAGES = ("raw", "depth-normalized", "logged", "maxabs-scaled")
BFX_MAGIC = b"BFX1"


class PipelineOrderError(ValueError):
    pass


class EmptyCellError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ExpressionMatrix:
    values: np.ndarray
    gene_ids: tuple[str, ...]
    cell_ids: tuple[str, ...]
    stage: str = "raw"
    scale_factors: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"expression values must be 2-D, got shape {values.shape}")
        if values.shape != (len(self.cell_ids), len(self.gene_ids)):
            raise ValueError(
                f"values shape {values.shape} does not match {len(self.cell_ids)} cells x {len(self.gene_ids)} genes"
            )
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("expression values must be finite and nonnegative")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "cell_ids", tuple(self.cell_ids))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def replace(self, **changes) -> "ExpressionMatrix":
        return dataclasses.replace(self, **changes)

    def subset(self, rows) -> "ExpressionMatrix":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return self.replace(values=self.values[rows], cell_ids=tuple(self.cell_ids[i] for i in rows))

    @classmethod
    def from_array(cls, values, stage: str = "raw", gene_prefix: str = "gene", cell_prefix: str = "cell"):
        values = np.asarray(values, dtype=np.float64)
        n, g = values.shape
        return cls(
            values,
            tuple(f"{gene_prefix}{j}" for j in range(g)),
            tuple(f"{cell_prefix}{i}" for i in range(n)),
            stage,
        )


def _require(m: ExpressionMatrix, stage: str, op: str) -> None:
    if m.stage != stage:
        raise PipelineOrderError(f"{op} expects a {stage} matrix, got stage {m.stage!r}")


def normalize_depth(m: ExpressionMatrix, target: float = TARGET_DEPTH) -> ExpressionMatrix:
    _require(m, "raw", "normalize_depth")
    totals = m.values.sum(axis=1)
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        raise EmptyCellError(f"cell {m.cell_ids[empty[0]]!r} has zero total count")
    return m.replace(values=m.values * (target / totals)[:, None], stage="depth-normalized")


def log_transform(m: ExpressionMatrix) -> ExpressionMatrix:
    _require(m, "depth-normalized", "log_transform")
    return m.replace(values=np.log1p(m.values), stage="logged")


def maxabs_factors(values: np.ndarray) -> np.ndarray:
    """Per-gene max |value|; all-zero genes get factor 1."""
    f = np.abs(values).max(axis=0)
    return np.where(f > 0, f, 1.0)


def maxabs_scale(m: ExpressionMatrix, factors: np.ndarray | None = None) -> ExpressionMatrix:
    """Scale each gene by its max |value|.

    Pass ``factors`` computed on a training split to scale held-out cells
    consistently; such cells may then exceed 1 and are clipped to [0, 1].
    """
    _require(m, "logged", "maxabs_scale")
    if factors is None:
        factors = maxabs_factors(m.values)
        scaled = m.values / factors
    else:
        factors = np.asarray(factors, dtype=np.float64)
        if factors.shape != (m.shape[1],) or np.any(factors <= 0):
            raise ValueError("scale factors must be positive, one per gene")
        scaled = np.clip(m.values / factors, 0.0, 1.0)
    return m.replace(values=scaled, stage="maxabs-scaled", scale_factors=factors.copy())


def preprocess(m: ExpressionMatrix, factors: np.ndarray | None = None) -> ExpressionMatrix:
    """raw -> maxabs-scaled in one call."""
    return maxabs_scale(log_transform(normalize_depth(m)), factors)


def unscale(m: ExpressionMatrix, to: str = "depth-normalized") -> ExpressionMatrix:
    """Invert max-abs scaling, and by default the log transform as well."""
    _require(m, "maxabs-scaled", "unscale")
    if m.scale_factors is None:
        raise ValueError("matrix carries no scale factors")
    logged = m.replace(values=m.values * m.scale_factors, stage="logged", scale_factors=None)
    if to == "logged":
        return logged
    if to != "depth-normalized":
        raise ValueError(f"unscale target must be 'logged' or 'depth-normalized', got {to!r}")
    return logged.replace(values=np.expm1(logged.values), stage="depth-normalized")


def to_logged(m: ExpressionMatrix) -> ExpressionMatrix:
    """Bring a matrix at any stage to log space (used to compare real and generated cells)."""
    if m.stage == "raw":
        return log_transform(normalize_depth(m))
    if m.stage == "depth-normalized":
        return log_transform(m)
    if m.stage == "logged":
        return m
    return unscale(m, to="logged")


# file formats

def write_csv(m: ExpressionMatrix, path, precision: int = 17) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", *m.gene_ids])
        for cid, row in zip(m.cell_ids, m.values):
            w.writerow([cid, *(format(v, f".{precision}g") for v in row)])


def read_csv(path, stage: str = "raw") -> ExpressionMatrix:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    header, body = rows[0], rows[1:]
    cells = [r[0] for r in body]
    values = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    return ExpressionMatrix(values, tuple(header[1:]), tuple(cells), stage)


def write_bfx(m: ExpressionMatrix, path) -> None:
    n, g = m.shape
    with Path(path).open("wb") as fh:
        fh.write(BFX_MAGIC)
        fh.write(struct.pack("<II", n, g))
        fh.write(np.ascontiguousarray(m.values, dtype="<f8").tobytes())


def read_bfx(path, stage: str = "raw") -> ExpressionMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != BFX_MAGIC:
        raise ValueError(f"{path}: not a BFX1 matrix file")
    n, g = struct.unpack("<II", raw[4:12])
    payload = raw[12:]
    if len(payload) != 8 * n * g:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {8 * n * g}")
    values = np.frombuffer(payload, dtype="<f8").reshape(n, g).astype(np.float64)
    return ExpressionMatrix.from_array(values, stage)


def read_matrix(path, stage: str = "raw") -> ExpressionMatrix:
    with Path(path).open("rb") as fh:
        head = fh.read(4)
    return read_bfx(path, stage) if head == BFX_MAGIC else read_csv(path, stage)


def write_matrix(m: ExpressionMatrix, path) -> None:
    if str(path).endswith(".bfx"):
        write_bfx(m, path)
    else:
        write_csv(m, path)
