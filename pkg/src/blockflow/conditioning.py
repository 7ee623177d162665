"""Categorical conditions: vocabularies, masking, embeddings and AdaLN blocks."""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import FeedForward, Linear, Module, MultiHeadAttention
from .tensor import Tensor

MASK = 0
MASK_LABEL = "[MASK]"
N_TIME_FREQS = 64


@dataclasses.dataclass(frozen=True)
class ConditionSchema:
    """Ordered condition types, each with its label list. Index 0 of every type is MASK."""

    names: tuple[str, ...]
    vocabularies: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.names) != len(self.vocabularies):
            raise ValueError("one vocabulary per condition type")
        for name, vocab in zip(self.names, self.vocabularies):
            if len(set(vocab)) != len(vocab):
                raise ValueError(f"duplicate labels in condition type {name!r}")
            if MASK_LABEL in vocab:
                raise ValueError(f"{MASK_LABEL} is reserved and cannot be a label of {name!r}")

    @classmethod
    def from_labels(cls, columns: dict[str, Sequence[str]]) -> "ConditionSchema":
        """Vocabularies from observed labels, sorted for determinism."""
        return cls(tuple(columns), tuple(tuple(sorted(set(v))) for v in columns.values()))

    @property
    def n_types(self) -> int:
        return len(self.names)

    def vocab_size(self, k: int) -> int:
        return len(self.vocabularies[k]) + 1

    def index(self, k: int, label: str) -> int:
        if label == MASK_LABEL:
            return MASK
        try:
            return self.vocabularies[k].index(label) + 1
        except ValueError:
            raise KeyError(f"label {label!r} not in vocabulary of {self.names[k]!r}") from None

    def label(self, k: int, idx: int) -> str:
        return MASK_LABEL if idx == MASK else self.vocabularies[k][idx - 1]

    def to_json(self) -> dict:
        return {"names": list(self.names), "vocabularies": [list(v) for v in self.vocabularies]}

    @classmethod
    def from_json(cls, doc: dict) -> "ConditionSchema":
        return cls(tuple(doc["names"]), tuple(tuple(v) for v in doc["vocabularies"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "ConditionSchema":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclasses.dataclass(frozen=True)
class ConditionTable:
    indices: np.ndarray  # (N, d_s) integers, 0 = MASK
    schema: ConditionSchema

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[1] != self.schema.n_types:
            raise ValueError(f"condition indices must be N x {self.schema.n_types}, got {idx.shape}")
        for k in range(self.schema.n_types):
            col = idx[:, k]
            if col.size and (col.min() < 0 or col.max() >= self.schema.vocab_size(k)):
                raise IndexError(f"index out of vocabulary for condition {self.schema.names[k]!r}")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.shape[0]

    def subset(self, rows) -> "ConditionTable":
        return ConditionTable(self.indices[rows], self.schema)

    def replace_column(self, name: str, label: str) -> "ConditionTable":
        k = self.schema.names.index(name)
        idx = self.indices.copy()
        idx[:, k] = self.schema.index(k, label)
        return ConditionTable(idx, self.schema)

    def labels(self) -> list[tuple[str, ...]]:
        return [tuple(self.schema.label(k, int(i)) for k, i in enumerate(row)) for row in self.indices]

    @classmethod
    def from_labels(cls, rows: Sequence[Sequence[str]], schema: ConditionSchema) -> "ConditionTable":
        idx = [[schema.index(k, lab) for k, lab in enumerate(row)] for row in rows]
        return cls(np.array(idx, dtype=np.int64).reshape(len(rows), schema.n_types), schema)

    @classmethod
    def all_mask(cls, n: int, schema: ConditionSchema) -> "ConditionTable":
        return cls(np.zeros((n, schema.n_types), dtype=np.int64), schema)

    def write_csv(self, path, cell_ids: Sequence[str]) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id", *self.schema.names])
            for cid, row in zip(cell_ids, self.labels()):
                w.writerow([cid, *row])


def read_condition_csv(path, schema: ConditionSchema | None = None):
    """Read a cell_id-keyed condition CSV; returns (cell_ids, ConditionTable)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    names = header[1:]
    cell_ids = [r[0] for r in body]
    if schema is None:
        schema = ConditionSchema.from_labels(
            {n: [r[k + 1] for r in body if r[k + 1] != MASK_LABEL] for k, n in enumerate(names)}
        )
    elif tuple(names) != schema.names:
        raise ValueError(f"condition columns {names} do not match schema {list(schema.names)}")
    return cell_ids, ConditionTable.from_labels([r[1:] for r in body], schema)


def mask_conditions(table: ConditionTable, p: float, rng: np.random.Generator) -> ConditionTable:
    """Replace each entry by MASK independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability must be in [0, 1], got {p}")
    hit = rng.random(table.indices.shape) < p
    return ConditionTable(np.where(hit, MASK, table.indices), table.schema)


def time_features(t: np.ndarray, n_freqs: int = N_TIME_FREQS) -> np.ndarray:
    """sin/cos features of t in [0, 1], periods geometric from 1 to 1e4."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    periods = np.geomspace(1.0, 1e4, n_freqs)
    angles = 2.0 * np.pi * t / periods[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class ConditionEmbedder(Module):
    """Per-type embedding tables (row 0 = learned MASK row) plus an optional time embedding."""

    def __init__(self, schema: ConditionSchema, width: int, rng: np.random.Generator, with_time: bool = False):
        self.tables = [
            T.parameter(rng.standard_normal((schema.vocab_size(k), width)) * 0.5) for k in range(schema.n_types)
        ]
        self.time_proj = Linear(2 * N_TIME_FREQS, width, rng) if with_time else None

    def __call__(self, table: ConditionTable, t=None) -> Tensor:
        return embed_conditions(table, self, t)


def embed_conditions(table: ConditionTable, embedder: ConditionEmbedder, t=None) -> Tensor:
    """Sum of per-type embeddings, plus the time embedding when ``t`` is given. Shape (N, e)."""
    if len(embedder.tables) != table.schema.n_types:
        raise ValueError("embedder and condition table disagree on the number of condition types")
    out = None
    for k, emb in enumerate(embedder.tables):
        col = table.indices[:, k]
        if col.size and col.max() >= emb.shape[0]:
            raise IndexError(f"condition index {col.max()} out of vocabulary of size {emb.shape[0]}")
        rows = T.gather_rows(emb, col)
        out = rows if out is None else out + rows
    if t is not None:
        if embedder.time_proj is None:
            raise ValueError("this embedder has no time embedding")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(table),))
        out = out + embedder.time_proj(time_features(t))
    return out


def adaln(h, gamma, beta) -> Tensor:
    """normalize(h) * (1 + gamma) + beta, with per-cell (N, e) modulation broadcast over tokens."""
    n, e = gamma.shape
    return T.layernorm(h) * (1.0 + gamma.reshape(n, 1, e)) + beta.reshape(n, 1, e)


class AdaLNBlock(Module):
    """Pre-norm transformer block whose norms and residual gates are set by a condition vector.

    The modulation projection starts at zero, so a fresh block is the identity map.
    """

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator):
        self.modulation = Linear(width, 6 * width, rng, zero=True)
        self.attn = MultiHeadAttention(width, n_heads, rng)
        self.ff = FeedForward(width, rng)

    def chunks(self, condvec) -> list[Tensor]:
        m = self.modulation(condvec)
        e = m.shape[1] // 6
        return [m[:, i * e : (i + 1) * e] for i in range(6)]

    def __call__(self, h, condvec) -> Tensor:
        return adaln_modulate(h, condvec, self)


def adaln_modulate(h, condvec, block: AdaLNBlock, return_attention: bool = False):
    alpha1, beta1, gamma1, alpha2, beta2, gamma2 = block.chunks(condvec)
    n, e = alpha1.shape
    attn = block.attn(adaln(h, gamma1, beta1), return_weights=return_attention)
    if return_attention:
        attn, weights = attn
    h = h + alpha1.reshape(n, 1, e) * attn
    h = h + alpha2.reshape(n, 1, e) * block.ff(adaln(h, gamma2, beta2))
    return (h, weights) if return_attention else h
