"""Conditional gene-block-attention VAE.

Cells arrive as (N, L, K) block tensors in [0, 1]. The encoder projects each
block to width ``e``, runs AdaLN transformer blocks over the L block tokens
and emits a Gaussian posterior of width ``d`` per token. The decoder mirrors
it and ends in a sigmoid so reconstructions stay inside (0, 1).
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import checkpoint
from . import tensor as T
from .blocks import BlockLayout, reshape_to_blocks, scatter_from_blocks
from .conditioning import AdaLNBlock, ConditionEmbedder, ConditionSchema, ConditionTable, mask_conditions
from .nn import AdamW, Linear, Module, warmup_lr
from .preprocess import ExpressionMatrix, preprocess, unscale
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6


class DivergenceError(RuntimeError):
    """Training or inference produced non-finite numbers."""


@dataclasses.dataclass
class VaeConfig:
    block_size: int
    n_blocks: int
    e: int = 32
    d: int = 8
    n_enc_blocks: int = 2
    n_dec_blocks: int = 2
    n_heads: int = 2
    kl_weight: float = 1e-3
    mask_p: float = 0.6

    def __post_init__(self):
        for f in ("block_size", "n_blocks", "e", "d", "n_enc_blocks", "n_dec_blocks", "n_heads"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.e % self.n_heads:
            raise ValueError(f"e={self.e} is not divisible by n_heads={self.n_heads}")
        if self.kl_weight < 0 or not 0 <= self.mask_p <= 1:
            raise ValueError("kl_weight must be >= 0 and mask_p in [0, 1]")


@dataclasses.dataclass
class LatentCode:
    mu: Tensor
    var: Tensor
    z: Tensor


class GeneBlockVAE(Module):
    def __init__(self, config: VaeConfig, schema: ConditionSchema, rng: np.random.Generator,
                 slot_mask: np.ndarray | None = None):
        c = config
        self.config = config
        self.schema = schema
        self.slot_mask = np.ones((c.n_blocks, c.block_size)) if slot_mask is None else np.asarray(slot_mask, float)
        self.scale_factors: np.ndarray | None = None
        self.layout_signature: str = ""
        self.trained = False

        self.enc_embed = ConditionEmbedder(schema, c.e, rng)
        self.enc_in = Linear(c.block_size, c.e, rng)
        self.enc_pos = T.parameter(rng.standard_normal((c.n_blocks, c.e)) * 0.1)
        self.enc_blocks = [AdaLNBlock(c.e, c.n_heads, rng) for _ in range(c.n_enc_blocks)]
        self.mu_head = Linear(c.e, c.d, rng)
        self.var_head = Linear(c.e, c.d, rng)

        self.dec_embed = ConditionEmbedder(schema, c.e, rng)
        self.dec_in = Linear(c.d, c.e, rng)
        self.dec_pos = T.parameter(rng.standard_normal((c.n_blocks, c.e)) * 0.1)
        self.dec_blocks = [AdaLNBlock(c.e, c.n_heads, rng) for _ in range(c.n_dec_blocks)]
        self.out_head = Linear(c.e, c.block_size, rng)

    # checkpointing

    def save(self, path, optimizer: AdamW | None = None) -> None:
        tensors = {f"param.{k}": v for k, v in self.state_dict().items()}
        tensors["slot_mask"] = self.slot_mask
        if self.scale_factors is not None:
            tensors["scale_factors"] = self.scale_factors
        if optimizer is not None:
            tensors.update({f"adamw.{k}": v for k, v in optimizer.state_dict().items()})
        meta = {
            "vae": dataclasses.asdict(self.config),
            "schema": self.schema.to_json(),
            "layout_signature": self.layout_signature,
            "trained": self.trained,
        }
        checkpoint.save(path, "vae", meta, tensors)

    @classmethod
    def load(cls, path) -> "GeneBlockVAE":
        _, meta, tensors = checkpoint.load(path, expect="vae")
        model = cls(VaeConfig(**meta["vae"]), ConditionSchema.from_json(meta["schema"]),
                    np.random.default_rng(0), tensors["slot_mask"])
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
        model.scale_factors = tensors.get("scale_factors")
        model.layout_signature = meta["layout_signature"]
        model.trained = meta["trained"]
        return model


def reparameterize(mu, var, rng: np.random.Generator) -> Tensor:
    """z = mu + sqrt(var) * eps with eps ~ N(0, I) drawn from ``rng``."""
    mu, var = T.as_tensor(mu), T.as_tensor(var)
    eps = rng.standard_normal(mu.shape)
    return mu + T.sqrt(var) * eps


def _check_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise DivergenceError(f"non-finite values in {what}")


def encode(x, conds: ConditionTable, model: GeneBlockVAE, rng: np.random.Generator) -> LatentCode:
    c = model.config
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (c.n_blocks, c.block_size):
        raise T.ShapeError(f"encoder expects (N, {c.n_blocks}, {c.block_size}) input, got {x.shape}")
    if len(conds) != x.shape[0]:
        raise T.ShapeError(f"{x.shape[0]} cells but {len(conds)} condition rows")
    condvec = model.enc_embed(conds)
    h = model.enc_in(x) + model.enc_pos
    for block in model.enc_blocks:
        h = block(h, condvec)
    h = T.layernorm(h)
    mu = model.mu_head(h)
    var = T.softplus(model.var_head(h)) + VAR_FLOOR
    _check_finite(mu, "encoder mean")
    _check_finite(var, "encoder variance")
    return LatentCode(mu, var, reparameterize(mu, var, rng))


def decode(z, conds: ConditionTable, model: GeneBlockVAE) -> Tensor:
    c = model.config
    z = T.as_tensor(z)
    if z.ndim != 3 or z.shape[1:] != (c.n_blocks, c.d):
        raise T.ShapeError(f"decoder expects (N, {c.n_blocks}, {c.d}) latents, got {z.shape}")
    if len(conds) != z.shape[0]:
        raise T.ShapeError(f"{z.shape[0]} latents but {len(conds)} condition rows")
    condvec = model.dec_embed(conds)
    h = model.dec_in(z) + model.dec_pos
    for block in model.dec_blocks:
        h = block(h, condvec)
    return T.sigmoid(model.out_head(T.layernorm(h))) * model.slot_mask


def kl_divergence(code: LatentCode) -> Tensor:
    """Mean over all latent dimensions of KL(N(mu, var) || N(0, 1))."""
    return T.tmean(0.5 * (-T.log(code.var) + code.var + code.mu * code.mu - 1.0))


def reconstruction_loss(xhat, x, slot_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over real (non-padding) slots."""
    xhat, x = T.as_tensor(xhat), T.as_tensor(x)
    if xhat.shape != x.shape:
        raise T.ShapeError(f"reconstruction shapes differ: {xhat.shape} vs {x.shape}")
    if slot_mask is None:
        return T.tmean((xhat - x) ** 2)
    mask = np.broadcast_to(slot_mask, x.shape)
    return T.tsum(((xhat - x) * mask) ** 2) * (1.0 / mask.sum())


def vae_loss(model: GeneBlockVAE, x, conds: ConditionTable, rng: np.random.Generator, kl_weight: float):
    """Returns (total, reconstruction, kl). With kl_weight == 0 the KL term is left out of total."""
    code = encode(x, conds, model, rng)
    xhat = decode(code.z, conds, model)
    recon = reconstruction_loss(xhat, x, model.slot_mask)
    kl = kl_divergence(code)
    total = recon + kl_weight * kl if kl_weight > 0 else recon
    return total, recon, kl


def train_vae(
    x: np.ndarray,
    conds: ConditionTable,
    config: VaeConfig,
    epochs: int,
    rng: np.random.Generator,
    slot_mask: np.ndarray | None = None,
    lr: float = 1e-3,
    weight_decay: float = 2.5e-5,
    warmup_epochs: int = 20,
    batch_size: int = 128,
    model: GeneBlockVAE | None = None,
):
    """Fit the VAE; returns (model, optimizer, trace).

    ``trace`` holds one dict per epoch with the cell-weighted mean total,
    reconstruction and KL losses. Condition entries are masked at
    ``config.mask_p`` per batch. The learning rate and the KL weight share a
    linear warmup.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(conds) != x.shape[0]:
        raise ValueError(f"{x.shape[0]} cells but {len(conds)} condition rows")
    if model is None:
        model = GeneBlockVAE(config, conds.schema, rng, slot_mask)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    n = x.shape[0]
    trace = []
    for epoch in range(epochs):
        step_lr = warmup_lr(lr, epoch, warmup_epochs)
        kl_w = config.kl_weight * min(1.0, (epoch + 1) / warmup_epochs) if warmup_epochs > 0 else config.kl_weight
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            masked = mask_conditions(conds.subset(idx), config.mask_p, rng)
            with Tape() as tape:
                total, recon, kl = vae_loss(model, x[idx], masked, rng, kl_w)
                if not np.isfinite(total.item()):
                    raise DivergenceError(f"VAE loss became non-finite at epoch {epoch}")
                tape.backward(total)
            opt.step(step_lr)
            opt.zero_grad()
            tape.reset()
            sums += len(idx) * np.array([total.item(), recon.item(), kl.item()])
        sums /= n
        trace.append({"epoch": epoch, "total": sums[0], "recon": sums[1], "kl": sums[2]})
        if epoch % 25 == 0 or epoch == epochs - 1:
            log.info("vae epoch %d: total %.5f recon %.5f kl %.4f", epoch, *sums)
    model.trained = True
    return model, opt, trace


def encode_cells(x, conds, model, rng, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance for many cells, batched, without recording gradients."""
    mus, vs = [], []
    for start in range(0, x.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        code = encode(x[sl], conds.subset(sl), model, rng)
        mus.append(code.mu.data)
        vs.append(code.var.data)
    return np.concatenate(mus), np.concatenate(vs)


def decode_cells(z, conds, model, batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, z.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        out.append(decode(z[sl], conds.subset(sl), model).data)
    return np.concatenate(out)


def blocks_to_matrix(
    xhat: np.ndarray,
    layout: BlockLayout,
    scale_factors: np.ndarray,
    cell_ids=None,
    to: str = "depth-normalized",
) -> ExpressionMatrix:
    """Decoded block tensor -> expression matrix (layout gene order), inverse-preprocessed."""
    values = np.clip(scatter_from_blocks(xhat, layout), 0.0, 1.0)
    if cell_ids is None:
        cell_ids = tuple(f"gen{i}" for i in range(values.shape[0]))
    m = ExpressionMatrix(values, layout.gene_ids, tuple(cell_ids), "maxabs-scaled", np.asarray(scale_factors))
    return m if to == "maxabs-scaled" else unscale(m, to=to)


def transfer(
    cells: ExpressionMatrix,
    source_conds: ConditionTable,
    target_conds: ConditionTable,
    model: GeneBlockVAE,
    layout: BlockLayout,
    rng: np.random.Generator,
    sample: bool = False,
    to: str = "depth-normalized",
) -> ExpressionMatrix:
    """Encode cells under their source conditions and decode under target conditions.

    ``cells`` may be raw counts or already max-abs scaled with the model's
    factors. With ``sample=False`` the posterior mean is decoded.
    """
    if not model.trained or model.scale_factors is None:
        raise ValueError("transfer needs a trained VAE carrying its scale factors")
    if model.layout_signature and model.layout_signature != layout.signature():
        raise ValueError("layout does not match the one the VAE was trained with")
    if len(source_conds) != cells.shape[0] or len(target_conds) != cells.shape[0]:
        raise ValueError("condition tables must have one row per cell")
    if cells.stage == "raw":
        cells = preprocess(cells, _factors_for(cells, layout, model.scale_factors))
    x = reshape_to_blocks(cells, layout)
    mu, var = encode_cells(x, source_conds, model, rng)
    z = mu + np.sqrt(var) * rng.standard_normal(mu.shape) if sample else mu
    xhat = decode_cells(z, target_conds, model)
    return blocks_to_matrix(xhat, layout, model.scale_factors, cells.cell_ids, to)


def _factors_for(m: ExpressionMatrix, layout: BlockLayout, factors: np.ndarray) -> np.ndarray:
    """Scale factors are stored in layout gene order; reorder to the matrix's columns."""
    pos = {g: i for i, g in enumerate(layout.gene_ids)}
    return np.array([factors[pos[g]] for g in m.gene_ids])
