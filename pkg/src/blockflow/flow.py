"""Conditional flow matching over VAE latent token grids.

Training regresses the velocity of the straight path from a Gaussian sample
to a data latent. Sampling integrates the learned field from t=0 to t=1, with
classifier-free guidance mixing the conditional field and the all-MASK field.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .blocks import BlockLayout
from .conditioning import AdaLNBlock, ConditionEmbedder, ConditionSchema, ConditionTable, mask_conditions
from .nn import AdamW, Linear, Module, warmup_lr
from .preprocess import ExpressionMatrix
from .tensor import Tape, Tensor
from .vae import DivergenceError, GeneBlockVAE, blocks_to_matrix, decode_cells

log = logging.getLogger(__name__)


@dataclasses.dataclass
class FlowConfig:
    n_tokens: int
    d: int
    n_blocks: int = 3
    e: int = 32
    n_heads: int = 2
    ode_steps: int = 100
    cfg_weight: float = 2.0
    uncond_p: float = 0.1
    mask_p: float = 0.6
    method: str = "euler"

    def __post_init__(self):
        if self.ode_steps < 1:
            raise ValueError("ode_steps must be >= 1")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be >= 0")
        if self.e % self.n_heads:
            raise ValueError(f"e={self.e} is not divisible by n_heads={self.n_heads}")
        if self.method not in ("euler", "heun"):
            raise ValueError(f"unknown ODE method {self.method!r}")


class FlowNet(Module):
    """v(x, t, s) on (N, L, d) latents."""

    def __init__(self, config: FlowConfig, schema: ConditionSchema, rng: np.random.Generator):
        c = config
        self.config = config
        self.schema = schema
        self.layout_signature = ""
        self.embed = ConditionEmbedder(schema, c.e, rng, with_time=True)
        self.in_proj = Linear(c.d, c.e, rng)
        self.pos = T.parameter(rng.standard_normal((c.n_tokens, c.e)) * 0.1)
        self.blocks = [AdaLNBlock(c.e, c.n_heads, rng) for _ in range(c.n_blocks)]
        self.head = Linear(c.e, c.d, rng)

    def __call__(self, x, t, conds: ConditionTable) -> Tensor:
        return velocity(self, x, t, conds)

    def save(self, path, optimizer: AdamW | None = None) -> None:
        tensors = {f"param.{k}": v for k, v in self.state_dict().items()}
        if optimizer is not None:
            tensors.update({f"adamw.{k}": v for k, v in optimizer.state_dict().items()})
        meta = {
            "flow": dataclasses.asdict(self.config),
            "schema": self.schema.to_json(),
            "layout_signature": self.layout_signature,
        }
        checkpoint.save(path, "flow", meta, tensors)

    @classmethod
    def load(cls, path) -> "FlowNet":
        _, meta, tensors = checkpoint.load(path, expect="flow")
        model = cls(FlowConfig(**meta["flow"]), ConditionSchema.from_json(meta["schema"]), np.random.default_rng(0))
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
        model.layout_signature = meta["layout_signature"]
        return model


def velocity(model: FlowNet, x, t, conds: ConditionTable) -> Tensor:
    x = T.as_tensor(x)
    c = model.config
    if x.ndim != 3 or x.shape[1:] != (c.n_tokens, c.d):
        raise T.ShapeError(f"flow network expects (N, {c.n_tokens}, {c.d}) latents, got {x.shape}")
    condvec = model.embed(conds, t)
    h = model.in_proj(x) + model.pos
    for block in model.blocks:
        h = block(h, condvec)
    return model.head(T.layernorm(h))


def affine_point(x0, x1, t):
    """(1 - t) x0 + t x1; ``t`` is a scalar or one value per item (leading axis)."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    if t_arr.ndim == 1:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - t_arr) * x0 + t_arr * x1


def target_field(x0, x1) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    return x1 - x0


def _training_conditions(conds, config: FlowConfig, rng) -> ConditionTable:
    masked = mask_conditions(conds, config.mask_p, rng)
    drop = rng.random(len(conds)) < config.uncond_p
    return ConditionTable(np.where(drop[:, None], 0, masked.indices), conds.schema)


def fm_loss(
    x1,
    conds: ConditionTable,
    model,
    rng: np.random.Generator,
    config: FlowConfig | None = None,
    field: Callable | None = None,
) -> Tensor:
    """Mean squared error between v(x_t, t, s) and x1 - x0 for t ~ U[0,1], x0 ~ N(0, I).

    ``field`` replaces the network (signature ``field(x_t, t, conds)``), which
    lets tests plug in exact or trivial velocity fields.
    """
    config = config or model.config
    x1 = np.asarray(x1, dtype=np.float64)
    n = x1.shape[0]
    t = rng.random(n)
    x0 = rng.standard_normal(x1.shape)
    xt = affine_point(x0, x1, t)
    s = _training_conditions(conds, config, rng)
    v = (field or model)(xt, t, s)
    return T.tmean((v - target_field(x0, x1)) ** 2)


def train_flow(
    latents: np.ndarray,
    conds: ConditionTable,
    config: FlowConfig,
    epochs: int,
    rng: np.random.Generator,
    latent_var: np.ndarray | None = None,
    lr: float = 1e-3,
    weight_decay: float = 2.5e-5,
    warmup_epochs: int = 20,
    batch_size: int = 128,
    model: FlowNet | None = None,
):
    """Fit the velocity network; returns (model, optimizer, trace).

    With ``latent_var`` the targets are fresh reparameterized draws
    ``latents + sqrt(latent_var) * eps`` for every batch; otherwise
    ``latents`` are used as fixed targets.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if len(conds) != latents.shape[0]:
        raise ValueError(f"{latents.shape[0]} latents but {len(conds)} condition rows")
    if model is None:
        model = FlowNet(config, conds.schema, rng)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    n = latents.shape[0]
    trace = []
    for epoch in range(epochs):
        step_lr = warmup_lr(lr, epoch, warmup_epochs)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x1 = latents[idx]
            if latent_var is not None:
                x1 = x1 + np.sqrt(latent_var[idx]) * rng.standard_normal(x1.shape)
            with Tape() as tape:
                loss = fm_loss(x1, conds.subset(idx), model, rng, config)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"flow loss became non-finite at epoch {epoch}")
                tape.backward(loss)
            opt.step(step_lr)
            opt.zero_grad()
            tape.reset()
            total += len(idx) * loss.item()
        trace.append({"epoch": epoch, "loss": total / n})
        if epoch % 50 == 0 or epoch == epochs - 1:
            log.info("flow epoch %d: loss %.5f", epoch, total / n)
    return model, opt, trace


def cfg_field(x, t, conds: ConditionTable, model, w: float) -> np.ndarray:
    """(1 - w) v(x, t, MASK) + w v(x, t, s). ``model`` is any callable (x, t, conds) -> velocity."""
    if w < 0:
        raise ValueError("guidance weight must be >= 0")

    def run(c):
        v = model(x, t, c)
        return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)

    if w == 1:
        return run(conds)
    uncond = run(ConditionTable.all_mask(len(conds), conds.schema))
    if w == 0:
        return uncond
    return (1.0 - w) * uncond + w * run(conds)


def integrate(field: Callable, x0: np.ndarray, steps: int, method: str = "euler") -> np.ndarray:
    """Fixed-step solve of dx/dt = field(x, t) from t=0 to t=1, with t_k = k / steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    h = 1.0 / steps
    n = x.shape[0]
    for k in range(steps):
        t = np.full(n, k * h)
        v = field(x, t)
        if method == "euler":
            x = x + h * v
        elif method == "heun":
            x_pred = x + h * v
            x = x + 0.5 * h * (v + field(x_pred, np.full(n, (k + 1) * h)))
        else:
            raise ValueError(f"unknown ODE method {method!r}")
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"ODE trajectory became non-finite at step {k}")
    return x


def sample_prior(n: int, config: FlowConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, config.n_tokens, config.d))


def sample_ode(
    n: int,
    conds: ConditionTable,
    model: FlowNet,
    config: FlowConfig | None,
    rng: np.random.Generator,
    w: float | None = None,
    batch_size: int = 1024,
) -> np.ndarray:
    """Draw x0 from the prior and integrate the guided field to t = 1."""
    config = config or model.config
    if len(conds) != n:
        raise ValueError(f"need {n} condition rows, got {len(conds)}")
    w = config.cfg_weight if w is None else w
    x0 = sample_prior(n, config, rng)
    out = np.empty_like(x0)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        sub = conds.subset(sl)
        out[sl] = integrate(lambda x, t: cfg_field(x, t, sub, model, w), x0[sl], config.ode_steps, config.method)
    return out


def generate(
    n: int,
    conds: ConditionTable,
    vae: GeneBlockVAE,
    flow: FlowNet,
    layout: BlockLayout,
    scale_factors: np.ndarray,
    config: FlowConfig | None,
    rng: np.random.Generator,
    w: float | None = None,
    to: str = "depth-normalized",
) -> ExpressionMatrix:
    """Sample latents, decode under ``conds`` and map back to expression space."""
    sig = layout.signature()
    for name, model in (("VAE", vae), ("flow", flow)):
        if model.layout_signature and model.layout_signature != sig:
            raise ValueError(f"{name} checkpoint was trained with a different block layout")
    z = sample_ode(n, conds, flow, config, rng, w)
    xhat = decode_cells(z, conds, vae)
    return blocks_to_matrix(xhat, layout, scale_factors, to=to)
