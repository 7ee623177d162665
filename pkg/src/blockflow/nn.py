"""Layers and the AdamW optimizer built on :mod:`blockflow.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; child
    modules may be attributes or lists of modules. Names are dotted paths and
    iteration order follows attribute definition order, which keeps
    checkpoints stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=np.float64)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out))
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class FeedForward(Module):
    def __init__(self, e: int, rng: np.random.Generator, mult: int = 4):
        self.fc1 = Linear(e, mult * e, rng)
        self.fc2 = Linear(mult * e, e, rng)

    def __call__(self, h) -> Tensor:
        return self.fc2(T.gelu(self.fc1(h)))


class MultiHeadAttention(Module):
    """Self-attention over the token axis of an (N, L, e) tensor."""

    def __init__(self, e: int, n_heads: int, rng: np.random.Generator):
        if e % n_heads:
            raise ValueError(f"width {e} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = Linear(e, 3 * e, rng)
        self.proj = Linear(e, e, rng)

    def __call__(self, h, return_weights: bool = False):
        n, length, e = h.shape
        hd = e // self.n_heads
        qkv = self.qkv(h).reshape(n, length, 3, self.n_heads, hd)
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, N, H, L, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
        weights = T.softmax_lastdim(scores)
        out = T.matmul(weights, v)  # (N, H, L, hd)
        out = T.transpose(out, (0, 2, 1, 3)).reshape(n, length, e)
        out = self.proj(out)
        return (out, weights) if return_weights else out


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 2.5e-5,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([float(self.step_count)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m.copy()
            state[f"v.{i}"] = v.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m.{i}"])
            self.v[i] = np.array(state[f"v.{i}"])


def warmup_lr(base_lr: float, epoch: int, warmup_epochs: int) -> float:
    """Linear warmup from base_lr/warmup to base_lr over the first warmup epochs (0-based epoch)."""
    if warmup_epochs <= 0 or epoch >= warmup_epochs:
        return base_lr
    return base_lr * (epoch + 1) / warmup_epochs
