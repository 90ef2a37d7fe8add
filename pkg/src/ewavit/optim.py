"""SGD with momentum, AdamW, and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.05
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        self.betas = tuple(self.betas)


@dataclass
class OptimizerState:
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def decays(name: str, param: np.ndarray) -> bool:
    """Weight decay applies to matrices only: no biases, norm gains, tokens or embeddings."""
    return param.ndim >= 2 and name not in ("cls_token", "pos_embed")


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, lr: float, cfg: OptimizerConfig) -> dict[str, np.ndarray]:
    """One deterministic update; returns new parameter arrays and advances ``state``.

    Moment buffers are keyed by parameter name.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise FloatingPointError(
                f"non-finite gradient in {name!r}: {bad}/{g.size} entries, "
                f"step {state.step}, lr {lr:g}")
    state.step += 1
    out = {}
    if cfg.kind == "sgd":
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            if cfg.weight_decay and decays(name, p):
                g = g + cfg.weight_decay * p
            if cfg.momentum:
                buf = state.buffers.setdefault(name, {})
                buf["momentum"] = g.copy() if "momentum" not in buf else cfg.momentum * buf["momentum"] + g
                g = buf["momentum"]
            out[name] = p - lr * g
        return out

    b1, b2 = cfg.betas
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        buf = state.buffers.setdefault(name, {"m": np.zeros_like(p), "v": np.zeros_like(p)})
        buf["m"] = b1 * buf["m"] + (1.0 - b1) * g
        buf["v"] = b2 * buf["v"] + (1.0 - b2) * g * g
        new = p * (1.0 - lr * cfg.weight_decay) if decays(name, p) else p
        out[name] = new - lr * (buf["m"] / c1) / (np.sqrt(buf["v"] / c2) + cfg.eps)
    return out


def step_model(named: dict[str, Tensor], state: OptimizerState, lr: float, cfg: OptimizerConfig) -> None:
    """Apply :func:`optimizer_step` to live tensors and clear their gradients."""
    params = {n: t.data for n, t in named.items()}
    grads = {n: t.grad for n, t in named.items() if t.grad is not None}
    for name, arr in optimizer_step(params, grads, state, lr, cfg).items():
        named[name].data = arr
        named[name].grad = None


def cosine_lr(step: int, total: int, warmup: int, lr_max: float) -> float:
    """Linear warmup from 0 to ``lr_max`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return lr_max * step / warmup
    if total <= warmup:
        return lr_max
    progress = min(max((step - warmup) / (total - warmup), 0.0), 1.0)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))
