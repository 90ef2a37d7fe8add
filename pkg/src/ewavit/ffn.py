"""Two-layer GELU feed-forward block, the unit that MoE experts are made of."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, gelu, mul

FFN_FIELDS = ("w1", "b1", "w2", "b2")


@dataclass
class FFNParams:
    w1: Tensor  # d_model x d_hidden
    b1: Tensor  # d_hidden
    w2: Tensor  # d_hidden x d_model
    b2: Tensor  # d_model

    def __post_init__(self):
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, d) or self.b2.shape != (d,):
            raise ValueError(
                f"inconsistent FFN shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}")

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in FFN_FIELDS}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name).data for name in FFN_FIELDS}

    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(getattr(self, name).shape for name in FFN_FIELDS)

    def num_params(self) -> int:
        return sum(getattr(self, name).size for name in FFN_FIELDS)

    def copy(self, requires_grad: bool | None = None) -> FFNParams:
        def cp(t: Tensor) -> Tensor:
            rg = t.requires_grad if requires_grad is None else requires_grad
            return Tensor(t.data.copy(), requires_grad=rg)
        return FFNParams(*(cp(getattr(self, n)) for n in FFN_FIELDS))

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> FFNParams:
        return cls(*(Tensor(np.array(arrays[n], dtype=np.float64), requires_grad=requires_grad)
                     for n in FFN_FIELDS))

    @classmethod
    def init(cls, d_model: int, d_hidden: int, rng: np.random.Generator,
             std: float = 0.02) -> FFNParams:
        return cls.from_arrays({
            "w1": trunc_normal(rng, (d_model, d_hidden), std),
            "b1": np.zeros(d_hidden),
            "w2": trunc_normal(rng, (d_hidden, d_model), std),
            "b2": np.zeros(d_model),
        })


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) samples clipped to two standard deviations."""
    return np.clip(rng.standard_normal(shape) * std, -2 * std, 2 * std)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


def ffn_forward(ffn: FFNParams, tokens: Tensor, drop: float = 0.0,
                rng: np.random.Generator | None = None) -> Tensor:
    """``gelu(tokens @ w1 + b1) @ w2 + b2`` row by row.

    ``drop`` is applied after the activation and after the output projection
    when an ``rng`` is supplied (training mode).
    """
    if tokens.shape[-1] != ffn.d_model:
        raise ValueError(f"token width {tokens.shape[-1]} != d_model {ffn.d_model}")
    hidden = dropout(gelu(tokens @ ffn.w1 + ffn.b1), drop, rng)
    return dropout(hidden @ ffn.w2 + ffn.b2, drop, rng)
