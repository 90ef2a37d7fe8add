"""Mixture-of-experts layers.

Two dispatch rules share one container:

* ``rup``  -- random uniform partition: tokens are shuffled and split into N
  equal chunks, chunk i goes through expert i.  No router, no extra loss.
* ``topk`` -- learned softmax router keeping the k best experts per token,
  bounded by a per-expert capacity, with a switch-style load-balance loss.

Tokens are always a flat ``[T, d]`` matrix; callers flatten batch and sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ffn import FFNParams, ffn_forward, trunc_normal
from .tensor import Tensor, matmul, mul, scatter_rows, softmax, take_rows, tsum

RUP = "rup"
TOPK = "topk"
EVAL_SEED = 0


@dataclass
class MoELayer:
    experts: list[FFNParams]
    mode: str = RUP
    router: Tensor | None = None  # d_model x N, topk only
    k: int = 1
    capacity_ratio: float = 1.05
    balance_weight: float = 0.01

    def __post_init__(self):
        if not self.experts:
            raise ValueError("MoELayer needs at least one expert")
        shapes = self.experts[0].shapes()
        if any(e.shapes() != shapes for e in self.experts[1:]):
            raise ValueError("all experts must share identical shapes")
        if self.mode not in (RUP, TOPK):
            raise ValueError(f"unknown MoE mode {self.mode!r}")
        if self.mode == TOPK:
            if self.router is None:
                raise ValueError("topk MoE needs a router weight")
            if self.router.shape != (self.d_model, self.num_experts):
                raise ValueError(f"router shape {self.router.shape} != "
                                 f"{(self.d_model, self.num_experts)}")
            if not 1 <= self.k <= self.num_experts:
                raise ValueError(f"k={self.k} outside [1, {self.num_experts}]")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def d_model(self) -> int:
        return self.experts[0].d_model

    def num_params(self) -> int:
        n = sum(e.num_params() for e in self.experts)
        return n + (self.router.size if self.router is not None else 0)


@dataclass
class PartitionAssignment:
    expert_of_token: np.ndarray
    token_lists: list[np.ndarray] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [len(t) for t in self.token_lists]


def rup_partition(num_tokens: int, num_experts: int, rng: np.random.Generator) -> PartitionAssignment:
    """Shuffle ``range(num_tokens)`` and deal contiguous chunks to the experts.

    When N does not divide T, the first ``T mod N`` experts get one extra token.
    """
    if num_experts < 1:
        raise ValueError("need at least one expert")
    if num_tokens < num_experts:
        raise ValueError(f"cannot partition {num_tokens} tokens over {num_experts} experts")
    perm = rng.permutation(num_tokens)
    base, extra = divmod(num_tokens, num_experts)
    bounds = np.cumsum([0] + [base + (1 if i < extra else 0) for i in range(num_experts)])
    lists = [perm[bounds[i]:bounds[i + 1]] for i in range(num_experts)]
    owner = np.empty(num_tokens, dtype=np.intp)
    for i, idx in enumerate(lists):
        owner[idx] = i
    return PartitionAssignment(owner, lists)


def moe_rup_forward(layer: MoELayer, tokens: Tensor, rng: np.random.Generator | None = None,
                    mode: str = "train", drop: float = 0.0,
                    partition: PartitionAssignment | None = None) -> Tensor:
    """Each token goes through exactly one expert chosen by a fresh random partition.

    In eval mode a missing ``rng`` falls back to a fixed evaluation seed.  A
    precomputed ``partition`` overrides the random draw.
    """
    if layer.mode != RUP:
        raise ValueError(f"moe_rup_forward called on a {layer.mode!r} layer")
    if partition is None:
        if rng is None:
            if mode == "train":
                raise ValueError("train-mode RUP needs an rng")
            rng = np.random.default_rng(EVAL_SEED)
        partition = rup_partition(tokens.shape[0], layer.num_experts, rng)
    drop_rng = rng if mode == "train" else None
    parts, index = [], []
    for expert, idx in zip(layer.experts, partition.token_lists):
        if len(idx) == 0:
            continue
        parts.append(ffn_forward(expert, take_rows(tokens, idx), drop, drop_rng))
        index.append(idx)
    return scatter_rows(parts, index, tokens.shape[0])


def router_probs(layer: MoELayer, tokens: Tensor) -> Tensor:
    if layer.mode != TOPK:
        raise ValueError(f"router called on a {layer.mode!r} layer")
    return softmax(matmul(tokens, layer.router), axis=-1)


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, best first; ties favour the lower index."""
    return np.argsort(-probs, axis=-1, kind="stable")[:, :k]


def router_scores(layer: MoELayer, tokens: Tensor) -> Tensor:
    """Softmax gate with all but the top-k entries zeroed (no renormalisation)."""
    probs = router_probs(layer, tokens)
    mask = np.zeros(probs.shape)
    np.put_along_axis(mask, top_k_indices(probs.data, layer.k), 1.0, axis=-1)
    return mul(probs, mask)


def expert_capacity(num_tokens: int, num_experts: int, k: int, capacity_ratio: float) -> int:
    return int(math.ceil(capacity_ratio * num_tokens * k / num_experts))


@dataclass
class Dispatch:
    choices: np.ndarray  # [T, k] expert ids, best first
    kept: np.ndarray  # [T, k] bool
    capacity: int
    token_lists: list[np.ndarray]

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.token_lists])

    @property
    def dropped(self) -> int:
        return int((~self.kept).sum())


def dispatch_topk(probs: np.ndarray, k: int, capacity: int) -> Dispatch:
    """Assign (token, choice) pairs to experts in token order, then choice order,
    dropping any pair that arrives at an already full expert."""
    t, n = probs.shape
    choices = top_k_indices(probs, k)
    flat = choices.reshape(-1)
    onehot = np.zeros((flat.size, n), dtype=np.int64)
    onehot[np.arange(flat.size), flat] = 1
    position = np.cumsum(onehot, axis=0)[np.arange(flat.size), flat] - 1
    kept = (position < capacity).reshape(t, k)
    pairs_token = np.repeat(np.arange(t), k)
    keep_flat = kept.reshape(-1)
    lists = [pairs_token[(flat == i) & keep_flat] for i in range(n)]
    for i, lst in enumerate(lists):
        assert len(lst) <= capacity, f"expert {i} over capacity: {len(lst)} > {capacity}"
    return Dispatch(choices, kept, capacity, lists)


def load_balance_loss(gate_probs: Tensor, top1: np.ndarray, balance_weight: float) -> Tensor:
    """``weight * N * sum_i f_i * P_i`` with f the top-1 token fractions and P the
    mean router probabilities."""
    t, n = gate_probs.shape
    frac = np.bincount(np.asarray(top1), minlength=n)[:n] / float(t)
    mean_prob = mul(tsum(gate_probs, axis=0), 1.0 / t)
    return mul(tsum(mul(mean_prob, frac)), balance_weight * n)


def moe_topk_forward(layer: MoELayer, tokens: Tensor, mode: str = "train", drop: float = 0.0,
                     rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Routed mixture ``sum_i G(x)_i E_i(x)`` with capacity-limited dispatch.

    Dropped (token, expert) pairs contribute zero; the surrounding residual
    connection carries those tokens through.  Returns ``(output, aux_loss)``.
    """
    if layer.mode != TOPK:
        raise ValueError(f"moe_topk_forward called on a {layer.mode!r} layer")
    t, n = tokens.shape[0], layer.num_experts
    probs = router_probs(layer, tokens)
    cap = expert_capacity(t, n, layer.k, layer.capacity_ratio)
    plan = dispatch_topk(probs.data, layer.k, cap)
    drop_rng = rng if mode == "train" else None
    parts, index = [], []
    for i, (expert, idx) in enumerate(zip(layer.experts, plan.token_lists)):
        if len(idx) == 0:
            continue
        gate = probs[idx, np.full(len(idx), i)].reshape(len(idx), 1)
        parts.append(mul(ffn_forward(expert, take_rows(tokens, idx), drop, drop_rng), gate))
        index.append(idx)
    if parts:
        out = scatter_rows(parts, index, t)
    else:
        out = mul(tokens, 0.0)
    aux = load_balance_loss(probs, plan.choices[:, 0], layer.balance_weight)
    return out, aux


def init_router(d_model: int, num_experts: int, rng: np.random.Generator, std: float = 0.02) -> Tensor:
    return Tensor(trunc_normal(rng, (d_model, num_experts), std), requires_grad=True)
