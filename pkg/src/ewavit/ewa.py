"""Experts weights averaging: the mixing step, share-rate schedules, MoE
placement, and the lossless MoE -> FFN conversion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ffn import FFN_FIELDS, FFNParams
from .moe import RUP, TOPK, MoELayer, init_router
from .tensor import Tensor
from .vit import Model, ViTConfig, copy_model, init_vit

CONSTANT = "constant"
LINEAR = "linear"
EVERY_2 = "every-2"
LAST_4 = "last-4"
SHARE_RATE_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class ShareSchedule:
    kind: str = LINEAR
    share_rate: float = 0.3
    horizon: int = 1  # last position index; the linear ramp reaches share_rate there
    granularity: str = "epoch"  # or "step"
    early_cutoff_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in (CONSTANT, LINEAR):
            raise ValueError(f"unknown share schedule {self.kind!r}")
        if not 0.0 <= self.share_rate <= 1.0:
            raise ValueError(f"share_rate {self.share_rate} outside [0, 1]")
        if self.granularity not in ("epoch", "step"):
            raise ValueError(f"granularity must be 'epoch' or 'step', got {self.granularity!r}")
        if not 0.0 < self.early_cutoff_fraction <= 1.0:
            raise ValueError("early_cutoff_fraction must lie in (0, 1]")


def schedule_beta(schedule: ShareSchedule, position: int) -> float:
    """Share rate in force at ``position`` (an epoch or step index in ``0..horizon``).

    With ``early_cutoff_fraction < 1`` the rate drops to zero once ``position``
    leaves the first ``fraction * (horizon + 1)`` positions.
    """
    if (schedule.early_cutoff_fraction < 1.0
            and position >= schedule.early_cutoff_fraction * (schedule.horizon + 1)):
        return 0.0
    if schedule.kind == CONSTANT or schedule.horizon <= 0:
        return schedule.share_rate
    return schedule.share_rate * min(position, schedule.horizon) / schedule.horizon


@dataclass
class PlacementPolicy:
    kind: str = EVERY_2
    depth: int = 4

    def blocks(self) -> list[int]:
        if self.kind == EVERY_2:
            if self.depth < 2:
                raise ValueError("every-2 placement needs depth >= 2")
            return list(range(1, self.depth, 2))
        if self.kind == LAST_4:
            if self.depth < 4:
                raise ValueError("last-4 placement needs depth >= 4")
            return list(range(self.depth - 4, self.depth))
        if self.kind == "none":
            return []
        raise ValueError(f"unknown placement {self.kind!r}")


def ewa_mix(stacked: np.ndarray, beta: float) -> np.ndarray:
    """Mix expert-stacked weights ``[N, ...]``: each expert keeps ``1 - beta`` of
    itself and takes ``beta / (N - 1)`` of every other expert."""
    n = stacked.shape[0]
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta {beta} outside [0, 1]")
    if n == 1 or beta == 0.0:
        return stacked.copy()
    others = stacked.sum(axis=0, keepdims=True) - stacked
    return (1.0 - beta) * stacked + (beta / (n - 1)) * others


def _check_same_shapes(experts: list[FFNParams]) -> None:
    shapes = experts[0].shapes()
    for e in experts[1:]:
        if e.shapes() != shapes:
            raise ValueError(f"expert shapes differ: {e.shapes()} vs {shapes}")


def ewa_step(experts: list[FFNParams], beta: float) -> list[FFNParams]:
    """Return new experts after one averaging step; inputs are left untouched."""
    _check_same_shapes(experts)
    mixed = {name: ewa_mix(np.stack([getattr(e, name).data for e in experts]), beta)
             for name in FFN_FIELDS}
    return [FFNParams(*(Tensor(mixed[name][i], requires_grad=getattr(e, name).requires_grad)
                        for name in FFN_FIELDS))
            for i, e in enumerate(experts)]


def apply_ewa(layer: MoELayer, beta: float) -> None:
    """In-place variant used by the training loop: overwrite expert buffers."""
    if layer.num_experts == 1 or beta == 0.0:
        return
    for name in FFN_FIELDS:
        mixed = ewa_mix(np.stack([getattr(e, name).data for e in layer.experts]), beta)
        for i, e in enumerate(layer.experts):
            getattr(e, name).data = mixed[i]


def convert_moe_to_ffn(layer: MoELayer) -> FFNParams:
    """Single FFN whose every array is the arithmetic mean over the experts."""
    _check_same_shapes(layer.experts)
    n = layer.num_experts
    return FFNParams.from_arrays({
        name: np.stack([getattr(e, name).data for e in layer.experts]).sum(axis=0) / n
        for name in FFN_FIELDS})


def expand_ffn_to_moe(ffn: FFNParams, num_experts: int, mode: str = RUP,
                      router_init_rng: np.random.Generator | None = None, k: int = 1,
                      capacity_ratio: float = 1.05, balance_weight: float = 0.01) -> MoELayer:
    """MoE layer whose experts are exact copies of ``ffn``; a top-k router is freshly drawn."""
    if num_experts < 1:
        raise ValueError("num_experts must be >= 1")
    router = None
    if mode == TOPK:
        if router_init_rng is None:
            raise ValueError("topk expansion needs router_init_rng")
        router = init_router(ffn.d_model, num_experts, router_init_rng)
    experts = [ffn.copy(requires_grad=True) for _ in range(num_experts)]
    return MoELayer(experts, mode, router, k, capacity_ratio, balance_weight)


def build_ewa_model(config: ViTConfig, placement: PlacementPolicy | str, num_experts: int = 4,
                    mode: str = RUP, rng: np.random.Generator | None = None,
                    source: Model | None = None, k: int = 1, capacity_ratio: float = 1.05,
                    balance_weight: float = 0.01) -> Model:
    """ViT with MoE layers at the placement blocks.

    Without ``source`` everything is randomly initialised and each expert is an
    independent draw.  With ``source`` (fine-tuning) all weights are inherited and
    the MoE experts are copies of the source FFN.
    """
    if isinstance(placement, str):
        placement = PlacementPolicy(placement, config.depth)
    if placement.depth != config.depth:
        raise ValueError(f"placement depth {placement.depth} != model depth {config.depth}")
    where = placement.blocks()
    if source is None:
        if rng is None:
            raise ValueError("random initialisation needs an rng")
        model = init_vit(config, rng)
        for i in where:
            experts = [FFNParams.init(config.d_model, config.d_hidden, rng, config.init_std)
                       for _ in range(num_experts)]
            router = init_router(config.d_model, num_experts, rng, config.init_std) if mode == TOPK else None
            model.blocks[i].mlp = MoELayer(experts, mode, router, k, capacity_ratio, balance_weight)
        return model
    if source.config != config:
        raise ValueError("source checkpoint config does not match the requested config")
    if source.moe_blocks:
        raise ValueError("fine-tuning source must be a dense model")
    model = copy_model(source)
    for i in where:
        model.blocks[i].mlp = expand_ffn_to_moe(model.blocks[i].mlp, num_experts, mode, rng,
                                                k, capacity_ratio, balance_weight)
    return model


def convert_model(model: Model) -> Model:
    """Dense copy of ``model`` with every MoE layer replaced by its expert mean."""
    out = copy_model(model)
    for blk, src in zip(out.blocks, model.blocks):
        if isinstance(src.mlp, MoELayer):
            blk.mlp = convert_moe_to_ffn(src.mlp)
    return out


def expert_spread(layer: MoELayer) -> float:
    """Root-mean-square distance of expert weights from their mean."""
    total, count = 0.0, 0
    for name in FFN_FIELDS:
        stacked = np.stack([getattr(e, name).data for e in layer.experts])
        dev = stacked - stacked.mean(axis=0, keepdims=True)
        total += float((dev * dev).sum())
        count += dev.size
    return float(np.sqrt(total / count))
