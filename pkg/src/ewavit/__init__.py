"""Experts weights averaging (EWA) for Vision Transformers, on a small numpy autodiff core."""
from .ewa import (PlacementPolicy, ShareSchedule, apply_ewa, build_ewa_model, convert_model,
                  convert_moe_to_ffn, ewa_step, expand_ffn_to_moe, schedule_beta)
from .moe import MoELayer, moe_rup_forward, moe_topk_forward
from .vit import Model, ViTConfig, init_vit, model_forward

__version__ = "0.1.0"

__all__ = [
    "Model", "MoELayer", "PlacementPolicy", "ShareSchedule", "ViTConfig", "apply_ewa",
    "build_ewa_model", "convert_model", "convert_moe_to_ffn", "ewa_step", "expand_ffn_to_moe",
    "init_vit", "model_forward", "moe_rup_forward", "moe_topk_forward", "schedule_beta",
]
