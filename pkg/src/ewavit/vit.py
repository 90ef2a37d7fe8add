"""Pre-norm Vision Transformer whose FFN slots may hold MoE layers."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .ffn import FFNParams, dropout, ffn_forward, trunc_normal
from .moe import EVAL_SEED, RUP, MoELayer, moe_rup_forward, moe_topk_forward
from .tensor import Tensor


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    d_model: int = 64
    n_heads: int = 4
    depth: int = 4
    mlp_ratio: float = 4.0
    n_classes: int = 10
    dropout: float = 0.0
    attn_dropout: float = 0.0
    drop_path: float = 0.0
    qkv_bias: bool = True  # query and value biases; keys carry none (softmax is shift invariant)
    ln_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.d_model))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Block:
    ln1_w: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    q_b: Tensor | None
    v_b: Tensor | None
    proj_w: Tensor
    proj_b: Tensor
    ln2_w: Tensor
    ln2_b: Tensor
    mlp: FFNParams | MoELayer

    @property
    def is_moe(self) -> bool:
        return isinstance(self.mlp, MoELayer)


@dataclass
class Model:
    config: ViTConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: list[Block]
    norm_w: Tensor
    norm_b: Tensor
    head_w: Tensor
    head_b: Tensor
    training_meta: dict = field(default_factory=dict)

    @property
    def moe_blocks(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.is_moe]

    def moe_layers(self) -> list[MoELayer]:
        return [b.mlp for b in self.blocks if b.is_moe]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {
            "patch_embed.weight": self.patch_w,
            "patch_embed.bias": self.patch_b,
            "cls_token": self.cls_token,
            "pos_embed": self.pos_embed,
        }
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            out[p + "ln1.weight"] = b.ln1_w
            out[p + "ln1.bias"] = b.ln1_b
            out[p + "attn.qkv.weight"] = b.qkv_w
            if b.q_b is not None:
                out[p + "attn.q_bias"] = b.q_b
                out[p + "attn.v_bias"] = b.v_b
            out[p + "attn.proj.weight"] = b.proj_w
            out[p + "attn.proj.bias"] = b.proj_b
            out[p + "ln2.weight"] = b.ln2_w
            out[p + "ln2.bias"] = b.ln2_b
            if isinstance(b.mlp, MoELayer):
                for e, expert in enumerate(b.mlp.experts):
                    for name, t in expert.tensors().items():
                        out[f"{p}moe.experts.{e}.{name}"] = t
                if b.mlp.router is not None:
                    out[p + "moe.router"] = b.mlp.router
            else:
                for name, t in b.mlp.tensors().items():
                    out[f"{p}ffn.{name}"] = t
        out["norm.weight"] = self.norm_w
        out["norm.bias"] = self.norm_b
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _param(a: np.ndarray) -> Tensor:
    return Tensor(a, requires_grad=True)


def init_block(cfg: ViTConfig, rng: np.random.Generator) -> Block:
    d, std = cfg.d_model, cfg.init_std
    return Block(
        ln1_w=_param(np.ones(d)), ln1_b=_param(np.zeros(d)),
        qkv_w=_param(trunc_normal(rng, (d, 3 * d), std)),
        q_b=_param(np.zeros(d)) if cfg.qkv_bias else None,
        v_b=_param(np.zeros(d)) if cfg.qkv_bias else None,
        proj_w=_param(trunc_normal(rng, (d, d), std)), proj_b=_param(np.zeros(d)),
        ln2_w=_param(np.ones(d)), ln2_b=_param(np.zeros(d)),
        mlp=FFNParams.init(d, cfg.d_hidden, rng, std),
    )


def init_vit(cfg: ViTConfig, rng: np.random.Generator) -> Model:
    """Plain ViT with every block holding a dense FFN."""
    d, std = cfg.d_model, cfg.init_std
    return Model(
        config=cfg,
        patch_w=_param(trunc_normal(rng, (cfg.patch_dim, d), std)),
        patch_b=_param(np.zeros(d)),
        cls_token=_param(trunc_normal(rng, (1, 1, d), std)),
        pos_embed=_param(trunc_normal(rng, (1, cfg.num_patches + 1, d), std)),
        blocks=[init_block(cfg, rng) for _ in range(cfg.depth)],
        norm_w=_param(np.ones(d)), norm_b=_param(np.zeros(d)),
        head_w=_param(trunc_normal(rng, (d, cfg.n_classes), std)),
        head_b=_param(np.zeros(cfg.n_classes)),
    )


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, num_patches, C*patch*patch]`` in row-major patch order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), c * patch * patch)


def attention_branch(block: Block, x: Tensor, n_heads: int, attn_drop: float = 0.0,
                     rng: np.random.Generator | None = None, ln_eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Pre-norm multi-head self-attention on ``[B, S, d]`` without the residual.

    Returns ``(branch, attention_weights)``.
    """
    b, s, d = x.shape
    dh = d // n_heads
    h = T.layer_norm(x, block.ln1_w, block.ln1_b, ln_eps)
    qkv = h @ block.qkv_w
    if block.q_b is not None:
        qkv = qkv + T.concat([block.q_b, Tensor(np.zeros(d)), block.v_b])
    qkv = qkv.reshape(b, s, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    ctx = dropout(weights, attn_drop, rng) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, s, d)
    return ctx @ block.proj_w + block.proj_b, weights


def attention_forward(block: Block, tokens: Tensor, n_heads: int, attn_drop: float = 0.0,
                      rng: np.random.Generator | None = None, ln_eps: float = 1e-6,
                      return_weights: bool = False):
    """Attention sub-block with residual; ``tokens`` is ``[T, d]`` or ``[B, T, d]``."""
    squeeze = tokens.ndim == 2
    x = tokens.reshape(1, *tokens.shape) if squeeze else tokens
    branch, weights = attention_branch(block, x, n_heads, attn_drop, rng, ln_eps)
    out = x + branch
    if squeeze:
        out = out.reshape(tokens.shape)
    return (out, weights) if return_weights else out


def _drop_path(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) >= p) / (1.0 - p)
    return T.mul(x, keep)


def mlp_forward(block: Block, x: Tensor, cfg: ViTConfig, train: bool,
                rng: np.random.Generator | None) -> tuple[Tensor, Tensor | None]:
    """Pre-norm FFN/MoE branch on ``[B, S, d]``; returns ``(branch, aux_loss)``."""
    b, s, d = x.shape
    h = T.layer_norm(x, block.ln2_w, block.ln2_b, cfg.ln_eps).reshape(b * s, d)
    drop_rng = rng if train else None
    aux = None
    if isinstance(block.mlp, MoELayer):
        mode = "train" if train else "eval"
        if block.mlp.mode == RUP:
            y = moe_rup_forward(block.mlp, h, rng, mode, cfg.dropout)
        else:
            y, aux = moe_topk_forward(block.mlp, h, mode, cfg.dropout, drop_rng)
    else:
        y = ffn_forward(block.mlp, h, cfg.dropout, drop_rng)
    return y.reshape(b, s, d), aux


def model_forward(model: Model, images, mode: str = "eval", rng: np.random.Generator | None = None,
                  return_aux: bool = False):
    """Images ``[B, C, H, W]`` -> logits ``[B, n_classes]``.

    Train mode draws RUP partitions, dropout and drop-path masks from ``rng``.
    Eval mode disables dropout; RUP blocks then use a fixed evaluation seed.
    """
    cfg = model.config
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.in_chans, cfg.image_size, cfg.image_size):
        raise ValueError(f"expected images [B, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}], "
                         f"got {images.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train mode needs an rng")
    if not train and rng is None and model.moe_blocks:
        rng = np.random.default_rng(EVAL_SEED)
    step_rng = rng if train else None
    b = images.shape[0]

    x = Tensor(patchify(images, cfg.patch_size)) @ model.patch_w + model.patch_b
    cls = T.broadcast_to(model.cls_token, (b, 1, cfg.d_model))
    x = T.concat([cls, x], axis=1) + model.pos_embed
    x = dropout(x, cfg.dropout, step_rng)
    aux_total = None
    for blk in model.blocks:
        a, _ = attention_branch(blk, x, cfg.n_heads, cfg.attn_dropout, step_rng, cfg.ln_eps)
        x = x + _drop_path(a, cfg.drop_path, step_rng)
        y, aux = mlp_forward(blk, x, cfg, train, rng)
        x = x + _drop_path(y, cfg.drop_path, step_rng)
        if aux is not None:
            aux_total = aux if aux_total is None else aux_total + aux
    x = T.layer_norm(x[:, 0, :], model.norm_w, model.norm_b, cfg.ln_eps)
    logits = x @ model.head_w + model.head_b
    if return_aux:
        return logits, aux_total
    return logits


def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean smoothed negative log-likelihood; ``label_smoothing`` mass is spread
    uniformly over all K classes."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    targets = np.full(logits.shape, label_smoothing / k)
    targets[np.arange(len(labels)), labels] += 1.0 - label_smoothing
    return T.soft_cross_entropy(logits, targets)


def dense_param_count(cfg: ViTConfig) -> int:
    """Closed-form parameter count of the plain ViT described by ``cfg``."""
    d = cfg.d_model
    embed = cfg.patch_dim * d + d + d + (cfg.num_patches + 1) * d
    attn = 3 * d * d + (2 * d if cfg.qkv_bias else 0) + d * d + d
    block = 4 * d + attn + ffn_param_count(cfg)
    return embed + cfg.depth * block + 2 * d + d * cfg.n_classes + cfg.n_classes


def ffn_param_count(cfg: ViTConfig) -> int:
    d, h = cfg.d_model, cfg.d_hidden
    return 2 * d * h + h + d


def moe_param_count(cfg: ViTConfig, n_moe_blocks: int, num_experts: int, routed: bool) -> int:
    """Closed-form count with ``n_moe_blocks`` FFNs widened to ``num_experts`` experts."""
    extra = (num_experts - 1) * ffn_param_count(cfg)
    if routed:
        extra += cfg.d_model * num_experts
    return dense_param_count(cfg) + n_moe_blocks * extra


def copy_model(model: Model) -> Model:
    """Deep copy with fresh leaf tensors (no shared buffers, no graph)."""
    def cp(t: Tensor | None) -> Tensor | None:
        return None if t is None else Tensor(t.data.copy(), requires_grad=t.requires_grad)

    def cp_mlp(m):
        if isinstance(m, MoELayer):
            return MoELayer([e.copy() for e in m.experts], m.mode, cp(m.router), m.k,
                            m.capacity_ratio, m.balance_weight)
        return m.copy()

    blocks = [Block(cp(b.ln1_w), cp(b.ln1_b), cp(b.qkv_w), cp(b.q_b), cp(b.v_b), cp(b.proj_w), cp(b.proj_b),
                    cp(b.ln2_w), cp(b.ln2_b), cp_mlp(b.mlp)) for b in model.blocks]
    return Model(model.config, cp(model.patch_w), cp(model.patch_b), cp(model.cls_token),
                 cp(model.pos_embed), blocks, cp(model.norm_w), cp(model.norm_b),
                 cp(model.head_w), cp(model.head_b), dict(model.training_meta))
