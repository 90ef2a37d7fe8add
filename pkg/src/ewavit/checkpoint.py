"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"EWAC"            magic
    u32                format version
    u32 + bytes        UTF-8 JSON header (run config, step/epoch, RNG state, provenance)
    repeated until EOF:
        u32 + bytes    parameter name
        u8             dtype tag (0 = float64, 1 = float32)
        u8             rank
        u64 * rank     dims
        payload        little-endian raw values
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ffn import FFN_FIELDS, FFNParams
from .moe import RUP, TOPK, MoELayer
from .tensor import Tensor
from .vit import Block, Model, ViTConfig, init_vit

MAGIC = b"EWAC"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return self.header.get("config", {})

    @property
    def is_moe(self) -> bool:
        return any(".moe." in name for name in self.params)


def encode(ckpt: Checkpoint, dtype: str = "float64") -> bytes:
    tag = {"float64": 0, "float32": 1}[dtype]
    header = json.dumps(ckpt.header, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header]
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
        raw_name = name.encode()
        out.append(struct.pack("<I", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode(raw: bytes) -> Checkpoint:
    def need(pos, n, what):
        if pos + n > len(raw):
            raise CheckpointError(f"truncated {what} at byte offset {pos}")

    need(0, 8, "header")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r} at byte offset 0")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version} at byte offset 4")
    need(8, 4, "config length")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    need(12, hlen, "config text")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable config text at byte offset 12: {exc}") from None
    pos = 12 + hlen
    params: dict[str, np.ndarray] = {}
    while pos < len(raw):
        need(pos, 4, "record name length")
        (nlen,) = struct.unpack_from("<I", raw, pos)
        need(pos + 4, nlen + 2, "record name")
        name = raw[pos + 4:pos + 4 + nlen].decode()
        pos += 4 + nlen
        tag, rank = struct.unpack_from("<BB", raw, pos)
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r} at byte offset {pos}")
        pos += 2
        need(pos, 8 * rank, "record dims")
        dims = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        nbytes = int(np.prod(dims, dtype=np.int64)) * _DTYPES[tag].itemsize
        need(pos, nbytes, f"payload of {name!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[tag], count=nbytes // _DTYPES[tag].itemsize, offset=pos)
        if name in params:
            raise CheckpointError(f"duplicate record {name!r} at byte offset {pos}")
        params[name] = arr.reshape(dims).astype(np.float64)
        pos += nbytes
    return Checkpoint(header, params)


def save(path: str | Path, ckpt: Checkpoint, dtype: str = "float64") -> None:
    Path(path).write_bytes(encode(ckpt, dtype))


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def from_model(model: Model, config: dict, step: int = 0, epoch: int = 0,
               rng_state: dict | None = None, provenance: str = "") -> Checkpoint:
    header = {"config": config, "step": step, "epoch": epoch,
              "rng_state": rng_state or {}, "provenance": provenance}
    return Checkpoint(header, {n: t.data.copy() for n, t in model.named_parameters().items()})


def to_model(ckpt: Checkpoint) -> Model:
    """Rebuild a :class:`Model`; MoE blocks are recognised from their parameter names."""
    cfg_dict = ckpt.config.get("model", ckpt.config)
    try:
        cfg = ViTConfig(**cfg_dict)
    except TypeError as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from None
    p = ckpt.params
    skeleton = init_vit(cfg, np.random.default_rng(0)).named_parameters()
    for name, arr in p.items():
        ref = re.sub(r"moe\.experts\.\d+\.", "ffn.", name)
        if ref in skeleton and skeleton[ref].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: stored {arr.shape}, "
                                  f"config implies {skeleton[ref].shape}")
    try:
        model = _assemble(cfg, ckpt.config.get("moe", {}), p)
    except CheckpointError:
        raise
    except ValueError as exc:
        raise CheckpointError(f"inconsistent parameter shapes: {exc}") from None
    extra = set(p) - set(model.named_parameters())
    if extra:
        raise CheckpointError(f"unexpected parameters {sorted(extra)[:5]}")
    return model


def _assemble(cfg: ViTConfig, moe_cfg: dict, p: dict[str, np.ndarray]) -> Model:
    def t(name: str) -> Tensor:
        if name not in p:
            raise CheckpointError(f"missing parameter {name!r}")
        return Tensor(p[name].copy(), requires_grad=True)

    def ffn(prefix: str) -> FFNParams:
        return FFNParams(*(t(prefix + n) for n in FFN_FIELDS))

    blocks = []
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        if pre + "moe.experts.0.w1" in p:
            experts, e = [], 0
            while f"{pre}moe.experts.{e}.w1" in p:
                experts.append(ffn(f"{pre}moe.experts.{e}."))
                e += 1
            router = t(pre + "moe.router") if pre + "moe.router" in p else None
            mlp = MoELayer(experts, TOPK if router is not None else RUP, router,
                           int(moe_cfg.get("k", 1)), float(moe_cfg.get("capacity_ratio", 1.05)),
                           float(moe_cfg.get("balance_weight", 0.01)))
        else:
            mlp = ffn(pre + "ffn.")
        has_bias = pre + "attn.q_bias" in p
        blocks.append(Block(
            t(pre + "ln1.weight"), t(pre + "ln1.bias"), t(pre + "attn.qkv.weight"),
            t(pre + "attn.q_bias") if has_bias else None, t(pre + "attn.v_bias") if has_bias else None,
            t(pre + "attn.proj.weight"), t(pre + "attn.proj.bias"),
            t(pre + "ln2.weight"), t(pre + "ln2.bias"), mlp))
    return Model(cfg, t("patch_embed.weight"), t("patch_embed.bias"), t("cls_token"), t("pos_embed"),
                 blocks, t("norm.weight"), t("norm.bias"), t("head.weight"), t("head.bias"))
