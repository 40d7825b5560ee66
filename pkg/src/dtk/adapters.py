"""Dual multimodal adapters on a shared frozen backbone.

Each adapter owns, per fusion layer l (the top M layers), a P x D block of
adaptation tokens and a scalar gate that starts at exactly zero.  The
secondary modality arrives as a single pooled vector Z that is added to
every token row; the fused tokens act as extra keys/values for a
cross-attention branch that reuses the layer's frozen projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tf
from .backbone import (BackboneConfig, ParameterStore, ParamSpec, ln, mlp_branch,
                       multi_head_attention, self_attention_branch, standard_block_forward)
from .errors import ContractError, ShapeError
from .tensor import Tensor

KINDS = {"textual_primary": "text", "temporal_primary": "time"}


@dataclass
class AdapterParams:
    """Handle onto one adapter's learnables inside a ParameterStore."""

    kind: str
    store: ParameterStore
    cfg: BackboneConfig
    P: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown adapter kind {self.kind!r}")

    @property
    def tag(self) -> str:
        return KINDS[self.kind]

    def token_name(self, layer: int) -> str:
        return f"adapter.{self.tag}.layer.{layer}.tokens"

    def gate_name(self, layer: int) -> str:
        return f"adapter.{self.tag}.layer.{layer}.gate"

    @property
    def tokens(self) -> list[Tensor]:
        return [self.store[self.token_name(l)] for l in self.cfg.fusion_layers]

    @property
    def gates(self) -> list[Tensor]:
        return [self.store[self.gate_name(l)] for l in self.cfg.fusion_layers]


def adapter_param_specs(kind: str, cfg: BackboneConfig, P: int) -> list[ParamSpec]:
    tag = KINDS[kind]
    specs = []
    for layer in cfg.fusion_layers:
        specs.append(ParamSpec(f"adapter.{tag}.layer.{layer}.tokens", (P, cfg.D), False, "normal",
                               f"adapter.{tag}.tokens"))
        specs.append(ParamSpec(f"adapter.{tag}.layer.{layer}.gate", (1,), False, "zeros",
                               f"adapter.{tag}.gates"))
    return specs


def adapter_census(cfg: BackboneConfig, P: int) -> int:
    """Trainable scalars in one adapter: M token blocks plus M gates."""
    return cfg.M * (P * cfg.D + 1)


def fuse_tokens(T_l: Tensor, Z: Tensor) -> Tensor:
    """Add the secondary embedding to every adaptation-token row.

    ``Z`` is (1, D) for one sample or (B, 1, D) for a batch, giving a
    (P, D) or (B, P, D) result.
    """
    if T_l.shape[-1] != Z.shape[-1]:
        raise ShapeError(f"fuse_tokens: token width {T_l.shape[-1]} != embedding width {Z.shape[-1]}")
    if Z.shape[-2] != 1:
        raise ShapeError(f"fuse_tokens: expected a single pooled row, got {Z.shape}")
    return T_l + Z


def multimodal_block_forward(store: ParameterStore, cfg: BackboneConfig, H_prev: Tensor,
                             T_fused: Tensor, layer: int, gate: Tensor, key_mask=None,
                             prefix: str = "backbone") -> Tensor:
    if not cfg.is_fusion_layer(layer):
        raise ContractError(f"layer {layer} is not a fusion layer (fusion layers: "
                            f"{cfg.fusion_layers.start}..{cfg.fusion_layers.stop - 1})")
    if H_prev.shape[-1] != cfg.D or T_fused.shape[-1] != cfg.D:
        raise ShapeError(f"width mismatch: H {H_prev.shape}, tokens {T_fused.shape}, D={cfg.D}")
    p = f"{prefix}.layer.{layer}"
    H_tilde = self_attention_branch(store, cfg, H_prev, layer, key_mask, prefix)
    cross = multi_head_attention(store, p, cfg.n_heads, H_prev, T_fused)
    H_hat = ln(store, p, "ln1", cross) + H_prev
    fused = gate * H_hat + H_tilde
    return mlp_branch(store, cfg, fused, layer, prefix)


def adapter_forward(adapter: AdapterParams, primary: Tensor, Z: Tensor, key_mask=None) -> Tensor:
    """Run all L layers for one adapter; returns H^L.

    ``primary`` is (n, D) or (B, n, D); ``Z`` is (1, D) or (B, 1, D).
    """
    cfg, store = adapter.cfg, adapter.store
    if primary.shape[-2] > cfg.max_seq_len:
        raise ShapeError(f"sequence length {primary.shape[-2]} exceeds max_seq_len={cfg.max_seq_len}")
    if Z.shape[-1] != cfg.D or primary.shape[-1] != cfg.D:
        raise ShapeError(f"fusion inputs must have width D={cfg.D}")
    H = primary
    for layer in range(1, cfg.L + 1):
        if cfg.is_fusion_layer(layer):
            T_fused = fuse_tokens(store[adapter.token_name(layer)], Z)
            H = multimodal_block_forward(store, cfg, H, T_fused, layer,
                                         store[adapter.gate_name(layer)], key_mask)
        else:
            H = standard_block_forward(store, cfg, H, layer, key_mask)
    return H
