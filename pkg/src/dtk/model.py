"""Assembly of the dual-adapter model on one ParameterStore.

Parameter groups (prefix of the dotted name):

    backbone.*          frozen shared transformer (token/position tables, L blocks)
    text_encoder.*      frozen mini-transformer; only text_encoder.proj.* trains
    temporal_encoder.*  trainable conv stack + projector (secondary series path)
    patch_embed.*       trainable patch projector (primary series path)
    adapter.{text,time}.layer.{l}.{tokens,gate}
    classifier.*        linear head on the pooled adapter outputs
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as tf
from .adapters import AdapterParams, adapter_census, adapter_forward, adapter_param_specs
from .backbone import BackboneConfig, ParameterStore, ParamSpec, backbone_param_specs
from .config import ModelConfig
from .datasets import Dataset, Sample
from .encoders import (Vocab, embed_patches, embed_text_tokens, pad_ids, patch_embed_specs, temporal_encode,
                       temporal_encoder_specs, text_encode, text_encoder_specs)
from .errors import ContractError
from .objectives import augment, pool
from .tensor import Tensor

USES = {
    "dual": ("text", "time"),
    "text_only": ("text",),
    "time_only": ("time",),
}


@dataclass
class Batch:
    """Numeric view of a list of samples, ready for a forward pass."""

    X: np.ndarray          # (B, T, d)
    ids: np.ndarray        # (B, n) backbone token ids, PAD-padded
    mask: np.ndarray       # (B, n) True at real tokens
    text_ids: np.ndarray   # (B, m) text-encoder ids
    text_mask: np.ndarray
    labels: dict[str, np.ndarray]
    sample_ids: list[str]

    def __len__(self) -> int:
        return self.X.shape[0]


def resolved_backbone(cfg: ModelConfig, vocab: Vocab) -> BackboneConfig:
    return replace(cfg.backbone, vocab_size=cfg.vocab_size or len(vocab))


def model_param_specs(cfg: ModelConfig, d: int, n_classes: int, vocab_size: int,
                      variant: str = "dual", text_vocab_size: int | None = None) -> list[ParamSpec]:
    if variant not in USES:
        raise ContractError(f"unknown variant {variant!r}")
    bb = replace(cfg.backbone, vocab_size=vocab_size)
    D = bb.D
    uses = USES[variant]
    specs = backbone_param_specs(bb)
    if "text" in uses:
        specs += temporal_encoder_specs(cfg.temporal, d, D)
        specs += adapter_param_specs("textual_primary", bb, cfg.P)
    if "time" in uses:
        specs += patch_embed_specs(cfg.patch.p, d, D)
        specs += text_encoder_specs(cfg.text, text_vocab_size or vocab_size, D)
        specs += adapter_param_specs("temporal_primary", bb, cfg.P)
    specs += classifier_specs(D, n_classes)
    return specs


def classifier_specs(D: int, n_classes: int, prefix: str = "classifier") -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.W", (D, n_classes), False, "fan_in", prefix),
            ParamSpec(f"{prefix}.b", (n_classes,), False, "zeros", prefix)]


def census(specs: Sequence[ParamSpec]) -> dict:
    """Parameter counts (total / trainable / frozen, and per group) from specs alone."""
    groups: OrderedDict[str, dict] = OrderedDict()
    total = trainable = 0
    for s in specs:
        n = int(np.prod(s.shape))
        total += n
        g = groups.setdefault(s.group, {"trainable": 0, "frozen": 0})
        if s.frozen:
            g["frozen"] += n
        else:
            g["trainable"] += n
            trainable += n
    return {"total": total, "trainable": trainable, "frozen": total - trainable,
            "trainable_fraction": trainable / total if total else 0.0, "groups": dict(groups)}


def closed_form_trainable(cfg: ModelConfig, d: int, n_classes: int, variant: str = "dual") -> int:
    """Trainable count written out by hand: adapters + encoders/projectors + classifier."""
    D, P = cfg.backbone.D, cfg.P
    uses = USES[variant]
    n = 0
    if "text" in uses:
        n += adapter_census(cfg.backbone, P)
        cin, k = d, cfg.temporal.kernel
        for w in cfg.temporal.widths:
            for _ in range(cfg.temporal.layers_per_block):
                n += k * cin * w + w
                cin = w
        n += cin * D + D
    if "time" in uses:
        n += adapter_census(cfg.backbone, P)
        n += cfg.patch.p * d * D + D
        n += cfg.text.D * D + D
    n += D * n_classes + n_classes
    return n


class DualAdapterModel:
    """Functional model: all state lives in ``self.store``."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, d: int, n_classes: int, variant: str = "dual",
                 seed: int = 0, dtype=np.float32, store: ParameterStore | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.d = d
        self.n_classes = n_classes
        self.variant = variant
        self.uses = USES[variant]
        self.bb = resolved_backbone(cfg, vocab)
        self.text_vocab_size = cfg.text_vocab_size or len(vocab)
        self.specs = model_param_specs(cfg, d, n_classes, self.bb.vocab_size, variant, self.text_vocab_size)
        if store is None:
            store = ParameterStore.from_specs(self.specs, np.random.default_rng(seed), dtype)
        self.store = store
        self.text_adapter = AdapterParams("textual_primary", store, self.bb, cfg.P) if "text" in self.uses else None
        self.time_adapter = AdapterParams("temporal_primary", store, self.bb, cfg.P) if "time" in self.uses else None

    @property
    def dtype(self):
        return self.store.dtype

    # -- data -> arrays --------------------------------------------------
    def make_batch(self, samples: Sequence[Sample]) -> Batch:
        X = np.stack([np.asarray(s.X) for s in samples]).astype(self.dtype)
        ids, mask = pad_ids([self.vocab.encode(s.S, self.bb.max_seq_len) for s in samples])
        tids, tmask = pad_ids([self.vocab.encode(s.S, self.cfg.text.max_seq_len) for s in samples])
        labels = {"fine": np.array([s.fine_label for s in samples], dtype=np.int64),
                  "coarse": np.array([s.coarse_label for s in samples], dtype=np.int64)}
        return Batch(X, ids, mask, tids, tmask, labels, [s.id for s in samples])

    # -- forward ------------------------------------------------------------
    def text_embeddings(self, batch: Batch) -> np.ndarray:
        with tf.no_grad():
            return embed_text_tokens(self.store, batch.ids).data

    def encode(self, batch: Batch, X: np.ndarray | None = None, E_s: np.ndarray | None = None) -> dict:
        """Pooled adapter outputs {'text': (B, D) | None, 'time': (B, D) | None}.

        ``X`` / ``E_s`` substitute corrupted inputs for the augmented view.
        """
        X_t = Tensor(batch.X if X is None else X)
        out = {"text": None, "time": None}
        if self.text_adapter is not None:
            E = Tensor(self.text_embeddings(batch) if E_s is None else E_s)
            Z_s = temporal_encode(self.store, self.cfg.temporal, X_t)
            H = adapter_forward(self.text_adapter, E, Z_s, batch.mask)
            out["text"] = pool(H, batch.mask).reshape(len(batch), self.bb.D)
        if self.time_adapter is not None:
            E_t = embed_patches(self.store, X_t, self.cfg.patch, self.bb)
            Z_t = text_encode(self.store, self.cfg.text, batch.text_ids, batch.text_mask)
            H = adapter_forward(self.time_adapter, E_t, Z_t)
            out["time"] = pool(H).reshape(len(batch), self.bb.D)
        return out

    def encode_augmented(self, batch: Batch, noise_sigma: float, rng: np.random.Generator) -> dict:
        E_s = self.text_embeddings(batch) if self.text_adapter is not None else None
        X_aug, E_aug = augment(batch.X, E_s, noise_sigma, rng, batch.mask)
        return self.encode(batch, X=X_aug, E_s=E_aug)

    @staticmethod
    def representation(h: dict) -> Tensor:
        parts = [v for v in (h["text"], h["time"]) if v is not None]
        return parts[0] if len(parts) == 1 else parts[0] + parts[1]

    def logits(self, h: dict, prefix: str = "classifier") -> Tensor:
        return tf.linear(self.representation(h), self.store[f"{prefix}.W"], self.store[f"{prefix}.b"])

    def embed(self, samples: Sequence[Sample], batch_size: int = 256) -> np.ndarray:
        """Frozen pooled representation h_s + h_t for every sample, (N, D)."""
        chunks = []
        with tf.no_grad():
            for i in range(0, len(samples), batch_size):
                h = self.encode(self.make_batch(samples[i:i + batch_size]))
                chunks.append(self.representation(h).data)
        return np.concatenate(chunks) if chunks else np.zeros((0, self.bb.D), dtype=self.dtype)

    def embed_parts(self, samples: Sequence[Sample], batch_size: int = 256) -> dict[str, np.ndarray]:
        parts = {"text": [], "time": []}
        with tf.no_grad():
            for i in range(0, len(samples), batch_size):
                h = self.encode(self.make_batch(samples[i:i + batch_size]))
                for k in parts:
                    if h[k] is not None:
                        parts[k].append(h[k].data)
        return {k: np.concatenate(v) for k, v in parts.items() if v}

    def census(self) -> dict:
        return census(self.specs)

    def diagnostics(self) -> dict:
        """Gate values and parameter norms, for divergence reports."""
        out = {"gates": {}, "norms": {}}
        for name, t in self.store.items():
            if name.endswith(".gate"):
                out["gates"][name] = float(t.data.reshape(-1)[0])
            if not self.store.is_frozen(name):
                out["norms"][name] = float(np.sqrt((t.data.astype(np.float64) ** 2).sum()))
        return out
