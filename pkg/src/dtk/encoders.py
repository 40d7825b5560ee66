"""Modality encoders: patching, the convolutional temporal encoder, the frozen
text encoder, and text tokenisation/embedding for the textual-primary path."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tf
from .backbone import BackboneConfig, ParameterStore, ParamSpec, backbone_param_specs, standard_block_forward
from .errors import ContractError, FormatError, ShapeError
from .tensor import Tensor

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


# -- patching ---------------------------------------------------------------

@dataclass
class PatchConfig:
    p: int = 25
    s: int = 25
    padding_mode: str = "replicate_last"

    def __post_init__(self):
        if self.p < 1 or self.s < 1:
            raise ContractError(f"patch size and stride must be >= 1 (got p={self.p}, s={self.s})")
        if self.padding_mode != "replicate_last":
            raise ContractError(f"unsupported padding mode {self.padding_mode!r}")


def n_patches(T: int, p: int, s: int) -> int:
    """ceil((T - p) / s) + 1; a series shorter than one patch gives one padded token."""
    if T < 1:
        raise ShapeError("empty series")
    if T <= p:
        return 1
    return -(-(T - p) // s) + 1


def patch_indices(T: int, p: int, s: int) -> np.ndarray:
    """(T_s, p) timestamp indices; overrun positions repeat the last timestamp."""
    starts = np.arange(n_patches(T, p, s)) * s
    return np.minimum(starts[:, None] + np.arange(p)[None, :], T - 1)


def patchify(X: Tensor, cfg: PatchConfig) -> Tensor:
    """(T, d) -> (T_s, p*d), or batched (B, T, d) -> (B, T_s, p*d)."""
    if X.ndim not in (2, 3) or X.shape[-2] < 1:
        raise ShapeError(f"patchify expects (T, d) or (B, T, d) with T >= 1, got {X.shape}")
    T, d = X.shape[-2], X.shape[-1]
    idx = patch_indices(T, cfg.p, cfg.s)
    if X.ndim == 2:
        return X[idx].reshape(idx.shape[0], cfg.p * d)
    return X[:, idx].reshape(X.shape[0], idx.shape[0], cfg.p * d)


def patch_embed_specs(p: int, d: int, D: int) -> list[ParamSpec]:
    return [ParamSpec("patch_embed.W", (p * d, D), False, "fan_in", "patch_embed"),
            ParamSpec("patch_embed.b", (D,), False, "zeros", "patch_embed")]


def embed_patches(store: ParameterStore, X: Tensor, cfg: PatchConfig, bb: BackboneConfig) -> Tensor:
    """Temporal-primary token embeddings E_t: projected patches plus positions."""
    patches = patchify(X, cfg)
    n = patches.shape[-2]
    if n > bb.max_seq_len:
        raise ShapeError(f"{n} temporal tokens exceed max_seq_len={bb.max_seq_len}")
    E = tf.linear(patches, store["patch_embed.W"], store["patch_embed.b"])
    return E + store["backbone.embed.pos"][:n]


# -- temporal encoder ---------------------------------------------------------

@dataclass
class TemporalEncoderConfig:
    widths: tuple[int, int, int] = (32, 64, 128)
    layers_per_block: int = 3
    kernel: int = 3

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 3 or not self.widths[0] <= self.widths[1] <= self.widths[2]:
            raise ContractError(f"conv widths must be three non-decreasing ints, got {self.widths}")
        if self.kernel % 2 != 1:
            raise ContractError("conv kernel must be odd")


def temporal_encoder_specs(cfg: TemporalEncoderConfig, d: int, D: int) -> list[ParamSpec]:
    specs, cin = [], d
    for bi, width in enumerate(cfg.widths, start=1):
        for li in range(1, cfg.layers_per_block + 1):
            p = f"temporal_encoder.block.{bi}.conv.{li}"
            specs.append(ParamSpec(f"{p}.W", (cfg.kernel, cin, width), False, "fan_in", "temporal_encoder"))
            specs.append(ParamSpec(f"{p}.b", (width,), False, "zeros", "temporal_encoder"))
            cin = width
    specs.append(ParamSpec("temporal_encoder.proj.W", (cin, D), False, "fan_in", "temporal_encoder.proj"))
    specs.append(ParamSpec("temporal_encoder.proj.b", (D,), False, "zeros", "temporal_encoder.proj"))
    return specs


def temporal_encode(store: ParameterStore, cfg: TemporalEncoderConfig, X: Tensor) -> Tensor:
    """Conv stack -> mean over time -> linear projector.

    X is (T, d) or (B, T, d); returns (1, D) or (B, 1, D).
    """
    single = X.ndim == 2
    h = X.reshape(1, *X.shape) if single else X
    for bi in range(1, len(cfg.widths) + 1):
        for li in range(1, cfg.layers_per_block + 1):
            p = f"temporal_encoder.block.{bi}.conv.{li}"
            h = tf.gelu(tf.conv1d(h, store[f"{p}.W"], store[f"{p}.b"]))
    pooled = h.mean(axis=1, keepdims=True)
    Z = tf.linear(pooled, store["temporal_encoder.proj.W"], store["temporal_encoder.proj.b"])
    return Z.reshape(1, Z.shape[-1]) if single else Z


# -- vocabulary ----------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:2]) != [PAD_TOKEN, UNK_TOKEN]:
            raise FormatError("vocabulary must start with <pad>, <unk>")
        if len(set(tokens)) != len(tokens):
            raise FormatError("duplicate tokens in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, corpus: Iterable[str], max_size: int | None = None) -> "Vocab":
        counts = Counter(tok for text in corpus for tok in tokenize(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            ranked = ranked[:max(0, max_size - 2)]
        return cls([PAD_TOKEN, UNK_TOKEN] + [t for t, _ in ranked])

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        ids = [self.stoi.get(t, UNK) for t in tokenize(text)] or [UNK]
        return ids[:max_len] if max_len else ids

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.itos)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line:
                continue
            try:
                tok, idx = line.rsplit("\t", 1)
                idx = int(idx)
            except ValueError:
                raise FormatError(f"vocab line {n}: expected 'token<TAB>id'") from None
            if idx != len(tokens):
                raise FormatError(f"vocab line {n}: id {idx} out of sequence")
            tokens.append(tok)
        return cls(tokens)


def pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists with PAD; returns (ids, mask) where mask marks real tokens."""
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def embed_text_tokens(store: ParameterStore, ids, prefix: str = "backbone",
                      with_positions: bool = True) -> Tensor:
    """Rows of the embedding table (plus positions) for (n,) or (B, n) token ids."""
    ids = np.asarray(ids, dtype=np.int64)
    table = store[f"{prefix}.embed.tokens"]
    E = tf.take_rows(table, ids)
    if with_positions:
        pos = store[f"{prefix}.embed.pos"]
        n = ids.shape[-1]
        if n > pos.shape[0]:
            raise ShapeError(f"{n} tokens exceed max_seq_len={pos.shape[0]}")
        E = E + pos[:n]
    return E


def encode_text(vocab: Vocab, text: str, max_seq_len: int) -> list[int]:
    """Token ids truncated to the first ``max_seq_len`` tokens."""
    return vocab.encode(text, max_len=max_seq_len)


# -- frozen text encoder ---------------------------------------------------------

@dataclass
class TextEncoderConfig:
    D: int = 16
    L: int = 1
    n_heads: int = 2
    max_seq_len: int = 128
    mlp_ratio: int = 4
    positions: bool = True

    def backbone(self, vocab_size: int) -> BackboneConfig:
        return BackboneConfig(L=self.L, M=1, D=self.D, n_heads=self.n_heads, vocab_size=vocab_size,
                              max_seq_len=self.max_seq_len, mlp_ratio=self.mlp_ratio)


def text_encoder_specs(cfg: TextEncoderConfig, vocab_size: int, D: int) -> list[ParamSpec]:
    specs = [ParamSpec(s.name, s.shape, True, s.init, "text_encoder")
             for s in backbone_param_specs(cfg.backbone(vocab_size), prefix="text_encoder",
                                           with_positions=cfg.positions)]
    specs.append(ParamSpec("text_encoder.proj.W", (cfg.D, D), False, "fan_in", "text_encoder.proj"))
    specs.append(ParamSpec("text_encoder.proj.b", (D,), False, "zeros", "text_encoder.proj"))
    return specs


def masked_mean(H: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean over the token axis (-2), ignoring padded positions."""
    if mask is None:
        return H.mean(axis=-2, keepdims=True)
    m = mask.astype(H.dtype)[..., None]
    counts = m.sum(axis=-2, keepdims=True)
    return (H * m).sum(axis=-2, keepdims=True) * (1.0 / counts)


def text_encode(store: ParameterStore, cfg: TextEncoderConfig, ids, mask: np.ndarray | None = None) -> Tensor:
    """Frozen encoder forward -> mean over tokens -> trainable projector.

    ids (n,) -> (1, D); ids (B, n) with mask -> (B, 1, D).
    """
    ids = np.asarray(ids, dtype=np.int64)
    vocab_size = store["text_encoder.embed.tokens"].shape[0]
    bb = cfg.backbone(vocab_size)
    H = embed_text_tokens(store, ids, prefix="text_encoder", with_positions=cfg.positions)
    for layer in range(1, bb.L + 1):
        H = standard_block_forward(store, bb, H, layer, mask, prefix="text_encoder")
    pooled = masked_mean(H, mask)
    return tf.linear(pooled, store["text_encoder.proj.W"], store["text_encoder.proj.b"])


def config_dict(obj) -> dict:
    d = asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
