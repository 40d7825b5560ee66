"""Frozen transformer backbone, parameter registry and checkpoint I/O.

Blocks follow the post-sublayer normalisation written for the fusion model:

    H~ = LN1(MHA(H, H, H)) + H
    H' = LN2(MLP(H~)) + H~

Weights are stored as (in, out) so every projection is ``H @ W + b`` on
row-major token matrices.  Parameter names are dotted paths, e.g.
``backbone.layer.3.attn.Wq``; layers are numbered from 1.
"""

from __future__ import annotations

import hashlib
import math
import struct
import threading
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from . import tensor as tf
from .errors import ContractError, FormatError, ShapeError
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class BackboneConfig:
    L: int = 3
    M: int = 2
    D: int = 32
    n_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 128
    mlp_ratio: int = 4

    def __post_init__(self):
        for field in ("L", "M", "D", "n_heads", "vocab_size", "max_seq_len", "mlp_ratio"):
            if getattr(self, field) < 1:
                raise ContractError(f"BackboneConfig.{field} must be positive")
        if self.M > self.L:
            raise ContractError(f"fusion layers M={self.M} exceed layer count L={self.L}")
        if self.D % self.n_heads:
            raise ContractError(f"D={self.D} is not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.D // self.n_heads

    @property
    def fusion_layers(self) -> range:
        return range(self.L - self.M + 1, self.L + 1)

    def is_fusion_layer(self, layer: int) -> bool:
        return self.L - self.M + 1 <= layer <= self.L

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameter registry ----------------------------------------------------

class ParamSpec(NamedTuple):
    name: str
    shape: tuple[int, ...]
    frozen: bool
    init: str  # "normal", "fan_in", "zeros", "ones"
    group: str


def _init_array(spec: ParamSpec, rng: np.random.Generator, dtype) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=dtype)
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=dtype)
    if spec.init == "normal":
        return rng.normal(0.0, 0.02, spec.shape).astype(dtype)
    if spec.init == "fan_in":
        fan_in = int(np.prod(spec.shape[:-1])) or 1
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), spec.shape).astype(dtype)
    raise ContractError(f"unknown init scheme {spec.init!r}")


class ParameterStore:
    """Named parameters, each flagged frozen or trainable.

    A frozen entry is a tensor with ``requires_grad=False``: it takes part
    in every forward pass but never receives a gradient or an update.
    Mutation (optimizer steps, loading) should hold ``lock``.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}
        self._groups: dict[str, str] = {}
        self.lock = threading.RLock()

    def add(self, name: str, data: np.ndarray, frozen: bool, group: str = "") -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(np.ascontiguousarray(data), requires_grad=not frozen, name=name)
        self._params[name] = t
        self._frozen[name] = bool(frozen)
        self._groups[name] = group or name.split(".")[0]
        return t

    @classmethod
    def from_specs(cls, specs: Iterable[ParamSpec], rng: np.random.Generator, dtype=np.float32):
        store = cls()
        for spec in specs:
            store.add(spec.name, _init_array(spec, rng, dtype), spec.frozen, spec.group)
        return store

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def group(self, name: str) -> str:
        return self._groups[name]

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if not self._frozen[n]}

    def frozen(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if self._frozen[n]}

    def set_frozen(self, name: str, frozen: bool) -> None:
        self._frozen[name] = bool(frozen)
        self._params[name].requires_grad = not frozen

    def freeze_all(self) -> None:
        for name in self._params:
            self.set_frozen(name, True)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self, frozen: bool | None = None) -> int:
        return sum(t.size for n, t in self._params.items() if frozen is None or self._frozen[n] == frozen)

    def hashes(self, frozen_only: bool = True) -> dict[str, str]:
        return {n: hashlib.sha256(t.data.tobytes()).hexdigest()
                for n, t in self._params.items() if self._frozen[n] or not frozen_only}

    @property
    def dtype(self):
        first = next(iter(self._params.values()), None)
        return first.dtype if first is not None else np.dtype(np.float32)


# -- backbone parameters ---------------------------------------------------

def backbone_param_specs(cfg: BackboneConfig, prefix: str = "backbone",
                         with_token_table: bool = True, with_positions: bool = True) -> list[ParamSpec]:
    d, h = cfg.D, cfg.D * cfg.mlp_ratio
    g = prefix
    specs = []
    if with_token_table:
        specs.append(ParamSpec(f"{prefix}.embed.tokens", (cfg.vocab_size, d), True, "normal", g))
    if with_positions:
        specs.append(ParamSpec(f"{prefix}.embed.pos", (cfg.max_seq_len, d), True, "normal", g))
    for layer in range(1, cfg.L + 1):
        p = f"{prefix}.layer.{layer}"
        for w in ("Wq", "Wk", "Wv", "Wo"):
            specs.append(ParamSpec(f"{p}.attn.{w}", (d, d), True, "normal", g))
            specs.append(ParamSpec(f"{p}.attn.b{w[1]}", (d,), True, "zeros", g))
        specs += [
            ParamSpec(f"{p}.ln1.gamma", (d,), True, "ones", g),
            ParamSpec(f"{p}.ln1.beta", (d,), True, "zeros", g),
            ParamSpec(f"{p}.mlp.W1", (d, h), True, "normal", g),
            ParamSpec(f"{p}.mlp.b1", (h,), True, "zeros", g),
            ParamSpec(f"{p}.mlp.W2", (h, d), True, "normal", g),
            ParamSpec(f"{p}.mlp.b2", (d,), True, "zeros", g),
            ParamSpec(f"{p}.ln2.gamma", (d,), True, "ones", g),
            ParamSpec(f"{p}.ln2.beta", (d,), True, "zeros", g),
        ]
    return specs


# -- attention and blocks --------------------------------------------------

def attention(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    ``mask`` is an additive array broadcastable to the score matrix
    (0 for visible keys, a large negative value for padding).
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"attention: query width {Q.shape[-1]} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention: {K.shape[-2]} keys but {V.shape[-2]} values")
    scores = tf.matmul(Q, K.T) * (1.0 / math.sqrt(Q.shape[-1]))
    if mask is not None:
        scores = scores + mask.astype(scores.dtype)
    return tf.matmul(tf.softmax(scores, axis=-1), V)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, n_heads, d // n_heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dk)


def multi_head_attention(store: ParameterStore, prefix: str, n_heads: int, H_q: Tensor,
                         H_kv: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """MHA with queries from ``H_q`` and keys/values from ``H_kv``.

    ``key_mask``: optional boolean array (..., n_kv), True where the key is real.
    """
    a = f"{prefix}.attn"
    q = _split_heads(tf.linear(H_q, store[f"{a}.Wq"], store[f"{a}.bq"]), n_heads)
    k = _split_heads(tf.linear(H_kv, store[f"{a}.Wk"], store[f"{a}.bk"]), n_heads)
    v = _split_heads(tf.linear(H_kv, store[f"{a}.Wv"], store[f"{a}.bv"]), n_heads)
    mask = None
    if key_mask is not None:
        # (B, n_kv) -> (B, 1, 1, n_kv) to broadcast over heads and queries
        mask = np.where(key_mask, 0.0, MASK_VALUE)[..., None, None, :]
    out = _merge_heads(attention(q, k, v, mask))
    return tf.linear(out, store[f"{a}.Wo"], store[f"{a}.bo"])


def mlp(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    m = f"{prefix}.mlp"
    hidden = tf.gelu(tf.linear(x, store[f"{m}.W1"], store[f"{m}.b1"]))
    return tf.linear(hidden, store[f"{m}.W2"], store[f"{m}.b2"])


def ln(store: ParameterStore, prefix: str, which: str, x: Tensor) -> Tensor:
    return tf.layer_norm(x, store[f"{prefix}.{which}.gamma"], store[f"{prefix}.{which}.beta"])


def _check_layer(cfg: BackboneConfig, layer: int) -> None:
    if not 1 <= layer <= cfg.L:
        raise ContractError(f"layer {layer} outside 1..{cfg.L}")


def self_attention_branch(store: ParameterStore, cfg: BackboneConfig, H: Tensor, layer: int,
                          key_mask=None, prefix: str = "backbone") -> Tensor:
    p = f"{prefix}.layer.{layer}"
    return ln(store, p, "ln1", multi_head_attention(store, p, cfg.n_heads, H, H, key_mask)) + H


def mlp_branch(store: ParameterStore, cfg: BackboneConfig, H: Tensor, layer: int,
               prefix: str = "backbone") -> Tensor:
    p = f"{prefix}.layer.{layer}"
    return ln(store, p, "ln2", mlp(store, p, H)) + H


def standard_block_forward(store: ParameterStore, cfg: BackboneConfig, H_prev: Tensor, layer: int,
                           key_mask=None, prefix: str = "backbone") -> Tensor:
    _check_layer(cfg, layer)
    if H_prev.shape[-1] != cfg.D:
        raise ShapeError(f"block input width {H_prev.shape[-1]} != D={cfg.D}")
    H_tilde = self_attention_branch(store, cfg, H_prev, layer, key_mask, prefix)
    return mlp_branch(store, cfg, H_tilde, layer, prefix)


def backbone_forward(store: ParameterStore, cfg: BackboneConfig, H0: Tensor, key_mask=None,
                     prefix: str = "backbone") -> Tensor:
    """Plain frozen stack: all L layers, no adaptation."""
    H = H0
    for layer in range(1, cfg.L + 1):
        H = standard_block_forward(store, cfg, H, layer, key_mask, prefix)
    return H


# -- checkpoint format -------------------------------------------------------
# magic "DTK1" | u32 version | payload | u32 crc32(payload), little-endian.
# payload = u32 count, then per entry:
#   u32 name_len | name utf-8 | u8 dtype tag | u8 rank | u32 dims[rank] | u8 frozen | raw data

MAGIC = b"DTK1"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def encode_checkpoint(store: ParameterStore) -> bytes:
    parts = [struct.pack("<I", len(store))]
    for name, t in store.items():
        tf._check_finite(t.data, name)
        arr = np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<"))
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", 1 if store.is_frozen(name) else 0))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise FormatError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> tuple[ParameterStore, int]:
    """Parse checkpoint bytes; returns the store and the verified CRC32."""
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not a DTK1 checkpoint")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise FormatError(f"unknown checkpoint version {version}")
    r = _Reader(buf, 8, len(buf) - 4)
    store = ParameterStore()
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"parameter name is not UTF-8: {exc}") from None
        tag, rank = r.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name!r}")
        dims = r.unpack(f"<{rank}I")
        (frozen,) = r.unpack("<B")
        dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(n_bytes), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        if name in store:
            raise FormatError(f"duplicate parameter {name!r}")
        store.add(name, data, frozen=bool(frozen))
    if r.pos != r.end:
        raise FormatError(f"{r.end - r.pos} trailing bytes after parameter table")
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    crc = zlib.crc32(buf[8:-4])
    if crc != stored_crc:
        raise FormatError(f"checksum mismatch: stored {stored_crc:#010x}, computed {crc:#010x}")
    return store, crc


def save_checkpoint(store: ParameterStore, path) -> int:
    """Write ``store`` to ``path``; returns the CRC32 recorded in the file."""
    with store.lock:
        blob = encode_checkpoint(store)
    Path(path).write_bytes(blob)
    return struct.unpack("<I", blob[-4:])[0]


def load_checkpoint(path) -> ParameterStore:
    return decode_checkpoint(Path(path).read_bytes())[0]


def load_into(store: ParameterStore, path, strict: bool = True) -> None:
    """Copy tensors from a checkpoint into an existing store (names and shapes must agree)."""
    loaded = load_checkpoint(path)
    with store.lock:
        if strict and set(loaded.names()) != set(store.names()):
            missing = sorted(set(store.names()) - set(loaded.names()))
            extra = sorted(set(loaded.names()) - set(store.names()))
            raise FormatError(f"checkpoint parameters differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, t in loaded.items():
            if name not in store:
                continue
            dst = store[name]
            if dst.shape != t.shape:
                raise FormatError(f"{name}: checkpoint shape {t.shape} != model shape {dst.shape}")
            dst.data[...] = t.data.astype(dst.dtype)
            store.set_frozen(name, loaded.is_frozen(name))
