"""Resolved configuration objects and the two model profiles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .encoders import PatchConfig, TemporalEncoderConfig, TextEncoderConfig
from .errors import ContractError
from .objectives import VARIANTS, LossConfig

MODES = ("supervised", "unsupervised", "probe", "fewshot")
FEWSHOT_KS = (5, 10, 15, 20, 50, 100)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    P: int = 4
    patch: PatchConfig = field(default_factory=lambda: PatchConfig(p=10, s=10))
    temporal: TemporalEncoderConfig = field(default_factory=lambda: TemporalEncoderConfig(widths=(8, 16, 16)))
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    # None: size the embedding tables from the vocabulary built on the data
    vocab_size: int | None = None
    text_vocab_size: int | None = None

    def __post_init__(self):
        if self.P < 1:
            raise ContractError("adaptation-token length P must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["temporal"]["widths"] = list(self.temporal.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(backbone=BackboneConfig(**d.pop("backbone", {})),
                   patch=PatchConfig(**d.pop("patch", {})),
                   temporal=TemporalEncoderConfig(**d.pop("temporal", {})),
                   text=TextEncoderConfig(**d.pop("text", {})),
                   **d)


def desk_profile() -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(L=3, M=2, D=32, n_heads=4, vocab_size=256, max_seq_len=64),
        P=4,
        patch=PatchConfig(p=10, s=10),
        temporal=TemporalEncoderConfig(widths=(8, 16, 16)),
        text=TextEncoderConfig(D=16, L=1, n_heads=2, max_seq_len=12),
    )


def paper_shape_profile() -> ModelConfig:
    """GPT-2-small-shaped backbone, BERT-base-shaped text encoder, hidden size 768."""
    return ModelConfig(
        backbone=BackboneConfig(L=12, M=4, D=768, n_heads=12, vocab_size=50257, max_seq_len=1024),
        P=10,
        patch=PatchConfig(p=25, s=25),
        temporal=TemporalEncoderConfig(widths=(32, 64, 128)),
        text=TextEncoderConfig(D=768, L=12, n_heads=12, max_seq_len=512),
        vocab_size=50257,
        text_vocab_size=28996,
    )


def gradcheck_profile() -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(L=2, M=2, D=8, n_heads=2, vocab_size=32, max_seq_len=16),
        P=2,
        patch=PatchConfig(p=4, s=4),
        temporal=TemporalEncoderConfig(widths=(2, 3, 3)),
        text=TextEncoderConfig(D=4, L=1, n_heads=1, max_seq_len=16),
    )


PROFILES = {"desk": desk_profile, "paper_shape": paper_shape_profile, "gradcheck": gradcheck_profile}


def profile(name: str) -> ModelConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ContractError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass
class TrainConfig:
    mode: str = "supervised"
    variant: str = "dual"
    profile: str = "desk"
    label_set: str = "fine"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    loss: LossConfig = field(default_factory=LossConfig)
    # probe / few-shot stage
    probe_epochs: int = 200
    probe_lr: float = 1e-2
    q: float = 1.0
    K: tuple[int, ...] = FEWSHOT_KS
    model: dict | None = None  # overrides merged into the profile

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.split = tuple(self.split)
        self.K = tuple(int(k) for k in self.K)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.label_set not in ("fine", "coarse"):
            raise ContractError("label_set must be 'fine' or 'coarse'")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.mode == "unsupervised" and self.batch_size < 2:
            raise ContractError("contrastive training needs batch_size >= 2")

    def model_config(self) -> ModelConfig:
        base = profile(self.profile)
        if not self.model:
            return base
        merged = _deep_merge(base.to_dict(), self.model)
        return ModelConfig.from_dict(merged)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["split"], d["K"] = list(self.betas), list(self.split), list(self.K)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, **kw) -> "TrainConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out
