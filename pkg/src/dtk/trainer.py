"""Optimisation and experiment protocols.

train     supervised (cross-entropy on h_s + h_t) or unsupervised (contrastive)
probe     freeze a trained run, fit a fresh linear head on a label subset
evaluate  metrics of a supervised run's own head
grad_check  finite differences against every trainable gradient
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tf
from .backbone import ParameterStore, load_into, save_checkpoint
from .config import TrainConfig, profile
from .datasets import Dataset, Sample, SyntheticSpec, generate_synthetic, kshot, latent_strata, proportion, split
from .encoders import Vocab
from .errors import ContractError, NumericError, TrainingDiverged
from .model import DualAdapterModel, census
from .objectives import LossConfig, supervised_loss, unsup_total
from .tensor import Tensor

log = logging.getLogger(__name__)


# -- optimiser --------------------------------------------------------------------

class Adam:
    """Adam with bias correction over a dict of named trainable tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """Apply one update.  Gradients default to each tensor's ``.grad``; a missing one counts as zero."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.shape:
                raise ContractError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam | None = None,
              lr: float = 1e-3) -> Adam:
    state = state or Adam(params, lr=lr)
    if set(grads) != set(params):
        raise ContractError("gradients must be supplied for exactly the trainable set")
    state.step(grads)
    return state


# -- metrics --------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]
    n_eval: int
    n_train: int | None = None  # size of the labelled subset a probe was fitted on

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_pos > 0, tp / np.maximum(pred_pos, 1), 0.0)
        recall = np.where(true_pos > 0, tp / np.maximum(true_pos, 1), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    n = int(cm.sum())
    return Metrics(accuracy=float(tp.sum() / n) if n else 0.0, macro_f1=float(f1.mean()),
                   precision=precision.tolist(), recall=recall.tolist(), f1=f1.tolist(),
                   confusion=cm.tolist(), n_eval=n)


# -- run directory ------------------------------------------------------------------

CONFIG_FILE, METRICS_FILE, CKPT_FILE, VOCAB_FILE = "config.json", "metrics.jsonl", "final.ckpt", "vocab.tsv"


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def write_jsonl(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_dump(r) + "\n")


def write_csv(path, records: Sequence[dict]) -> None:
    keys = []
    for r in records:
        keys += [k for k in r if k not in keys and not isinstance(r[k], (list, dict))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        w.writerows(records)


def prepare_run_dir(run_dir, force: bool = False) -> Path:
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()) and not force:
        raise FileExistsError(f"run directory {run_dir} is not empty (use --force to overwrite)")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def load_run(run_dir) -> tuple[TrainConfig, DualAdapterModel, dict]:
    run_dir = Path(run_dir)
    for name in (CONFIG_FILE, CKPT_FILE, VOCAB_FILE):
        if not (run_dir / name).exists():
            raise FileNotFoundError(f"{run_dir / name} not found")
    meta = json.loads((run_dir / CONFIG_FILE).read_text())
    cfg = TrainConfig.from_dict(meta["train"])
    vocab = Vocab.load(run_dir / VOCAB_FILE)
    from .config import ModelConfig
    mcfg = ModelConfig.from_dict(meta["model"])
    model = DualAdapterModel(mcfg, vocab, meta["data"]["d"], meta["n_classes"], cfg.variant, seed=cfg.seed)
    load_into(model.store, run_dir / CKPT_FILE)
    return cfg, model, meta


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DualAdapterModel
    log: list[dict]
    config: TrainConfig
    splits: dict[str, Dataset]
    run_dir: Path | None = None
    frozen_hashes_before: dict = field(default_factory=dict)


def split_dataset(ds: Dataset, cfg: TrainConfig) -> dict[str, Dataset]:
    # stratified by fine label (refined by the latent hint cell for synthetic data) so
    # coarse pretraining and fine probing share a partition
    train, val, test = split(ds, cfg.split, cfg.seed, label_set="fine", strata=latent_strata(ds))
    return {"train": train, "val": val, "test": test}


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        if len(idx) >= min_size:
            yield idx


def build_model(cfg: TrainConfig, train: Dataset, n_classes: int, dtype=np.float32) -> DualAdapterModel:
    vocab = Vocab.build(s.S for s in train)
    return DualAdapterModel(cfg.model_config(), vocab, train.d, n_classes, cfg.variant, seed=cfg.seed, dtype=dtype)


def _diverged(model: DualAdapterModel, epoch: int, step: int, exc: Exception | None = None) -> TrainingDiverged:
    msg = f"non-finite loss at epoch {epoch}, step {step}"
    if exc is not None:
        msg += f" ({exc})"
    return TrainingDiverged(msg, model.diagnostics())


def predict(model: DualAdapterModel, samples: Sequence[Sample], batch_size: int = 256) -> np.ndarray:
    preds = []
    with tf.no_grad():
        for i in range(0, len(samples), batch_size):
            h = model.encode(model.make_batch(samples[i:i + batch_size]))
            preds.append(model.logits(h).data.argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def supervised_step(model: DualAdapterModel, batch, label_set: str) -> tuple[Tensor, np.ndarray]:
    h = model.encode(batch)
    W, b = model.store["classifier.W"], model.store["classifier.b"]
    loss = supervised_loss(h["text"], h["time"], W, b, batch.labels[label_set])
    with tf.no_grad():
        pred = model.logits(h).data.argmax(axis=-1)
    return loss, pred


def unsupervised_loss(model: DualAdapterModel, batch, loss_cfg: LossConfig, rng: np.random.Generator) -> Tensor:
    """Contrastive objective for one batch.  Labels in ``batch`` are never read here."""
    h = model.encode(batch)
    h_aug = model.encode_augmented(batch, loss_cfg.noise_sigma, rng)
    return unsup_total(h["text"], h_aug["text"], h["time"], h_aug["time"], loss_cfg.tau,
                       model.variant, loss_cfg.standard)


def train(cfg: TrainConfig, ds: Dataset, run_dir=None, force: bool = False, csv_out: bool = False,
          export_embeddings: bool = False, dtype=np.float32, max_steps: int | None = None) -> TrainResult:
    if cfg.mode not in ("supervised", "unsupervised"):
        raise ContractError(f"train() handles supervised/unsupervised runs, not {cfg.mode!r}")
    if run_dir is not None:
        run_dir = prepare_run_dir(run_dir, force)
    splits = split_dataset(ds, cfg)
    train_ds = splits["train"]
    n_classes = ds.n_classes(cfg.label_set)
    model = build_model(cfg, train_ds, n_classes, dtype)
    store = model.store
    opt = Adam(store.trainable(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    noise_rng = np.random.default_rng([cfg.seed, 1])
    hashes_before = store.hashes()
    records: list[dict] = []
    samples = train_ds.samples
    min_size = 2 if cfg.mode == "unsupervised" else 1
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        total, n_seen, correct = 0.0, 0, 0
        for idx in _batches(len(samples), cfg.batch_size, rng, min_size):
            batch = model.make_batch([samples[i] for i in idx])
            try:
                if cfg.mode == "supervised":
                    loss, pred = supervised_step(model, batch, cfg.label_set)
                    correct += int((pred == batch.labels[cfg.label_set]).sum())
                else:
                    loss = unsupervised_loss(model, batch, cfg.loss, noise_rng)
                store.zero_grad()
                tf.backward(loss)
            except NumericError as exc:
                raise _diverged(model, epoch, steps, exc) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise _diverged(model, epoch, steps)
            with store.lock:
                opt.step()
            total += value * len(idx)
            n_seen += len(idx)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        rec = {"epoch": epoch, "loss": total / max(n_seen, 1), "steps": steps}
        if cfg.mode == "supervised":
            rec["train_acc_running"] = correct / max(n_seen, 1)
            if len(splits["val"]):
                m = compute_metrics(splits["val"].labels(cfg.label_set), predict(model, splits["val"].samples),
                                    n_classes)
                rec["val_acc"], rec["val_macro_f1"] = m.accuracy, m.macro_f1
        rec["gates"] = [round(v, 8) for v in model.diagnostics()["gates"].values()]
        records.append(rec)
        log.info("epoch %d loss %.5f", epoch, rec["loss"])
        if max_steps is not None and steps >= max_steps:
            break
    result = TrainResult(model, records, cfg, splits, run_dir, hashes_before)
    if run_dir is not None:
        write_run(result, ds, csv_out=csv_out, export_embeddings=export_embeddings)
    return result


def run_metadata(result: TrainResult, ds: Dataset) -> dict:
    m = result.model
    return {"train": result.config.to_dict(), "model": m.cfg.to_dict(), "n_classes": m.n_classes,
            "data": {"T": ds.T, "d": ds.d, "n_coarse": ds.n_coarse, "n_fine": ds.n_fine,
                     "n_samples": len(ds), "checksum": ds.checksum()},
            "census": {k: v for k, v in m.census().items() if k != "groups"}}


def write_run(result: TrainResult, ds: Dataset, csv_out: bool = False, export_embeddings: bool = False) -> None:
    run_dir = result.run_dir
    (run_dir / CONFIG_FILE).write_text(json.dumps(run_metadata(result, ds), indent=1, sort_keys=True) + "\n")
    result.model.vocab.save(run_dir / VOCAB_FILE)
    write_jsonl(run_dir / METRICS_FILE, result.log)
    if csv_out:
        write_csv(run_dir / "metrics.csv", result.log)
    save_checkpoint(result.model.store, run_dir / CKPT_FILE)
    if export_embeddings:
        export_embeddings_csv(result.model, ds.samples, run_dir / "embeddings.csv")


def export_embeddings_csv(model: DualAdapterModel, samples: Sequence[Sample], path) -> None:
    parts = model.embed_parts(samples)
    header = ["id"]
    for k in ("text", "time"):
        if k in parts:
            header += [f"{k}_{j}" for j in range(parts[k].shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, s in enumerate(samples):
            row = [s.id]
            for k in ("text", "time"):
                if k in parts:
                    row += [repr(float(x)) for x in parts[k][i]]
            w.writerow(row)


# -- probing ------------------------------------------------------------------------

def fit_linear_probe(E_train: np.ndarray, y_train: np.ndarray, n_classes: int, epochs: int = 200,
                     lr: float = 1e-2, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Full-batch Adam on a softmax linear head over standardised embeddings.

    Returns (W, b, mean, std) so that logits = ((E - mean) / std) @ W + b.
    """
    mu = E_train.mean(axis=0, keepdims=True)
    sd = E_train.std(axis=0, keepdims=True)
    sd = np.where(sd > 1e-6, sd, 1.0)
    Xs = Tensor(((E_train - mu) / sd).astype(np.float64))
    rng = np.random.default_rng(seed)
    W = Tensor(rng.normal(0, 0.01, (E_train.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = Adam({"W": W, "b": b}, lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = tf.cross_entropy(tf.linear(Xs, W, b), y_train)
        tf.backward(loss)
        opt.step()
    return W.data, b.data, mu, sd


def _probe_subset(train_ds: Dataset, kind: str, value: float, seed: int) -> Dataset:
    if kind == "linear":
        return proportion(train_ds, value, seed, label_set="fine")
    if kind == "fewshot":
        return kshot(train_ds, int(value), seed, label_set="fine")
    raise ContractError(f"unknown probe kind {kind!r}")


def probe_with_model(model: DualAdapterModel, cfg: TrainConfig, splits: dict[str, Dataset], kind: str,
                     values, seed: int) -> list[Metrics]:
    """Fit one fresh linear head per subset size in ``values`` on frozen embeddings."""
    values = list(values) if isinstance(values, (list, tuple)) else [values]
    train_ds, test_ds = splits["train"], splits["test"]
    subsets = [_probe_subset(train_ds, kind, v, seed) for v in values]  # fail early on infeasible K
    n_classes = train_ds.n_fine
    E_all = model.embed(train_ds.samples).astype(np.float64)
    row = {sid: i for i, sid in enumerate(train_ds.ids)}
    E_test = model.embed(test_ds.samples).astype(np.float64)
    out = []
    for sub in subsets:
        E_train = E_all[[row[sid] for sid in sub.ids]]
        W, b, mu, sd = fit_linear_probe(E_train, sub.labels("fine"), n_classes, cfg.probe_epochs,
                                        cfg.probe_lr, seed)
        pred = (((E_test - mu) / sd) @ W + b).argmax(axis=1)
        m = compute_metrics(test_ds.labels("fine"), pred, n_classes)
        m.n_train = len(sub)
        out.append(m)
    return out


def probe(run_dir, ds: Dataset, kind: str = "linear", values=1.0, seed: int | None = None,
          require_mode: bool = True, probe_epochs: int | None = None,
          probe_lr: float | None = None) -> tuple[list[Metrics], bool]:
    """Freeze a trained run and fit fresh linear heads on its pooled embeddings.

    kind='linear': each value is a proportion of the fine-labelled training split;
    kind='fewshot': each value is a number of samples per fine class.
    Returns (test metrics per value, frozen-audit-passed).
    """
    cfg, model, meta = load_run(run_dir)
    if require_mode:
        if kind == "linear" and cfg.mode != "unsupervised":
            raise ContractError("linear probing expects an unsupervised checkpoint")
        if kind == "fewshot" and not (cfg.mode == "supervised" and cfg.label_set == "coarse"):
            raise ContractError("few-shot transfer expects a checkpoint pretrained on coarse labels")
    if meta["data"]["checksum"] != ds.checksum():
        log.warning("dataset checksum differs from the one used for training")
    cfg = cfg.with_overrides(probe_epochs=probe_epochs, probe_lr=probe_lr)
    model.store.freeze_all()
    before = model.store.hashes(frozen_only=False)
    metrics = probe_with_model(model, cfg, split_dataset(ds, cfg), kind, values,
                               cfg.seed if seed is None else seed)
    audit = before == model.store.hashes(frozen_only=False)
    return metrics, audit


def evaluate(run_dir, ds: Dataset, which: str = "test") -> Metrics:
    cfg, model, _ = load_run(run_dir)
    return evaluate_model(model, cfg, ds, which)


def evaluate_model(model: DualAdapterModel, cfg: TrainConfig, ds: Dataset, which: str = "test") -> Metrics:
    n_classes = ds.n_classes(cfg.label_set)
    if n_classes != model.n_classes:
        raise ContractError(f"dataset has {n_classes} {cfg.label_set} classes, classifier has {model.n_classes}")
    target = ds if which == "all" else split_dataset(ds, cfg)[which]
    return compute_metrics(target.labels(cfg.label_set), predict(model, target.samples), n_classes)


# -- gradient check ------------------------------------------------------------------

GRADCHECK_TOL = 1e-5


def _gradcheck_model(seed: int = 0, profile: str = "desk"):
    cfg = TrainConfig(profile=profile, seed=seed, batch_size=3)
    mc = cfg.model_config()
    # two patches per series keeps the check quick while exercising every code path
    spec = SyntheticSpec(n_samples=8, T=2 * mc.patch.p, d=2, n_coarse=2, n_fine=4, seed=seed)
    ds = generate_synthetic(spec)
    model = build_model(cfg, ds, ds.n_fine, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for name, t in model.store.items():
        if name.endswith(".gate"):
            t.data[...] = rng.uniform(0.3, 0.8) * rng.choice([-1, 1])
    batch = model.make_batch(ds.samples[:3])
    return model, batch, cfg


def _check_path(model: DualAdapterModel, loss_fn, max_entries: int, rng: np.random.Generator,
                step: float = 1e-5) -> dict:
    store = model.store
    store.zero_grad()
    loss = loss_fn()
    tf.backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in store.trainable().items()}
    frozen_zero = all(t.grad is None for t in store.frozen().values())

    def f():
        with tf.no_grad():
            return float(loss_fn().data)

    per_param = {}
    for name, t in store.trainable().items():
        flat = np.arange(t.size)
        if t.size > max_entries:
            flat = rng.choice(t.size, max_entries, replace=False)
        a = analytic[name].reshape(-1)[flat]
        num = np.array([tf.numeric_grad(f, t, np.unravel_index(i, t.shape), step) for i in flat])
        scale = max(np.abs(a).max(), np.abs(num).max())
        err = float(np.abs(a - num).max() / scale) if scale > 1e-12 else float(np.abs(a - num).max())
        per_param[name] = err
    groups: dict[str, float] = {}
    for name, err in per_param.items():
        g = store.group(name)
        groups[g] = max(groups.get(g, 0.0), err)
    store.zero_grad()
    return {"groups": groups, "params": per_param, "frozen_grad_zero": frozen_zero,
            "pass": bool(all(e < GRADCHECK_TOL for e in groups.values()) and frozen_zero)}


def grad_check(seed: int = 0, max_entries: int = 64, profile: str = "desk") -> dict:
    """Double-precision finite-difference audit of both training objectives.

    Gates are moved off zero first so the adaptation branch contributes to
    every gradient.  A group passes when its worst tensor has normwise
    relative error below ``GRADCHECK_TOL``; frozen tensors must receive no
    gradient at all.
    """
    model, batch, cfg = _gradcheck_model(seed, profile)
    rng = np.random.default_rng(seed)
    W, b = model.store["classifier.W"], model.store["classifier.b"]

    def sup():
        h = model.encode(batch)
        return supervised_loss(h["text"], h["time"], W, b, batch.labels["fine"])

    aug_rng = np.random.default_rng(seed + 7)
    E_s = model.text_embeddings(batch)
    from .objectives import augment
    X_aug, E_aug = augment(batch.X, E_s, 0.1, aug_rng, batch.mask)

    def unsup():
        h = model.encode(batch)
        h2 = model.encode(batch, X=X_aug, E_s=E_aug)
        return unsup_total(h["text"], h2["text"], h["time"], h2["time"], cfg.loss.tau)

    paths = {"supervised": _check_path(model, sup, max_entries, rng),
             "unsupervised": _check_path(model, unsup, max_entries, rng)}
    return {"profile": profile, "paths": paths, "tolerance": GRADCHECK_TOL,
            "pass": all(p["pass"] for p in paths.values())}
