"""Paired time-series/text datasets: synthetic generation, JSONL ingestion and
seeded subsetting (splits, k-shot, label proportions)."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IngestionError, SpecError, SubsetError


@dataclass
class Sample:
    id: str
    X: np.ndarray
    S: str
    coarse_label: int
    fine_label: int

    def __eq__(self, other) -> bool:
        return (isinstance(other, Sample) and self.id == other.id and self.S == other.S
                and self.coarse_label == other.coarse_label and self.fine_label == other.fine_label
                and self.X.shape == other.X.shape and np.array_equal(self.X, other.X))


class Dataset:
    """Immutable list of samples sharing one (T, d) shape and label space."""

    def __init__(self, samples: Sequence[Sample], T: int, d: int, n_coarse: int, n_fine: int,
                 latents: dict[str, np.ndarray] | None = None, seed: int | None = None):
        self.samples = list(samples)
        self.T, self.d = T, d
        self.n_coarse, self.n_fine = n_coarse, n_fine
        self.latents = latents
        self.seed = seed

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def labels(self, label_set: str = "fine") -> np.ndarray:
        attr = "fine_label" if label_set == "fine" else "coarse_label"
        return np.array([getattr(s, attr) for s in self.samples], dtype=np.int64)

    def n_classes(self, label_set: str = "fine") -> int:
        return self.n_fine if label_set == "fine" else self.n_coarse

    def select(self, indices: Sequence[int]) -> "Dataset":
        indices = list(indices)
        latents = None
        if self.latents is not None:
            latents = {k: np.asarray(v)[indices] for k, v in self.latents.items()}
        return Dataset([self.samples[i] for i in indices], self.T, self.d, self.n_coarse, self.n_fine,
                       latents, self.seed)

    def with_labels_replaced(self, coarse: Sequence[int], fine: Sequence[int]) -> "Dataset":
        samples = [Sample(s.id, s.X, s.S, int(c), int(f)) for s, c, f in zip(self.samples, coarse, fine)]
        return Dataset(samples, self.T, self.d, self.n_coarse, self.n_fine, self.latents, self.seed)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.id.encode())
            h.update(np.ascontiguousarray(s.X, dtype="<f4").tobytes())
            h.update(s.S.encode())
            h.update(f"{s.coarse_label},{s.fine_label};".encode())
        return h.hexdigest()

    def manifest(self) -> dict:
        out = {"n_samples": len(self), "T": self.T, "d": self.d, "n_coarse": self.n_coarse,
               "n_fine": self.n_fine, "seed": self.seed, "checksum": self.checksum()}
        if self.latents is not None:
            out["latents"] = {k: np.asarray(v).tolist() for k, v in self.latents.items()}
        return out


# -- synthetic generation -------------------------------------------------------

# Phrase banks.  Word order and filler vary; the class-bearing phrase is one of
# several synonyms so no single token is required.
FINDING_PHRASES = [
    ["irregular rhythm noted", "rhythm appears irregular", "irregular beats recorded"],
    ["conduction delay present", "delayed conduction seen", "slowed conduction pattern"],
    ["repolarization changes observed", "abnormal repolarization seen", "repolarization abnormality present"],
    ["ectopic activity described", "frequent ectopic complexes", "ectopic foci suspected"],
    ["low voltage complexes", "voltage reduced throughout", "diminished voltage observed"],
    ["axis deviation reported", "deviated electrical axis", "axis shift documented"],
]
HINT_PHRASES = [
    ["history of palpitations", "prior palpitations reported"],
    ["history of syncope", "prior fainting episodes"],
    ["history of chest pain", "prior angina reported"],
    ["history of hypertension", "elevated pressure history"],
    ["history of dyspnea", "prior breathlessness reported"],
    ["history of fatigue", "chronic tiredness reported"],
]
FILLER_PHRASES = [
    "patient resting", "recording stable", "no acute distress", "follow up advised",
    "technically adequate study", "compared with prior tracing", "signal quality good",
    "lead placement verified", "routine examination", "clinical correlation suggested",
]


@dataclass
class SyntheticSpec:
    n_samples: int = 2000
    T: int = 100
    d: int = 2
    n_coarse: int = 2
    n_fine: int = 4
    complementarity_mode: bool = True
    noise: float = 0.3
    hint_accuracy: float = 0.7
    motif_rate: float = 0.8
    period: int = 10
    n_remarks: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0 or self.T < 1 or self.d < 1:
            raise SpecError("n_samples must be >= 0 and T, d >= 1")
        if self.n_coarse < 1 or self.n_fine < self.n_coarse:
            raise SpecError(f"need 1 <= n_coarse <= n_fine (got {self.n_coarse}, {self.n_fine})")
        if self.n_fine % self.n_coarse:
            raise SpecError(f"n_fine={self.n_fine} must be a multiple of n_coarse={self.n_coarse}")
        if self.n_coarse > len(HINT_PHRASES) or self.n_fine // self.n_coarse > len(FINDING_PHRASES):
            raise SpecError("class counts exceed the phrase banks")
        if self.period < self.n_coarse:
            raise SpecError(f"period={self.period} cannot hold {self.n_coarse} distinct phases")
        if not 0 <= self.n_remarks <= len(FILLER_PHRASES):
            raise SpecError(f"n_remarks must lie in [0, {len(FILLER_PHRASES)}]")
        if not 0.0 <= self.hint_accuracy <= 1.0:
            raise SpecError("hint_accuracy must lie in [0, 1]")
        if not 0.0 <= self.motif_rate <= 1.0:
            raise SpecError("motif_rate must lie in [0, 1]")

    @property
    def k(self) -> int:
        """Number of text-side factor values per coarse class."""
        return self.n_fine // self.n_coarse

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def fine_from_factors(a, b, k: int):
    """XOR-style pairing: within coarse class a, the fine label is (a + b) mod k."""
    return a * k + (a + b) % k


def _spike_positions(a: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Interior spike train whose phase on the ``period`` grid is fixed by ``a``.

    Trains for different ``a`` are translates of one another and stay clear
    of the series edges, so any translation-invariant, globally pooled
    feature has the same distribution for every ``a``.  Only a reader aligned
    to the sampling grid (such as fixed-stride patching) can tell them apart.
    """
    T, period = spec.T, spec.period
    margin = min(20, T // 5)
    n_spikes = max(1, (T - 2 * margin - period) // period)
    base = margin + period * int(rng.integers(0, 2)) + a * period // spec.n_coarse
    pos = base + period * np.arange(n_spikes)
    return pos[pos < T]


def _temporal_signal(a: int, b: int, spec: SyntheticSpec, rng: np.random.Generator,
                     motif: bool = True) -> np.ndarray:
    T, d = spec.T, spec.d
    t = np.arange(T, dtype=np.float64)
    X = np.zeros((T, d))
    # class-independent background: a mixture of 1-2 slow sinusoids per channel
    for c in range(d):
        for _ in range(rng.integers(1, 3)):
            X[:, c] += 0.5 * rng.uniform() * np.sin(2 * np.pi * rng.uniform(0.5, 6) / T * t
                                                   + rng.uniform(0, 2 * np.pi))
    spikes = _spike_positions(a, spec, rng)
    amp = 2.0 + 0.3 * rng.standard_normal((len(spikes), d))
    if motif:
        X[spikes, :] += amp
    if not spec.complementarity_mode:
        # b is visible in the series too, as the frequency of an extra sinusoid
        X += np.sin(2 * np.pi * (2 + 3 * b) / T * t + rng.uniform(0, 2 * np.pi))[:, None]
    X += spec.noise * rng.standard_normal((T, d))
    return X.astype(np.float32)


def _text(a: int, b: int, hint: int, spec: SyntheticSpec, rng: np.random.Generator) -> str:
    """History line first, routine remarks next, and the impression (b) last."""
    h = hint if spec.complementarity_mode else a
    phrases = [HINT_PHRASES[h][rng.integers(len(HINT_PHRASES[h]))]]
    phrases += [FILLER_PHRASES[i] for i in rng.choice(len(FILLER_PHRASES), spec.n_remarks, replace=False)]
    phrases.append("impression " + FINDING_PHRASES[b][rng.integers(len(FINDING_PHRASES[b]))])
    return ", ".join(phrases) + "."


def impression_offset(spec: SyntheticSpec) -> int:
    """Fewest tokens that precede the impression phrase in any generated report."""
    from .encoders import tokenize
    hint = min(len(tokenize(p)) for bank in HINT_PHRASES for p in bank)
    remarks = sorted(len(tokenize(p)) for p in FILLER_PHRASES)[:spec.n_remarks]
    return hint + sum(remarks) + 1 + spec.n_remarks


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Stratified synthetic dataset with latent factors a (series) and b (text).

    coarse = a; fine = pairing(a, b).  In complementarity mode b never
    touches the series, a reaches the text only through a hint that is
    correct for a ``hint_accuracy`` share of each cell, and only a
    ``motif_rate`` share of each cell carries the a-bearing spike train.
    """
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_samples, spec.k
    n_combo = spec.n_coarse * k
    combos = rng.permutation(np.arange(n) % n_combo) if n else np.zeros(0, dtype=np.int64)
    a = combos // k
    b = combos % k
    hint = a.copy()
    motif = np.ones(n, dtype=np.int64)
    if spec.complementarity_mode:
        # exact hint accuracy and motif rate inside every (a, b) cell, so neither
        # carries information about b beyond what a already gives
        for cell in range(n_combo):
            cls = cell // k
            members = np.flatnonzero(combos == cell)
            members = members[rng.permutation(len(members))]
            n_wrong = len(members) - int(round(spec.hint_accuracy * len(members)))
            others = [c for c in range(spec.n_coarse) if c != cls]
            if others:
                for j, i in enumerate(members[:n_wrong]):
                    hint[i] = others[j % len(others)]
            for group in (members[:n_wrong], members[n_wrong:]):
                n_off = len(group) - int(round(spec.motif_rate * len(group)))
                motif[group[:n_off]] = 0
    fine = fine_from_factors(a, b, k)
    samples = []
    for i in range(n):
        X = _temporal_signal(int(a[i]), int(b[i]), spec, rng, bool(motif[i]))
        S = _text(int(a[i]), int(b[i]), int(hint[i]), spec, rng)
        samples.append(Sample(f"syn{spec.seed}-{i:06d}", X, S, int(a[i]), int(fine[i])))
    ds = Dataset(samples, spec.T, spec.d, spec.n_coarse, spec.n_fine,
                 latents={"a": a, "b": b, "hint": hint, "motif": motif}, seed=spec.seed)
    if spec.complementarity_mode and n:
        report = complementarity_report(ds)
        if not report["certified"]:
            raise SpecError(f"generated labels are not complementary: {report}")
    return ds


# -- exact information accounting over the latent table ----------------------------

def entropy(*columns: np.ndarray) -> float:
    """Joint Shannon entropy (bits) of discrete columns, by exact counting."""
    n = len(columns[0])
    if n == 0:
        return 0.0
    counts = Counter(zip(*(np.asarray(c).tolist() for c in columns)))
    p = np.array(list(counts.values()), dtype=np.float64) / n
    return float(-(p * np.log2(p)).sum())


def mutual_information(x: Sequence, *ys: np.ndarray) -> float:
    return entropy(x) + entropy(*ys) - entropy(x, *ys)


def bayes_accuracy(target: np.ndarray, *observed: np.ndarray) -> float:
    """Best achievable accuracy when predicting ``target`` from ``observed`` (exact, by counting)."""
    n = len(target)
    if n == 0:
        return 0.0
    table: dict = {}
    for key, y in zip(zip(*(np.asarray(o).tolist() for o in observed)), np.asarray(target).tolist()):
        table.setdefault(key, Counter())[y] += 1
    return sum(c.most_common(1)[0][1] for c in table.values()) / n


def _visible(a: np.ndarray, motif) -> np.ndarray:
    """What the series reveals about a: the value itself, or -1 when the motif is absent."""
    return a if motif is None else np.where(np.asarray(motif) > 0, a, -1)


def complementarity_report(ds: Dataset) -> dict:
    if ds.latents is None:
        raise SpecError("dataset carries no latent table")
    a, b, hint = (np.asarray(ds.latents[k]) for k in ("a", "b", "hint"))
    fine = ds.labels("fine")
    h = entropy(fine)
    tol = 1e-9
    rep = {
        "H_fine": h,
        "I_fine_a": mutual_information(fine, a),
        "I_fine_b": mutual_information(fine, b),
        "I_fine_ab": mutual_information(fine, a, b),
        "bayes_time": bayes_accuracy(fine, a),
        "bayes_series": bayes_accuracy(fine, _visible(a, ds.latents.get("motif"))),
        "bayes_text": bayes_accuracy(fine, b, hint),
        "bayes_both": bayes_accuracy(fine, a, b),
    }
    rep["certified"] = bool(rep["I_fine_a"] < h - tol and rep["I_fine_b"] < h - tol
                            and abs(rep["I_fine_ab"] - h) < tol)
    return rep


# -- JSONL ingestion -------------------------------------------------------------

def save_jsonl(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in ds.samples:
            rec = {"id": s.id, "x": np.asarray(s.X, dtype=np.float64).tolist(), "text": s.S,
                   "coarse": s.coarse_label, "fine": s.fine_label}
            fh.write(json.dumps(rec) + "\n")


def _parse_record(rec, lineno: int, shape: tuple[int, int] | None) -> Sample:
    if not isinstance(rec, dict):
        raise IngestionError("expected a JSON object", lineno)
    missing = [k for k in ("id", "x", "text", "coarse", "fine") if k not in rec]
    if missing:
        raise IngestionError(f"missing keys {missing}", lineno)
    if not isinstance(rec["id"], str) or not isinstance(rec["text"], str):
        raise IngestionError("'id' and 'text' must be strings", lineno)
    for key in ("coarse", "fine"):
        if not isinstance(rec[key], int) or isinstance(rec[key], bool) or rec[key] < 0:
            raise IngestionError(f"'{key}' must be a non-negative integer", lineno)
    x = rec["x"]
    if not isinstance(x, list) or not x or not all(isinstance(row, list) for row in x):
        raise IngestionError("'x' must be a non-empty T x d nested array", lineno)
    widths = {len(row) for row in x}
    if len(widths) != 1 or 0 in widths:
        raise IngestionError(f"ragged 'x': row widths {sorted(widths)}", lineno)
    try:
        X = np.array(x, dtype=np.float64)
    except (TypeError, ValueError):
        raise IngestionError("'x' contains non-numeric values", lineno) from None
    if not np.isfinite(X).all():
        raise IngestionError("'x' contains non-finite values", lineno)
    if shape is not None and X.shape != shape:
        T, d = shape
        if X.shape[1] != d:
            raise IngestionError(f"d mismatch: expected {d} channels, got {X.shape[1]}", lineno)
        raise IngestionError(f"T mismatch: expected {T} timestamps, got {X.shape[0]}", lineno)
    return Sample(rec["id"], X.astype(np.float32), rec["text"], rec["coarse"], rec["fine"])


def load_jsonl(path, n_coarse: int | None = None, n_fine: int | None = None) -> Dataset:
    """Load and validate a JSONL dataset; T and d come from the first record."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    samples: list[Sample] = []
    shape = None
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"invalid JSON ({exc.msg})", lineno) from None
            s = _parse_record(rec, lineno, shape)
            if s.id in seen:
                raise IngestionError(f"duplicate id {s.id!r}", lineno)
            seen.add(s.id)
            shape = shape or s.X.shape
            samples.append(s)
    T, d = shape if shape else (0, 0)
    max_c = max((s.coarse_label for s in samples), default=-1) + 1
    max_f = max((s.fine_label for s in samples), default=-1) + 1
    n_coarse = n_coarse or max_c
    n_fine = n_fine or max_f
    if max_c > n_coarse or max_f > n_fine:
        raise IngestionError(f"labels exceed declared class counts ({n_coarse} coarse, {n_fine} fine)")
    return Dataset(samples, T, d, n_coarse, n_fine)


def save_dataset(ds: Dataset, out_dir, spec: SyntheticSpec | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(ds, out / "data.jsonl")
    manifest = ds.manifest()
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return out


def load_dataset(path) -> Dataset:
    """Load a dataset directory (data.jsonl + manifest.json) or a bare JSONL file."""
    path = Path(path)
    if path.is_dir():
        manifest_path = path / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        ds = load_jsonl(path / "data.jsonl", manifest.get("n_coarse"), manifest.get("n_fine"))
        if manifest:
            if "checksum" in manifest and manifest["checksum"] != ds.checksum():
                raise IngestionError("dataset checksum does not match manifest")
            ds.seed = manifest.get("seed")
            if "latents" in manifest:
                ds.latents = {k: np.asarray(v, dtype=np.int64) for k, v in manifest["latents"].items()}
        return ds
    return load_jsonl(path)


# -- subsets --------------------------------------------------------------------

def _by_class(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def latent_strata(ds: Dataset) -> np.ndarray | None:
    """One integer per sample naming its (fine label, hint, motif) cell, if latents are known."""
    if ds.latents is None or "hint" not in ds.latents:
        return None
    key = ds.labels("fine") * max(ds.n_coarse, 1) + np.asarray(ds.latents["hint"], dtype=np.int64)
    if "motif" in ds.latents:
        key = 2 * key + np.asarray(ds.latents["motif"], dtype=np.int64)
    return key


def split(ds: Dataset, ratios: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0,
          label_set: str = "fine", strata: np.ndarray | None = None) -> list[Dataset]:
    """Seeded, stratified disjoint partition into len(ratios) parts.

    Strata default to the classes of ``label_set``.  Every stratum is cut at
    the same fractional positions, so equal-sized strata get equal shares.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise SubsetError(f"split ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    keys = ds.labels(label_set) if strata is None else np.asarray(strata)
    if len(keys) != len(ds):
        raise SubsetError(f"{len(keys)} strata keys for {len(ds)} samples")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in ratios]
    for cls, idx in sorted(_by_class(keys).items()):
        idx = idx[rng.permutation(len(idx))]
        cuts = np.floor(np.cumsum(ratios) * len(idx) + 1e-9).astype(int)
        cuts[-1] = len(idx)
        start = 0
        for j, stop in enumerate(cuts):
            parts[j].extend(idx[start:stop].tolist())
            start = stop
    return [ds.select(sorted(p)) for p in parts]


def kshot(ds: Dataset, K: int, seed: int = 0, label_set: str = "fine") -> Dataset:
    """Exactly K samples from every class of ``label_set``."""
    if K < 1:
        raise SubsetError(f"K must be >= 1, got {K}")
    labels = ds.labels(label_set)
    groups = {c: np.flatnonzero(labels == c) for c in range(ds.n_classes(label_set))}
    deficient = {c: len(idx) for c, idx in groups.items() if len(idx) < K}
    if deficient:
        detail = ", ".join(f"class {c} has {n}" for c, n in sorted(deficient.items()))
        raise SubsetError(f"{K}-shot infeasible: {detail}", deficient)
    rng = np.random.default_rng(seed)
    chosen = []
    for c in sorted(groups):
        idx = groups[c]
        chosen.extend(idx[rng.permutation(len(idx))[:K]].tolist())
    return ds.select(sorted(chosen))


def proportion(ds: Dataset, q: float, seed: int = 0, label_set: str = "fine") -> Dataset:
    """ceil(q * n) samples, allocated across classes by largest remainder."""
    if not 0.0 < q <= 1.0:
        raise SubsetError(f"proportion must lie in (0, 1], got {q}")
    n = len(ds)
    target = math.ceil(q * n - 1e-9)
    if target >= n:
        return ds.select(range(n))
    groups = _by_class(ds.labels(label_set))
    classes = sorted(groups)
    exact = np.array([q * len(groups[c]) for c in classes])
    alloc = np.floor(exact).astype(int)
    remainder = exact - alloc
    for j in np.argsort(-remainder, kind="stable")[:target - alloc.sum()]:
        alloc[j] += 1
    rng = np.random.default_rng(seed)
    chosen = []
    for c, m in zip(classes, alloc):
        idx = groups[c]
        chosen.extend(idx[rng.permutation(len(idx))[:m]].tolist())
    return ds.select(sorted(chosen))


def subset(ds: Dataset, mode: str, seed: int = 0, **kwargs):
    """Dispatch to split / kshot / proportion by name."""
    if mode == "split":
        return split(ds, kwargs.get("ratios", (0.7, 0.15, 0.15)), seed, kwargs.get("label_set", "fine"))
    if mode == "kshot":
        return kshot(ds, kwargs["K"], seed, kwargs.get("label_set", "fine"))
    if mode == "proportion":
        return proportion(ds, kwargs["q"], seed, kwargs.get("label_set", "fine"))
    raise SubsetError(f"unknown subset mode {mode!r}")
