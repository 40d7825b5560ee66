"""Acceptance criteria, one test each, run at their stated tolerances and budgets.

Each test prints a ``criterion N: PASS/FAIL`` line; the same lines are
repeated in the pytest terminal summary.  Run just this file with

    pytest tests/test_acceptance.py -v -s
"""

import json

import numpy as np
import pytest

import oracles
from conftest import criterion
from dtk.adapters import adapter_forward
from dtk.backbone import backbone_forward
from dtk.cli import main
from dtk.config import TrainConfig
from dtk.datasets import SyntheticSpec, complementarity_report, generate_synthetic
from dtk.encoders import n_patches
from dtk.objectives import cross_adapter_loss, within_adapter_loss
from dtk.tensor import Tensor
from dtk.trainer import (build_model, compute_metrics, evaluate_model, grad_check, predict, probe_with_model,
                         train)

pytestmark = pytest.mark.acceptance
SEEDS = (0, 1, 2)


def test_c01_zero_gate_identity():
    with criterion(1, "zero-init gates reproduce the frozen backbone", 10) as detail:
        ds = generate_synthetic(SyntheticSpec(n_samples=8, T=40, seed=0))
        model = build_model(TrainConfig(), ds, ds.n_fine)
        bb, store = model.bb, model.store
        rng = np.random.default_rng(0)
        worst = 0.0
        for adapter in (model.text_adapter, model.time_adapter):
            assert all(float(g.data.reshape(-1)[0]) == 0.0 for g in adapter.gates)
            for _ in range(50):
                n = int(rng.integers(1, bb.max_seq_len + 1))
                E = Tensor(rng.normal(size=(n, bb.D)).astype(np.float32))
                Z = Tensor(rng.normal(0, 3, size=(1, bb.D)).astype(np.float32))
                diff = adapter_forward(adapter, E, Z).data - backbone_forward(store, bb, E).data
                worst = max(worst, float(np.abs(diff).max()))
        detail["max_abs_diff"] = worst
        assert worst < 1e-6


def test_c02_gradient_soundness():
    with criterion(2, "float64 gradcheck on the desk profile, both objectives", 120) as detail:
        report = grad_check(seed=0, profile="desk")
        errs = {f"{path}/{g}": e for path, rep in report["paths"].items() for g, e in rep["groups"].items()}
        detail["max_rel_err"] = f"{max(errs.values()):.2e}"
        detail["groups"] = len(errs)
        assert set(report["paths"]) == {"supervised", "unsupervised"}
        assert all(e < 1e-5 for e in errs.values()), errs
        assert all(rep["frozen_grad_zero"] for rep in report["paths"].values())
        assert report["pass"]


def test_c03_freeze_soundness():
    with criterion(3, "frozen tensors byte-identical after 100 + 100 steps", 120) as detail:
        ds = generate_synthetic(SyntheticSpec(n_samples=400, seed=3))
        for mode in ("supervised", "unsupervised"):
            res = train(TrainConfig(mode=mode, epochs=50, seed=3), ds, max_steps=100)
            store = res.model.store
            assert res.log[-1]["steps"] == 100
            assert store.hashes() == res.frozen_hashes_before
            assert len(res.frozen_hashes_before) == len(store.frozen())
            gates = res.model.diagnostics()["gates"]
            assert any(g != 0.0 for g in gates.values()), "trainable gates never left zero"
            detail[f"{mode}_frozen_tensors"] = len(store.frozen())


def test_c04_loss_oracles():
    with criterion(4, "contrastive losses match brute-force oracles", 30) as detail:
        rng = np.random.default_rng(4)
        worst = 0.0
        for i in range(100):
            B = (2, 4, 8)[i % 3]
            D = int(rng.choice([4, 16, 32]))
            tau = float(rng.uniform(0.05, 1.0))
            hs, hs2, ht, ht2 = (rng.normal(size=(B, D)) for _ in range(4))
            pairs = [(within_adapter_loss(Tensor(hs), Tensor(hs2), tau).item(), oracles.within(hs, hs2, tau)),
                     (within_adapter_loss(Tensor(ht), Tensor(ht2), tau).item(), oracles.within(ht, ht2, tau)),
                     (cross_adapter_loss(Tensor(hs), Tensor(ht), tau).item(), oracles.cross(hs, ht, tau))]
            for got, want in pairs:
                worst = max(worst, abs(got - want))
        detail["max_abs_err"] = f"{worst:.1e}"
        assert worst < 1e-6
        E = np.eye(2)
        assert abs(within_adapter_loss(Tensor(E), Tensor(E), 1.0).item() - (-2.0)) < 1e-9
        assert abs(cross_adapter_loss(Tensor(E), Tensor(E), 1.0).item() - (-4.0)) < 1e-9


def test_c05_patching_arithmetic():
    with criterion(5, "patch count formula equals window enumeration", 5) as detail:
        rng = np.random.default_rng(5)
        checked = 0
        for _ in range(1000):
            p = int(rng.integers(1, 64))
            s = int(rng.integers(1, 64))
            T = int(rng.integers(p, 2000))
            windows, start = 0, 0
            while True:
                windows += 1
                if start + p >= T:
                    break
                start += s
            expected = -(-(T - p) // s) + 1
            assert n_patches(T, p, s) == windows == expected
            checked += 1
        assert n_patches(250, 25, 25) == 10
        detail["cases"] = checked


def test_c06_supervised_overfit():
    with criterion(6, "64 samples reach >= 95% train accuracy within 300 epochs", 300) as detail:
        ds = generate_synthetic(SyntheticSpec(n_samples=64, seed=0))
        cfg = TrainConfig(epochs=300, batch_size=16, seed=0, split=(1.0, 0.0, 0.0))
        res = train(cfg, ds)
        train_ds = res.splits["train"]
        assert len(train_ds) == 64
        acc = compute_metrics(train_ds.labels(), predict(res.model, train_ds.samples), 4).accuracy
        detail["train_acc"] = round(acc, 4)
        assert acc >= 0.95


def test_c07_complementarity():
    with criterion(7, "dual beats both single adapters by >= 10 points", 1200) as detail:
        acc = {v: [] for v in ("dual", "text_only", "time_only")}
        ceilings = {"time_only": [], "text_only": []}
        for seed in SEEDS:
            ds = generate_synthetic(SyntheticSpec(n_samples=2000, n_fine=4, complementarity_mode=True, seed=seed))
            for variant in acc:
                cfg = TrainConfig(variant=variant, epochs=20, seed=seed)
                res = train(cfg, ds)
                acc[variant].append(evaluate_model(res.model, cfg, ds, "test").accuracy)
            rep = complementarity_report(res.splits["test"])
            ceilings["time_only"].append(rep["bayes_time"])
            ceilings["text_only"].append(rep["bayes_text"])
        mean = {v: float(np.mean(a)) for v, a in acc.items()}
        detail.update({f"{v}_mean": round(m, 3) for v, m in mean.items()})
        detail["ceilings"] = {v: round(float(np.mean(c)), 3) for v, c in ceilings.items()}
        assert mean["dual"] - mean["text_only"] >= 0.10
        assert mean["dual"] - mean["time_only"] >= 0.10
        for v in ("time_only", "text_only"):
            assert mean[v] < np.mean(ceilings[v])
            assert all(a <= c for a, c in zip(acc[v], ceilings[v]))


def test_c08_fewshot_trend():
    ks = [5, 10, 15, 20, 50, 100]
    with criterion(8, "few-shot accuracy grows with K after coarse pretraining", 1200) as detail:
        curves = []
        for seed in SEEDS:
            ds = generate_synthetic(SyntheticSpec(n_samples=2000, seed=seed))
            cfg = TrainConfig(label_set="coarse", epochs=10, seed=seed)
            res = train(cfg, ds)
            before = res.model.store.hashes(frozen_only=False)
            metrics = probe_with_model(res.model, cfg, res.splits, "fewshot", ks, seed)
            assert res.model.store.hashes(frozen_only=False) == before
            assert [m.n_train for m in metrics] == [4 * k for k in ks]
            curves.append([m.accuracy for m in metrics])
        mean = np.mean(curves, axis=0)
        detail["mean_acc"] = [round(float(a), 3) for a in mean]
        assert all(mean[i + 1] >= mean[i] - 0.02 for i in range(len(ks) - 1))
        assert mean[-1] >= mean[0] + 0.05


def test_c09_linear_probe():
    with criterion(9, "probe at q=100% >= probe at q=10%", 600) as detail:
        pairs = []
        for seed in SEEDS:
            ds = generate_synthetic(SyntheticSpec(n_samples=2000, seed=seed))
            cfg = TrainConfig(mode="unsupervised", epochs=5, seed=seed)
            res = train(cfg, ds)
            low, high = probe_with_model(res.model, cfg, res.splits, "linear", [0.1, 1.0], seed)
            pairs.append((low.accuracy, high.accuracy))
        detail["acc_q10_q100"] = [(round(a, 3), round(b, 3)) for a, b in pairs]
        assert all(high >= low for low, high in pairs)
        assert np.mean([p[1] for p in pairs]) >= np.mean([p[0] for p in pairs])


def test_c10_parameter_budget(capsys):
    with criterion(10, "full-size profile trainable budget", 1) as detail:
        assert main(["inspect", "--profile", "paper_shape", "--json"]) == 0
        c = json.loads(capsys.readouterr().out)
        frac = c["trainable"] / c["total"]
        detail["trainable"] = c["trainable"]
        detail["fraction"] = f"{100 * frac:.3f}%"
        assert 300_000 <= c["trainable"] <= 3_000_000
        assert frac < 0.10


def _run_twice(root, name, make_argv, artifact="metrics.jsonl"):
    """Run one subcommand into root/name/a and root/name/b; return both copies of the artifact."""
    base = root / name
    base.mkdir()
    for rep in ("a", "b"):
        assert main([str(x) for x in make_argv(base / rep)]) == 0, name
    return (base / "a" / artifact).read_bytes(), (base / "b" / artifact).read_bytes()


def test_c11_determinism(tmp_path):
    with criterion(11, "identical inputs give identical metrics.jsonl", 600) as detail:
        data = tmp_path / "data"
        assert main(["gen-data", "--out", str(data), "--n-samples", "120", "--T", "60", "--seed", "11"]) == 0
        train_args = ["--data", data, "--epochs", "2", "--batch-size", "16", "--seed", "5"]
        runs = {
            "gen-data": (lambda out: ["gen-data", "--out", out, "--n-samples", "40", "--T", "40", "--seed", "2"],
                         "data.jsonl"),
            "train-sup": (lambda out: ["train", *train_args, "--run-dir", out, "--label-set", "coarse"],
                          "metrics.jsonl"),
            "train-unsup": (lambda out: ["train", *train_args, "--run-dir", out, "--mode", "unsupervised"],
                            "metrics.jsonl"),
        }
        for name, (make_argv, artifact) in runs.items():
            a, b = _run_twice(tmp_path, name, make_argv, artifact)
            assert a == b and a, name
        sup, unsup = tmp_path / "train-sup" / "a", tmp_path / "train-unsup" / "a"
        later = {
            "fewshot": ["fewshot", "--run-dir", sup, "--data", data, "--K", "2,5", "--probe-epochs", "30"],
            "probe": ["probe", "--run-dir", unsup, "--data", data, "--q", "0.5,1.0", "--probe-epochs", "30"],
            "eval": ["eval", "--run-dir", sup, "--data", data],
            "gradcheck": ["gradcheck", "--profile", "gradcheck", "--max-entries", "4"],
            "inspect": ["inspect", "--profile", "desk"],
        }
        for name, argv in later.items():
            a, b = _run_twice(tmp_path, name, lambda out, argv=argv: [*argv, "--out", out])
            assert a == b and a, name
        detail["subcommands"] = ",".join([*runs, *later])
