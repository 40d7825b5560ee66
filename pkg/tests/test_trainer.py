import json

import numpy as np
import pytest

from dtk import tensor as tf
from dtk import trainer as trainer_mod
from dtk.config import TrainConfig
from dtk.datasets import SyntheticSpec, generate_synthetic
from dtk.errors import ContractError, NumericError, SubsetError, TrainingDiverged
from dtk.tensor import Tensor
from dtk.trainer import (Adam, adam_step, compute_metrics, evaluate, fit_linear_probe, grad_check, load_run, probe,
                         train)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(n_samples=80, T=40, seed=3))


# -- optimiser ----------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    opt.step({"p": np.array([0.5, -3.0, 1e-3])})
    np.testing.assert_allclose(p.data, [0.99, -1.99, 2.99], atol=1e-6)


def test_adam_first_step_on_half_square():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    tf.backward((w * w * 0.5).sum())
    opt.step()
    assert w.data[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(5):
        opt.step({"p": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_converges_on_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(3000):
        opt.zero_grad()
        tf.backward(((p - Tensor(target)) ** 2).sum())
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-4)


def test_adam_rejects_mismatched_gradients():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ContractError):
        Adam({"p": p}).step({"p": np.zeros(4)})
    with pytest.raises(ContractError):
        adam_step({"p": p}, {"q": np.zeros(3)})


# -- metrics ------------------------------------------------------------------------

def test_metrics_match_hand_counts():
    m = compute_metrics([0, 0, 1, 1, 2, 2], [0, 1, 1, 1, 0, 2], 3)
    assert m.accuracy == pytest.approx(4 / 6)
    assert m.confusion == [[1, 1, 0], [0, 2, 0], [1, 0, 1]]
    np.testing.assert_allclose(m.precision, [0.5, 2 / 3, 1.0])
    np.testing.assert_allclose(m.recall, [0.5, 1.0, 0.5])
    f1 = [0.5, 0.8, 2 / 3]
    np.testing.assert_allclose(m.f1, f1)
    assert m.macro_f1 == pytest.approx(np.mean(f1))


def test_metrics_match_loop_reference_on_random_predictions():
    rng = np.random.default_rng(0)
    for _ in range(20):
        C = int(rng.integers(2, 6))
        y = rng.integers(0, C, 50)
        p = rng.integers(0, C, 50)
        m = compute_metrics(y, p, C)
        f1s = []
        for c in range(C):
            tp = sum(1 for a, b in zip(y, p) if a == c and b == c)
            fp = sum(1 for a, b in zip(y, p) if a != c and b == c)
            fn = sum(1 for a, b in zip(y, p) if a == c and b != c)
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
            assert m.precision[c] == pytest.approx(prec, abs=1e-9)
            assert m.recall[c] == pytest.approx(rec, abs=1e-9)
        assert m.macro_f1 == pytest.approx(sum(f1s) / C, abs=1e-9)
        assert m.accuracy == pytest.approx(np.trace(np.array(m.confusion)) / 50, abs=1e-9)


def test_metrics_extremes():
    y = [0, 1, 2, 3] * 5
    assert compute_metrics(y, [0] * 20, 4).accuracy == pytest.approx(0.25)
    perfect = compute_metrics(y, y, 4)
    assert perfect.accuracy == perfect.macro_f1 == 1.0
    assert compute_metrics([], [], 2).accuracy == 0.0


# -- training -----------------------------------------------------------------------

def test_training_is_deterministic(small):
    cfg = TrainConfig(epochs=1, seed=4, batch_size=16)
    a, b = train(cfg, small), train(cfg, small)
    assert a.log == b.log
    assert a.model.store.hashes(frozen_only=False) == b.model.store.hashes(frozen_only=False)


def test_training_keeps_frozen_tensors_and_moves_trainable(small):
    res = train(TrainConfig(epochs=1, seed=0, batch_size=16), small)
    store = res.model.store
    assert store.hashes() == res.frozen_hashes_before
    assert any(abs(g) > 0 for g in res.log[-1]["gates"])


def test_unsupervised_loss_decreases_over_fifty_epochs():
    ds = generate_synthetic(SyntheticSpec(n_samples=48, T=40, seed=5))
    res = train(TrainConfig(mode="unsupervised", epochs=50, seed=1, batch_size=16), ds)
    losses = np.array([r["loss"] for r in res.log])
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert (np.diff(smooth) < 0).mean() >= 0.9
    assert smooth[-1] < smooth[0]


def test_unsupervised_loss_ignores_labels(small):
    model = trainer_mod.build_model(TrainConfig(), small, 4)
    relabelled = small.with_labels_replaced(small.labels("coarse")[::-1], small.labels("fine")[::-1])
    cfg = TrainConfig().loss
    a = trainer_mod.unsupervised_loss(model, model.make_batch(small.samples[:8]), cfg, np.random.default_rng(0))
    b = trainer_mod.unsupervised_loss(model, model.make_batch(relabelled.samples[:8]), cfg,
                                      np.random.default_rng(0))
    assert a.item() == b.item()


def test_run_directory_layout_and_reload(small, tmp_path):
    cfg = TrainConfig(epochs=1, seed=0, batch_size=16)
    res = train(cfg, small, run_dir=tmp_path / "run", csv_out=True, export_embeddings=True)
    for name in ("config.json", "metrics.jsonl", "final.ckpt", "vocab.tsv", "metrics.csv", "embeddings.csv"):
        assert (tmp_path / "run" / name).exists()
    records = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    assert records[0]["epoch"] == 1
    _, model, _ = load_run(tmp_path / "run")
    assert model.store.hashes(frozen_only=False) == res.model.store.hashes(frozen_only=False)
    m = evaluate(tmp_path / "run", small)
    assert 0.0 <= m.accuracy <= 1.0 and m.n_eval == len(res.splits["test"])
    with pytest.raises(FileExistsError):
        train(cfg, small, run_dir=tmp_path / "run")


def test_evaluate_rejects_class_count_mismatch(small, tmp_path):
    train(TrainConfig(epochs=1, batch_size=16), small, run_dir=tmp_path / "r")
    other = generate_synthetic(SyntheticSpec(n_samples=24, T=40, n_coarse=2, n_fine=6, seed=0))
    with pytest.raises(ContractError, match="classes"):
        evaluate(tmp_path / "r", other)


def test_divergence_reports_diagnostics(small, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericError("non-finite value in loss")
    monkeypatch.setattr(trainer_mod, "supervised_step", boom)
    with pytest.raises(TrainingDiverged) as info:
        train(TrainConfig(epochs=1, batch_size=16), small)
    assert "epoch 1" in str(info.value)
    assert "gates" in info.value.diagnostics and "norms" in info.value.diagnostics


def test_train_rejects_probe_mode(small):
    with pytest.raises(ContractError):
        train(TrainConfig(mode="probe"), small)


# -- probing ------------------------------------------------------------------------

def test_linear_probe_separates_separable_data():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(3, 5)) * 4
    y = np.repeat(np.arange(3), 30)
    E = centers[y] + rng.normal(size=(90, 5))
    W, b, mu, sd = fit_linear_probe(E, y, 3, epochs=200, lr=0.05)
    assert ((((E - mu) / sd) @ W + b).argmax(axis=1) == y).mean() == 1.0


def test_probe_freezes_the_model_and_audits(small, tmp_path):
    train(TrainConfig(mode="unsupervised", epochs=1, batch_size=16), small, run_dir=tmp_path / "u")
    metrics, audit = probe(tmp_path / "u", small, "linear", [0.5, 1.0], probe_epochs=20)
    assert audit
    n_train = len(trainer_mod.split_dataset(small, TrainConfig())["train"])
    assert [m.n_train for m in metrics] == [n_train // 2, n_train]
    with pytest.raises(ContractError, match="coarse"):
        probe(tmp_path / "u", small, "fewshot", [2])


def test_fewshot_requires_feasible_k(small, tmp_path):
    train(TrainConfig(label_set="coarse", epochs=1, batch_size=16), small, run_dir=tmp_path / "c")
    metrics, audit = probe(tmp_path / "c", small, "fewshot", [2, 4], probe_epochs=20)
    assert audit and [m.n_train for m in metrics] == [8, 16]
    with pytest.raises(SubsetError) as info:
        probe(tmp_path / "c", small, "fewshot", [2, 50])
    assert set(info.value.deficient) == {0, 1, 2, 3}
    with pytest.raises(ContractError, match="unsupervised"):
        probe(tmp_path / "c", small, "linear", [1.0])


def test_gradcheck_on_tiny_profile_passes():
    report = grad_check(seed=0, max_entries=8, profile="gradcheck")
    assert report["pass"]
    for path in report["paths"].values():
        assert path["frozen_grad_zero"]
        assert max(path["groups"].values()) < 1e-5
