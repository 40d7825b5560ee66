import json

import pytest

from dtk.cli import build_parser, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_json(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--n-samples", "64", "--T", "40", "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def coarse_run(data_dir):
    run_dir = data_dir.parent / "coarse"
    assert main(["train", "--data", str(data_dir), "--run-dir", str(run_dir), "--label-set", "coarse",
                 "--epochs", "1", "--batch-size", "16"]) == 0
    return run_dir


def _subparsers():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    return parser, sub.choices


def test_help_lists_every_flag_with_its_default():
    parser, subs = _subparsers()
    assert set(subs) == {"gen-data", "train", "probe", "fewshot", "eval", "gradcheck", "inspect"}
    for name, sp in subs.items():
        text = " ".join(sp.format_help().split())
        for action in sp._actions:
            if action.dest == "help":
                continue
            flag = action.option_strings[-1]
            assert flag in text, (name, flag)
            assert "default:" in action.help or "required" in action.help, (name, flag)


def test_help_exits_zero(capsys):
    assert run(capsys, "train", "--help")[0] == 0


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    ["train", "--data", "/nonexistent", "--run-dir", "/tmp/x"],
    ["probe", "--run-dir", "/nonexistent", "--data", "d", "--out", "o"],
    ["probe", "--run-dir", "r", "--data", "d", "--out", "o", "--q", "0,1"],
    ["fewshot", "--run-dir", "r", "--data", "d", "--out", "o", "--K", "five"],
])
def test_usage_errors_exit_2_with_json(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert error_json(err)["error"] == "usage"


def test_invalid_config_file_is_a_usage_error(capsys, data_dir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(capsys, "train", "--data", data_dir, "--run-dir", tmp_path / "r", "--config", bad)
    assert code == 2
    bad.write_text(json.dumps({"epochs": -1}))
    code, _, err = run(capsys, "train", "--data", data_dir, "--run-dir", tmp_path / "r", "--config", bad)
    assert code == 2 and "invalid configuration" in error_json(err)["message"]


def test_gen_data_reports_complementarity(capsys, tmp_path):
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "d", "--n-samples", "40", "--T", "30")
    assert code == 0
    summary = json.loads(out)
    assert summary["complementarity"]["certified"]
    assert (tmp_path / "d" / "manifest.json").exists()
    code, _, err = run(capsys, "gen-data", "--out", tmp_path / "d", "--n-samples", "40")
    assert code == 2 and "--force" in error_json(err)["message"]
    assert run(capsys, "gen-data", "--out", tmp_path / "d", "--n-samples", "40", "--force")[0] == 0


def test_spec_file_and_flag_precedence(capsys, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_samples": 24, "T": 30, "seed": 5}))
    assert run(capsys, "gen-data", "--spec", spec, "--out", tmp_path / "a", "--T", "20")[0] == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert (manifest["n_samples"], manifest["T"], manifest["seed"]) == (24, 20, 5)


def test_env_seed_overrides_config_but_not_flags(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("DTK_SEED", "9")
    assert run(capsys, "gen-data", "--out", tmp_path / "a", "--n-samples", "8", "--T", "20")[0] == 0
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 9
    assert run(capsys, "gen-data", "--out", tmp_path / "b", "--n-samples", "8", "--T", "20", "--seed", "2")[0] == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 2
    monkeypatch.setenv("DTK_SEED", "nine")
    assert run(capsys, "gen-data", "--out", tmp_path / "c", "--n-samples", "8")[0] == 2


def test_train_eval_pipeline(capsys, data_dir, tmp_path):
    run_dir = tmp_path / "sup"
    code, out, _ = run(capsys, "train", "--data", data_dir, "--run-dir", run_dir, "--epochs", "2",
                       "--batch-size", "16", "--csv")
    assert code == 0
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and (run_dir / "metrics.csv").exists()
    resolved = json.loads((run_dir / "config.json").read_text())
    assert resolved["train"]["epochs"] == 2 and resolved["train"]["batch_size"] == 16
    code, out, _ = run(capsys, "eval", "--run-dir", run_dir, "--data", data_dir, "--out", tmp_path / "ev")
    assert code == 0 and 0.0 <= json.loads(out)["accuracy"] <= 1.0
    assert (tmp_path / "ev" / "metrics.jsonl").exists()
    code, _, err = run(capsys, "train", "--data", data_dir, "--run-dir", run_dir, "--epochs", "1")
    assert code == 2


def test_repeated_runs_write_identical_metrics(capsys, data_dir, tmp_path):
    for name in ("a", "b"):
        argv = ["train", "--data", data_dir, "--run-dir", tmp_path / name, "--mode", "unsupervised",
                "--epochs", "1", "--batch-size", "16", "--seed", "3"]
        assert run(capsys, *argv)[0] == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_fewshot_writes_one_record_per_k(capsys, data_dir, coarse_run, tmp_path):
    code, out, _ = run(capsys, "fewshot", "--run-dir", coarse_run, "--data", data_dir, "--out", tmp_path / "fs",
                       "--K", "2,4", "--probe-epochs", "10")
    assert code == 0
    records = [json.loads(l) for l in (tmp_path / "fs" / "metrics.jsonl").read_text().splitlines()]
    assert [r["K"] for r in records] == [2, 4]
    assert all(r["frozen_audit"] for r in records)
    assert json.loads((tmp_path / "fs" / "config.json").read_text())["values"] == [2, 4]


def test_fewshot_names_deficient_class(capsys, data_dir, coarse_run, tmp_path):
    from dtk.datasets import load_dataset, save_dataset
    ds = load_dataset(data_dir)
    labels = ds.labels()
    keep = [i for i in range(len(ds)) if labels[i] != 3]
    keep += [i for i in range(len(ds)) if labels[i] == 3][:3]
    save_dataset(ds.select(sorted(keep)), tmp_path / "thin")
    code, _, err = run(capsys, "fewshot", "--run-dir", coarse_run, "--data", tmp_path / "thin",
                       "--out", tmp_path / "fs", "--K", "5")
    assert code == 1
    info = error_json(err)
    assert info["error"] == "SubsetError" and "3" in info["deficient"]
    assert "class 3" in info["message"]


def test_probe_refuses_supervised_run(capsys, data_dir, coarse_run, tmp_path):
    code, _, err = run(capsys, "probe", "--run-dir", coarse_run, "--data", data_dir, "--out", tmp_path / "p")
    assert code == 1 and "unsupervised" in error_json(err)["message"]


def test_inspect_table_and_json(capsys):
    code, out, _ = run(capsys, "inspect", "--profile", "desk")
    assert code == 0 and "trainable" in out and "total" in out
    code, out, _ = run(capsys, "inspect", "--json")
    c = json.loads(out)
    assert c["trainable"] + c["frozen"] == c["total"]
    assert set(c["groups"]) >= {"backbone", "adapter.text.tokens", "adapter.time.gates"}


def test_gradcheck_exit_code_follows_report(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--profile", "gradcheck", "--max-entries", "4", "--out", tmp_path / "g")
    assert code == 0 and json.loads(out)["pass"]
    records = [json.loads(l) for l in (tmp_path / "g" / "metrics.jsonl").read_text().splitlines()]
    assert all(r["pass"] for r in records)
