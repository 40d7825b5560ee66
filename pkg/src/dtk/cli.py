"""Command-line interface: ``dtk <subcommand> [flags]``.

Configuration precedence for training runs: built-in defaults, then the
``--config`` JSON file, then the ``DTK_SEED`` environment variable (seed
only), then explicit flags.  Exit status is 0 on success, 2 on usage errors
(bad flags, missing inputs, conflicting configuration) and 1 on runtime
failures; every failure also prints one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


from . import trainer
from .config import FEWSHOT_KS, PROFILES, TrainConfig, profile
from .datasets import SyntheticSpec, complementarity_report, generate_synthetic, load_dataset, save_dataset
from .errors import ContractError, DTKError, SpecError, SubsetError, TrainingDiverged
from .model import census, model_param_specs
from .objectives import VARIANTS

log = logging.getLogger("dtk")
DEFAULT_Q = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


class UsageError(Exception):
    """Raised for problems the user fixes by changing the command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(cls):
    return lambda prog: cls(prog, max_help_position=34, width=100)


def _add(p, *flags, default=None, shown=None, help="", **kw):
    """Add a flag whose help text always states the default."""
    shown = default if shown is None else shown
    note = "required" if kw.get("required") else f"default: {shown}"
    p.add_argument(*flags, default=default, help=f"{help} ({note})", **kw)


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    tc = TrainConfig()
    sp = SyntheticSpec()
    parser = _Parser(prog="dtk", description="Dual-adapter time-series/text models on a frozen transformer.",
                     formatter_class=_fmt(argparse.HelpFormatter))
    _add(parser, "-v", "--verbose", action="store_true", default=False, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset", formatter_class=_fmt(argparse.HelpFormatter))
    _add(g, "--out", required=True, help="output directory")
    _add(g, "--spec", help="JSON file with synthetic-spec fields; flags below override it")
    _add(g, "--n-samples", type=int, shown=sp.n_samples, help="number of samples")
    _add(g, "--T", type=int, dest="T", shown=sp.T, help="series length")
    _add(g, "--d", type=int, dest="d", shown=sp.d, help="series channels")
    _add(g, "--n-coarse", type=int, shown=sp.n_coarse, help="coarse classes")
    _add(g, "--n-fine", type=int, shown=sp.n_fine, help="fine classes")
    _add(g, "--noise", type=float, shown=sp.noise, help="Gaussian noise std added to the series")
    _add(g, "--hint-accuracy", type=float, shown=sp.hint_accuracy,
         help="fraction of reports whose history line names the true coarse class")
    _add(g, "--motif-rate", type=float, shown=sp.motif_rate,
         help="fraction of series that carry the coarse-class spike train")
    _add(g, "--period", type=int, shown=sp.period, help="spike-train period in timestamps")
    _add(g, "--n-remarks", type=int, shown=sp.n_remarks, help="routine remarks per report")
    _add(g, "--no-complementarity", action="store_true", default=False,
         help="let each modality see both latent factors")
    _add(g, "--seed", type=int, shown=f"DTK_SEED or {sp.seed}", help="generator seed")
    _add(g, "--force", action="store_true", default=False, help="overwrite a non-empty output directory")

    t = sub.add_parser("train", help="supervised or contrastive training", formatter_class=_fmt(argparse.HelpFormatter))
    _add(t, "--data", required=True, help="dataset directory or JSONL file")
    _add(t, "--run-dir", required=True, help="directory for config, log and checkpoint")
    _add(t, "--config", help="JSON file with training-config fields")
    _add(t, "--mode", choices=("supervised", "unsupervised"), shown=tc.mode, help="training objective")
    _add(t, "--variant", choices=VARIANTS, shown=tc.variant, help="which adapters to build")
    _add(t, "--profile", choices=sorted(PROFILES), shown=tc.profile, help="model size profile")
    _add(t, "--label-set", choices=("fine", "coarse"), shown=tc.label_set, help="supervised targets")
    _add(t, "--lr", type=float, shown=tc.lr, help="Adam learning rate")
    _add(t, "--epochs", type=int, shown=tc.epochs, help="training epochs")
    _add(t, "--batch-size", type=int, shown=tc.batch_size, help="samples per step")
    _add(t, "--seed", type=int, shown=f"DTK_SEED or {tc.seed}", help="seed for init, split and batching")
    _add(t, "--tau", type=float, shown=tc.loss.tau, help="contrastive temperature")
    _add(t, "--noise-sigma", type=float, shown=tc.loss.noise_sigma, help="augmentation noise scale")
    _add(t, "--standard-infonce", action="store_true", default=False,
         help="include the positive pair in contrastive denominators")
    _add(t, "--csv", action="store_true", default=False, help="also write metrics.csv")
    _add(t, "--export-embeddings", action="store_true", default=False, help="write embeddings.csv")
    _add(t, "--force", action="store_true", default=False, help="overwrite a non-empty run directory")

    for name, what in (("probe", "linear probe on an unsupervised run"),
                       ("fewshot", "few-shot fine-label transfer from a coarse-pretrained run")):
        q = sub.add_parser(name, help=what, formatter_class=_fmt(argparse.HelpFormatter))
        _add(q, "--run-dir", required=True, help="trained run directory")
        _add(q, "--data", required=True, help="dataset the run was trained on")
        _add(q, "--out", required=True, help="directory for config.json and metrics.jsonl")
        if name == "probe":
            _add(q, "--q", type=_csv_floats, default=list(DEFAULT_Q), shown=",".join(map(str, DEFAULT_Q)),
                 help="comma-separated labelled proportions")
        else:
            _add(q, "--K", type=_csv_ints, dest="K", default=list(FEWSHOT_KS),
                 shown=",".join(map(str, FEWSHOT_KS)), help="comma-separated shots per fine class")
        _add(q, "--seed", type=int, shown="DTK_SEED or the run's seed", help="subset and head seed")
        _add(q, "--probe-epochs", type=int, shown="the run's value", help="full-batch steps for the head")
        _add(q, "--probe-lr", type=float, shown="the run's value", help="learning rate for the head")
        _add(q, "--csv", action="store_true", default=False, help="also write metrics.csv")
        _add(q, "--force", action="store_true", default=False, help="overwrite a non-empty output directory")

    e = sub.add_parser("eval", help="evaluate a run on one split", formatter_class=_fmt(argparse.HelpFormatter))
    _add(e, "--run-dir", required=True, help="trained run directory")
    _add(e, "--data", required=True, help="dataset directory or JSONL file")
    _add(e, "--split", choices=("train", "val", "test", "all"), default="test", help="which part to score")
    _add(e, "--out", help="optional directory for config.json and metrics.jsonl")
    _add(e, "--force", action="store_true", default=False, help="overwrite a non-empty output directory")

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit in float64",
                       formatter_class=_fmt(argparse.HelpFormatter))
    _add(c, "--seed", type=int, shown="DTK_SEED or 0", help="seed for the probe model and inputs")
    _add(c, "--max-entries", type=int, default=64, help="entries sampled per parameter tensor")
    _add(c, "--profile", choices=sorted(PROFILES), default="desk", help="model size profile")
    _add(c, "--out", help="optional directory for config.json and metrics.jsonl")
    _add(c, "--force", action="store_true", default=False, help="overwrite a non-empty output directory")

    i = sub.add_parser("inspect", help="parameter census from the model specification",
                       formatter_class=_fmt(argparse.HelpFormatter))
    _add(i, "--profile", choices=sorted(PROFILES), default="paper_shape", help="model size profile")
    _add(i, "--variant", choices=VARIANTS, default="dual", help="which adapters to count")
    _add(i, "--d", type=int, dest="d", default=12, help="series channels")
    _add(i, "--n-classes", type=int, default=4, help="classifier width")
    _add(i, "--vocab-size", type=int, shown="the profile's value", help="backbone vocabulary size")
    _add(i, "--json", action="store_true", default=False, help="print JSON instead of a table")
    _add(i, "--out", help="optional directory for config.json and metrics.jsonl")
    _add(i, "--force", action="store_true", default=False, help="overwrite a non-empty output directory")
    return parser


# -- helpers ------------------------------------------------------------------------

def _env_seed() -> int | None:
    raw = os.environ.get("DTK_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DTK_SEED must be an integer, got {raw!r}") from None


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"{p} must hold a JSON object")
    return obj


def _load_data(path):
    if not Path(path).exists():
        raise UsageError(f"no such dataset: {path}")
    return load_dataset(path)


def _require_run(path) -> Path:
    p = Path(path)
    if not (p / trainer.CONFIG_FILE).is_file():
        raise UsageError(f"{p} is not a run directory (no {trainer.CONFIG_FILE})")
    return p


def _out_dir(path, force: bool) -> Path:
    try:
        return trainer.prepare_run_dir(path, force)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None


def _write_outputs(out: Path, config: dict, records: list[dict], csv_out: bool = False) -> None:
    (out / trainer.CONFIG_FILE).write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")
    trainer.write_jsonl(out / trainer.METRICS_FILE, records)
    if csv_out:
        trainer.write_csv(out / "metrics.csv", records)


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    fields = _read_json(args.spec) if args.spec else {}
    env = _env_seed()
    if env is not None:
        fields["seed"] = env
    for key in ("n_samples", "T", "d", "n_coarse", "n_fine", "noise", "hint_accuracy", "motif_rate", "period",
                "n_remarks", "seed"):
        val = getattr(args, key)
        if val is not None:
            fields[key] = val
    if args.no_complementarity:
        fields["complementarity_mode"] = False
    try:
        spec = SyntheticSpec.from_dict(fields)
    except (SpecError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out, args.force)
    ds = generate_synthetic(spec)
    save_dataset(ds, out, spec)
    summary = {"out": str(out), "n_samples": len(ds), "checksum": ds.checksum()}
    if spec.complementarity_mode and len(ds):
        summary["complementarity"] = complementarity_report(ds)
    _print(summary)
    return 0


def resolve_train_config(args) -> TrainConfig:
    fields = _read_json(args.config) if args.config else {}
    env = _env_seed()
    if env is not None:
        fields["seed"] = env
    flag_map = {"mode": args.mode, "variant": args.variant, "profile": args.profile,
                "label_set": args.label_set, "lr": args.lr, "epochs": args.epochs,
                "batch_size": args.batch_size, "seed": args.seed}
    fields.update({k: v for k, v in flag_map.items() if v is not None})
    loss = dict(fields.get("loss") or {})
    for key, val in (("tau", args.tau), ("noise_sigma", args.noise_sigma)):
        if val is not None:
            loss[key] = val
    if args.standard_infonce:
        loss["standard"] = True
    if loss:
        fields["loss"] = loss
    try:
        cfg = TrainConfig.from_dict(fields)
        cfg.model_config()
    except (ContractError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    ds = _load_data(args.data)
    run_dir = _out_dir(args.run_dir, args.force)
    result = trainer.train(cfg, ds, run_dir, force=True, csv_out=args.csv, export_embeddings=args.export_embeddings)
    final = result.log[-1] if result.log else {}
    _print({"run_dir": str(run_dir), "epochs": len(result.log), "final": final})
    return 0


def _cmd_probe(args, kind: str, values: list) -> int:
    run_dir = _require_run(args.run_dir)
    ds = _load_data(args.data)
    seed = args.seed if args.seed is not None else _env_seed()
    out = _out_dir(args.out, args.force)
    metrics, audit = trainer.probe(run_dir, ds, kind, values, seed=seed, probe_epochs=args.probe_epochs,
                                   probe_lr=args.probe_lr)
    key = "q" if kind == "linear" else "K"
    records = [{key: v, **m.to_dict(), "frozen_audit": audit} for v, m in zip(values, metrics)]
    run_cfg = json.loads((run_dir / trainer.CONFIG_FILE).read_text())
    resolved = {"command": "probe" if kind == "linear" else "fewshot", "run_dir": str(run_dir),
                "data": str(args.data), "values": values, "seed": seed, "probe_epochs": args.probe_epochs,
                "probe_lr": args.probe_lr, "run_config": run_cfg}
    _write_outputs(out, resolved, records, args.csv)
    _print({"out": str(out), "frozen_audit": audit,
            "accuracy": {str(v): round(m.accuracy, 6) for v, m in zip(values, metrics)}})
    return 0 if audit else 1


def cmd_probe(args) -> int:
    if not args.q or any(not 0 < q <= 1 for q in args.q):
        raise UsageError("--q values must lie in (0, 1]")
    return _cmd_probe(args, "linear", args.q)


def cmd_fewshot(args) -> int:
    if not args.K or any(k < 1 for k in args.K):
        raise UsageError("--K values must be positive integers")
    return _cmd_probe(args, "fewshot", args.K)


def cmd_eval(args) -> int:
    run_dir = _require_run(args.run_dir)
    ds = _load_data(args.data)
    out = _out_dir(args.out, args.force) if args.out else None
    m = trainer.evaluate(run_dir, ds, args.split)
    record = {"split": args.split, **m.to_dict()}
    if out is not None:
        _write_outputs(out, {"command": "eval", "run_dir": str(run_dir), "data": str(args.data),
                             "split": args.split}, [record])
    _print(record)
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    out = _out_dir(args.out, args.force) if args.out else None
    report = trainer.grad_check(seed=seed, max_entries=args.max_entries, profile=args.profile)
    if out is not None:
        records = [{"path": path, "group": g, "max_rel_err": err, "pass": err < report["tolerance"]}
                   for path, rep in report["paths"].items() for g, err in rep["groups"].items()]
        _write_outputs(out, {"command": "gradcheck", "seed": seed, "max_entries": args.max_entries,
                             "profile": args.profile}, records)
    _print(report)
    return 0 if report["pass"] else 1


def census_table(c: dict) -> str:
    rows = [(g, v["trainable"], v["frozen"]) for g, v in c["groups"].items()]
    width = max([len("group")] + [len(r[0]) for r in rows])
    lines = [f"{'group':<{width}}  {'trainable':>12}  {'frozen':>12}"]
    lines += [f"{g:<{width}}  {tr:>12,}  {fr:>12,}" for g, tr, fr in rows]
    lines.append("-" * len(lines[0]))
    lines.append(f"{'total':<{width}}  {c['trainable']:>12,}  {c['frozen']:>12,}")
    lines.append(f"all parameters: {c['total']:,}; trainable fraction: {100 * c['trainable_fraction']:.3f}%")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    mcfg = profile(args.profile)
    vocab = args.vocab_size or mcfg.vocab_size or mcfg.backbone.vocab_size
    specs = model_param_specs(mcfg, args.d, args.n_classes, vocab, args.variant,
                              mcfg.text_vocab_size or vocab)
    c = census(specs)
    c["profile"], c["variant"] = args.profile, args.variant
    if args.out:
        out = _out_dir(args.out, args.force)
        _write_outputs(out, {"command": "inspect", "profile": args.profile, "variant": args.variant,
                             "d": args.d, "n_classes": args.n_classes, "vocab_size": vocab,
                             "model": mcfg.to_dict()}, [c])
    print(json.dumps(c, sort_keys=True) if args.json else census_table(c))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "probe": cmd_probe, "fewshot": cmd_fewshot,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def _fail(code: int, kind: str, message: str, **extra) -> int:
    err = {"error": kind, "message": message, "exit_code": code}
    err.update(extra)
    print(json.dumps(err, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(2, "usage", str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(2, "usage", str(exc))
    except SubsetError as exc:
        return _fail(1, type(exc).__name__, str(exc),
                     deficient={str(k): v for k, v in (exc.deficient or {}).items()})
    except TrainingDiverged as exc:
        return _fail(1, type(exc).__name__, str(exc), diagnostics=exc.diagnostics)
    except (DTKError, OSError) as exc:
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
