"""Command-line interface: gen, train, eval, theorem, compare and replay.

Every command writes a ``manifest.json`` (or ``<file>.manifest.json`` for
single-file outputs) holding the resolved config, seeds, input hashes and
output hashes.  ``mipl-cdl replay MANIFEST --out DIR`` reruns the command
from the manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from mipl_cdl import __version__, calibration, config as config_mod, data, plotting
from mipl_cdl.errors import ConfigurationError, DatasetFormatError, NumericalError, UsageError
from mipl_cdl.model import MiplModel
from mipl_cdl.theory import theorem_sweep
from mipl_cdl.training import TrainingAborted, evaluate, fit_and_evaluate, run_experiment

MANIFEST_SCHEMA = "mipl-cdl/manifest-v1"
METRICS_SCHEMA = "mipl-cdl/metrics-v1"

log = logging.getLogger("mipl_cdl")


class OutputExists(UsageError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> Path:
    data.atomic_write_text(path, text)
    return path


def _prepare_dir(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExists(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare_file(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not force:
        raise OutputExists(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _input_entry(path) -> dict:
    return {"path": str(Path(path).resolve()), "sha256": sha256_file(path)}


def _write_manifest(path: Path, command: str, cfg: config_mod.RunConfig, started: str, outputs,
                    inputs=None, extra=None) -> Path:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "config_schema": config_mod.SCHEMA,
        "version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        "seeds": {"data": cfg.data.seed, "run": cfg.train.seed, "theorem": cfg.theorem.seed},
        "inputs": inputs or {},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    return _write(path, _json(manifest))


def _load_config(path, data_seed=None, run_seed=None) -> config_mod.RunConfig:
    cfg = config_mod.load(path) if path else config_mod.from_dict({})
    return cfg.with_seeds(data_seed, run_seed)


# -- output writers ----------------------------------------------------------

def predictions_csv(records) -> str:
    k = len(records[0].probs) if records else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bag_id", "true_label", "predicted", "confidence", "correct", "candidates"]
               + [f"p_{c}" for c in range(1, k + 1)])
    for r in records:
        w.writerow([r.bag_id, r.true_label, r.predicted, repr(r.confidence), int(r.correct),
                    ";".join(str(c) for c in r.candidates)] + [repr(float(p)) for p in r.probs])
    return buf.getvalue()


def _eval_metrics(ev) -> dict:
    return {
        "accuracy": ev.accuracy,
        "ece": ev.ece,
        "breakdown": ev.breakdown,
        "reliability": [dict(zip(calibration.CSV_HEADER, row)) for row in ev.reliability.rows()],
        "test_bags": len(ev.records),
    }


def _write_eval_outputs(out: Path, ev, title: str) -> list:
    csv_text = calibration.reliability_csv(ev.reliability)
    paths = [
        _write(out / "predictions.csv", predictions_csv(ev.records)),
        _write(out / "reliability.csv", csv_text),
    ]
    # the figure is derived from the exported CSV, which is the contract
    paths.append(plotting.reliability_diagram(calibration.parse_reliability_csv(csv_text),
                                              out / "reliability.svg", title))
    return paths


# -- commands ----------------------------------------------------------------

def cmd_gen(cfg: config_mod.RunConfig, out: Path, force: bool) -> dict:
    started = _now()
    out = _prepare_file(out, force)
    dataset = data.generate_synthetic(cfg.data)
    data.save(dataset, out)
    manifest = out.with_name(out.name + ".manifest.json")
    _write_manifest(manifest, "gen", cfg, started, [out])
    print(f"wrote {len(dataset)} bags (k={dataset.k}, d={dataset.d}) to {out}")
    return {"dataset": str(out), "manifest": str(manifest)}


def cmd_train(cfg: config_mod.RunConfig, dataset_path, out: Path, force: bool) -> dict:
    started = _now()
    out = _prepare_dir(out, force)
    inputs = {}
    if dataset_path is not None:
        dataset = data.load(dataset_path)
        inputs["dataset"] = _input_entry(dataset_path)
    else:
        dataset = data.generate_synthetic(cfg.data)
    exp = cfg.experiment
    train_set, test_set = data.split(dataset, exp.train_ratio, seed=cfg.data.seed)
    model_cfg = exp.model.build(dataset.d, dataset.k)
    try:
        result = fit_and_evaluate(train_set, test_set, model_cfg, exp.train, exp.n_bins)
    except TrainingAborted as exc:
        diag = {"error": str(exc), "epoch": exc.epoch, "batch": exc.batch, "op": exc.op,
                "config": cfg.to_dict()}
        _write(out / "error.json", _json(diag))
        raise
    metrics = {"schema": METRICS_SCHEMA, **result.metrics()}
    result.model.save(out / "checkpoint.json")
    data.save(test_set, out / "test_split.jsonl")
    outputs = [out / "checkpoint.json", out / "test_split.jsonl",
               _write(out / "metrics.json", _json(metrics)),
               _write(out / "config.yaml", config_mod.dumps(cfg))]
    outputs += _write_eval_outputs(out, result.test, f"{exp.train.loss} / {exp.model.attention}: "
                                                     f"ECE = {result.ece:.4f}")
    outputs.append(plotting.loss_trace(result.trace.loss, out / "loss.svg",
                                       result.trace.tau if exp.model.attention == "mam" else None))
    _write_manifest(out / "manifest.json", "train", cfg, started, outputs, inputs,
                    {"duration_seconds": round(result.duration, 3)})
    print(f"accuracy\t{result.accuracy:.4f}\nece\t{result.ece:.4f}")
    return metrics


def cmd_eval(checkpoint, dataset_path, out: Path, force: bool, n_bins: int = 15) -> dict:
    started = _now()
    out = _prepare_dir(out, force)
    model = MiplModel.load(checkpoint)
    dataset = data.load(dataset_path)
    ev = evaluate(model, dataset, n_bins)
    metrics = {"schema": METRICS_SCHEMA, **_eval_metrics(ev)}
    outputs = [_write(out / "metrics.json", _json(metrics))]
    outputs += _write_eval_outputs(out, ev, f"ECE = {ev.ece:.4f}")
    inputs = {"checkpoint": _input_entry(checkpoint), "dataset": _input_entry(dataset_path)}
    _write_manifest(out / "manifest.json", "eval", config_mod.from_dict({}), started, outputs, inputs,
                    {"n_bins": n_bins, "config": None, "seeds": None})
    print(f"accuracy\t{ev.accuracy:.4f}\nece\t{ev.ece:.4f}")
    return metrics


def cmd_theorem(cfg: config_mod.RunConfig, out: Path, force: bool) -> dict:
    started = _now()
    out = _prepare_file(out, force)
    t = cfg.theorem
    report = theorem_sweep(n=t.n, seed=t.seed, k_max=t.k_max, variants=tuple(t.variants), gamma=t.gamma,
                           gamma_cap=t.gamma_cap)
    body = report.to_dict()
    _write(out, _json(body))
    manifest = out.with_name(out.name + ".manifest.json")
    _write_manifest(manifest, "theorem", cfg, started, [out])
    print(f"tuples\t{report.tuples}\nchecked\t{report.checked}\nviolations\t{report.violations}\n"
          f"max_violation\t{report.max_violation:.3e}")
    return body


def cmd_compare(cfg_a: config_mod.RunConfig, cfg_b: config_mod.RunConfig, repeats: int, out: Path,
                force: bool) -> dict:
    if asdict(cfg_a.data) != asdict(cfg_b.data) or cfg_a.experiment.train_ratio != cfg_b.experiment.train_ratio:
        raise ConfigurationError("compare needs both configs to share the data section and train_ratio")
    started = _now()
    out = _prepare_dir(out, force)
    res_a = run_experiment(cfg_a.experiment, repeats)
    res_b = run_experiment(cfg_b.experiment, repeats)
    header = ["row", "data_seed", "run_seed_a", "run_seed_b", "accuracy_a", "ece_a", "accuracy_b", "ece_b",
              "delta_accuracy", "delta_ece"]
    rows = []
    for i, (ra, rb) in enumerate(zip(res_a.runs, res_b.runs)):
        rows.append([i, res_a.seeds[i][0], res_a.seeds[i][1], res_b.seeds[i][1], ra.accuracy, ra.ece,
                     rb.accuracy, rb.ece, rb.accuracy - ra.accuracy, rb.ece - ra.ece])
    arr = np.array([r[4:] for r in rows], dtype=np.float64)
    rows.append(["mean", "", "", ""] + arr.mean(axis=0).tolist())
    rows.append(["std", "", "", ""] + arr.std(axis=0).tolist())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    summary = {"a": res_a.summary(), "b": res_b.summary(),
               "delta_accuracy_mean": float(arr[:, 4].mean()), "delta_ece_mean": float(arr[:, 5].mean()),
               "labels": {"a": cfg_a.train.loss, "b": cfg_b.train.loss},
               "breakdown_b_train": [r.train_breakdown for r in res_b.runs]}
    label_a, label_b = f"A: {cfg_a.train.loss}", f"B: {cfg_b.train.loss}"
    outputs = [_write(out / "compare.csv", buf.getvalue()), _write(out / "compare.json", _json(summary)),
               plotting.compare_figure(arr[:, 1], arr[:, 3], [label_a, label_b], out / "compare.svg")]
    _write_manifest(out / "manifest.json", "compare", cfg_a, started, outputs,
                    extra={"config_b": cfg_b.to_dict(), "repeats": repeats})
    sys.stdout.write(buf.getvalue())
    return summary


def cmd_replay(manifest_path, out: Path, force: bool) -> dict:
    """Rerun a command from its manifest; inputs are verified by hash first."""
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ConfigurationError(f"{manifest_path} is not a {MANIFEST_SCHEMA} manifest")
    inputs = manifest.get("inputs", {})
    for name, entry in inputs.items():
        if sha256_file(entry["path"]) != entry["sha256"]:
            raise ConfigurationError(f"input {name} at {entry['path']} changed since the run")
    cfg = config_mod.from_dict(manifest["config"])
    command = manifest["command"]
    out = Path(out)
    if command == "gen":
        name = next(iter(manifest["outputs"]))
        cmd_gen(cfg, out / name, force)
    elif command == "train":
        cmd_train(cfg, inputs.get("dataset", {}).get("path"), out, force)
    elif command == "eval":
        cmd_eval(inputs["checkpoint"]["path"], inputs["dataset"]["path"], out, force, manifest["n_bins"])
    elif command == "theorem":
        name = next(iter(manifest["outputs"]))
        cmd_theorem(cfg, out / name, force)
    elif command == "compare":
        cmd_compare(cfg, config_mod.from_dict(manifest["config_b"]), manifest["repeats"], out, force)
    else:
        raise ConfigurationError(f"unknown command {command!r} in manifest")
    return manifest


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mipl-cdl", description="Multi-instance partial-label learning "
                                     "with calibration-aware disambiguation losses.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if seeds:
            p.add_argument("--config", type=Path, help="YAML config (defaults if omitted)")
            p.add_argument("--data-seed", type=int, help="override data.seed")
            p.add_argument("--seed", type=int, help="override the run seed (train.seed)")

    p = sub.add_parser("gen", help="generate a synthetic bag dataset")
    common(p)

    p = sub.add_parser("train", help="train, evaluate on the held-out split, write artifacts")
    common(p)
    p.add_argument("--dataset", type=Path, help="dataset file; generated from the config if omitted")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p, seeds=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--bins", type=int, default=15)

    p = sub.add_parser("theorem", help="randomized check of the CDL lower bound")
    common(p)
    p.add_argument("--n", type=int, help="number of random tuples")
    p.add_argument("--gamma", type=int, help="fix gamma instead of drawing it")
    p.add_argument("--variants", choices=["cc", "cn", "both"])

    p = sub.add_parser("compare", help="paired-seed A/B comparison of two configs")
    common(p)
    p.add_argument("--config-b", type=Path, required=True)
    p.add_argument("--repeats", type=int, default=10)

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gen":
        cmd_gen(_load_config(args.config, args.data_seed, args.seed), args.out, args.force)
    elif args.command == "train":
        cmd_train(_load_config(args.config, args.data_seed, args.seed), args.dataset, args.out, args.force)
    elif args.command == "eval":
        if not args.checkpoint.exists():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        cmd_eval(args.checkpoint, args.dataset, args.out, args.force, args.bins)
    elif args.command == "theorem":
        cfg = _load_config(args.config)
        theorem = cfg.theorem
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.n is not None:
            overrides["n"] = args.n
        if args.gamma is not None:
            overrides["gamma"] = args.gamma
        if args.variants is not None:
            overrides["variants"] = ("cc", "cn") if args.variants == "both" else (args.variants,)
        if overrides:
            cfg = replace(cfg, theorem=config_mod.TheoremConfig(**{**asdict(theorem), **overrides}))
        cmd_theorem(cfg, args.out, args.force)
    elif args.command == "compare":
        cfg_a = _load_config(args.config, args.data_seed, args.seed)
        cfg_b = _load_config(args.config_b, args.data_seed, args.seed)
        cmd_compare(cfg_a, cfg_b, args.repeats, args.out, args.force)
    elif args.command == "replay":
        cmd_replay(args.manifest, args.out, args.force)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, DatasetFormatError, UsageError, NumericalError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
