"""Command-line entry point: ingest, train, sweep, evaluate, report, synth.

All commands read a JSON run config (``--config``), let a few flags
override it, derive every random choice from the single config seed, and
stamp each output file with the effective config's hash plus that seed.
Outputs carry no timestamps, so a rerun with identical inputs is
byte-identical.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 undefined
metric, 1 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .encoding import PackedDataset, encode, encoder_from_json, encoder_to_json, fit_encoder
from .eventlog import (
    BiasSpec,
    EventLogError,
    SchemaConfig,
    extract_prefixes,
    generate_synthetic_log,
    parse_event_log,
    read_samples_jsonl,
    sample_to_dict,
    split_cases,
    validation_split,
    write_event_log,
)
from .metrics import GroupedScores, UndefinedMetricError, density_curve, write_density_csv
from .nn import CompositeLossConfig, Hyper
from .nn import predict
from .train import (
    TrainConfig,
    default_lambdas,
    evaluate,
    grid_search,
    lambda_sweep,
    load_checkpoint,
    pareto_front,
    save_checkpoint,
    train_model,
    write_sweep_csv,
)
from .transport import SinkhornConfig

__all__ = ["main", "ConfigError", "MissingArtifactError"]

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_UNDEFINED = 4

TRAIN_SAMPLES = "train.jsonl"
VALID_SAMPLES = "valid.jsonl"
TEST_SAMPLES = "test.jsonl"
ENCODER_FILE = "encoder.json"
SUMMARY_FILE = "summary.json"
CHECKPOINT_FILE = "checkpoint.json"
GRID_FILE = "grid.json"
SWEEP_FILE = "sweep.csv"
REPORT_FILE = "eval_report.json"
SCORES_FILE = "test_scores.csv"


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 2."""


class MissingArtifactError(FileNotFoundError):
    """A required artifact from an earlier stage is absent; exit code 3."""


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(args) -> dict:
    config = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file '{path}' does not exist")
        try:
            config = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file '{path}' is not valid JSON: {exc}") from None
        if not isinstance(config, dict):
            raise ConfigError("config root must be a JSON object")
    if args.seed is not None:
        config["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        config["lambda"] = args.lam
    if getattr(args, "drop_sensitive", False):
        config["drop_sensitive"] = True
    if getattr(args, "max_len", None) is not None:
        config["max_len"] = args.max_len
    if getattr(args, "sinkhorn_eps", None) is not None:
        config.setdefault("sinkhorn", {})["epsilon"] = args.sinkhorn_eps
    if getattr(args, "sinkhorn_iters", None) is not None:
        config.setdefault("sinkhorn", {})["max_iters"] = args.sinkhorn_iters
    if args.out is not None:
        config["out"] = args.out
    return config


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _provenance(config: dict) -> dict:
    return {"config_hash": _config_hash(config), "seed": _seed(config)}


def _provenance_comment(config: dict) -> str:
    prov = _provenance(config)
    return f"config_hash={prov['config_hash']} seed={prov['seed']}"


def _seed(config: dict) -> int:
    seed = config.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("'seed' must be a non-negative integer")
    return seed


def _out_dir(config: dict, create: bool = True) -> Path:
    if "out" not in config:
        raise ConfigError("missing 'out' (output directory)")
    out = Path(config["out"])
    if create:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _require(config: dict, key: str):
    if key not in config:
        raise ConfigError(f"missing required config field '{key}'")
    return config[key]


def _schema_from_config(config: dict) -> SchemaConfig:
    raw = _require(config, "schema")
    if isinstance(raw, str):
        path = Path(raw)
        if not path.is_file():
            raise ConfigError(f"schema file '{path}' does not exist")
        raw = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError("'schema' must be an object or a path to one")
    # accept the canonical {"attributes": {...}} wrapper or a flat name->kind map
    if not isinstance(raw.get("attributes"), dict):
        raw = {"attributes": raw}
    try:
        return SchemaConfig.from_dict(raw)
    except EventLogError as exc:
        raise ConfigError(f"bad schema: {exc}") from None


def _fraction(config: dict, key: str, default: float) -> float:
    value = config.get(key, default)
    if not isinstance(value, (int, float)) or not 0.0 < value < 1.0:
        raise ConfigError(f"'{key}' must be a number in (0,1)")
    return float(value)


def _max_len(config: dict) -> int:
    value = config.get("max_len", 6)
    if not isinstance(value, int) or value < 1:
        raise ConfigError("'max_len' must be an integer >= 1")
    return value


def _sinkhorn_config(config: dict) -> SinkhornConfig:
    raw = config.get("sinkhorn", {})
    try:
        return SinkhornConfig(
            epsilon=float(raw.get("epsilon", 0.01)),
            max_iters=int(raw.get("max_iters", 200)),
            tol=float(raw.get("tol", 1e-6)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad sinkhorn config: {exc}") from None


def _train_config(config: dict) -> TrainConfig:
    raw = config.get("train", {})
    defaults = TrainConfig()
    try:
        return TrainConfig(
            max_epochs=int(raw.get("max_epochs", defaults.max_epochs)),
            patience=int(raw.get("patience", defaults.patience)),
            plateau_factor=float(raw.get("plateau_factor", defaults.plateau_factor)),
            plateau_patience=int(raw.get("plateau_patience", defaults.plateau_patience)),
            plateau_margin=float(raw.get("plateau_margin", defaults.plateau_margin)),
            betas=tuple(raw.get("betas", defaults.betas)),
            adam_eps=float(raw.get("adam_eps", defaults.adam_eps)),
            weight_decay=float(raw.get("weight_decay", defaults.weight_decay)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from None


def _hyper_from_dict(raw: dict) -> Hyper:
    try:
        return Hyper(
            layers=int(raw.get("layers", 1)),
            hidden=int(raw.get("hidden", 16)),
            bidirectional=bool(raw.get("bidirectional", False)),
            batch=int(raw.get("batch", 512)),
            lr=float(raw.get("lr", 1e-3)),
            dropout=float(raw.get("dropout", 0.2)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad hyper config: {exc}") from None


def _lambda(config: dict, default: float = 0.0) -> float:
    value = config.get("lambda", default)
    if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
        raise ConfigError("'lambda' must be a number in [0,1]")
    return float(value)


def _lambdas(config: dict) -> list:
    raw = config.get("sweep")
    if raw is None:
        return default_lambdas()
    if isinstance(raw, list):
        values = [float(v) for v in raw]
    elif isinstance(raw, dict):
        start = float(raw.get("start", 0.0))
        stop = float(raw.get("stop", 0.5))
        step = float(raw.get("step", 0.05))
        if step <= 0 or stop < start:
            raise ConfigError("'sweep' range must have step > 0 and stop >= start")
        count = int(round((stop - start) / step)) + 1
        values = [round(start + i * step, 10) for i in range(count)]
    else:
        raise ConfigError("'sweep' must be a list of lambdas or {start, stop, step}")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"sweep lambda {v} outside [0,1]")
    return values


def _artifact(out: Path, name: str) -> Path:
    path = out / name
    if not path.is_file():
        raise MissingArtifactError(f"missing artifact '{path}' (run the earlier stage first)")
    return path


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_samples_with_provenance(samples, path: Path, provenance: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_provenance": provenance}, sort_keys=True))
        fh.write("\n")
        for sample in samples:
            fh.write(json.dumps(sample_to_dict(sample), sort_keys=True))
            fh.write("\n")


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_packed(out: Path, name: str, encoder) -> PackedDataset:
    samples = read_samples_jsonl(_artifact(out, name))
    return PackedDataset.from_encoded([encode(encoder, s) for s in samples])


# ---------------------------------------------------------------------------
# commands


def _split_stats(samples) -> dict:
    n = len(samples)
    y = np.array([s.outcome for s in samples])
    s1 = np.array([s.sensitive for s in samples])
    stats = {"n_prefixes": n}
    if n == 0:
        return stats
    stats["pct_positive"] = float(100.0 * y.mean())
    stats["pct_s1"] = float(100.0 * s1.mean())
    group0 = y[s1 == 0]
    group1 = y[s1 == 1]
    stats["pct_s0_positive"] = float(100.0 * group0.mean()) if group0.size else None
    stats["pct_s1_positive"] = float(100.0 * group1.mean()) if group1.size else None
    return stats


def cmd_synth(config: dict) -> int:
    out = _out_dir(config)
    seed = _seed(config)
    raw_spec = config.get("bias_spec")
    if raw_spec is not None:
        spec = BiasSpec.from_dict(raw_spec)
    else:
        preset = config.get("bias_preset", "high")
        n_cases = config.get("n_cases", 2000)
        if not isinstance(n_cases, int) or n_cases < 1:
            raise ConfigError("'n_cases' must be a positive integer")
        spec = BiasSpec.preset(preset, n_cases=n_cases)
    log = generate_synthetic_log(spec, seed)

    log_path = out / "log.csv"
    write_event_log(log, log_path)
    text = log_path.read_text(encoding="utf-8")
    log_path.write_text(f"# {_provenance_comment(config)}\n{text}", encoding="utf-8")

    schema_payload = log.schema.to_dict()
    schema_payload["provenance"] = _provenance(config)
    _write_json(out / "schema.json", schema_payload)
    spec_payload = spec.to_dict()
    spec_payload["provenance"] = _provenance(config)
    _write_json(out / "bias_spec.json", spec_payload)
    print(f"wrote {log_path} ({len(log)} cases)")
    return EXIT_OK


def cmd_ingest(config: dict) -> int:
    out = _out_dir(config)
    seed = _seed(config)
    log_path = Path(_require(config, "log"))
    if not log_path.is_file():
        raise ConfigError(f"log file '{log_path}' does not exist")
    schema = _schema_from_config(config)
    target = _require(config, "target_activity")
    sensitive_attr = config.get("sensitive_attr", "case:protected")
    drop_sensitive = bool(config.get("drop_sensitive", False))
    max_len = _max_len(config)
    max_gen_len = config.get("max_gen_len", max_len)
    if not isinstance(max_gen_len, int) or max_gen_len < 1:
        raise ConfigError("'max_gen_len' must be an integer >= 1")

    log = parse_event_log(log_path, schema)
    train_log, test_log = split_cases(log, _fraction(config, "test_fraction", 0.2), seed)
    train_all = extract_prefixes(train_log, target, sensitive_attr, max_gen_len)
    test_samples = extract_prefixes(test_log, target, sensitive_attr, max_gen_len)
    train_samples, valid_samples = validation_split(
        train_all, _fraction(config, "valid_fraction", 0.2), seed
    )
    if not train_samples:
        raise ConfigError("ingest produced an empty training set")
    encoder = fit_encoder(train_samples, schema, max_len, drop_sensitive, sensitive_attr)

    prov = _provenance(config)
    _write_samples_with_provenance(train_samples, out / TRAIN_SAMPLES, prov)
    _write_samples_with_provenance(valid_samples, out / VALID_SAMPLES, prov)
    _write_samples_with_provenance(test_samples, out / TEST_SAMPLES, prov)

    encoder_payload = json.loads(encoder_to_json(encoder))
    encoder_payload["provenance"] = prov
    _write_json(out / ENCODER_FILE, encoder_payload)

    _write_json(
        out / SUMMARY_FILE,
        {
            "provenance": prov,
            "cases": {"train": len(train_log), "test": len(test_log)},
            "splits": {
                "train": _split_stats(train_samples),
                "valid": _split_stats(valid_samples),
                "test": _split_stats(test_samples),
            },
        },
    )
    print(
        f"ingested {len(log)} cases -> {len(train_samples)} train / "
        f"{len(valid_samples)} valid / {len(test_samples)} test prefixes"
    )
    return EXIT_OK


def _load_encoder(out: Path):
    return encoder_from_json(_artifact(out, ENCODER_FILE).read_text(encoding="utf-8"))


def cmd_train(config: dict) -> int:
    out = _out_dir(config)
    seed = _seed(config)
    encoder = _load_encoder(out)
    train_data = _load_packed(out, TRAIN_SAMPLES, encoder)
    valid_data = _load_packed(out, VALID_SAMPLES, encoder)
    loss_cfg = CompositeLossConfig(lam=_lambda(config), sinkhorn=_sinkhorn_config(config))
    train_cfg = _train_config(config)
    jobs = config.get("jobs", 1)
    prov = _provenance(config)

    raw_hyper = config.get("hyper", "grid")
    if raw_hyper == "grid":
        grid = _grid_from_config(config)
        result = grid_search(
            train_data, valid_data, encoder, seed, grid=grid, cfg=train_cfg, jobs=jobs
        )
        hyper = result.best
        _write_json(
            out / GRID_FILE,
            {
                "provenance": prov,
                "best": _hyper_dict(hyper),
                "cells": [
                    {
                        "hyper": _hyper_dict(c.hyper),
                        "valid_auc": c.valid_auc,
                        "error": c.error,
                    }
                    for c in result.cells
                ],
            },
        )
    elif isinstance(raw_hyper, dict):
        hyper = _hyper_from_dict(raw_hyper)
    else:
        raise ConfigError("'hyper' must be an object or the string \"grid\"")

    ckpt = train_model(train_data, valid_data, encoder, hyper, loss_cfg, seed, train_cfg)
    ckpt.encoder_ref = {
        "path": ENCODER_FILE,
        "sha256": _sha256_file(out / ENCODER_FILE),
    }
    save_checkpoint(ckpt, out / CHECKPOINT_FILE, provenance=prov)
    print(
        f"trained lambda={loss_cfg.lam} in {ckpt.epochs_run} epochs "
        f"(best epoch {ckpt.best_epoch}, val loss {ckpt.best_val_loss:.5f})"
    )
    return EXIT_OK


def _hyper_dict(hyper: Hyper) -> dict:
    return {
        "layers": hyper.layers,
        "hidden": hyper.hidden,
        "bidirectional": hyper.bidirectional,
        "batch": hyper.batch,
        "lr": hyper.lr,
        "dropout": hyper.dropout,
    }


def _grid_from_config(config: dict) -> list | None:
    raw = config.get("grid")
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError("'grid' must be an object of axis lists")
    axes = {
        "layers": raw.get("layers", [1, 2]),
        "bidirectional": raw.get("bidirectional", [False, True]),
        "hidden": raw.get("hidden", [16, 32, 64]),
        "batch": raw.get("batch", [128, 256, 512]),
        "lr": raw.get("lr", [1e-4, 1e-3]),
        "dropout": raw.get("dropout", [0.2, 0.4]),
    }
    cells = []
    for layers in axes["layers"]:
        for bidirectional in axes["bidirectional"]:
            for hidden in axes["hidden"]:
                for batch in axes["batch"]:
                    for lr in axes["lr"]:
                        for dropout in axes["dropout"]:
                            cells.append(
                                Hyper(
                                    layers=int(layers),
                                    hidden=int(hidden),
                                    bidirectional=bool(bidirectional),
                                    batch=int(batch),
                                    lr=float(lr),
                                    dropout=float(dropout),
                                )
                            )
    return cells


def cmd_sweep(config: dict) -> int:
    out = _out_dir(config)
    seed = _seed(config)
    encoder = _load_encoder(out)
    train_data = _load_packed(out, TRAIN_SAMPLES, encoder)
    valid_data = _load_packed(out, VALID_SAMPLES, encoder)
    test_data = _load_packed(out, TEST_SAMPLES, encoder)
    raw_hyper = config.get("hyper")
    if not isinstance(raw_hyper, dict):
        raise ConfigError("sweep requires an explicit 'hyper' object")
    hyper = _hyper_from_dict(raw_hyper)
    jobs = config.get("jobs", 1)

    points = lambda_sweep(
        train_data,
        valid_data,
        test_data,
        encoder,
        hyper,
        lambdas=_lambdas(config),
        seed=seed,
        sinkhorn=_sinkhorn_config(config),
        cfg=_train_config(config),
        jobs=jobs,
    )
    write_sweep_csv(
        points,
        pareto_front(points, "abpc"),
        pareto_front(points, "abcc"),
        out / SWEEP_FILE,
        header_comment=_provenance_comment(config),
    )
    failed = [p for p in points if p.failed]
    print(f"swept {len(points)} lambdas ({len(failed)} failed) -> {out / SWEEP_FILE}")
    return EXIT_OK


def cmd_evaluate(config: dict) -> int:
    out = _out_dir(config)
    encoder_path = _artifact(out, ENCODER_FILE)
    encoder = _load_encoder(out)
    test_data = _load_packed(out, TEST_SAMPLES, encoder)
    ckpt = load_checkpoint(_artifact(out, CHECKPOINT_FILE))
    if ckpt.encoder_ref and ckpt.encoder_ref.get("sha256") != _sha256_file(encoder_path):
        raise ConfigError(
            "encoder.json does not match the encoder this checkpoint was trained with"
        )

    report = evaluate(ckpt, test_data)
    prov = _provenance(config)
    _write_json(out / REPORT_FILE, {"provenance": prov, "report": report.to_dict()})

    scores = predict(ckpt.params, test_data)
    with open(out / SCORES_FILE, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {_provenance_comment(config)}\n")
        fh.write("score,outcome,sensitive\n")
        for i in range(scores.size):
            fh.write(f"{float(scores[i])!r},{int(test_data.y[i])},{int(test_data.s[i])}\n")
    print(f"evaluated -> {out / REPORT_FILE}")
    return EXIT_OK


def cmd_report(config: dict, runs: list) -> int:
    out = _out_dir(config)
    if not runs:
        raise ConfigError("report requires at least one --runs directory")
    rows = []
    for run in runs:
        run_dir = Path(run)
        report_path = _artifact(run_dir, REPORT_FILE)
        payload = json.loads(report_path.read_text(encoding="utf-8"))
        rows.append((run_dir.name, payload["report"]))

        scores_path = run_dir / SCORES_FILE
        if scores_path.is_file():
            scores, _, sensitives = _read_scores_csv(scores_path)
            curve = density_curve(GroupedScores.from_scores(scores, sensitives))
            write_density_csv(
                curve,
                out / f"density_{run_dir.name}.csv",
                header_comment=_provenance_comment(config),
            )

    fields = [
        "auc",
        "f1_at_0_5",
        "f1_at_opt",
        "acc_at_0_5",
        "acc_at_opt",
        "opt_threshold",
        "ddp_b_0_5",
        "ddp_b_opt",
        "ddp_c",
        "abpc",
        "abcc",
    ]
    report_csv = out / "report.csv"
    with open(report_csv, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {_provenance_comment(config)}\n")
        fh.write("run," + ",".join(fields) + "\n")
        for name, report in rows:
            fh.write(name + "," + ",".join(repr(float(report[f])) for f in fields) + "\n")
    print(f"merged {len(rows)} run(s) -> {report_csv}")
    return EXIT_OK


def _read_scores_csv(path: Path):
    scores, outcomes, sensitives = [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        scores.append(float(row["score"]))
        outcomes.append(int(row["outcome"]))
        sensitives.append(int(row["sensitive"]))
    return np.array(scores), np.array(outcomes), np.array(sensitives)


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairppm",
        description="Fairness-aware outcome prediction on process event logs",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("ingest", "parse a log, split, extract prefixes, fit the encoder"),
        ("train", "train one model (or grid-search first) on ingest artifacts"),
        ("sweep", "train across a lambda range and write the trade-off CSV"),
        ("evaluate", "score the checkpoint on the test split"),
        ("report", "merge evaluation reports and emit density curves"),
        ("synth", "generate a synthetic biased event log"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--lambda", dest="lam", type=float, default=None, help="override lambda")
        p.add_argument(
            "--drop-sensitive",
            action="store_true",
            help="exclude the sensitive attribute from model inputs",
        )
        p.add_argument("--max-len", type=int, default=None, help="override max prefix length")
        p.add_argument("--jobs", type=int, default=None, help="parallel workers for sweep/grid")
        p.add_argument("--sinkhorn-eps", type=float, default=None, help="entropic regularization")
        p.add_argument("--sinkhorn-iters", type=int, default=None, help="Sinkhorn iteration cap")
        p.add_argument("--out", default=None, help="output/artifact directory")
        if name == "report":
            p.add_argument("--runs", nargs="+", default=None, help="run directories to merge")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            config["jobs"] = args.jobs
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "ingest":
            return cmd_ingest(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "sweep":
            return cmd_sweep(config)
        if args.command == "evaluate":
            return cmd_evaluate(config)
        if args.command == "report":
            runs = args.runs if args.runs is not None else config.get("runs", [])
            return cmd_report(config, runs)
        raise ConfigError(f"unknown command '{args.command}'")
    except (ConfigError, EventLogError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except UndefinedMetricError as exc:
        print(f"error: undefined metric: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps to exit 1
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
