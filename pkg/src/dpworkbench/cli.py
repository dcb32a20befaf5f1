"""``dpw`` command line: calibrate, noise-curve, sanity and train.

Exit codes: 0 success / sanity pass, 1 sanity fail, 2 configuration or
budget error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from typing import List, Optional, Tuple

import numpy as np

from .accountant import (
    NOISE_TABLE_HEADER,
    CalibrationError,
    calibrate_sigma,
    epsilon_for,
    noise_per_example_table,
)
from .config import ConfigError, ExperimentConfig
from .data import (
    UserDataset,
    gen_blob_dataset,
    gen_noise_dataset,
    gen_user_pattern_dataset,
    load_dataset,
    pattern_probe_set,
)
from .estimators import DPFedAvgClassifier, DPSGDClassifier
from .federated import METRICS_HEADER, BudgetExhaustedError

logger = logging.getLogger("dpw")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

COMMAND_TASKS = {
    "calibrate": ("calibrate",),
    "noise-curve": ("noise-curve",),
    "sanity": ("sanity-noise", "sanity-pattern"),
    "train": ("train", "train-federated"),
}


def cmd_calibrate(cfg: ExperimentConfig) -> dict:
    """Smallest sigma for the configured budget, dataset size, lot size and epochs."""
    n = cfg.dataset_size or cfg.n_records
    budget = cfg.budget(n)
    q = cfg.batch_size / n
    steps = (n // cfg.batch_size) * cfg.epochs
    sigma = calibrate_sigma(budget, q, steps)
    eps = epsilon_for(q, sigma, steps, budget.delta)
    return {
        "sigma": sigma,
        "epsilon_achieved": eps,
        "epsilon_target": budget.epsilon,
        "delta": budget.delta,
        "dataset_size": n,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "q": q,
        "steps": steps,
    }


def cmd_noise_curve(cfg: ExperimentConfig):
    n = cfg.dataset_size or cfg.n_records
    return noise_per_example_table(cfg.budget(n), n, cfg.epochs, cfg.batch_sizes)


def _central_estimator(cfg: ExperimentConfig, private: bool = True, sigma=None) -> DPSGDClassifier:
    if sigma is None:
        sigma = "auto" if cfg.sigma is None else cfg.sigma
    no_noise = private and sigma == 0
    return DPSGDClassifier(
        hidden_layer_sizes=tuple(cfg.hidden),
        noise_multiplier=sigma,
        clipping=cfg.clip_mode,
        clip_bound=cfg.clip_bound,
        alpha=cfg.alpha,
        beta=cfg.beta,
        sigma_l2=cfg.sigma_l2,
        clip_floor=cfg.clip_floor,
        batch_size=cfg.batch_size,
        learning_rate=cfg.base_lr,
        lr_scaling=cfg.lr_scaling,
        momentum=cfg.momentum,
        epochs=cfg.epochs,
        # a zero noise multiplier is the privacy-off control: no budget to enforce
        target_epsilon=None if no_noise else cfg.epsilon,
        delta=cfg.delta,
        private=private,
        strict_accounting=cfg.strict_accounting,
        n_classes=cfg.classes,
        record_wall_ms=cfg.record_wall_ms,
        random_state=cfg.seed,
    )


def _fed_estimator(cfg: ExperimentConfig, private: bool = True) -> DPFedAvgClassifier:
    if private:
        sigma = "auto" if cfg.sigma is None else cfg.sigma
        target = None if sigma == 0 else cfg.epsilon
    else:
        sigma, target = 0.0, None
    return DPFedAvgClassifier(
        hidden_layer_sizes=tuple(cfg.hidden),
        noise_multiplier=sigma,
        user_fraction=cfg.user_fraction,
        local_steps=cfg.local_steps,
        local_lr=cfg.local_lr,
        update_clip=cfg.update_clip,
        rounds=cfg.rounds,
        target_epsilon=target,
        delta=cfg.delta,
        n_classes=cfg.classes,
        random_state=cfg.seed,
    )


def _final_eps(model) -> float:
    return float(model.epsilon_) if model.accountant_.streams else 0.0


def sanity_noise(cfg: ExperimentConfig) -> dict:
    X, y = gen_noise_dataset(cfg.n_examples, (cfg.image_rows, cfg.image_cols), cfg.classes, cfg.seed)
    twin = _central_estimator(cfg, private=False).fit(X, y)
    dp = _central_estimator(cfg).fit(X, y)
    chance = 1.0 / cfg.classes
    twin_acc = twin.history_[-1]["train_acc"]
    dp_acc = dp.history_[-1]["train_acc"]
    passed = dp_acc <= chance + cfg.chance_margin and twin_acc >= cfg.memorization_threshold
    return {
        "task": "sanity-noise",
        "passed": bool(passed),
        "sigma": dp.noise_multiplier_,
        "epsilon_spent": _final_eps(dp),
        "delta": dp.delta_,
        "dp_train_acc": dp_acc,
        "nonprivate_train_acc": twin_acc,
        "chance": chance,
        "dp_limit": chance + cfg.chance_margin,
        "memorization_threshold": cfg.memorization_threshold,
    }


def _pattern_arm(cfg: ExperimentConfig, mode: str, n_patterns: Optional[int], private: bool):
    spec = cfg.dataset_spec(mode, n_patterns)
    data = gen_user_pattern_dataset(spec)
    probes = {"pattern": pattern_probe_set(cfg.probe_size, spec)}
    model = _fed_estimator(cfg, private).fit_users(data, probes)
    return model, model.history_[-1]["pattern_recall"]


def sanity_pattern(cfg: ExperimentConfig) -> dict:
    n_central = cfg.n_patterns if cfg.n_patterns is not None else cfg.records_per_user
    twin, twin_recall = _pattern_arm(cfg, "pattern-centralized", n_central, private=False)
    dp, dp_recall = _pattern_arm(cfg, "pattern-centralized", n_central, private=True)
    passed = dp_recall <= cfg.recall_low and twin_recall >= cfg.recall_high
    report = {
        "task": "sanity-pattern",
        "passed": bool(passed),
        "sigma": dp.noise_multiplier_,
        "epsilon_spent": _final_eps(dp),
        "delta": dp.delta_,
        "dp_centralized_recall": dp_recall,
        "nonprivate_centralized_recall": twin_recall,
        "recall_low": cfg.recall_low,
        "recall_high": cfg.recall_high,
    }
    if cfg.include_distributed:
        n_dist = cfg.distributed_patterns
        if n_dist is None:
            n_dist = cfg.users * cfg.records_per_user // 10
        _, dist_recall = _pattern_arm(cfg, "pattern-distributed", n_dist, private=True)
        report["distributed_patterns"] = n_dist
        report["dp_distributed_recall"] = dist_recall
    return report


def cmd_sanity(cfg: ExperimentConfig) -> Tuple[dict, int]:
    """Train the private model and its non-private twin on a synthetic task.

    PASS is evidence that the privacy parameters block memorization on this
    task, not a proof of privacy.
    """
    report = sanity_noise(cfg) if cfg.task == "sanity-noise" else sanity_pattern(cfg)
    return report, EXIT_OK if report["passed"] else EXIT_FAIL


def _central_data(cfg: ExperimentConfig):
    if cfg.data_path is not None:
        X, y, _ = load_dataset(cfg.data_path)
        return X, y, None
    mode = cfg.dataset_mode
    if mode == "noise":
        X, y = gen_noise_dataset(cfg.n_examples, (cfg.image_rows, cfg.image_cols), cfg.classes, cfg.seed)
        return X, y, None
    if mode == "blobs":
        X, y = gen_blob_dataset(cfg.n_examples, cfg.blob_dim, cfg.classes, cfg.seed, cfg.blob_separation)
        test = gen_blob_dataset(cfg.test_examples, cfg.blob_dim, cfg.classes, cfg.seed,
                                cfg.blob_separation, stream="test")
        return X, y, test
    spec = cfg.dataset_spec()
    X, y = gen_user_pattern_dataset(spec).flat()
    return X, y, pattern_probe_set(cfg.probe_size, spec)


def _user_data(cfg: ExperimentConfig):
    if cfg.data_path is not None:
        X, y, meta = load_dataset(cfg.data_path)
        if not meta["users"]:
            raise ConfigError(f"{cfg.data_path} holds no user grouping")
        return UserDataset(X.reshape(meta["users"], meta["records_per_user"], -1),
                           y.reshape(meta["users"], meta["records_per_user"])), {}
    if cfg.dataset_mode.startswith("pattern"):
        spec = cfg.dataset_spec()
        return gen_user_pattern_dataset(spec), {"pattern": pattern_probe_set(cfg.probe_size, spec)}
    n = cfg.users * cfg.records_per_user
    if cfg.dataset_mode == "blobs":
        X, y = gen_blob_dataset(n, cfg.blob_dim, cfg.classes, cfg.seed, cfg.blob_separation)
    else:
        X, y = gen_noise_dataset(n, (cfg.image_rows, cfg.image_cols), cfg.classes, cfg.seed)
    return UserDataset(X.reshape(cfg.users, cfg.records_per_user, -1),
                       y.reshape(cfg.users, cfg.records_per_user)), {}


def cmd_train(cfg: ExperimentConfig) -> Tuple[List[str], List[dict]]:
    """Returns the CSV header and the metric rows of the run."""
    if cfg.task == "train-federated":
        data, probes = _user_data(cfg)
        model = _fed_estimator(cfg).fit_users(data, probes)
        return list(METRICS_HEADER), model.history_
    X, y, evalset = _central_data(cfg)
    model = _central_estimator(cfg).fit(X, y, eval_set=evalset)
    header = ["step", "epoch", "eps_spent", "train_acc", "test_acc"]
    header += [f"clip_{l}" for l in range(model.model_spec_.n_groups)]
    if cfg.record_wall_ms:
        header.append("wall_ms")
    return header, model.history_


def _format(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(header, rows, out) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format(row[k] if isinstance(row, dict) else getattr(row, k)) for k in header])
    _emit(buf.getvalue(), out)


def _dump_json(report: dict) -> str:
    # strict JSON has no inf/nan; report them as null
    clean = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in report.items()}
    return json.dumps(clean, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpw", description="Differentially private training workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMAND_TASKS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON config; defaults are used for missing keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path (default: config 'output', else stdout)")
        p.add_argument("--strict-accounting", action="store_true",
                       help="charge sigma / sqrt(groups) instead of sigma")
        p.add_argument("--print-config", action="store_true",
                       help="print the effective config and exit")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    allowed = COMMAND_TASKS[args.command]
    raw.setdefault("task", allowed[0])
    if raw["task"] not in allowed:
        raise ConfigError(f"task {raw['task']!r} cannot run under '{args.command}'")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output"] = args.out
    if args.strict_accounting:
        raw["strict_accounting"] = True
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        print(cfg.to_json())
        return EXIT_OK

    try:
        if args.command == "calibrate":
            report = cmd_calibrate(cfg)
            text = _dump_json(report)
            _emit(text, cfg.output)
            if cfg.output:
                sys.stdout.write(text)
            return EXIT_OK
        if args.command == "noise-curve":
            rows = cmd_noise_curve(cfg)
            _write_csv(NOISE_TABLE_HEADER, rows, cfg.output)
            return EXIT_OK if all(math.isfinite(r.sigma_min) for r in rows) else EXIT_FAIL
        if args.command == "sanity":
            report, code = cmd_sanity(cfg)
            text = _dump_json(report)
            _emit(text, cfg.output)
            print("PASS" if code == EXIT_OK else "FAIL", file=sys.stderr)
            return code
        header, rows = cmd_train(cfg)
        _write_csv(header, rows, cfg.output)
        return EXIT_OK
    except (ConfigError, CalibrationError, BudgetExhaustedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
