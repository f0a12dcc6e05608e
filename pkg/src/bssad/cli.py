"""Batch command line: ``bssad {synth,train,detect,eval,sweep}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Optional, Sequence

import numpy as np

from . import anomaly, filters, neural, timeseries
from .config import KEYS, RunConfig, build_config, replace
from .errors import BSSADError, ConfigError, DataError

log = logging.getLogger("bssad")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".bssad-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_via(path: str, writer) -> None:
    """Let ``writer(tmp_path)`` produce the file, then move it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".bssad-", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_number(v: float) -> Any:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# data plumbing shared by commands
# ---------------------------------------------------------------------------

def _read_header(path: str) -> list[str]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return [h.strip() for h in next(csv.reader(fh), [])]
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


def _load(path: str, cfg: RunConfig, categorical: Sequence[str]) -> timeseries.Dataset:
    header = _read_header(path)
    label = cfg.label_column if cfg.label_column in header else None
    if label is None and "label_column" in cfg.explicit:
        raise DataError(f"{path}: label column {cfg.label_column!r} not in header")
    return timeseries.load_csv(path, label, categorical)


def _prepare(dataset: timeseries.Dataset, meta: dict) -> timeseries.Dataset:
    """Apply the training-time one-hot tables and normalizer to ``dataset``."""
    if list(dataset.feature_names) != meta["raw_features"]:
        raise DataError(
            "schema mismatch: expected columns "
            f"{meta['raw_features']}, got {list(dataset.feature_names)}"
        )
    cats = meta.get("categories", {})
    if cats:
        dataset = timeseries.one_hot_encode(dataset, list(cats), cats)
    stats = timeseries.NormalizationStats(
        np.array(meta["norm_min"]), np.array(meta["norm_max"]), meta.get("norm_fitted_on", "train")
    )
    return timeseries.apply_normalizer(dataset, stats)


def _score_csv(scores: anomaly.ScoreSeries, labels: Optional[np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "score", "label"] if labels is not None else ["t", "score"])
    for k, s in enumerate(scores.scores.tolist()):
        t = scores.offset + k
        row = [t, repr(s)]
        if labels is not None:
            row.append(int(labels[t]))
        w.writerow(row)
    return buf.getvalue()


def _beliefs_csv(beliefs, tau: int, with_cov: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    M = beliefs[0].mean.shape[0] if beliefs else 0
    header = ["t"] + [f"mean_{j + 1}" for j in range(M)]
    if with_cov:
        header += [f"cov_{i + 1}_{j + 1}" for i in range(M) for j in range(M)]
    w.writerow(header)
    for k, b in enumerate(beliefs):
        row = [tau + k] + [repr(v) for v in b.mean.tolist()]
        if with_cov:
            row += [repr(v) for v in b.cov.ravel().tolist()]
        w.writerow(row)
    return buf.getvalue()


def _read_scores(path: str) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    if not rows or rows[0][:2] != ["t", "score"]:
        raise DataError(f"{path}: expected a score file with columns t, score[, label]")
    has_label = len(rows[0]) > 2 and rows[0][2] == "label"
    t, s, y = [], [], []
    for n, row in enumerate(rows[1:], 2):
        if not row:
            continue
        try:
            t.append(int(row[0]))
            s.append(float(row[1]))
            if has_label:
                y.append(int(row[2]))
        except (ValueError, IndexError):
            raise DataError(f"{path}: malformed line {n}") from None
    labels = np.array(y, dtype=np.int8) if has_label else None
    return np.array(t, dtype=int), np.array(s), labels


def _report(result: anomaly.ThresholdSearchResult, cfg: RunConfig) -> dict:
    cm = result.confusion
    return {
        "best_threshold": _json_number(result.best_threshold),
        "best_f1": result.best_f1,
        "best_mcc": result.best_mcc,
        "metric": result.metric_optimized,
        "confusion": {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn},
        "table": [
            {"threshold": _json_number(t), "f1": f, "mcc": m} for t, f, m in result.table
        ],
        "config": cfg.as_dict(),
    }


def _detect_scores(
    model: neural.NeuralModel,
    noise: neural.NoiseEstimate,
    data: timeseries.Dataset,
    cfg: RunConfig,
):
    system = filters.NeuralSystem(model, noise)
    beliefs = filters.run_filter(cfg.filter, system, data, cfg.filter_params(), cfg.seed, model.tau)
    return anomaly.score_series(data, beliefs, model.tau), beliefs


def _check_tau(cfg: RunConfig, model: neural.NeuralModel) -> None:
    if "tau" in cfg.explicit and cfg.tau != model.tau:
        raise ConfigError(f"tau={cfg.tau} disagrees with the model's window size {model.tau}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: str) -> int:
    synth = cfg.synth_config()
    dataset = timeseries.synth_generate(synth)
    _atomic_via(out, lambda tmp: timeseries.write_csv(dataset, tmp, cfg.label_column))
    frac = float(dataset.labels.mean()) if dataset.T else 0.0
    print(f"T={dataset.T} M={dataset.M} anomaly_fraction={frac:.6f}")
    return 0


def cmd_train(train_csv: str, cfg: RunConfig, out: str) -> int:
    categorical = cfg.categorical_columns()
    raw = _load(train_csv, cfg, categorical)
    dataset = timeseries.one_hot_encode(raw, categorical) if categorical else raw
    train_part, val_part = timeseries.split(dataset, cfg.split_spec())
    stats = timeseries.fit_normalizer(train_part)
    train_n = timeseries.apply_normalizer(train_part, stats)
    val_n = timeseries.apply_normalizer(val_part, stats)

    def progress(epoch, value):
        log.info("epoch %d loss %.6g", epoch, value)

    model, noise, history = neural.train(train_n, val_n, cfg.hyperparams(), cfg.seed, progress)
    model.metadata = {
        "raw_features": list(raw.feature_names),
        "categories": {c: list(raw.categories[c]) for c in categorical},
        "norm_min": stats.minimum.tolist(),
        "norm_max": stats.maximum.tolist(),
        "norm_fitted_on": os.path.basename(train_csv),
    }
    _atomic_via(out, lambda tmp: neural.save_model(model, noise, tmp))
    final = history[-1] if history else float("nan")
    print(
        f"final_loss={final:.6g} trace_Q={np.trace(noise.Q):.6g} trace_R={np.trace(noise.R):.6g}"
    )
    return 0


def cmd_detect(
    test_csv: str, model_path: str, cfg: RunConfig, out: str,
    beliefs_out: Optional[str] = None, beliefs_cov: bool = False,
) -> int:
    model, noise = neural.load_model(model_path)
    _check_tau(cfg, model)
    raw = _load(test_csv, cfg, list(model.metadata.get("categories", {})))
    data = _prepare(raw, model.metadata)
    scores, beliefs = _detect_scores(model, noise, data, cfg)
    _atomic_write(out, _score_csv(scores, data.labels))
    if beliefs_out:
        _atomic_write(beliefs_out, _beliefs_csv(beliefs, model.tau, beliefs_cov))
    print(f"scored={len(scores)} filter={cfg.filter} max_score={scores.scores.max():.6g}")
    return 0


def cmd_eval(scores_csv: str, cfg: RunConfig, out: str) -> int:
    t, s, labels = _read_scores(scores_csv)
    if labels is None:
        raise DataError(f"{scores_csv}: no label column; cannot evaluate")
    result = anomaly.best_threshold_search(anomaly.ScoreSeries(s, int(t[0]) if t.size else 0), labels, cfg.metric)
    _atomic_write(out, _dump_json(_report(result, cfg)))
    print(
        f"metric={cfg.metric} threshold={result.best_threshold:.6g} "
        f"f1={result.best_f1:.4f} mcc={result.best_mcc:.4f}"
    )
    return 0


def _sweep_pair(args) -> dict:
    model_path, data, cfg, seed, size = args
    row: dict[str, Any] = {"seed": seed, "size": size}
    try:
        model, noise = neural.load_model(model_path)
        sized = replace(cfg, seed=seed, **({"n_sigma": size} if cfg.filter == "enkf" else {"n_particles": size}))
        scores, _ = _detect_scores(model, noise, data, sized)
        labels = data.labels[model.tau:]
        result = anomaly.best_threshold_search(scores, labels, cfg.metric)
        row.update(
            threshold=_json_number(result.best_threshold), f1=result.best_f1, mcc=result.best_mcc,
            error=None,
        )
    except (BSSADError, ValueError, ArithmeticError) as exc:
        row.update(threshold=None, f1=None, mcc=None, error=str(exc))
    return row


def cmd_sweep(
    test_csv: str, model_path: str, cfg: RunConfig, seeds: Sequence[int],
    sizes: Sequence[int], out: str, jobs: int = 1,
) -> int:
    if not seeds or not sizes:
        raise ConfigError("sweep needs at least one seed and one size")
    if any(s < 2 for s in sizes):
        raise ConfigError("sweep sizes must be at least 2")
    model, _ = neural.load_model(model_path)
    _check_tau(cfg, model)
    raw = _load(test_csv, cfg, list(model.metadata.get("categories", {})))
    data = _prepare(raw, model.metadata)
    if data.labels is None:
        raise DataError(f"{test_csv}: sweep needs labels")
    tasks = [(model_path, data, cfg, int(seed), int(size)) for seed in seeds for size in sizes]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_pair, tasks))
    else:
        rows = [_sweep_pair(t) for t in tasks]
    ok = [r for r in rows if r["error"] is None]
    key = "f1" if cfg.metric == "f1" else "mcc"
    best = None
    for r in ok:  # first maximum in (seed, size) order
        if best is None or r[key] > best[key]:
            best = r
    report = {
        "filter": cfg.filter,
        "metric": cfg.metric,
        "rows": rows,
        "best": best,
        "failures": [{"seed": r["seed"], "size": r["size"], "error": r["error"]} for r in rows if r["error"]],
        "config": cfg.as_dict(),
    }
    _atomic_write(out, _dump_json(report))
    if best is not None:
        print(f"pairs={len(rows)} failures={len(rows) - len(ok)} best_seed={best['seed']} "
              f"best_size={best['size']} {key}={best[key]:.4f}")
    else:
        print(f"pairs={len(rows)} failures={len(rows)}")
    return 0 if ok else 4


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", required=True, help="output path")
    for name in KEYS:
        flags = [f"--{name}"]
        dashed = f"--{name.replace('_', '-')}"
        if dashed != flags[0]:
            flags.append(dashed)
        if name.startswith("synth_"):
            flags.append(f"--synth.{name[len('synth_'):]}")
        p.add_argument(*flags, dest=f"cfg_{name}", default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bssad", description="Bayesian state-space anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a labeled synthetic dataset")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train the neural state-space model")
    p.add_argument("train_csv")
    _add_config_flags(p)

    p = sub.add_parser("detect", help="score a test set with a trained model")
    p.add_argument("test_csv")
    p.add_argument("--model", required=True)
    p.add_argument("--beliefs", help="also write the belief sequence as CSV")
    p.add_argument("--beliefs-cov", action="store_true", help="include covariance entries")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="point-adjusted threshold search over a score file")
    p.add_argument("scores_csv")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="detect + eval over seeds and ensemble sizes")
    p.add_argument("test_csv")
    p.add_argument("--model", required=True)
    p.add_argument("--seeds", type=_int_list, required=True)
    p.add_argument("--sizes", type=_int_list, required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {k[len("cfg_"):]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    try:
        cfg = build_config(args.config, overrides)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "train":
            return cmd_train(args.train_csv, cfg, args.out)
        if args.command == "detect":
            return cmd_detect(args.test_csv, args.model, cfg, args.out, args.beliefs, args.beliefs_cov)
        if args.command == "eval":
            return cmd_eval(args.scores_csv, cfg, args.out)
        return cmd_sweep(args.test_csv, args.model, cfg, args.seeds, args.sizes, args.out, args.jobs)
    except BSSADError as exc:
        print(f"bssad {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"bssad {args.command}: I/O error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
