"""Command-line entry point: ``tt2vfin {correlate,train,predict,metrics}``.

Exit codes: 0 ok, 2 configuration error, 3 data or I/O error, 4 training
failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import model as M
from .config import RunConfig, describe_fields, load_config
from .correlation import correlation_report
from .errors import ConfigError, TrainingError, TT2VFinError
from .features import build_group_features, save_states, write_stages
from .ingest import AlignedGroup, align_group, fill_missing, load_csv
from .training import (METRIC_FIELDS, MetricsReport, evaluate, read_predictions, run_experiment,
                       score_target)

log = logging.getLogger("tt2vfin")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_run_manifest(out: Path, command: str, cfg: RunConfig | None, artifacts) -> Path:
    entries = {str(p.relative_to(out)): _sha256(p) for p in sorted(artifacts)}
    doc = {"command": command, "artifacts": entries}
    if cfg is not None:
        doc["config"] = cfg.to_dict()
        doc["seed"] = cfg.seed
    path = out / f"run_manifest_{command}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _load_group(cfg: RunConfig) -> AlignedGroup:
    series = []
    for t in cfg.members:
        path = cfg.data_path(t)
        if not path.is_file():
            raise FileNotFoundError(f"data file for {t} not found: {path}")
        series.append(load_csv(path, t))
    return fill_missing(align_group(series, cfg.price_column))


def _format_table(rows) -> str:
    head = ["model", "target", "scale"] + list(METRIC_FIELDS)
    body = [[r[0], r[1], r[2]] + [("-" if v is None else f"{v:.4f}") for v in r[3:]] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)) for line in [head] + body]
    return "\n".join(lines)


def _metric_rows(label, target, norm: MetricsReport, close: MetricsReport):
    return [(label, target, s, m.rmse, m.mse, m.mape, m.mae, m.r2)
            for s, m in (("normalized", norm), ("close", close))]


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "target", "scale"] + list(METRIC_FIELDS))
        for r in rows:
            w.writerow(list(r[:3]) + ["" if v is None else repr(v) for v in r[3:]])


def _manifest_for(cfg: RunConfig, label: str, members, targets) -> dict:
    return {"label": label, "group": list(cfg.members), "members": list(members),
            "targets": list(targets),
            "single_feature": cfg.single_feature, "variant": cfg.variant,
            "ma_window": cfg.ma_window, "price_column": cfg.price_column,
            "split": list(cfg.split), "seed": cfg.seed,
            "model": cfg.model_config.to_dict(), "train": cfg.train_config.to_dict()}


# --------------------------------------------------------------------------
# commands

def cmd_correlate(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    group = _load_group(cfg)
    base = cfg.base or cfg.members[0]
    report = correlation_report(group, base, cfg.max_lag, cfg.correlate_on, cfg.ma_window)
    out.mkdir(parents=True, exist_ok=True)
    paths = report.write(out / "correlation")
    print(f"lag-0 correlation vs {base} ({cfg.correlate_on}):")
    ranked = sorted(report.summary(), key=lambda r: -r[2])
    if not ranked:
        print("  (no partners; autocorrelation only)")
    for b, o, r in ranked:
        print(f"  {b} ~ {o}: {r:+.4f}")
    _write_run_manifest(out, "correlate", cfg, paths)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    group = _load_group(cfg)
    mcfg = cfg.model_config
    runs = run_experiment(group, cfg.targets, mcfg, cfg.train_config, cfg.members,
                          cfg.single_feature, cfg.ma_window, cfg.inversion, cfg.split,
                          log=log.info)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    rows = []
    states = {}
    for run in runs:
        p = out / f"history_{run.label}.csv"
        run.result.write_history(p)
        artifacts.append(p)
        p = out / f"checkpoint_{run.label}.bin"
        ckpt.save_checkpoint(p, run.result.params,
                             _manifest_for(cfg, run.label, run.members, list(run.targets)))
        artifacts += [p, ckpt.manifest_path(p)]
        if cfg.write_stages:
            artifacts += write_stages(run.features, out / "stages")
        states.update(run.features.states)
        for t, res in run.targets.items():
            p = out / f"predictions_{run.label}_{t}.csv"
            res.write_predictions(p)
            artifacts.append(p)
            rows += _metric_rows(run.label, t, res.metrics_norm, res.metrics_close)
    p = out / "pipeline_state.txt"
    save_states(states, p)
    artifacts.append(p)
    p = out / "metrics.csv"
    _write_metrics(p, rows)
    artifacts.append(p)
    _write_run_manifest(out, "train", cfg, set(artifacts))
    print(_format_table(rows))
    return EXIT_OK


def _check_manifest(cfg: RunConfig, manifest: dict) -> None:
    expected = {"model": cfg.model_config.to_dict(), "ma_window": cfg.ma_window,
                "price_column": cfg.price_column, "split": list(cfg.split)}
    for key, want in expected.items():
        if manifest.get(key) != want:
            raise ConfigError(f"checkpoint manifest mismatch on {key!r}: "
                              f"checkpoint has {manifest.get(key)!r}, config has {want!r}")
    if "group" not in manifest or "members" not in manifest or "label" not in manifest:
        raise ConfigError("checkpoint manifest lacks group/members/label entries")
    absent = [t for t in manifest["group"] if t not in cfg.data]
    if absent:
        raise ConfigError(f"config has no data for checkpoint group tickers {absent}")


def cmd_predict(cfg: RunConfig, checkpoint: Path) -> int:
    out = Path(cfg.out)
    params, manifest = ckpt.load_checkpoint(checkpoint)
    _check_manifest(cfg, manifest)
    mcfg = cfg.model_config
    try:
        M.check_parameters(params, mcfg)
    except TT2VFinError as exc:
        raise ConfigError(f"checkpoint does not fit the configured model: {exc}") from None
    members = manifest["members"]
    cfg.members = list(manifest["group"])
    feats = build_group_features(_load_group(cfg), members, cfg.ma_window, cfg.split)
    _, _, test_w = feats.windows(mcfg.window)
    targets = [t for t in cfg.targets if t in members] or list(manifest.get("targets", members))
    out.mkdir(parents=True, exist_ok=True)
    artifacts, rows = [], []
    for t in targets:
        res = score_target(feats, t, params, mcfg, test_w, cfg.inversion)
        p = out / f"predict_{manifest['label']}_{t}.csv"
        res.write_predictions(p)
        artifacts.append(p)
        rows += _metric_rows(manifest["label"], t, res.metrics_norm, res.metrics_close)
    _write_run_manifest(out, "predict", cfg, artifacts)
    print(_format_table(rows))
    return EXIT_OK


def cmd_metrics(paths, out: Path | None) -> int:
    rows = []
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"prediction file not found: {path}")
        d = read_predictions(path)
        norm = evaluate(d["predicted_norm"], d["actual_norm"],
                        with_mape=bool(np.all(d["actual_norm"] != 0)))
        close = evaluate(d["predicted_close"], d["actual_close"])
        rows += _metric_rows(path.stem, "-", norm, close)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_metrics(out / "metrics_rescored.csv", rows)
    print(_format_table(rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    epilog = describe_fields() + (
        "\n\nexit codes: 0 ok, 2 config error, 3 data/IO error, 4 training failure"
        "\nset TT2VFIN_NUMBA=0 to force the pure-numpy kernels")
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="tt2vfin", formatter_class=fmt, epilog=epilog,
        description="Time2Vec + transformer-encoder forecasting of correlated stock groups.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override `seed`")
    common.add_argument("--out", help="override `out`")
    common.add_argument("--target", action="append", metavar="TICKER",
                        help="override `targets` (repeatable)")
    common.add_argument("--variant", choices=list(M.VARIANTS), help="override `variant`")
    common.add_argument("--single-feature", action="store_true", default=None,
                        help="set `single_feature`")
    common.add_argument("--inversion", choices=["teacher", "autoregressive"],
                        help="override `inversion`")

    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("correlate", parents=[common], formatter_class=fmt, epilog=epilog,
                   help="lagged auto/cross-correlation report for the group")
    sub.add_parser("train", parents=[common], formatter_class=fmt, epilog=epilog,
                   help="preprocess, train, evaluate and write all artifacts")
    p = sub.add_parser("predict", parents=[common], formatter_class=fmt, epilog=epilog,
                       help="predict the test range from a saved checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint .bin file")
    p = sub.add_parser("metrics", formatter_class=fmt,
                       help="re-score existing prediction CSV files")
    p.add_argument("--predictions", type=Path, action="append", required=True,
                   help="prediction CSV (repeatable)")
    p.add_argument("--out", type=Path, help="write metrics_rescored.csv here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "metrics":
            return cmd_metrics(args.predictions, args.out)
        cfg = load_config(args.config, {
            "seed": args.seed, "out": args.out, "targets": args.target,
            "variant": args.variant, "single_feature": args.single_feature,
            "inversion": args.inversion})
        if args.command == "correlate":
            return cmd_correlate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_predict(cfg, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (TT2VFinError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
