"""Command-line front end: train, score, and benchmark over seeds.

Every run writes a manifest capturing the full effective configuration; the
run directory name carries a content digest of that configuration so two
different setups never silently overwrite each other, and re-running from a
manifest reproduces the report files byte-for-byte.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from . import datakit as dk
from . import models as md
from . import trainer as tr

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

OUT_ROOT_ENV = "SSADVAE_OUT_ROOT"

_CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")

_TRAIN_KEYS = {f.name for f in dc_fields(tr.TrainConfig)} - {"master_seed"}

_BOOL_KEYS = {"use_bias", "save_scores"}
_INT_KEYS = {"epochs", "batch_size", "anneal_epochs", "warmup_epochs",
             "nd_update_interval", "ensemble_size", "s_elbo", "s_cubo",
             "s_score", "label_col_index"}
_FLOAT_KEYS = {"lr", "beta_kl", "beta_cubo", "gamma", "alpha",
               "lr_decay_factor", "clip_norm", "gamma_l", "gamma_p",
               "train_fraction", "leak"}
_LIST_INT_KEYS = {"widths", "seeds"}
_STR_KEYS = {"method", "dataset", "synth", "label_col", "positive_token",
             "activation", "family", "model_dir"}
_ALL_KEYS = (_BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _LIST_INT_KEYS | _STR_KEYS
             | {"lr_decay_every"})


class UsageError(ValueError):
    """Bad flags, config keys, or flag combinations."""


def _coerce(key: str, value):
    if key not in _ALL_KEYS:
        raise UsageError(f"unknown config key {key!r}")
    if isinstance(value, str):
        value = value.strip()
    if key in _BOOL_KEYS:
        if isinstance(value, bool):
            return value
        if value in ("true", "1", "yes"):
            return True
        if value in ("false", "0", "no"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    if key in _INT_KEYS or key == "lr_decay_every":
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _LIST_INT_KEYS:
        if isinstance(value, (list, tuple)):
            return [int(v) for v in value]
        return [int(v) for v in value.split(",") if v.strip()]
    return str(value)


def load_config_file(path: str) -> dict:
    """Key=value text or a manifest/config JSON; bare names resolve against
    the bundled per-dataset configs."""
    if not os.path.exists(path):
        bundled = os.path.join(_CONFIG_DIR, path if path.endswith(".cfg")
                               else path + ".cfg")
        if os.path.exists(bundled):
            path = bundled
        else:
            raise UsageError(f"config file {path!r} not found")
    if path.endswith(".json"):
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        raw = data.get("config", data)  # accept a full run manifest
        return {k: _coerce(k, v) for k, v in raw.items() if k in _ALL_KEYS}
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = _coerce(key, value)
    return out


def list_bundled_configs() -> list:
    return sorted(f for f in os.listdir(_CONFIG_DIR) if f.endswith(".cfg"))


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--dataset", help="CSV file with numeric features and a label column")
    p.add_argument("--label-col", default="label",
                   help="label column name, or an integer index (default: label)")
    p.add_argument("--positive-token", default="1",
                   help="label value marking anomalies (default: 1)")
    p.add_argument("--synth", metavar="D,N,SHIFT[,N_ANOM]",
                   help="synthetic data instead of a CSV, e.g. 8,2000,3.0")
    p.add_argument("--method", choices=md.METHODS)
    p.add_argument("--gamma-l", type=float, dest="gamma_l",
                   help="labeled-anomaly ratio (default 0.01)")
    p.add_argument("--gamma-p", type=float, dest="gamma_p",
                   help="pollution ratio of the unlabeled pool (default 0)")
    p.add_argument("--seeds", help="comma-separated protocol seeds (default: 0)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--ensemble", type=int, dest="ensemble_size")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta-kl", type=float, dest="beta_kl")
    p.add_argument("--beta-cubo", type=float, dest="beta_cubo")
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--widths", help="MLP widths, e.g. 32,16,8")
    p.add_argument("--out", help=f"output root (default: ${OUT_ROOT_ENV} or ./runs)")
    p.add_argument("--config", help="config file, bundled config name, or a run manifest.json")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssadvae",
                     description="Semi-supervised anomaly detection with VAE ensembles")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (("train", "train one ensemble and save it"),
                       ("benchmark", "full protocol over seeds with AUROC report"),
                       ("score", "score a dataset with a saved ensemble")):
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        if name == "score":
            p.add_argument("--model-dir", required=True,
                           help="directory written by 'ssadvae train'")
        if name == "benchmark":
            p.add_argument("--save-scores", action="store_true",
                           help="also write per-seed score CSVs")
    return parser


_DEFAULTS = {
    "label_col": "label", "positive_token": "1", "method": "dp",
    "gamma_l": 0.01, "gamma_p": 0.0, "seeds": [0], "train_fraction": 0.6,
    "save_scores": False,
}


def effective_config(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(_DEFAULTS)
    for f in dc_fields(tr.TrainConfig):
        if f.name == "master_seed":
            continue
        cfg[f.name] = list(f.default) if f.name == "widths" else f.default
    if args.config:
        cfg.update(load_config_file(args.config))
    flag_map = {
        "dataset": args.dataset, "synth": args.synth,
        "label_col": args.label_col if args.label_col != "label" else None,
        "positive_token": args.positive_token if args.positive_token != "1" else None,
        "method": args.method, "gamma_l": args.gamma_l, "gamma_p": args.gamma_p,
        "seeds": args.seeds, "epochs": args.epochs,
        "ensemble_size": args.ensemble_size, "alpha": args.alpha,
        "beta_kl": args.beta_kl, "beta_cubo": args.beta_cubo,
        "gamma": args.gamma, "lr": args.lr, "widths": args.widths,
    }
    if getattr(args, "save_scores", False):
        flag_map["save_scores"] = True
    for key, value in flag_map.items():
        if value is not None:
            cfg[key] = _coerce(key, value)
    if not cfg.get("dataset") and not cfg.get("synth"):
        raise UsageError("either --dataset or --synth is required")
    if cfg.get("dataset") and cfg.get("synth"):
        raise UsageError("--dataset and --synth are mutually exclusive")
    if not cfg["seeds"]:
        raise UsageError("at least one seed is required")
    return cfg


def config_digest(cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if k not in ("out", "save_scores")}
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _out_root(args) -> str:
    return args.out or os.environ.get(OUT_ROOT_ENV) or "runs"


def train_config_from(cfg: dict, master_seed: int) -> tr.TrainConfig:
    kw = {k: cfg[k] for k in _TRAIN_KEYS if k in cfg}
    kw["widths"] = tuple(kw.get("widths", (32, 16, 8)))
    return tr.TrainConfig(master_seed=master_seed, **kw)


# ---------------------------------------------------------------------------
# dataset plumbing

def parse_synth(text: str) -> tuple:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) not in (3, 4):
        raise UsageError(f"--synth expects D,N,SHIFT[,N_ANOM], got {text!r}")
    d, n = int(parts[0]), int(parts[1])
    shift = float(parts[2])
    n_anom = int(parts[3]) if len(parts) == 4 else max(1, n // 4)
    return d, n, shift, n_anom


def load_base_dataset(cfg: dict, seed: int) -> dk.SsadDataset:
    if cfg.get("synth"):
        d, n, shift, n_anom = parse_synth(cfg["synth"])
        return dk.synth_gaussian_ad(d, n, n_anom, shift, seed=seed)
    label_col = cfg["label_col"]
    if isinstance(label_col, str) and label_col.lstrip("-").isdigit():
        label_col = int(label_col)
    return dk.load_csv(cfg["dataset"], label_col, cfg["positive_token"])


def prepare_seed(cfg: dict, seed: int):
    """split -> standardize -> subsample [-> pollute] for one protocol seed."""
    base = load_base_dataset(cfg, seed)
    train, test = dk.split_stratified(base, cfg["train_fraction"], seed=seed)
    train, test, stats = dk.standardize(train, test)
    train = dk.subsample_labeled_outliers(train, cfg["gamma_l"], seed=seed)
    if cfg["gamma_p"] > 0:
        train = dk.pollute(train, cfg["gamma_p"], seed=seed)
    return train, test, stats


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(run_dir, command, cfg, digest) -> None:
    _write_json(os.path.join(run_dir, "manifest.json"),
                {"command": command, "digest": digest, "config": cfg})


# ---------------------------------------------------------------------------
# commands

def run_train(args) -> int:
    cfg = effective_config(args)
    digest = config_digest(cfg)
    seed = cfg["seeds"][0]
    train, test, stats = prepare_seed(cfg, seed)  # fails before any output
    config = train_config_from(cfg, master_seed=seed)

    run_dir = os.path.join(_out_root(args), f"train_{digest}")
    os.makedirs(run_dir, exist_ok=True)
    ens, hists = tr.train(config, train, cfg["method"])
    # the ensemble manifest doubles as the run manifest (shared manifest.json)
    md.save_ensemble(run_dir, ens, extra={
        "command": "train", "digest": digest, "config": cfg,
        "epochs": config.epochs,
        "standardize_mean": stats.mean.tolist(),
        "standardize_scale": stats.scale.tolist(),
    })
    for h in hists:
        h.save_csv(os.path.join(run_dir, f"history_seed{h.seed}.csv"))
        h.save_json(os.path.join(run_dir, f"history_seed{h.seed}.json"))
    print(run_dir)
    return EXIT_OK


def run_score(args) -> int:
    cfg = effective_config(args)
    digest = config_digest(cfg)
    ens, manifest = md.load_ensemble(args.model_dir)
    base = load_base_dataset(cfg, cfg["seeds"][0])
    if base.dim != manifest["in_dim"]:
        raise dk.DataError(
            f"dataset has {base.dim} features but the model expects "
            f"{manifest['in_dim']}")
    stats = dk.StandardizeStats(
        mean=np.array(manifest["standardize_mean"]),
        scale=np.array(manifest["standardize_scale"]))
    features = stats.apply(base.features)
    scores = md.ensemble_score(ens, features, n_samples=cfg["s_score"])

    run_dir = os.path.join(_out_root(args), f"score_{digest}")
    os.makedirs(run_dir, exist_ok=True)
    report = dk.EvalReport(
        auroc=float("nan"), scores=scores, labels=base.labels,
        seed=cfg["seeds"][0], config_digest=digest)
    try:
        report.auroc = dk.auroc(scores, base.labels)
    except ValueError:
        pass  # single-class input: scores only, no AUROC
    report.write_scores_csv(os.path.join(run_dir, f"scores_{digest}.csv"))
    _write_manifest(run_dir, "score", cfg, digest)
    print(run_dir)
    return EXIT_OK


def run_benchmark(args) -> int:
    cfg = effective_config(args)
    digest = config_digest(cfg)
    run_dir = os.path.join(_out_root(args), f"benchmark_{digest}")
    prepare_seed(cfg, cfg["seeds"][0])  # validate inputs before creating output
    os.makedirs(run_dir, exist_ok=True)

    per_seed = []
    try:
        for seed in cfg["seeds"]:
            train, test, _ = prepare_seed(cfg, seed)
            config = train_config_from(cfg, master_seed=seed)
            ens, _ = tr.train(config, train, cfg["method"])
            scores = md.ensemble_score(ens, test.features,
                                       n_samples=cfg["s_score"])
            auc = dk.auroc(scores, test.labels)
            per_seed.append({"seed": seed, "auroc": auc})
            if cfg.get("save_scores"):
                rep = dk.EvalReport(auroc=auc, scores=scores,
                                    labels=test.labels, seed=seed,
                                    config_digest=digest)
                rep.write_scores_csv(
                    os.path.join(run_dir, f"scores_{digest}_seed{seed}.csv"))
    except Exception as exc:
        _write_json(os.path.join(run_dir, "FAILED.json"),
                    {"error": str(exc), "completed_seeds": per_seed})
        raise

    aurocs = np.array([r["auroc"] for r in per_seed])
    report = {
        "command": "benchmark",
        "digest": digest,
        "method": cfg["method"],
        "gamma_l": cfg["gamma_l"],
        "gamma_p": cfg["gamma_p"],
        "n_seeds": len(per_seed),
        "single_seed": len(per_seed) == 1,
        "auroc_mean": float(aurocs.mean()),
        "auroc_stdev": float(aurocs.std(ddof=1)) if len(per_seed) > 1 else 0.0,
        "per_seed": per_seed,
        "config": cfg,
    }
    _write_json(os.path.join(run_dir, f"report_{digest}.json"), report)
    _write_manifest(run_dir, "benchmark", cfg, digest)
    print(f"{run_dir} auroc {report['auroc_mean']:.4f} "
          f"+/- {report['auroc_stdev']:.4f} over {len(per_seed)} seed(s)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            return run_train(args)
        if args.command == "benchmark":
            return run_benchmark(args)
        return run_score(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dk.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except tr.NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
