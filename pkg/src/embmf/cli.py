"""Command-line pipeline: prepare -> ppmi -> train -> eval / sweep / predict.

Every stage reads and writes files under ``--out``.  Settings come from
defaults, then an optional YAML/JSON ``--config`` file, then flags.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DataError, PreparedDataset, SplitSpec, parse_interactions, prepare_dataset
from .evaluation import append_results, lambda_beta_sweep, rmse
from .model import Hyperparams, ModelFileError, load_model, predict, save_model
from .ppmi import PpmiMatrix, build_ppmi, count_cooccurrence
from .trainer import NumericalError, fit

_logger = logging.getLogger("embmf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    out: str | None = None
    input: str | None = None
    format: str = "movielens_dat"
    name: str = "dataset"
    percent: float = 100.0
    mode: str = "in_matrix"
    train_fraction: float = 0.8
    validation_fraction: float = 0.1
    seed: int = 0
    denominator: str = "user_count"
    max_clicks_per_user: int | None = None
    scale: list = field(default_factory=lambda: [1.0, 5.0])
    clamp: bool = False
    threads: int = 1
    on: str = "test"
    model: str = "emb_mf"
    d: int = 20
    lam: float = 1.0
    lambda_theta: float = 1.0
    lambda_beta: float = 20.0
    lambda_rho: float = 0.1
    lambda_alpha: float = 0.1
    lambda_b: float = 1.0
    lambda_c: float = 1.0
    max_sweeps: int = 50
    rel_tol: float = 1e-4
    init_scale: float = 0.1
    lambda_beta_grid: list = field(default_factory=lambda: [0.1, 1.0, 10.0, 20.0, 50.0, 100.0, 1000.0])

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            d=self.d, lam=self.lam, lambda_theta=self.lambda_theta, lambda_beta=self.lambda_beta,
            lambda_rho=self.lambda_rho, lambda_alpha=self.lambda_alpha, lambda_b=self.lambda_b,
            lambda_c=self.lambda_c, max_sweeps=self.max_sweeps, rel_tol=self.rel_tol,
            init_scale=self.init_scale, seed=self.seed, mode=self.model,
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.mode, self.train_fraction, self.validation_fraction, self.seed)


CHOICES = {
    "format": ("movielens_dat", "csv"),
    "mode": ("in_matrix", "out_matrix"),
    "denominator": ("user_count", "pair_count"),
    "model": ("emb_mf", "pmf_baseline"),
    "on": ("test", "validation"),
}

REQUIRED = {
    "prepare": ("out", "input"),
    "ppmi": ("out",),
    "train": ("out",),
    "eval": ("out",),
    "sweep": ("out",),
    "predict": ("out",),
}


def load_config(path: str | None, overrides: dict, command: str) -> RunConfig:
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with open(p, encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: config must be a mapping of keys to values")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    problems = [f"missing required setting: {k}" for k in REQUIRED[command] if getattr(cfg, k) in (None, "")]
    for key, allowed in CHOICES.items():
        if getattr(cfg, key) not in allowed:
            problems.append(f"{key} must be one of {', '.join(allowed)}, got {getattr(cfg, key)!r}")
    try:
        cfg.hyperparams()
        cfg.split_spec()
    except (TypeError, ValueError) as e:
        problems.append(str(e))
    if len(cfg.scale) != 2 or not cfg.scale[0] < cfg.scale[1]:
        problems.append(f"scale must be [min, max], got {cfg.scale!r}")
    if cfg.threads < 1:
        problems.append("threads must be >= 1")
    if problems:
        raise ConfigError(f"invalid configuration for {command}:\n  " + "\n  ".join(problems))
    return cfg


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(cfg: RunConfig) -> int:
    if not Path(cfg.input).exists():
        raise ConfigError(f"input file not found: {cfg.input}")
    records = parse_interactions(cfg.input, cfg.format)
    ds = prepare_dataset(records, cfg.percent, cfg.split_spec(), cfg.name, tuple(cfg.scale))
    ds.save(cfg.out)
    m = ds.manifest()
    print(f"prepared {cfg.name}: {m['counts']} ratings, density {100 * m['density']['ratings']:.4f}%"
          f" (train {100 * m['density']['train']:.4f}%) -> {cfg.out}")
    return EXIT_OK


def _load_dataset(cfg: RunConfig) -> PreparedDataset:
    return PreparedDataset.load(cfg.out)


def cmd_ppmi(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    if ds.clicks.n_clicks == 0:
        _logger.warning("click log is empty; writing an empty PPMI matrix")
    stats = count_cooccurrence(ds.clicks, cfg.max_clicks_per_user)
    S = build_ppmi(stats, cfg.denominator)
    S.save(Path(cfg.out) / "ppmi.csv")
    print(f"ppmi: nnz={S.nnz} density={S.density:.6f} mode={cfg.denominator}")
    return EXIT_OK


def _load_ppmi(cfg: RunConfig, n_items: int) -> PpmiMatrix:
    path = Path(cfg.out) / "ppmi.csv"
    if not path.exists():
        raise ConfigError(f"{path} not found; run the ppmi command first")
    S = PpmiMatrix.load(path)
    if S.n_items != n_items:
        raise DataError(f"dimension mismatch: PPMI matrix has {S.n_items} items, rating id map has {n_items}")
    return S


def cmd_train(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    hyper = cfg.hyperparams()
    S = _load_ppmi(cfg, ds.train.n_items) if hyper.mode == "emb_mf" else None
    out = Path(cfg.out)
    with open(out / "progress.jsonl", "w", encoding="utf-8") as log:
        def progress(event):
            log.write(json.dumps(event) + "\n")
            log.flush()

        params, report = fit(ds.train, S, hyper, threads=cfg.threads, progress=progress)
    save_model(params, hyper, out / "model.bin", id_maps="manifest.json",
               training=report.to_dict(include_timing=False))
    report.save(out / "train_report.json")
    print(f"trained {hyper.mode}: {report.sweeps_run} sweeps, objective {report.final_objective:.6f},"
          f" converged={report.converged}")
    return EXIT_OK


def _load_trained(cfg: RunConfig):
    path = Path(cfg.out) / "model.bin"
    if not path.exists():
        raise ConfigError(f"{path} not found; run the train command first")
    return load_model(path)


def cmd_eval(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    params, hyper = _load_trained(cfg)
    target = ds.validation if cfg.on == "validation" else ds.test
    result = rmse(params, target, cfg.clamp, ds.scale, ds.split.mode)
    result.dataset = ds.name
    result.model_meta = {"hyper": hyper.to_dict(), "denominator_mode": cfg.denominator,
                         "evaluated_on": cfg.on, "split_seed": ds.split.seed,
                         "sweeps_run": params.meta.get("training", {}).get("sweeps_run")}
    append_results(cfg.out, [result])
    print(f"rmse={result.rmse:.6f} n={result.n_test} mode={result.mode} clamp={result.clamp}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    hyper = cfg.hyperparams()
    if hyper.mode != "emb_mf":
        raise ConfigError("the lambda_beta sweep needs model emb_mf")
    S = _load_ppmi(cfg, ds.train.n_items)
    ds._ppmi_cache[cfg.denominator] = S
    rows = lambda_beta_sweep(ds, hyper, [float(x) for x in cfg.lambda_beta_grid], workers=cfg.threads,
                             denominator_mode=cfg.denominator, clamp=cfg.clamp, on=cfg.on)
    with open(Path(cfg.out) / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lambda_beta", "rmse"])
        for lb, r in rows:
            w.writerow([repr(lb), repr(r)])
            print(f"lambda_beta={lb:g} rmse={r:.6f}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, user: str, item: str) -> int:
    params, _ = _load_trained(cfg)
    with open(Path(cfg.out) / "manifest.json", encoding="utf-8") as f:
        maps = json.load(f)["id_maps"]
    u = {x: k for k, x in enumerate(maps["users"])}.get(user)
    i = {x: k for k, x in enumerate(maps["items"])}.get(item)
    print(repr(predict(params, u, i)))
    return EXIT_OK


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dashed(choice: str) -> str:
    return choice.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--out", help="working directory for all pipeline files")
    common.add_argument("--input", help="raw interaction file (prepare)")
    common.add_argument("--format", choices=["movielens_dat", "csv"])
    common.add_argument("--name", help="dataset label used in result ledgers")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", type=_dashed, choices=["in_matrix", "out_matrix"],
                        help="split / evaluation mode (in-matrix or out-matrix)")
    common.add_argument("--percent", type=float, help="percentage of ratings to keep")
    common.add_argument("--denominator", type=_dashed, choices=["user_count", "pair_count"])
    common.add_argument("--clamp", action="store_const", const=True, help="clip predictions to the rating scale")
    common.add_argument("--threads", type=int)
    common.add_argument("--on", choices=["test", "validation"], help="split to evaluate on")
    common.add_argument("--model", type=_dashed, choices=["emb_mf", "pmf_baseline"])
    common.add_argument("--d", type=int, help="latent dimensionality")
    common.add_argument("--lambda", dest="lam", type=float)
    for name in ("theta", "beta", "rho", "alpha", "b", "c"):
        common.add_argument(f"--lambda-{name}", dest=f"lambda_{name}", type=float)
    common.add_argument("--max-sweeps", type=int)
    common.add_argument("--rel-tol", type=float)
    common.add_argument("--grid", dest="lambda_beta_grid",
                        type=lambda s: [float(x) for x in s.split(",") if x.strip()],
                        help="comma-separated lambda_beta values for sweep")

    parser = _Parser(prog="embmf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="derive clicks and rating splits")
    sub.add_parser("ppmi", parents=[common], help="build the PPMI matrix from the click log")
    sub.add_parser("train", parents=[common], help="fit the model by coordinate descent")
    sub.add_parser("eval", parents=[common], help="score the trained model (RMSE)")
    sub.add_parser("sweep", parents=[common], help="lambda_beta sensitivity sweep")
    p = sub.add_parser("predict", parents=[common], help="predict one rating")
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("EMBMF_LOG", "info").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "INFO"
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    opts = vars(args)
    command = opts.pop("command")
    config_path = opts.pop("config")
    user, item = opts.pop("user", None), opts.pop("item", None)
    try:
        cfg = load_config(config_path, opts, command)
        if command == "predict":
            return cmd_predict(cfg, user, item)
        return {
            "prepare": cmd_prepare,
            "ppmi": cmd_ppmi,
            "train": cmd_train,
            "eval": cmd_eval,
            "sweep": cmd_sweep,
        }[command](cfg)
    except (ConfigError, FileNotFoundError) as e:
        print(f"embmf: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"embmf: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ModelFileError, ValueError) as e:
        print(f"embmf: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
