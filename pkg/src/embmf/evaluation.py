"""RMSE scoring, experiment runs, the lambda_beta sweep and validation grid search."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PreparedDataset, SparseRatings
from .model import Hyperparams, ModelParams, predict_many
from .trainer import fit

_logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    rmse: float
    n_test: int
    mode: str
    clamp: bool = False
    model_meta: dict = field(default_factory=dict)
    dataset: str = ""
    seconds: float = 0.0

    def __post_init__(self):
        if not self.rmse >= 0:
            raise ValueError(f"rmse must be >= 0, got {self.rmse}")
        if self.n_test <= 0:
            raise ValueError("n_test must be positive")


def clamp_predictions(pred: np.ndarray, scale: tuple[float, float]) -> np.ndarray:
    lo, hi = scale
    return np.clip(pred, lo, hi)


def rmse(params: ModelParams, test: SparseRatings, clamp: bool = False,
         scale: tuple[float, float] = (1.0, 5.0), mode: str = "in_matrix") -> EvalResult:
    """Root mean squared error of :func:`~embmf.model.predict` over ``test``."""
    if test.nnz == 0:
        raise ValueError("cannot score an empty test set")
    pred = predict_many(params, test.users, test.items)
    if clamp:
        pred = clamp_predictions(pred, scale)
    err = test.ratings - pred
    value = math.sqrt(float(np.mean(err * err)))
    return EvalResult(value, test.nnz, mode, clamp)


def check_split_mode(train: SparseRatings, test: SparseRatings, mode: str) -> None:
    in_train = train.item_counts() > 0
    test_items = np.unique(test.items)
    if mode == "in_matrix" and not in_train[test_items].all():
        raise ValueError("in-matrix evaluation needs every test item to have training ratings")
    if mode == "out_matrix" and in_train[test_items].any():
        raise ValueError("out-of-matrix evaluation needs test items absent from training")
    if mode not in ("in_matrix", "out_matrix"):
        raise ValueError(f"unknown evaluation mode {mode!r}")


def run_experiment(
    dataset: PreparedDataset,
    hyper: Hyperparams,
    mode: str | None = None,
    denominator_mode: str = "user_count",
    clamp: bool = False,
    threads: int = 1,
    on: str = "test",
    return_model: bool = False,
):
    """Train on ``dataset.train`` with clicks from the full log, score on ``on``.

    Returns an :class:`EvalResult`, or ``(EvalResult, ModelParams)`` with
    ``return_model=True``.
    """
    mode = mode or dataset.split.mode
    target = dataset.validation if on == "validation" else dataset.test
    if on not in ("test", "validation"):
        raise ValueError(f"on must be 'test' or 'validation', got {on!r}")
    check_split_mode(dataset.train, target, mode)
    S = dataset.ppmi(denominator_mode) if hyper.mode == "emb_mf" else None
    t0 = time.perf_counter()
    params, report = fit(dataset.train, S, hyper, threads=threads)
    result = rmse(params, target, clamp, dataset.scale, mode)
    result.seconds = time.perf_counter() - t0
    result.dataset = dataset.name
    result.model_meta = {
        "hyper": hyper.to_dict(),
        "denominator_mode": denominator_mode,
        "split_seed": dataset.split.seed,
        "evaluated_on": on,
        "sweeps_run": report.sweeps_run,
        "converged": report.converged,
        "final_objective": report.final_objective,
    }
    _logger.info("%s %s %s lambda_beta=%g: rmse %.4f on %d (%s)", dataset.name, mode, hyper.mode,
                 hyper.lambda_beta, result.rmse, result.n_test, on)
    if return_model:
        return result, params
    return result


def _warm(dataset: PreparedDataset, hypers: Sequence[Hyperparams], kwargs: dict) -> None:
    # build the shared PPMI once before worker threads race on the cache
    if any(h.mode == "emb_mf" for h in hypers):
        dataset.ppmi(kwargs.get("denominator_mode", "user_count"))


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def lambda_beta_sweep(dataset: PreparedDataset, hyper: Hyperparams, grid: Sequence[float],
                      workers: int = 1, **kwargs) -> list[tuple[float, float]]:
    """One experiment per lambda_beta value, everything else (seed included) fixed."""
    if not grid:
        raise ValueError("lambda_beta grid is empty")
    _warm(dataset, [hyper], kwargs)
    results = _map(lambda lb: run_experiment(dataset, hyper.replace(lambda_beta=float(lb)), **kwargs),
                   list(grid), workers)
    return [(float(lb), r.rmse) for lb, r in zip(grid, results)]


def expand_grid(base: Hyperparams, **axes: Sequence) -> list[Hyperparams]:
    """Cartesian product of the given hyperparameter axes over ``base``.

    >>> len(expand_grid(Hyperparams(), lambda_theta=[1, 10], lambda_beta=[10, 20, 50]))
    6
    """
    keys = list(axes)
    return [base.replace(**dict(zip(keys, combo))) for combo in itertools.product(*(axes[k] for k in keys))]


def grid_search_trials(dataset: PreparedDataset, hyper_grid: Sequence[Hyperparams],
                       workers: int = 1, **kwargs) -> list[tuple[Hyperparams, EvalResult]]:
    if not hyper_grid:
        raise ValueError("hyperparameter grid is empty")
    _warm(dataset, hyper_grid, kwargs)
    results = _map(lambda h: run_experiment(dataset, h, on="validation", **kwargs), list(hyper_grid), workers)
    return list(zip(hyper_grid, results))


def grid_search(dataset: PreparedDataset, hyper_grid: Sequence[Hyperparams],
                workers: int = 1, **kwargs) -> Hyperparams:
    """Validation-RMSE argmin over ``hyper_grid``; ties go to the earliest entry."""
    trials = grid_search_trials(dataset, hyper_grid, workers, **kwargs)
    best = min(range(len(trials)), key=lambda k: (trials[k][1].rmse, k))
    for h, r in trials:
        _logger.debug("grid point %s: validation rmse %.5f", h, r.rmse)
    return trials[best][0]


# ---------------------------------------------------------------------------

LEDGER_FIELDS = (
    "dataset", "mode", "model", "d", "lambda", "lambda_theta", "lambda_beta", "lambda_rho",
    "lambda_alpha", "lambda_b", "lambda_c", "denominator", "clamp", "evaluated_on", "seed",
    "sweeps", "rmse", "n_test", "seconds",
)


def ledger_row(result: EvalResult) -> dict:
    h = result.model_meta.get("hyper", {})
    return {
        "dataset": result.dataset,
        "mode": result.mode,
        "model": h.get("mode"),
        "d": h.get("d"),
        "lambda": h.get("lam"),
        "lambda_theta": h.get("lambda_theta"),
        "lambda_beta": h.get("lambda_beta"),
        "lambda_rho": h.get("lambda_rho"),
        "lambda_alpha": h.get("lambda_alpha"),
        "lambda_b": h.get("lambda_b"),
        "lambda_c": h.get("lambda_c"),
        "denominator": result.model_meta.get("denominator_mode"),
        "clamp": result.clamp,
        "evaluated_on": result.model_meta.get("evaluated_on", "test"),
        "seed": h.get("seed"),
        "sweeps": result.model_meta.get("sweeps_run"),
        "rmse": result.rmse,
        "n_test": result.n_test,
        "seconds": round(result.seconds, 3),
    }


def append_results(directory, results: Sequence[EvalResult], stem: str = "results") -> None:
    """Append rows to ``<stem>.csv`` (header written once) and mirror them to ``<stem>.jsonl``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    csv_path, jsonl_path = d / f"{stem}.csv", d / f"{stem}.jsonl"
    new = not csv_path.exists()
    with open(csv_path, "a", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=LEDGER_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in results:
            w.writerow(ledger_row(r))
    with open(jsonl_path, "a", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps({**ledger_row(r), "model_meta": r.model_meta}, sort_keys=True) + "\n")


def result_to_dict(result: EvalResult) -> dict:
    return asdict(result)
