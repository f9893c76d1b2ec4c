"""MAP training by block coordinate descent.

Objective (``B_ui = mu + b_u + c_i``)::

    1/2   sum_R (R_ui - B_ui - theta_u.beta_i)^2
  + lam/2 sum_S (S_ij - rho_i.alpha_j)^2
  + lambda_theta/2 |theta|^2 + lambda_beta/2 |beta - rho|^2
  + lambda_rho/2 |rho|^2 + lambda_alpha/2 |alpha|^2
  + lambda_b/2 |b|^2 + lambda_c/2 |c|^2

Every block update is the exact minimizer of the objective over that block
with the others held fixed.  Rows within a block are independent, so a
phase can be split across threads without changing any result.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .data import SparseRatings
from .model import Hyperparams, ModelParams, init_params
from .ppmi import PpmiMatrix

_logger = logging.getLogger(__name__)

# sweep order; beta is last so that items without training ratings end
# every sweep with beta_i == rho_i exactly
PHASES = ("b", "c", "theta", "rho", "alpha", "beta")
PMF_PHASES = ("theta", "beta")


class NumericalError(ArithmeticError):
    """Non-finite values, a singular system, or a failed descent check."""


class NotPositiveDefiniteError(NumericalError):
    pass


# ---------------------------------------------------------------------------
# kernels

@njit(nogil=True, cache=True)
def _chol_solve(A, y, d):
    """Solve A x = y in place using the lower triangle of A.

    A is overwritten by its Cholesky factor and y by the solution.
    Returns False when A is not (numerically) positive definite.
    """
    scale = 0.0
    for j in range(d):
        if A[j, j] > scale:
            scale = A[j, j]
    tiny = 1e-14 * scale
    for j in range(d):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if not s > tiny:
            return False
        ljj = math.sqrt(s)
        A[j, j] = ljj
        for i in range(j + 1, d):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / ljj
    for i in range(d):
        s = y[i]
        for k in range(i):
            s -= A[i, k] * y[k]
        y[i] = s / A[i, i]
    for i in range(d - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, d):
            s -= A[k, i] * y[k]
        y[i] = s / A[i, i]
    return True


@njit(nogil=True, cache=True)
def _ridge_rows(start, end, indptr, nbr, target, V, weight, ridge, prior, prior_scale, out):
    """out[r] = (weight sum V_k V_k^T + ridge I)^-1 (prior_scale prior[r] + weight sum t_k V_k).

    Rows with no neighbours get the ridge-only solution directly.  Returns
    the first row whose system is singular, or -1.
    """
    d = V.shape[1]
    A = np.empty((d, d))
    y = np.empty(d)
    for r in range(start, end):
        s = indptr[r]
        e = indptr[r + 1]
        if s == e:
            if ridge > 0.0 and prior_scale != 0.0:
                f = prior_scale / ridge
                for k in range(d):
                    out[r, k] = f * prior[r, k]
            else:
                for k in range(d):
                    out[r, k] = 0.0
            continue
        A[:, :] = 0.0
        y[:] = 0.0
        for p in range(s, e):
            j = nbr[p]
            t = target[p]
            for a in range(d):
                va = V[j, a]
                y[a] += t * va
                for c in range(a + 1):
                    A[a, c] += va * V[j, c]
        for a in range(d):
            y[a] = weight * y[a] + prior_scale * prior[r, a]
            for c in range(a + 1):
                A[a, c] *= weight
            A[a, a] += ridge
        if not _chol_solve(A, y, d):
            return r
        for k in range(d):
            out[r, k] = y[k]
    return -1


@njit(nogil=True, cache=True)
def _bias_rows(start, end, indptr, nbr, ratings, mu, other_bias, this_vec, other_vec, reg, out):
    d = this_vec.shape[1]
    for r in range(start, end):
        s = indptr[r]
        e = indptr[r + 1]
        if s == e:
            out[r] = 0.0
            continue
        acc = 0.0
        for p in range(s, e):
            j = nbr[p]
            dot = 0.0
            for k in range(d):
                dot += this_vec[r, k] * other_vec[j, k]
            acc += ratings[p] - mu - other_bias[j] - dot
        out[r] = acc / ((e - s) + reg)
    return -1


@njit(nogil=True, cache=True)
def _rating_sse(users, items, ratings, theta, beta, b, c, mu):
    d = theta.shape[1]
    total = 0.0
    for p in range(len(ratings)):
        u = users[p]
        i = items[p]
        dot = 0.0
        for k in range(d):
            dot += theta[u, k] * beta[i, k]
        r = ratings[p] - (mu + b[u] + c[i] + dot)
        total += r * r
    return total


@njit(nogil=True, cache=True)
def _ppmi_sse(indptr, indices, data, rho, alpha):
    d = rho.shape[1]
    total = 0.0
    for i in range(len(indptr) - 1):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            dot = 0.0
            for k in range(d):
                dot += rho[i, k] * alpha[j, k]
            r = data[p] - dot
            total += r * r
    return total


# ---------------------------------------------------------------------------
# row dispatch

class _Rows:
    """Runs a row kernel over [0, n) either inline or in contiguous chunks on a pool."""

    def __init__(self, threads: int = 1):
        self.threads = max(1, int(threads))
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def run(self, kernel, n_rows: int, *args) -> int:
        if self._pool is None or n_rows < 2 * self.threads:
            return kernel(0, n_rows, *args)
        bounds = np.linspace(0, n_rows, self.threads + 1).astype(np.int64)
        futures = [
            self._pool.submit(kernel, int(s), int(e), *args)
            for s, e in zip(bounds[:-1], bounds[1:])
            if e > s
        ]
        failed = [r for r in (f.result() for f in futures) if r >= 0]
        return min(failed) if failed else -1

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _rows(runner: _Rows | None, threads: int) -> _Rows:
    return runner if runner is not None else _Rows(threads)


def _check(status: int, block: str) -> None:
    if status >= 0:
        raise NumericalError(f"singular system updating {block}[{status}]")


def solve_spd(A, y) -> np.ndarray:
    """Solve ``A x = y`` for symmetric positive-definite ``A`` via Cholesky."""
    A = np.array(A, dtype=np.float64)
    y = np.array(y, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or y.shape != (A.shape[0],):
        raise ValueError("A must be square and y a matching vector")
    if not np.allclose(A, A.T, rtol=1e-12, atol=0):
        raise NotPositiveDefiniteError("matrix is not symmetric")
    if not _chol_solve(A, y, A.shape[0]):
        raise NotPositiveDefiniteError("matrix is not positive definite")
    return y


# ---------------------------------------------------------------------------
# block updates

def _row_ids(indptr: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def update_user_vectors(params: ModelParams, train: SparseRatings, hyper: Hyperparams,
                        threads: int = 1, runner: _Rows | None = None) -> np.ndarray:
    """theta_u = (sum beta_i beta_i^T + lambda_theta I)^-1 sum (R_ui - B_ui) beta_i."""
    b, c = params.b, params.c
    target = train.user_ratings - params.mu - b[_row_ids(train.user_indptr)] - c[train.user_items]
    out = np.empty_like(params.theta)
    rows = _rows(runner, threads)
    try:
        status = rows.run(_ridge_rows, train.n_users, train.user_indptr, train.user_items, target,
                          params.beta, 1.0, float(hyper.lambda_theta), params.theta, 0.0, out)
    finally:
        if runner is None:
            rows.close()
    _check(status, "theta")
    return out


def update_item_vectors(params: ModelParams, train: SparseRatings, hyper: Hyperparams,
                        threads: int = 1, runner: _Rows | None = None) -> np.ndarray:
    """beta_i = (sum theta_u theta_u^T + lambda_beta I)^-1 (lambda_beta rho_i + sum (R_ui - B_ui) theta_u).

    Items without ratings get beta_i = rho_i.  In ``pmf_baseline`` mode the
    prior mean is zero instead of rho_i.
    """
    b, c = params.b, params.c
    target = train.item_ratings - params.mu - b[train.item_users] - c[_row_ids(train.item_indptr)]
    prior_scale = 0.0 if hyper.mode == "pmf_baseline" else float(hyper.lambda_beta)
    out = np.empty_like(params.beta)
    rows = _rows(runner, threads)
    try:
        status = rows.run(_ridge_rows, train.n_items, train.item_indptr, train.item_users, target,
                          params.theta, 1.0, float(hyper.lambda_beta), params.rho, prior_scale, out)
    finally:
        if runner is None:
            rows.close()
    _check(status, "beta")
    return out


def update_user_bias(params: ModelParams, train: SparseRatings, hyper: Hyperparams,
                     threads: int = 1, runner: _Rows | None = None) -> np.ndarray:
    out = np.empty_like(params.b)
    rows = _rows(runner, threads)
    try:
        rows.run(_bias_rows, train.n_users, train.user_indptr, train.user_items, train.user_ratings,
                 params.mu, params.c, params.theta, params.beta, float(hyper.lambda_b), out)
    finally:
        if runner is None:
            rows.close()
    return out


def update_item_bias(params: ModelParams, train: SparseRatings, hyper: Hyperparams,
                     threads: int = 1, runner: _Rows | None = None) -> np.ndarray:
    out = np.empty_like(params.c)
    rows = _rows(runner, threads)
    try:
        rows.run(_bias_rows, train.n_items, train.item_indptr, train.item_users, train.item_ratings,
                 params.mu, params.b, params.beta, params.theta, float(hyper.lambda_c), out)
    finally:
        if runner is None:
            rows.close()
    return out


def update_embedding_vectors(params: ModelParams, S: PpmiMatrix, hyper: Hyperparams,
                             threads: int = 1, runner: _Rows | None = None) -> np.ndarray:
    """rho_i = (lam sum alpha_j alpha_j^T + (lambda_beta + lambda_rho) I)^-1 (lambda_beta beta_i + lam sum S_ij alpha_j)."""
    out = np.empty_like(params.rho)
    rows = _rows(runner, threads)
    try:
        status = rows.run(_ridge_rows, S.n_items, S.indptr, S.indices, S.data, params.alpha,
                          float(hyper.lam), float(hyper.lambda_beta + hyper.lambda_rho),
                          params.beta, float(hyper.lambda_beta), out)
    finally:
        if runner is None:
            rows.close()
    _check(status, "rho")
    return out


def update_context_vectors(params: ModelParams, S: PpmiMatrix, hyper: Hyperparams,
                           threads: int = 1, runner: _Rows | None = None) -> np.ndarray:
    """alpha_j = (lam sum rho_i rho_i^T + lambda_alpha I)^-1 lam sum S_ij rho_i (S is symmetric)."""
    out = np.empty_like(params.alpha)
    rows = _rows(runner, threads)
    try:
        status = rows.run(_ridge_rows, S.n_items, S.indptr, S.indices, S.data, params.rho,
                          float(hyper.lam), float(hyper.lambda_alpha), params.alpha, 0.0, out)
    finally:
        if runner is None:
            rows.close()
    _check(status, "alpha")
    return out


# ---------------------------------------------------------------------------

def objective(params: ModelParams, train: SparseRatings, S: PpmiMatrix | None, hyper: Hyperparams) -> float:
    params.check_finite()
    if train.n_users != params.n_users or train.n_items != params.n_items:
        raise ValueError("rating matrix and parameters disagree on dimensions")
    total = 0.5 * _rating_sse(train.users, train.items, train.ratings, params.theta, params.beta,
                              params.b, params.c, params.mu)
    total += 0.5 * hyper.lambda_theta * float(np.sum(params.theta ** 2))
    if hyper.mode == "pmf_baseline":
        total += 0.5 * hyper.lambda_beta * float(np.sum(params.beta ** 2))
        return float(total)
    if S is not None and S.nnz and hyper.lam:
        if S.n_items != params.n_items:
            raise ValueError("PPMI matrix and parameters disagree on the number of items")
        total += 0.5 * hyper.lam * _ppmi_sse(S.indptr, S.indices, S.data, params.rho, params.alpha)
    total += 0.5 * hyper.lambda_beta * float(np.sum((params.beta - params.rho) ** 2))
    total += 0.5 * hyper.lambda_rho * float(np.sum(params.rho ** 2))
    total += 0.5 * hyper.lambda_alpha * float(np.sum(params.alpha ** 2))
    total += 0.5 * hyper.lambda_b * float(np.sum(params.b ** 2))
    total += 0.5 * hyper.lambda_c * float(np.sum(params.c ** 2))
    return float(total)


@dataclass
class TrainReport:
    objective_per_sweep: list[float] = field(default_factory=list)
    sweeps_run: int = 0
    converged: bool = False
    wall_time_per_sweep: list[float] = field(default_factory=list)
    initial_objective: float = math.nan
    # (sweep, phase, objective) after every phase; filled when check_descent is on
    phase_objectives: list[tuple[int, str, float]] = field(default_factory=list)

    @property
    def final_objective(self) -> float:
        return self.objective_per_sweep[-1] if self.objective_per_sweep else self.initial_objective

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "objective_per_sweep": self.objective_per_sweep,
            "sweeps_run": self.sweeps_run,
            "converged": self.converged,
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
        }
        if include_timing:
            out["wall_time_per_sweep"] = self.wall_time_per_sweep
        return out

    def save(self, path, include_timing: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(include_timing), f, indent=1, sort_keys=True)
            f.write("\n")


def _phase(name: str, params: ModelParams, train: SparseRatings, S: PpmiMatrix,
           hyper: Hyperparams, rows: _Rows) -> None:
    if name == "b":
        params.b = update_user_bias(params, train, hyper, runner=rows)
    elif name == "c":
        params.c = update_item_bias(params, train, hyper, runner=rows)
    elif name == "theta":
        params.theta = update_user_vectors(params, train, hyper, runner=rows)
    elif name == "beta":
        params.beta = update_item_vectors(params, train, hyper, runner=rows)
    elif name == "rho":
        params.rho = update_embedding_vectors(params, S, hyper, runner=rows)
    elif name == "alpha":
        params.alpha = update_context_vectors(params, S, hyper, runner=rows)
    else:
        raise ValueError(name)


def fit(
    train: SparseRatings,
    S: PpmiMatrix | None,
    hyper: Hyperparams,
    threads: int = 1,
    check_descent: bool = False,
    progress: Callable[[dict], None] | None = None,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Train by coordinate descent until the relative objective decrease
    falls below ``hyper.rel_tol`` or ``hyper.max_sweeps`` is reached.

    ``check_descent`` evaluates the objective after every phase and raises
    :class:`NumericalError` if a phase increased it (relative slack 1e-9).
    """
    if S is None:
        S = PpmiMatrix.empty(train.n_items)
    if S.n_items != train.n_items:
        raise ValueError(f"dimension mismatch: PPMI has {S.n_items} items, ratings have {train.n_items}")
    params = init.copy() if init is not None else init_params(train.n_users, train.n_items, hyper)
    params.mu = train.global_mean
    phases = PMF_PHASES if hyper.mode == "pmf_baseline" else PHASES
    if hyper.mode == "pmf_baseline":
        params.b[:] = 0.0
        params.c[:] = 0.0
        params.rho[:] = 0.0
        params.alpha[:] = 0.0

    report = TrainReport()
    prev = objective(params, train, S, hyper)
    report.initial_objective = prev
    with _Rows(threads) as rows:
        for sweep in range(1, hyper.max_sweeps + 1):
            t0 = time.perf_counter()
            before = prev
            for name in phases:
                _phase(name, params, train, S, hyper, rows)
                if check_descent:
                    after = objective(params, train, S, hyper)
                    report.phase_objectives.append((sweep, name, after))
                    if after > before + 1e-9 * abs(before):
                        raise NumericalError(
                            f"phase {name} increased the objective in sweep {sweep}: {before!r} -> {after!r}"
                        )
                    before = after
            cur = objective(params, train, S, hyper)
            if not math.isfinite(cur):
                raise NumericalError(f"objective became non-finite in sweep {sweep}")
            elapsed = time.perf_counter() - t0
            report.objective_per_sweep.append(cur)
            report.wall_time_per_sweep.append(elapsed)
            report.sweeps_run = sweep
            if progress is not None:
                progress({"sweep": sweep, "objective": cur, "seconds": elapsed})
            _logger.debug("sweep %d: objective %.6f (%.2fs)", sweep, cur, elapsed)
            rel = (prev - cur) / max(abs(prev), 1e-300)
            prev = cur
            if rel < hyper.rel_tol:
                report.converged = True
                break
    _logger.info("trained %s d=%d: %d sweeps, objective %.6f, converged=%s",
                 hyper.mode, hyper.d, report.sweeps_run, report.final_objective, report.converged)
    params.meta["training"] = report.to_dict(include_timing=False)
    return params, report
