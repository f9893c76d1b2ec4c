import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embmf.data import SparseRatings, SplitSpec, prepare_dataset
from embmf.evaluation import (
    EvalResult,
    append_results,
    expand_grid,
    grid_search,
    grid_search_trials,
    lambda_beta_sweep,
    rmse,
    run_experiment,
)
from embmf.model import Hyperparams, ModelParams
from synthetic import make_interactions


def const_model(N, M, mu):
    z = lambda *s: np.zeros(s)
    return ModelParams(z(N, 1), z(M, 1), z(M, 1), z(M, 1), z(N), z(M), mu=mu)


@pytest.fixture(scope="module")
def datasets():
    recs = make_interactions(120, 80, 25, seed=3)
    return {
        "in_matrix": prepare_dataset(recs, 50, SplitSpec("in_matrix", seed=1), name="syn-in"),
        "out_matrix": prepare_dataset(recs, 50, SplitSpec("out_matrix", seed=1), name="syn-out"),
    }


SMALL = Hyperparams(d=4, max_sweeps=15, lambda_beta=10)


class TestRmse:
    def test_perfect(self):
        T = SparseRatings(2, 2, [0, 1], [0, 1], [3.0, 3.0])
        assert rmse(const_model(2, 2, 3.0), T).rmse == 0.0

    def test_constant_prediction(self):
        T = SparseRatings(2, 1, [0, 1], [0, 0], [3.0, 5.0])
        assert rmse(const_model(2, 1, 4.0), T).rmse == pytest.approx(1.0, abs=1e-15)

    def test_mean_prediction_is_std(self):
        rng = np.random.default_rng(0)
        r = rng.integers(1, 6, 50).astype(float)
        T = SparseRatings(50, 1, np.arange(50), np.zeros(50, int), r)
        assert rmse(const_model(50, 1, r.mean()), T).rmse == pytest.approx(r.std(), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        n = 20
        T = SparseRatings(n, 3, np.arange(n), rng.integers(0, 3, n), rng.uniform(1, 5, n))
        p = ModelParams(rng.normal(size=(n, 2)), rng.normal(size=(3, 2)), np.zeros((3, 2)),
                        np.zeros((3, 2)), rng.normal(size=n), rng.normal(size=3), mu=3.0)
        perm = rng.permutation(n)
        Tp = SparseRatings(n, 3, T.users[perm], T.items[perm], T.ratings[perm])
        assert rmse(p, Tp).rmse == pytest.approx(rmse(p, T).rmse, rel=1e-12)

    def test_clamp(self):
        T = SparseRatings(1, 1, [0], [0], [5.0])
        assert rmse(const_model(1, 1, 6.5), T).rmse == pytest.approx(1.5)
        assert rmse(const_model(1, 1, 6.5), T, clamp=True).rmse == 0.0
        # clamping is the identity for in-range predictions
        assert rmse(const_model(1, 1, 4.2), T, clamp=True).rmse == rmse(const_model(1, 1, 4.2), T).rmse

    def test_empty_test(self):
        with pytest.raises(ValueError):
            rmse(const_model(1, 1, 3.0), SparseRatings.empty(1, 1))

    def test_result_validation(self):
        with pytest.raises(ValueError):
            EvalResult(-1.0, 3, "in_matrix")
        with pytest.raises(ValueError):
            EvalResult(1.0, 0, "in_matrix")


class TestRunExperiment:
    @pytest.mark.parametrize("mode", ["in_matrix", "out_matrix"])
    def test_runs(self, datasets, mode):
        r = run_experiment(datasets[mode], SMALL)
        assert r.mode == mode
        assert r.n_test == datasets[mode].test.nnz
        assert 0 < r.rmse < 3
        assert r.model_meta["hyper"]["lambda_beta"] == 10

    def test_out_matrix_predictions_vary(self, datasets):
        ds = datasets["out_matrix"]
        _, p = run_experiment(ds, SMALL, return_model=True)
        cold = np.unique(ds.test.items)
        assert np.var(p.beta[cold] @ p.theta.T) > 0
        assert np.array_equal(p.beta[cold], p.rho[cold])

    def test_wrong_mode_rejected(self, datasets):
        with pytest.raises(ValueError):
            run_experiment(datasets["out_matrix"], SMALL, mode="in_matrix")
        with pytest.raises(ValueError):
            run_experiment(datasets["in_matrix"], SMALL, on="train")

    def test_validation_target(self, datasets):
        ds = datasets["in_matrix"]
        r = run_experiment(ds, SMALL, on="validation")
        assert r.n_test == ds.validation.nnz

    def test_pmf_baseline(self, datasets):
        r = run_experiment(datasets["in_matrix"], SMALL.replace(mode="pmf_baseline"))
        assert r.model_meta["hyper"]["mode"] == "pmf_baseline"

    def test_bitwise_rerun(self, datasets):
        a = run_experiment(datasets["in_matrix"], SMALL)
        b = run_experiment(datasets["in_matrix"], SMALL)
        assert a.rmse == b.rmse


class TestSweepAndGrid:
    def test_singleton_sweep_matches_experiment(self, datasets):
        ds = datasets["in_matrix"]
        ((lb, value),) = lambda_beta_sweep(ds, SMALL, [25.0])
        assert lb == 25.0
        assert value == run_experiment(ds, SMALL.replace(lambda_beta=25.0)).rmse

    def test_sweep_workers_agree(self, datasets):
        ds = datasets["in_matrix"]
        grid = [1.0, 10.0, 100.0]
        assert lambda_beta_sweep(ds, SMALL, grid, workers=1) == lambda_beta_sweep(ds, SMALL, grid, workers=3)

    def test_empty_grid(self, datasets):
        with pytest.raises(ValueError):
            lambda_beta_sweep(datasets["in_matrix"], SMALL, [])
        with pytest.raises(ValueError):
            grid_search(datasets["in_matrix"], [])

    def test_expand_grid(self):
        g = expand_grid(SMALL, lambda_theta=[1, 10], lambda_beta=[10, 20, 50])
        assert len(g) == 6
        assert [(h.lambda_theta, h.lambda_beta) for h in g][:3] == [(1, 10), (1, 20), (1, 50)]

    def test_singleton_grid(self, datasets):
        assert grid_search(datasets["in_matrix"], [SMALL]) == SMALL

    def test_extreme_ridge_loses(self):
        ds = prepare_dataset(make_interactions(300, 150, 40, seed=3), 100, SplitSpec("in_matrix", seed=1))
        grid = [SMALL.replace(lambda_theta=1e9), SMALL.replace(lambda_theta=10.0)]
        assert grid_search(ds, grid).lambda_theta == 10.0

    def test_returns_validation_argmin(self, datasets):
        ds = datasets["in_matrix"]
        grid = expand_grid(SMALL, lambda_beta=[1, 20, 200])
        trials = grid_search_trials(ds, grid)
        best = grid_search(ds, grid)
        assert all(r.model_meta["evaluated_on"] == "validation" for _, r in trials)
        assert min(r.rmse for _, r in trials) == dict((h, r.rmse) for h, r in trials)[best]

    def test_ties_go_first(self, datasets):
        grid = [SMALL.replace(lambda_b=1.0), SMALL.replace(lambda_b=1.0, lambda_c=1.0)]
        assert grid_search(datasets["in_matrix"], grid) is grid[0]


class TestLedger:
    def test_append(self, tmp_path, datasets):
        r = run_experiment(datasets["in_matrix"], SMALL)
        append_results(tmp_path, [r])
        append_results(tmp_path, [r])
        lines = (tmp_path / "results.csv").read_text().splitlines()
        assert lines[0].startswith("dataset,mode,model,d,")
        assert len(lines) == 3
        rows = [json.loads(x) for x in (tmp_path / "results.jsonl").read_text().splitlines()]
        assert rows[0]["rmse"] == r.rmse
        assert rows[0]["model_meta"]["hyper"]["d"] == 4


@pytest.mark.parametrize("pct", [10, 50])
def test_click_data_helps_on_synthetic(pct):
    # the synthetic log draws clicks and ratings from the same latent tastes,
    # so the tuned click-coupled model should beat the tuned baseline
    ds = prepare_dataset(make_interactions(600, 400, 60, seed=3), pct, SplitSpec("in_matrix", seed=1))
    base = Hyperparams(d=10, max_sweeps=30)
    emb = grid_search(ds, expand_grid(base, lambda_theta=[5, 15], lambda_beta=[5, 20, 50]))
    pmf = grid_search(ds, expand_grid(base.replace(mode="pmf_baseline"),
                                      lambda_theta=[5, 15, 40], lambda_beta=[5, 15, 40]))
    assert run_experiment(ds, emb).rmse < run_experiment(ds, pmf).rmse - 0.03
