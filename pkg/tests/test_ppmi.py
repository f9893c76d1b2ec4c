import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embmf.data import ClickLog
from embmf.ppmi import (
    PpmiMatrix,
    UndefinedItemError,
    build_ppmi,
    count_cooccurrence,
    empirical_pmi,
)
from oracles import brute_force_ppmi

A, B, C, D = range(4)


def log_of(*sets, n_items=None):
    n_items = n_items if n_items is not None else (max((max(s) for s in sets if s), default=-1) + 1)
    return ClickLog(len(sets), n_items, [frozenset(s) for s in sets])


@pytest.fixture
def three_users():
    return log_of({A, B}, {A, B}, {C})


class TestCounting:
    def test_three_user_fixture(self, three_users):
        st_ = count_cooccurrence(three_users)
        assert st_.item_user_count.tolist() == [2, 2, 1]
        assert st_.pair_user_count(A, B) == 2
        assert st_.pair_user_count(B, A) == 2
        assert st_.pair_user_count(A, C) == 0
        assert st_.n_users_total == 3
        assert st_.n_pairs_total == 4

    def test_single_click(self):
        st_ = count_cooccurrence(log_of({A}))
        assert len(st_.pair_count) == 0
        assert st_.n_pairs_total == 0

    def test_triangle(self):
        st_ = count_cooccurrence(log_of({A, B, C}))
        assert list(zip(st_.pair_i.tolist(), st_.pair_j.tolist(), st_.pair_count.tolist())) == [
            (A, B, 1), (A, C, 1), (B, C, 1)
        ]
        assert st_.n_pairs_total == 6

    def test_empty_log(self):
        st_ = count_cooccurrence(ClickLog(0, 3, []))
        assert st_.n_users_total == 0 and len(st_.pair_count) == 0

    def test_invariants_random(self):
        rng = np.random.default_rng(0)
        sets = [set(rng.choice(30, rng.integers(0, 12), replace=False).tolist()) for _ in range(50)]
        count_cooccurrence(log_of(*sets, n_items=30)).check()

    def test_cap_skips_heavy_users(self, caplog):
        st_ = count_cooccurrence(log_of({A, B}, {A, B, C, D}), max_clicks_per_user=2)
        assert st_.n_users_total == 1
        assert st_.item_user_count.tolist() == [1, 1, 0, 0]
        assert st_.n_pairs_total == 2
        assert "skipping 1 user" in caplog.text


class TestEmpiricalPmi:
    def test_user_count(self, three_users):
        st_ = count_cooccurrence(three_users)
        assert empirical_pmi(st_, A, B) == pytest.approx(math.log(1.5), abs=1e-15)
        assert empirical_pmi(st_, A, B) == pytest.approx(0.4055, abs=5e-5)

    def test_pair_count(self, three_users):
        st_ = count_cooccurrence(three_users)
        # #(A,B) |D| / (#(A) #(B)) = 2 * 4 / 4
        assert empirical_pmi(st_, A, B, "pair_count") == pytest.approx(math.log(2.0), abs=1e-15)

    def test_zero_when_independent(self):
        # #(A,B) U = 1 * 4 = #(A) #(B) = 2 * 2
        st_ = count_cooccurrence(log_of({A, B}, {A}, {B}, set(), n_items=2))
        assert empirical_pmi(st_, A, B) == 0.0

    def test_disjoint_is_minus_inf(self, three_users):
        assert empirical_pmi(count_cooccurrence(three_users), A, C) == -math.inf

    def test_errors(self):
        st_ = count_cooccurrence(log_of({A, B}, n_items=3))
        with pytest.raises(UndefinedItemError):
            empirical_pmi(st_, A, C)
        with pytest.raises(ValueError):
            empirical_pmi(st_, A, A)


class TestBuild:
    def test_three_user_fixture(self, three_users):
        S = build_ppmi(count_cooccurrence(three_users))
        assert S.nnz == 2
        assert S.rows() == {A: [(B, pytest.approx(math.log(1.5)))], B: [(A, pytest.approx(math.log(1.5)))]}

    def test_everyone_clicks_everything(self):
        S = build_ppmi(count_cooccurrence(log_of({A, B, C}, {A, B, C}, {A, B, C})))
        assert S.nnz == 0

    def test_empty(self):
        for mode in ("user_count", "pair_count"):
            S = build_ppmi(count_cooccurrence(ClickLog(0, 4, [])), mode)
            assert S.nnz == 0 and S.n_items == 4

    def test_invariants_checked(self):
        bad = PpmiMatrix.from_triples(2, [0], [1], [0.5])
        with pytest.raises(AssertionError, match="symmetric"):
            bad.check()
        with pytest.raises(AssertionError, match="diagonal"):
            PpmiMatrix.from_triples(2, [0], [0], [0.5]).check()
        with pytest.raises(AssertionError, match="positive"):
            PpmiMatrix.from_triples(2, [0, 1], [1, 0], [-0.5, -0.5]).check()

    def test_unknown_mode(self, three_users):
        with pytest.raises(ValueError):
            build_ppmi(count_cooccurrence(three_users), "bogus")

    @pytest.mark.parametrize("mode", ["user_count", "pair_count"])
    def test_save_load(self, tmp_path, mode):
        rng = np.random.default_rng(1)
        sets = [set(rng.choice(12, rng.integers(1, 6), replace=False).tolist()) for _ in range(20)]
        S = build_ppmi(count_cooccurrence(log_of(*sets, n_items=12)), mode)
        S.save(tmp_path / "ppmi.csv")
        back = PpmiMatrix.load(tmp_path / "ppmi.csv")
        assert back.denominator_mode == mode
        assert np.array_equal(back.to_dense(), S.to_dense())

    def test_adding_single_item_user(self):
        # Pairs that do not involve the added user's item keep their stored
        # status and shift by exactly log((U+1)/U) in user_count mode.
        base = [{A, B}, {A, B}, {B, C}, {C, D}, {A, D}]
        before = build_ppmi(count_cooccurrence(log_of(*base)))
        after = build_ppmi(count_cooccurrence(log_of(*base, {D})))
        Sb, Sa = before.to_dense(), after.to_dense()
        U = len(base)
        for i in range(4):
            for j in range(4):
                if D in (i, j) or Sb[i, j] == 0:
                    continue
                assert Sa[i, j] == pytest.approx(Sb[i, j] + math.log((U + 1) / U), abs=1e-12)


click_sets = st.lists(st.sets(st.integers(0, 5), max_size=6), min_size=0, max_size=6)


@settings(max_examples=200, deadline=None)
@given(click_sets, st.sampled_from(["user_count", "pair_count"]))
def test_matches_brute_force(sets, mode):
    S = build_ppmi(count_cooccurrence(log_of(*sets, n_items=6)), mode)
    S.check()
    assert np.array_equal(S.to_dense(), brute_force_ppmi(sets, 6, mode))
