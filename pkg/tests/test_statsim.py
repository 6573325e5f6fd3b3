import csv
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import stats

from robust_ensembles.ensemble import EnsembleSpec
from robust_ensembles.model import init_random
from robust_ensembles.numstats import RngStream
from robust_ensembles.statsim import (
    SIM_COLUMNS, SWEEP_COLUMNS, MarginModel, PreconditionError, SimulationConfig, Symmetric, Uniform,
    bound_mme, bound_single, bound_sweep, bound_we, c_n, comparison_thresholds, lambda_proxies,
    n_threshold, portion_threshold, radius_from_probability, roc_auc, simulate_transferability,
    statistical_margins, var_min_uniform, write_rows_csv, write_simulation_csv,
)


def pair_count_auc(scores, labels):
    """Exhaustive positive/negative pair count with exact rationals."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestVarMin:
    def test_closed_forms(self):
        assert var_min_uniform(1, 0, 1) == pytest.approx(1 / 12, abs=1e-15)
        assert var_min_uniform(2, 0, 1) == pytest.approx(1 / 18, abs=1e-15)

    def test_monte_carlo(self):
        u = RngStream(0).uniform((1_000_000, 5), 0.3, 0.9)
        assert np.var(u.min(axis=1)) == pytest.approx(var_min_uniform(5, 0.3, 0.9), rel=0.02)

    def test_c_n(self):
        assert c_n(3) == pytest.approx(0.075, abs=1e-15)
        assert c_n(10 ** 6) < 1e-11
        # c_N (b - a)^2 is twice the variance of the minimum
        assert c_n(7) * 0.36 == pytest.approx(2 * var_min_uniform(7, 0.2, 0.8), rel=1e-12)


class TestBounds:
    def test_single(self):
        assert bound_single(MarginModel(Uniform(0.6, 0.9), lambda3=1, p=0.03)).value == pytest.approx(0.97)
        assert bound_single(MarginModel(Symmetric(0.8, 0.0), lambda3=1, p=0.02)).value == pytest.approx(0.98)
        b = bound_single(MarginModel(Uniform(0.3, 0.9), lambda3=1, p=0.01))
        assert b.value == pytest.approx(1 - 0.01 - 0.2 / 0.6, abs=1e-12)
        assert b.value == pytest.approx(0.65667, abs=1e-5)

    def test_we_uniform(self):
        mm = MarginModel(Uniform(0.6, 0.8), lambda1=1, p=0.01, n=4)
        assert mm.d_w == 0.25
        assert bound_we(mm).chebyshev.raw == pytest.approx(1 - 0.01 - 0.25 / 12, abs=1e-12)
        weighted = MarginModel(Uniform(0.6, 0.8), n=3, weights=(1, 1, 2))
        assert weighted.d_w == pytest.approx(6 / 16)

    def test_we_symmetric_limit(self):
        b = bound_we(MarginModel(Symmetric(0.8, 1e-12), lambda1=1, p=0.05, n=3))
        assert b.chebyshev.value == pytest.approx(0.95)
        mcd = 1 - 0.05 - math.exp(-2 * 3 * 0.3 ** 2)
        assert b.mcdiarmid.value == pytest.approx(mcd, abs=1e-12)
        assert b.best.raw == max(b.chebyshev.raw, b.mcdiarmid.raw)

    def test_mme_uniform_against_min_variance(self):
        mm = MarginModel(Uniform(0.6, 0.8), lambda2=1, p=0.01, n=10)
        # Chebyshev through the variance of the minimum, computed independently
        expected = 1 - 0.01 - var_min_uniform(10, 0.6, 0.8) / (2 * 0.2 ** 2)
        assert bound_mme(mm).raw == pytest.approx(expected, abs=1e-12)
        assert bound_mme(mm).raw == pytest.approx(0.986557, abs=1e-6)
        big = MarginModel(Uniform(0.6, 0.8), lambda2=1, p=0.01, n=10 ** 6)
        assert bound_mme(big).value == pytest.approx(0.99, abs=1e-8)

    @pytest.mark.parametrize("a,b,lam,n", [(0.6, 0.8, 1.0, 3), (0.5, 1.0, 1.0, 10), (0.7, 0.95, 2.0, 5),
                                           (0.55, 0.9, 0.95, 20)])
    def test_bounds_hold_by_monte_carlo(self, a, b, lam, n):
        u = RngStream(1).uniform((200_000, n), a, b)
        x1, x2 = statistical_margins(u, lam, lam)
        mm = MarginModel(Uniform(a, b), lambda1=lam, lambda2=lam, n=n)
        slack = 3 * math.sqrt(0.25 / len(u))
        assert np.mean(x1 >= 0) >= bound_we(mm).best.value - slack
        assert np.mean(x2 >= 0) >= bound_mme(mm).value - slack

    def test_preconditions(self):
        with pytest.raises(PreconditionError):
            bound_we(MarginModel(Uniform(0.2, 0.6), lambda1=1))
        with pytest.raises(PreconditionError):
            bound_mme(MarginModel(Symmetric(0.8, 0.1), lambda2=1))
        with pytest.raises(ValueError):
            MarginModel(Uniform(0.2, 0.6), lambda1=0)
        with pytest.raises(ValueError):
            Uniform(0.7, 0.6)

    @given(st.floats(0.51, 0.99), st.floats(0, 0.3), st.floats(0, 0.3), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=300, deadline=None)
    def test_monotone(self, mu, s1, s2, p1, p2):
        lo, hi = sorted((s1, s2))
        plo, phi = sorted((p1, p2))
        m = lambda s, p: MarginModel(Symmetric(mu, s, s), lambda1=1, lambda2=1, lambda3=1, p=p, n=3)
        assert bound_we(m(lo, plo)).chebyshev.raw >= bound_we(m(hi, plo)).chebyshev.raw
        assert bound_mme(m(lo, plo)).raw >= bound_mme(m(hi, plo)).raw
        assert bound_single(m(lo, plo)).raw >= bound_single(m(lo, phi)).raw
        assert bound_we(m(lo, plo)).mcdiarmid.raw >= bound_we(m(lo, phi)).mcdiarmid.raw

    def test_chebyshev_lemma(self):
        rng = RngStream(2)
        for i in range(50):
            mean = float(rng.uniform(None, 0.05, 1.0))
            scale = float(rng.uniform(None, 0.05, 1.0))
            kind = i % 3
            sub = rng.fork(i)
            if kind == 0:
                x = mean + scale * sub.standard_normal(20_000)
            elif kind == 1:
                x = sub.uniform(20_000, mean - scale, mean + scale)
            else:
                x = mean + scale * stats.laplace.ppf(sub.uniform(20_000, 1e-12, 1 - 1e-12))
            prob = np.mean(x <= 0)
            se = math.sqrt(max(prob * (1 - prob), 1e-12) / len(x))
            assert prob <= np.var(x) / (2 * np.mean(x) ** 2) + 3 * se


class TestThresholds:
    def test_n_threshold_value(self):
        assert n_threshold(0.8, 1.0) == pytest.approx(6 / 0.375 ** 2 - 2, abs=1e-12)
        assert n_threshold(0.8, 1.0) == pytest.approx(40.667, abs=1e-3)
        with pytest.raises(PreconditionError):
            n_threshold(0.5, 1.0)

    def test_portion_threshold(self):
        assert portion_threshold(1.0) == 0.5
        assert portion_threshold(3.0) == 0.75

    def test_verdicts_match_bounds_on_lattice(self):
        seen = set()
        for n in (2, 3, 5, 10, 20, 50):
            for a in (0.5, 0.6, 0.7):
                for width in (0.1, 0.2, 0.3):
                    b = a + width
                    if b > 1:
                        continue
                    for lam2 in (0.8, 1.0, 1.5):
                        for ratio in np.linspace(0.3, 1.0, 15):
                            mm = MarginModel(Uniform(a, b), lambda1=ratio * lam2, lambda2=lam2, n=n)
                            try:
                                th = comparison_thresholds(mm)
                                we = bound_we(mm).chebyshev.raw
                                mme = bound_mme(mm).raw
                            except PreconditionError:
                                continue
                            v = th.verdict(ratio)
                            seen.add(v)
                            if v == "WE":
                                assert we >= mme - 1e-12
                            elif v == "MME":
                                assert mme >= we - 1e-12
        assert seen == {"WE", "MME", "Undetermined"}

    def test_large_n_favours_mme(self):
        for n in (41, 60, 200):
            for l1 in np.linspace(0.01, 1.0, 50):
                mm = MarginModel(Uniform(0.6, 1.0), lambda1=l1, lambda2=1.0, n=n)
                assert bound_mme(mm).raw >= bound_we(mm).chebyshev.raw

    def test_general_case(self):
        mm = MarginModel(Symmetric(0.8, 0.1, 0.05), lambda1=0.9, lambda2=1.0, n=4)
        th = comparison_thresholds(mm)
        assert th.n_threshold is None
        assert th.we_higher_threshold < th.mme_higher_threshold
        with pytest.raises(PreconditionError):
            comparison_thresholds(MarginModel(Symmetric(0.8, 0.1, 0.2), lambda1=0.9, lambda2=1.0, n=4))


class TestSimulation:
    def test_margins_are_exact(self):
        u = RngStream(3).uniform((50, 4), 0.2, 0.9)
        w = np.array([0.5, 1.0, 2.0, 0.25])
        x1, x2 = statistical_margins(u, 0.7, 1.3, w)
        for row, a, b in zip(u, x1, x2):
            assert a == pytest.approx(1.7 * sum(wi * ui for wi, ui in zip(w, row)) - 0.7 * 3.75, abs=1e-12)
            assert b == pytest.approx(2.3 * (max(row) + min(row)) - 2.6, abs=1e-12)

    def test_single_member_coincide(self):
        cfg = SimulationConfig(n=1, trials=40, lambda2=0.95, lambda1_range=(0.95, 0.95), inner_draws=2000)
        res = simulate_transferability(cfg)
        assert np.all(res.diffs == 0.0)

    def test_small_lambda1_favours_we(self):
        cfg = SimulationConfig(n=10, trials=200, lambda2=0.95, lambda1_range=(0.01, 0.05), inner_draws=2000)
        d = simulate_transferability(cfg).diffs
        assert np.mean(d < 0) > np.mean(d > 0)

    def test_trend_and_jobs(self, tmp_path):
        cfg = SimulationConfig(n=10, trials=300, inner_draws=3000, seed=1)
        one = simulate_transferability(cfg, jobs=1)
        two = simulate_transferability(cfg, jobs=2)
        assert [t.diff for t in one.trials] == [t.diff for t in two.trials]
        assert one.spearman() > 0
        write_simulation_csv(one, tmp_path / "s.csv")
        with open(tmp_path / "s.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == SIM_COLUMNS and len(rows) == 301

    def test_radius_clamp(self):
        assert radius_from_probability(1.0, 2.0) == (pytest.approx(2 * stats.norm.ppf(1 - 1e-6)), True)
        r, clamped = radius_from_probability(0.84, 1.0)
        assert r == pytest.approx(stats.norm.ppf(0.84)) and not clamped

    def test_sweep(self, tmp_path):
        rows = bound_sweep(0.6, 0.8, 1.0, [0.5, 1.0, 3.0], [3, 10])
        assert len(rows) == 6
        infeasible = [r for r in rows if r["lambda1"] == 3.0]
        # 0.7 < 3/4, so the WE bound has no content there
        assert all(r["bound_we"] == 0.0 and math.isnan(r["bound_we_raw"]) for r in infeasible)
        write_rows_csv(rows, SWEEP_COLUMNS, tmp_path / "sweep.csv")
        with open(tmp_path / "sweep.csv") as fh:
            assert next(csv.reader(fh)) == SWEEP_COLUMNS


class TestProxies:
    def test_two_class_identity(self):
        m = init_random(2, [8], 2, RngStream(4))
        px = lambda_proxies(EnsembleSpec.weighted([m]), np.zeros(2), 0, 0.5, 500, RngStream(5))
        assert px.lambda1 == pytest.approx(1.0, abs=1e-12) and px.lambda2 == pytest.approx(1.0, abs=1e-12)

    def test_identical_members(self):
        m = init_random(2, [8], 4, RngStream(6))
        px = lambda_proxies(EnsembleSpec.weighted([m, m, m]), np.zeros(2), 1, 0.5, 2000, RngStream(7))
        assert px.lambda1 == pytest.approx(px.lambda2, abs=1e-12)

    def test_weighted_average_below_max(self):
        members = [init_random(3, [8], 5, RngStream(10 + i)) for i in range(3)]
        spec = EnsembleSpec.weighted(members, [0.2, 0.5, 0.3])
        for s in range(5):
            x0 = RngStream(20 + s).standard_normal(3)
            px = lambda_proxies(spec, x0, s % 5, 0.5, 2000, RngStream(30 + s))
            assert px.lambda1 <= px.lambda2 + 3 * math.hypot(px.se1, px.se2)


class TestAuc:
    def test_separated_and_tied(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [False, False, True, True]) == 1.0
        assert roc_auc([0.5] * 6, [True, False] * 3) == 0.5

    def test_hand_case(self):
        scores = [0.9, 0.4, 0.4, 0.7, 0.2, 0.6]
        labels = [True, True, False, False, False, True]
        # positives 0.9, 0.4, 0.6 against negatives 0.4, 0.7, 0.2: 3 + 1.5 + 2 = 6.5 of 9
        assert roc_auc(scores, labels) == pytest.approx(6.5 / 9, abs=1e-15)
        assert pair_count_auc(scores, labels) == Fraction(13, 18)

    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
    @settings(max_examples=200, deadline=None)
    def test_matches_pair_count(self, pts):
        scores, labels = zip(*pts)
        assume(any(labels) and not all(labels))
        assert roc_auc(scores, labels) == pytest.approx(float(pair_count_auc(scores, labels)), abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [True, True])
