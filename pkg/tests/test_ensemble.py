import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from robust_ensembles.ensemble import (
    MME, NOT_ROBUST, ROBUST, UNDETERMINED, WE, CapabilityError, EnsembleSpec, MispredictionError,
    ProtocolError, check_mme_robustness, check_single_robustness, check_we_robustness,
    ensemble_predict, ensemble_radius_bound, eri_from_terms, eri_we, max_certified_radius_we,
    mme_predict, optimal_weights_grid, radius_bound_from_margins, radius_from_terms, simplex_grid,
    verdict_from_terms, we_predict,
)
from robust_ensembles.model import MlpClassifier, init_random, input_jacobian
from robust_ensembles.numstats import RngStream


def const_model(probs, d=2):
    return MlpClassifier([(np.zeros((len(probs), d)), np.log(np.asarray(probs, dtype=float)))])


def linear_model(w, b):
    return MlpClassifier([(np.asarray(w, dtype=float), np.asarray(b, dtype=float))])


def mlp(seed, d=2, c=3, hidden=(16,)):
    return init_random(d, list(hidden), c, RngStream(seed))


def brute_we(members, weights, x):
    scores = [sum(w * m.confidences(x)[c] for w, m in zip(weights, members))
              for c in range(members[0].num_classes)]
    best = 0
    for c in range(1, len(scores)):
        if scores[c] > scores[best]:
            best = c
    return best


def brute_mme(members, x):
    best_margin, best_label = -1.0, None
    for m in members:
        conf = list(m.confidences(x))
        order = sorted(range(len(conf)), key=lambda c: (-conf[c], c))
        gap = conf[order[0]] - conf[order[1]]
        if gap > best_margin:
            best_margin, best_label = gap, order[0]
    return best_label


def sphere(x0, r, count=10_000):
    t = np.linspace(0, 2 * np.pi, count, endpoint=False)
    return x0 + r * np.column_stack([np.cos(t), np.sin(t)])


def hessian_bound(members, x0, r, samples=400, seed=0):
    """Largest spectral norm of any confidence-component Hessian seen inside the ball, by
    finite differences of the analytic Jacobian; doubled as a safety factor."""
    rng = RngStream(seed)
    pts = x0 + r * 1.5 * (2 * rng.uniform((samples, 2)) - 1)
    h = 1e-5
    worst = 0.0
    for m in members:
        for p in pts:
            cols = [(input_jacobian(m, p + h * e) - input_jacobian(m, p - h * e)) / (2 * h) for e in np.eye(2)]
            hess = np.stack(cols, axis=-1)  # (C, d, d)
            worst = max(worst, max(np.linalg.norm(hk, 2) for hk in hess))
    return 2.0 * worst


class TestPredict:
    def test_we_example(self):
        spec = EnsembleSpec.weighted([const_model([0.6, 0.4]), const_model([0.3, 0.7])], [1, 1])
        assert we_predict(spec, np.zeros(2)) == 1

    def test_mme_example(self):
        spec = EnsembleSpec.max_margin([const_model([0.6, 0.4]), const_model([0.3, 0.7])])
        assert mme_predict(spec, np.zeros(2)) == 1

    def test_identical_members(self):
        m = mlp(1)
        spec = EnsembleSpec.weighted([m, m, m], [0.2, 0.5, 0.3])
        xs = RngStream(2).standard_normal((200, 2))
        assert np.array_equal(we_predict(spec, xs), np.argmax(m.confidences(xs), axis=1))

    def test_brute_force_oracles(self):
        members = [mlp(s) for s in (3, 4, 5)]
        weights = [0.5, 1.5, 1.0]
        we = EnsembleSpec.weighted(members, weights)
        mme = EnsembleSpec.max_margin(members)
        xs = RngStream(6).standard_normal((500, 2)) * 2
        assert list(we_predict(we, xs)) == [brute_we(members, weights, x) for x in xs]
        assert list(mme_predict(mme, xs)) == [brute_mme(members, x) for x in xs]
        assert we_predict(we, xs[0]) == brute_we(members, weights, xs[0])

    def test_single_member_protocols_agree(self):
        m = mlp(7)
        xs = RngStream(8).standard_normal((300, 2))
        base = np.argmax(m.confidences(xs), axis=1)
        assert np.array_equal(we_predict(EnsembleSpec.weighted([m]), xs), base)
        assert np.array_equal(mme_predict(EnsembleSpec.max_margin([m]), xs), base)

    @given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_weight_scale_invariance(self, c, seed):
        members = [mlp(s) for s in (9, 10)]
        xs = RngStream(seed).standard_normal((20, 2))
        a = we_predict(EnsembleSpec.weighted(members, [0.3, 0.7]), xs)
        b = we_predict(EnsembleSpec.weighted(members, [0.3 * c, 0.7 * c]), xs)
        assert np.array_equal(a, b)

    def test_protocol_errors(self):
        m = mlp(0)
        with pytest.raises(ProtocolError):
            we_predict(EnsembleSpec.max_margin([m]), np.zeros(2))
        with pytest.raises(ProtocolError):
            mme_predict(EnsembleSpec.weighted([m]), np.zeros(2))
        with pytest.raises(ProtocolError):
            EnsembleSpec((m,), "AVG")
        with pytest.raises(ValueError):
            EnsembleSpec.weighted([m, m], [1, -1])
        with pytest.raises(ValueError):
            EnsembleSpec.weighted([m, mlp(0, c=4)])
        assert ensemble_predict(EnsembleSpec.max_margin([m]), np.zeros(2)) == \
            ensemble_predict(EnsembleSpec.weighted([m]), np.zeros(2))


class TestEri:
    def test_arithmetic(self):
        assert eri_from_terms([1], [1.0], [0.5], 1.0, 0.25).minimum == pytest.approx(-1.0, abs=1e-15)

    def test_large_r_limit(self):
        rep = eri_from_terms([1, 2], [0.7, 0.4], [0.5, 0.2], 2.0, 1e12)
        assert rep.values == pytest.approx([0.35, 0.2], abs=1e-12)

    def test_gradient_term_against_finite_differences(self):
        members = [mlp(11), mlp(12)]
        weights = np.array([0.4, 0.6])
        x0 = np.array([0.3, -0.2])
        y0 = brute_we(members, weights, x0)
        r = 0.5
        rep = eri_we(members, weights, x0, y0, r)

        def gap(x, y):
            return sum(w * (m.confidences(x)[y0] - m.confidences(x)[y]) for w, m in zip(weights, members))

        h = 1e-5
        for y, val in zip(rep.competing, rep.values):
            g = np.array([(gap(x0 + h * e, y) - gap(x0 - h * e, y)) / (2 * h) for e in np.eye(2)])
            expected = np.linalg.norm(g) / weights.sum() - gap(x0, y) / (r * weights.sum())
            assert val == pytest.approx(expected, abs=1e-8)


class TestVerdicts:
    def test_linear_boundary(self):
        assert verdict_from_terms([1], [1.0], [0.5], 0.4, 0.0, 1.0).status == ROBUST
        assert verdict_from_terms([1], [1.0], [0.5], 0.6, 0.0, 1.0).status == NOT_ROBUST

    def test_undetermined_band(self):
        # 1 <= 0.5/0.4 + beta*0.4 holds, 1 <= 0.5/0.4 - beta*0.4 fails once beta > 0.625
        v = verdict_from_terms([1], [1.0], [0.5], 0.4, 2.0, 1.0)
        assert v.status == UNDETERMINED
        assert not v.diagnostics[0].sufficient_holds and v.diagnostics[0].necessary_holds

    @given(st.lists(st.tuples(st.floats(0, 10), st.floats(-1, 1)), min_size=1, max_size=5),
           st.floats(1e-3, 10))
    @settings(max_examples=300, deadline=None)
    def test_beta_zero_never_undetermined(self, terms, r):
        g, m = zip(*terms)
        assert verdict_from_terms(list(range(len(g))), g, m, r, 0.0, 1.0).status != UNDETERMINED

    def test_sphere_grid_oracle_we(self):
        members = [mlp(20), mlp(21)]
        weights = [0.5, 0.5]
        checked = 0
        for x0 in RngStream(22).standard_normal((6, 2)):
            y0 = brute_we(members, weights, x0)
            beta = hessian_bound(members, x0, 0.5)
            radius = max_certified_radius_we(members, weights, x0, y0, beta)
            if radius <= 1e-6:
                continue
            r = 0.99 * radius
            assert check_we_robustness(members, weights, x0, y0, r, beta).status == ROBUST
            pts = sphere(x0, r)
            assert np.all(we_predict(EnsembleSpec.weighted(members, weights), pts) == y0)
            checked += 1
        assert checked >= 3

    def test_sphere_grid_oracle_single_and_mme(self):
        pair = [mlp(23), mlp(24)]
        checked = 0
        for x0 in RngStream(25).standard_normal((8, 2)):
            y0 = brute_mme(pair, x0)
            beta = hessian_bound(pair, x0, 0.3)
            for r in (0.3, 0.1, 0.03, 0.01):
                if check_mme_robustness(pair, x0, y0, r, beta).status == ROBUST:
                    assert np.all(mme_predict(EnsembleSpec.max_margin(pair), sphere(x0, r)) == y0)
                    checked += 1
                    break
            m = pair[0]
            ys = brute_we([m], [1], x0)
            for r in (0.3, 0.1, 0.03, 0.01):
                if check_single_robustness(m, x0, ys, r, beta).status == ROBUST:
                    assert np.all(np.argmax(m.confidences(sphere(x0, r)), axis=1) == ys)
                    checked += 1
                    break
        assert checked >= 6

    def test_mme_identical_members_reduce_to_single(self):
        m = mlp(26)
        x0 = np.array([0.1, 0.4])
        y0 = brute_we([m], [1], x0)
        for r in (0.01, 0.1, 0.3, 1.0, 3.0):
            for beta in (0.0, 0.5):
                single = check_single_robustness(m, x0, y0, r, beta).status
                assert check_mme_robustness([m, m], x0, y0, r, beta).status == single

    def test_mme_opposite_gradients(self):
        w = np.array([[1.0, 2.0], [-0.5, 0.3]])
        b = np.array([1.0, 0.0])
        pair = [linear_model(w, b), linear_model(-w, b)]
        for r in (0.1, 1.0, 10.0, 1e3):
            v = check_mme_robustness(pair, np.zeros(2), 0, r, 0.0)
            assert v.status == ROBUST
            assert v.diagnostics[0].grad_norm < 1e-15
            assert v.notes

    def test_single_degenerate_cases(self):
        flat = const_model([0.7, 0.2, 0.1])
        for r in (0.01, 1.0, 100.0):
            assert check_single_robustness(flat, np.zeros(2), 0, r, 0.0).status == ROBUST
        tie = linear_model([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0])
        for r in (1e-3, 1.0):
            assert check_single_robustness(tie, np.zeros(2), 0, r, 0.0).status == NOT_ROBUST

    def test_errors(self):
        m = mlp(27)
        x0 = np.zeros(2)
        y0 = brute_we([m], [1], x0)
        with pytest.raises(MispredictionError):
            check_we_robustness([m], [1], x0, (y0 + 1) % 3, 0.1, 0.0)
        with pytest.raises(CapabilityError):
            check_mme_robustness([m, m, m], x0, y0, 0.1, 0.0)
        with pytest.raises(ValueError):
            check_we_robustness([m], [1], x0, y0, 0.0, 0.0)
        v = check_we_robustness([m], [1], x0, y0, 0.1, 0.0)
        assert v.to_dict()["status"] == v.status and '"diagnostics"' in v.to_json()


class TestRadius:
    def test_closed_forms(self):
        assert radius_from_terms([1.0], [0.5], 1.0, 0.0) == 0.5
        assert radius_from_terms([1.0], [0.5], 1.0, 1e12) < 1e-5
        assert radius_from_terms([0.0], [0.5], 1.0, 0.0) == math.inf
        assert radius_from_terms([1.0], [-0.1], 1.0, 0.0) == 0.0

    @given(st.floats(0, 5), st.floats(1e-3, 1), st.one_of(st.just(0.0), st.floats(1e-6, 5)), st.floats(0.1, 3))
    @settings(max_examples=300, deadline=None)
    def test_root_solves_quadratic(self, g, m, beta, s):
        r = radius_from_terms([g], [m], s, beta)
        assume(math.isfinite(r))
        # g = m/r - beta*r*s at the root
        assert g * r == pytest.approx(m - beta * s * r * r, abs=1e-12 * max(1.0, m))

    def test_self_consistency(self):
        members = [mlp(30), mlp(31), mlp(32)]
        weights = [0.2, 0.3, 0.5]
        for x0 in RngStream(33).standard_normal((5, 2)):
            y0 = brute_we(members, weights, x0)
            for beta in (0.0, 0.3):
                r = max_certified_radius_we(members, weights, x0, y0, beta)
                if not (1e-6 < r < 1e6):
                    continue
                assert check_we_robustness(members, weights, x0, y0, r - 1e-9, beta).status == ROBUST
                assert check_we_robustness(members, weights, x0, y0, r + 1e-9, beta).status != ROBUST

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_more_members_raise_radius(self, seed):
        rng = RngStream(seed)
        # a bias favouring class 0 keeps every member agreeing at x0
        members = [linear_model(rng.standard_normal((3, 2)), [2.0, 0.0, 0.0] + 0.3 * rng.standard_normal(3))
                   for _ in range(4)]
        x0 = 0.2 * rng.standard_normal(2)
        y0 = 0
        assume(all(brute_we([m], [1], x0) == y0 for m in members))
        ra = max_certified_radius_we(members[:2], [1, 1], x0, y0, 0.0)
        rb = max_certified_radius_we(members[2:], [1, 1], x0, y0, 0.0)
        union = max_certified_radius_we(members, [1, 1, 1, 1], x0, y0, 0.0)
        assume(math.isfinite(union))
        assert union > min(ra, rb)


class TestRadiusBound:
    def test_equal_margins(self):
        out = radius_bound_from_margins([0.3], [0.3], 1, 1, 1.0, 0.0, 0.0)
        assert out.coefficient == pytest.approx(0.5)
        assert out.radius == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_colinear_no_gain(self):
        assert radius_bound_from_margins([0.3], [0.3], 1, 1, 0.7, 0.0, 1.0).radius == pytest.approx(0.7)

    def test_asymmetric(self):
        out = radius_bound_from_margins([0.2], [0.6], 1, 1, 1.0, 0.0, 0.0)
        assert out.coefficient == pytest.approx(2 * 0.12 / 0.64, abs=1e-15)
        assert out.radius == pytest.approx(1 / math.sqrt(1 - 0.375), abs=1e-12)
        assert out.radius == pytest.approx(1.2649, abs=1e-4)

    def test_delta_shrinks_and_threshold(self):
        out = radius_bound_from_margins([0.3], [0.3], 1, 1, 1.0, 0.2, 0.0)
        assert out.radius == pytest.approx(math.sqrt(2) * 0.8 / 1.2)
        assert out.beta_threshold == pytest.approx(0.2 * 0.3 / 1.0)
        with pytest.raises(ValueError):
            radius_bound_from_margins([0.3], [0.3], 1, 1, 1.0, 1.0, 0.0)

    def test_on_models(self):
        pair = [mlp(40), mlp(41)]
        x0 = np.array([0.2, 0.1])
        y0 = brute_we(pair, [1, 1], x0)
        out = ensemble_radius_bound(pair, [1, 1], x0, y0, 0.1, 0.0, 0.0)
        grads = [input_jacobian(m, x0) for m in pair]
        cosines = []
        for y in range(3):
            if y == y0:
                continue
            a, b = (g[y0] - g[y] for g in grads)
            cosines.append(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert out.max_gradient_cosine == pytest.approx(max(cosines), abs=1e-12)
        mme = ensemble_radius_bound(pair, None, x0, y0, 0.1, 0.0, 0.0, protocol=MME)
        gaps = [m.confidences(x0)[y0] - m.confidences(x0) for m in pair]
        others = [y for y in range(3) if y != y0]
        expected = min(2 * gaps[0][a] * gaps[1][b] / (gaps[0][a] + gaps[1][b]) ** 2
                       for a in others for b in others)
        assert mme.coefficient == pytest.approx(expected, abs=1e-12)
        with pytest.raises(CapabilityError):
            ensemble_radius_bound(pair * 2, None, x0, y0, 0.1, 0.0, 0.0)


class TestWeightGrid:
    def test_grid_enumeration(self):
        g = simplex_grid(2, 0.5)
        assert g.tolist() == [[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]]
        assert len(simplex_grid(3, 0.1)) == math.comb(12, 2)
        assert np.allclose(simplex_grid(4, 0.25).sum(axis=1), 1.0)
        with pytest.raises(ValueError):
            simplex_grid(2, 0.3)

    def test_identical_members_match_uniform(self):
        m = mlp(50)
        xs = RngStream(51).standard_normal((30, 2))
        ys = np.argmax(m.confidences(xs), axis=1)
        _, best = optimal_weights_grid([m, m], xs, ys, 0.25)
        _, uniform = optimal_weights_grid([m, m], xs, ys, 0.5)
        assert best == pytest.approx(uniform, abs=1e-12)

    def test_wrong_member_gets_zero_weight(self):
        good = linear_model([[2.0, 0.0], [-2.0, 0.0]], [0.0, 0.0])
        bad = const_model([0.01, 0.99])
        xs = np.column_stack([np.linspace(0.5, 2.0, 20), np.zeros(20)])
        ys = np.zeros(20, dtype=int)
        w, obj = optimal_weights_grid([bad, good], xs, ys, 0.1)
        assert w.tolist() == [0.0, 1.0]
        # exhaustive oracle over the same grid
        objs = []
        for wv in simplex_grid(2, 0.1):
            total = 0.0
            for x in xs:
                if brute_we([bad, good], wv, x) == 0:
                    total += max_certified_radius_we([bad, good], wv, x, 0, 0.0)
            objs.append(total / len(xs))
        assert obj == pytest.approx(max(objs), abs=1e-12)

    def test_member_cap(self):
        m = mlp(0)
        with pytest.raises(CapabilityError):
            optimal_weights_grid([m] * 5, np.zeros((1, 2)), [0], 0.5)
