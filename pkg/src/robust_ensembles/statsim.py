"""Statistical margins for WE/MME ensembles, Chebyshev and McDiarmid lower bounds on
the probability of a correct prediction, WE-vs-MME comparison thresholds, the
transferability simulation and the lambda-proxy / ROC analysis."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .ensemble import EnsembleSpec
from .numstats import RngStream, sample_gaussian, std_normal_quantile

PROB_FLOOR = 1e-6
DENOM_FLOOR = 1e-9

SIM_COLUMNS = ["trial", "lambda_ratio", "a", "b", "p_we", "p_mme", "radius_we", "radius_mme", "diff"]
SWEEP_COLUMNS = ["n", "lambda1", "lambda2", "a", "b", "p", "bound_we", "bound_we_raw",
                 "bound_mme", "bound_mme_raw", "radius_we", "radius_mme"]


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class Uniform:
    a: float
    b: float

    def __post_init__(self):
        if not (0.0 <= self.a < self.b <= 1.0):
            raise ValueError("uniform confidences need 0 <= a < b <= 1")

    @property
    def mu(self) -> float:
        return 0.5 * (self.a + self.b)

    @property
    def s(self) -> float:
        return (self.b - self.a) / math.sqrt(12.0)


@dataclass(frozen=True)
class Symmetric:
    """Symmetric confidence law with mean mu, std s; s_f is the std of the minimum."""
    mu: float
    s: float
    s_f: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.mu <= 1.0) or self.s < 0 or (self.s_f is not None and self.s_f < 0):
            raise ValueError("need mu in [0, 1] and nonnegative spreads")


@dataclass(frozen=True)
class MarginModel:
    distribution: Uniform | Symmetric
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    p: float = 0.0
    n: int = 1
    weights: tuple | None = None

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.p <= 1.0):
            raise ValueError("p must be a probability")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.n,) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be n nonnegative values with a positive sum")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))

    @property
    def mu(self) -> float:
        return self.distribution.mu

    @property
    def d_w(self) -> float:
        """||w||_2^2 / ||w||_1^2; 1/n for equal weights."""
        if self.weights is None:
            return 1.0 / self.n
        w = np.asarray(self.weights)
        return float(np.sum(w ** 2) / np.sum(w) ** 2)


@dataclass(frozen=True)
class BoundValue:
    raw: float
    value: float


def _bound(raw: float) -> BoundValue:
    return BoundValue(float(raw), float(min(1.0, max(0.0, raw))))


@dataclass(frozen=True)
class WeBounds:
    chebyshev: BoundValue
    mcdiarmid: BoundValue

    @property
    def best(self) -> BoundValue:
        return max(self.chebyshev, self.mcdiarmid, key=lambda b: b.raw)


def portion_threshold(lam: float) -> float:
    """(1 + 1/lam)^-1: the true-class confidence at which the statistical margin vanishes."""
    return lam / (1.0 + lam)


def var_min_uniform(n: int, a: float, b: float) -> float:
    """Variance of the minimum of n iid U[a, b] draws."""
    if n < 1 or not a < b:
        raise ValueError("need n >= 1 and a < b")
    return (1.0 / (n + 1)) * (2.0 / (n + 2) - 1.0 / (n + 1)) * (b - a) ** 2


def c_n(n: int) -> float:
    return 2.0 / (n + 1) * (2.0 / (n + 2) - 1.0 / (n + 1))


def statistical_margins(u, lambda1: float, lambda2: float, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """X1 = (1+l1) sum w u - l1 ||w||_1 and X2 = (1+l2)(max u + min u) - 2 l2, over the last axis."""
    u = np.asarray(u, dtype=float)
    w = np.ones(u.shape[-1]) if weights is None else np.asarray(weights, dtype=float)
    x1 = (1.0 + lambda1) * (u @ w) - lambda1 * np.sum(w)
    x2 = (1.0 + lambda2) * (u.max(axis=-1) + u.min(axis=-1)) - 2.0 * lambda2
    return x1, x2


def _gap(mm: MarginModel, lam: float, label: str) -> float:
    gap = mm.mu - portion_threshold(lam)
    if gap <= 0:
        raise PreconditionError(f"mean confidence {mm.mu:g} must exceed (1 + 1/{label})^-1 = "
                                f"{portion_threshold(lam):g}")
    return gap


def bound_single(mm: MarginModel) -> BoundValue:
    dist = mm.distribution
    if isinstance(dist, Uniform):
        t = portion_threshold(mm.lambda3)
        mass_below = min(1.0, max(0.0, (t - dist.a) / (dist.b - dist.a)))
        return _bound(1.0 - mm.p - mass_below)
    gap = _gap(mm, mm.lambda3, "lambda3")
    return _bound(1.0 - mm.p - dist.s ** 2 / (2.0 * gap ** 2))


def bound_we(mm: MarginModel) -> WeBounds:
    gap = _gap(mm, mm.lambda1, "lambda1")
    dist = mm.distribution
    if isinstance(dist, Uniform):
        k1 = (dist.b - dist.a) / gap
        cheb = 1.0 - mm.p - mm.d_w * k1 ** 2 / 12.0
    else:
        cheb = 1.0 - mm.p - mm.d_w * dist.s ** 2 / (2.0 * gap ** 2)
    mcd = 1.0 - mm.p - math.exp(-2.0 / mm.d_w * gap ** 2)
    return WeBounds(_bound(cheb), _bound(mcd))


def bound_mme(mm: MarginModel) -> BoundValue:
    gap = _gap(mm, mm.lambda2, "lambda2")
    dist = mm.distribution
    if isinstance(dist, Uniform):
        k2 = (dist.b - dist.a) / gap
        return _bound(1.0 - mm.p - c_n(mm.n) * k2 ** 2 / 4.0)
    if dist.s_f is None:
        raise PreconditionError("the symmetric MME bound needs s_f")
    return _bound(1.0 - mm.p - dist.s_f ** 2 / (2.0 * gap ** 2))


@dataclass(frozen=True)
class Thresholds:
    we_higher_threshold: float
    mme_higher_threshold: float
    n_threshold: float | None

    def verdict(self, lambda_ratio: float) -> str:
        if lambda_ratio < self.we_higher_threshold:
            return "WE"
        if lambda_ratio > self.mme_higher_threshold:
            return "MME"
        return "Undetermined"


def _ratio_threshold(factor: float, mu: float, lambda2: float) -> float:
    gap2 = mu - portion_threshold(lambda2)
    return (1.0 / (factor * gap2 + 1.0 - mu) - 1.0) / lambda2


def n_threshold(mu: float, lambda2: float) -> float:
    """Ensemble size above which the uniform-case MME bound beats WE for every lambda1."""
    gap_ratio = 1.0 - 1.0 / (mu * (1.0 + 1.0 / lambda2))
    if gap_ratio <= 0:
        raise PreconditionError("need mu > (1 + 1/lambda2)^-1")
    return 6.0 / gap_ratio ** 2 - 2.0


def comparison_thresholds(mm: MarginModel) -> Thresholds:
    """lambda1/lambda2 thresholds: below the first WE has the higher bound for any
    weights, above the second MME does."""
    mu = mm.mu
    if mu <= max(portion_threshold(mm.lambda1), portion_threshold(mm.lambda2)):
        raise PreconditionError("mean confidence must exceed both (1 + 1/lambda)^-1 values")
    n = mm.n
    dist = mm.distribution
    if isinstance(dist, Uniform):
        f_we = (n + 1) * math.sqrt((n + 2) / (6.0 * n))
        f_mme = (n + 1) / n * math.sqrt((n + 2) / 6.0)
        n_th = n_threshold(mu, mm.lambda2)
    else:
        if dist.s_f is None or not (0 < dist.s_f < dist.s):
            raise PreconditionError("the general comparison needs 0 < s_f < s")
        f_we = dist.s / dist.s_f
        f_mme = dist.s / (math.sqrt(n) * dist.s_f)
        n_th = None
    return Thresholds(_ratio_threshold(f_we, mu, mm.lambda2), _ratio_threshold(f_mme, mu, mm.lambda2), n_th)


def radius_from_probability(p: float, sigma: float, floor: float = PROB_FLOOR) -> tuple[float, bool]:
    """sigma * Phi^-1(p) with p clamped to [floor, 1 - floor]; also reports whether clamping happened."""
    q = min(1.0 - floor, max(floor, float(p)))
    return sigma * std_normal_quantile(q), q != p


def bound_sweep(a: float, b: float, lambda2: float, lambda1_values: Sequence[float], ns: Sequence[int],
                p: float = 0.0, sigma: float = 1.0) -> list[dict]:
    """Uniform-case WE (Chebyshev, equal weights) and MME bounds over a (N, lambda1) grid.
    Bounds are clamped at 0 before the radius map; infeasible cells give bound 0."""
    rows = []
    for n in ns:
        for l1 in lambda1_values:
            mm = MarginModel(Uniform(a, b), lambda1=l1, lambda2=lambda2, p=p, n=n)
            try:
                we = bound_we(mm).chebyshev
            except PreconditionError:
                we = BoundValue(float("nan"), 0.0)
            try:
                mme = bound_mme(mm)
            except PreconditionError:
                mme = BoundValue(float("nan"), 0.0)
            rows.append({"n": n, "lambda1": l1, "lambda2": lambda2, "a": a, "b": b, "p": p,
                         "bound_we": we.value, "bound_we_raw": we.raw,
                         "bound_mme": mme.value, "bound_mme_raw": mme.raw,
                         "radius_we": radius_from_probability(we.value, sigma)[0],
                         "radius_mme": radius_from_probability(mme.value, sigma)[0]})
    return rows


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 10
    trials: int = 2000
    lambda2: float = 0.95
    lambda1_range: tuple = (0.8, 0.95)
    a_range: tuple = (0.3, 1.0)
    inner_draws: int = 20000
    sigma: float = 1.0
    weights: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1 or self.n < 1 or self.inner_draws < 1:
            raise ValueError("trials, n and inner_draws must be >= 1")
        lo, hi = self.lambda1_range
        if not (0 < lo <= hi):
            raise ValueError("lambda1_range must be a positive interval")


@dataclass(frozen=True)
class SimulationTrial:
    trial: int
    lambda_ratio: float
    a: float
    b: float
    p_we: float
    p_mme: float
    radius_we: float
    radius_mme: float
    clamped: bool

    @property
    def diff(self) -> float:
        return self.radius_mme - self.radius_we


@dataclass
class SimulationResult:
    config: SimulationConfig
    trials: list = field(default_factory=list)

    @property
    def lambda_ratios(self) -> np.ndarray:
        return np.array([t.lambda_ratio for t in self.trials])

    @property
    def diffs(self) -> np.ndarray:
        return np.array([t.diff for t in self.trials])

    def spearman(self) -> float:
        return float(stats.spearmanr(self.lambda_ratios, self.diffs)[0])


def simulate_trial(config: SimulationConfig, trial: int) -> SimulationTrial:
    rng = RngStream(config.seed).fork(trial)
    lo, hi = config.lambda1_range
    lambda1 = lo if hi == lo else float(rng.uniform(None, lo, hi))
    a = float(rng.uniform(None, *config.a_range))
    b = float(rng.uniform(None, a, config.a_range[1]))
    u = rng.uniform((config.inner_draws, config.n), a, b)
    x1, x2 = statistical_margins(u, lambda1, config.lambda2, config.weights)
    p_we = float(np.mean(x1 >= 0))
    p_mme = float(np.mean(x2 >= 0))
    r_we, c1 = radius_from_probability(p_we, config.sigma)
    r_mme, c2 = radius_from_probability(p_mme, config.sigma)
    return SimulationTrial(trial, lambda1 / config.lambda2, a, b, p_we, p_mme, r_we, r_mme, c1 or c2)


def _trial_task(args):
    return simulate_trial(*args)


def simulate_transferability(config: SimulationConfig, jobs: int = 1) -> SimulationResult:
    """Per trial: draw lambda1, a in a_range, b in [a, hi), then estimate Pr(X1 >= 0) and
    Pr(X2 >= 0) from inner draws of n true-class confidences u ~ U[a, b].
    Trial t always uses substream fork(t), so the result does not depend on `jobs`."""
    tasks = [(config, t) for t in range(config.trials)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(_trial_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        trials = [_trial_task(t) for t in tasks]
    return SimulationResult(config, sorted(trials, key=lambda t: t.trial))


def write_simulation_csv(result: SimulationResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIM_COLUMNS)
        for t in result.trials:
            w.writerow([t.trial] + [format(v, ".17g") for v in
                                    (t.lambda_ratio, t.a, t.b, t.p_we, t.p_mme, t.radius_we, t.radius_mme, t.diff)])


def write_rows_csv(rows: Sequence[dict], columns: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format(row[c], ".17g") if isinstance(row[c], float) else row[c] for c in columns])


@dataclass(frozen=True)
class LambdaProxies:
    lambda1: float
    lambda2: float
    se1: float
    se2: float


def lambda_proxies(spec: EnsembleSpec, x0, y0: int, sigma: float, m: int, rng: RngStream) -> LambdaProxies:
    """Monte-Carlo averages of the wrong-class portion of the remaining confidence mass:
    for the weighted sum (lambda1) and the worst single member (lambda2)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    pts = x0 + sample_gaussian(rng, (m, x0.shape[0]), sigma)
    conf = np.stack([mem.confidences(pts) for mem in spec.members])  # (N, m, C)
    w = np.ones(spec.size) if spec.weights is None else np.asarray(spec.weights, dtype=float)
    wrong = np.delete(conf, y0, axis=-1)
    rest = 1.0 - conf[..., y0]
    r1 = np.max(np.einsum("i,imc->mc", w, wrong), axis=-1) / np.maximum(w @ rest, DENOM_FLOOR)
    r2 = np.max(np.max(wrong, axis=-1) / np.maximum(rest, DENOM_FLOOR), axis=0)
    se = lambda v: float(np.std(v, ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
    return LambdaProxies(float(r1.mean()), float(r2.mean()), se(r1), se(r2))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: probability a positive outranks a negative, ties count 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
