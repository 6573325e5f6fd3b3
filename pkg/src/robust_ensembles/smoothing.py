"""Randomized smoothing: Monte-Carlo certification of ensembles (EBS and EAS),
soft-smoothed confidences and curvature probes."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ensemble import EnsembleSpec, ensemble_predict
from .model import MlpClassifier, predict_batch
from .numstats import (RngStream, clopper_pearson_lower, sample_gaussian, std_normal_cdf,
                       std_normal_quantile)

EBS = "EBS"
EAS = "EAS"

DEFAULT_BATCH = 2000


@dataclass(frozen=True)
class SmoothingSpec:
    sigma: float
    n0: int = 100
    n: int = 10_000
    alpha: float = 0.001
    strategy: str = EBS

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n0 < 1 or self.n < self.n0:
            raise ValueError("need n0 >= 1 and n >= n0")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.strategy not in (EBS, EAS):
            raise ValueError(f"strategy must be {EBS} or {EAS}")


@dataclass
class CertificationRecord:
    id: int
    label: int
    prediction: int
    k: int
    n: int
    p_lower: float
    radius: float
    abstain: bool
    correct: bool

    def __post_init__(self):
        if self.abstain != (self.p_lower <= 0.5):
            raise ValueError("abstain must hold exactly when p_lower <= 1/2")
        if (self.radius > 0) == self.abstain:
            raise ValueError("radius must be positive exactly when not abstaining")


def as_classifier(target) -> Callable[[np.ndarray], np.ndarray]:
    """Batch hard-label function for a model, an ensemble spec, or a callable."""
    if isinstance(target, EnsembleSpec):
        return lambda xs: np.asarray(ensemble_predict(target, xs))
    if isinstance(target, MlpClassifier):
        return lambda xs: predict_batch(target, xs)
    return target


def _num_classes(target) -> int | None:
    if isinstance(target, (EnsembleSpec, MlpClassifier)):
        return target.num_classes
    return None


def mc_class_frequencies(classify, x, sigma: float, m: int, rng: RngStream,
                         num_classes: int | None = None, batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Counts of classify(x + eps) over m Gaussian draws."""
    if m < 1:
        raise ValueError("m must be at least 1")
    x = np.asarray(x, dtype=float).reshape(-1)
    num_classes = num_classes or _num_classes(classify)
    fn = as_classifier(classify)
    counts = np.zeros(num_classes or 2, dtype=np.int64)
    remaining = m
    while remaining > 0:
        b = min(batch_size, remaining)
        labels = np.asarray(fn(x + sample_gaussian(rng, (b, x.size), sigma)), dtype=np.int64)
        top = int(labels.max()) + 1
        if top > counts.size:
            counts = np.concatenate([counts, np.zeros(top - counts.size, dtype=np.int64)])
        counts += np.bincount(labels, minlength=counts.size)
        remaining -= b
    return counts


def radius_from_lower_bound(p_lower: float, sigma: float) -> float:
    return sigma * std_normal_quantile(p_lower) if p_lower > 0.5 else 0.0


def certify_ebs(spec, smoothing: SmoothingSpec, x, label: int, rng: RngStream,
                input_id: int = 0) -> CertificationRecord:
    """Certify the smoothed ensemble: the noise wraps the whole ensemble decision."""
    c = _num_classes(spec)
    counts0 = mc_class_frequencies(spec, x, smoothing.sigma, smoothing.n0, rng, c)
    c_a = int(np.argmax(counts0))
    counts = mc_class_frequencies(spec, x, smoothing.sigma, smoothing.n, rng, c)
    k = int(counts[c_a]) if c_a < counts.size else 0
    p_lower = clopper_pearson_lower(k, smoothing.n, smoothing.alpha)
    radius = radius_from_lower_bound(p_lower, smoothing.sigma)
    return CertificationRecord(int(input_id), int(label), c_a, k, smoothing.n, p_lower, radius,
                               p_lower <= 0.5, c_a == int(label))


@dataclass
class EasResult:
    radius: float
    raw_radius: float
    signed_radii: list
    prediction: int
    selected_member: int
    record: CertificationRecord


def eas_radius(signed_radii: Sequence[float]) -> float:
    r = np.asarray(signed_radii, dtype=float)
    return float((r.max() + r.min()) / 2.0)


P_FLOOR = 1e-12


def certify_eas(members: Sequence[MlpClassifier], smoothing: SmoothingSpec, x, label: int,
                rng: RngStream, input_id: int = 0) -> EasResult:
    """Smooth every member separately, then combine their signed radii.

    The ensemble follows the member whose smoothed top class has the highest
    selection frequency; members agreeing with it contribute +sigma*Phi^-1(p_i),
    the others -sigma*Phi^-1(p_i). The radius is the midpoint of the extreme
    signed radii, clamped at 0 (`raw_radius` keeps the unclamped value).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    c = members[0].num_classes
    sigma = smoothing.sigma
    noise0 = sample_gaussian(rng, (smoothing.n0, x.size), sigma)
    tops, freqs = [], []
    for m in members:
        counts = np.bincount(predict_batch(m, x + noise0), minlength=c)
        tops.append(int(np.argmax(counts)))
        freqs.append(counts.max() / smoothing.n0)
    selected = int(np.argmax(freqs))
    y0 = tops[selected]
    hits = np.zeros(len(members), dtype=np.int64)
    remaining = smoothing.n
    while remaining > 0:
        b = min(DEFAULT_BATCH, remaining)
        pts = x + sample_gaussian(rng, (b, x.size), sigma)
        for i, m in enumerate(members):
            hits[i] += int(np.sum(predict_batch(m, pts) == tops[i]))
        remaining -= b
    signed = []
    for i in range(len(members)):
        p_i = max(clopper_pearson_lower(int(hits[i]), smoothing.n, smoothing.alpha), P_FLOOR)
        r_i = sigma * std_normal_quantile(p_i)
        signed.append(r_i if tops[i] == y0 else -r_i)
    raw = eas_radius(signed)
    radius = max(raw, 0.0)
    # p_lower reported as the probability whose Gaussian radius equals the EAS radius
    p_eff = std_normal_cdf(raw / sigma)
    abstain = raw <= 0 or p_eff <= 0.5
    if abstain:
        radius = 0.0
        p_eff = min(p_eff, 0.5)
    rec = CertificationRecord(int(input_id), int(label), y0, int(hits[selected]), smoothing.n,
                              p_eff, radius, abstain, y0 == int(label))
    return EasResult(radius, raw, signed, y0, selected, rec)


def _certify_one(args):
    target, smoothing, x, label, seed, idx = args
    rng = RngStream(seed).fork(idx)
    if smoothing.strategy == EAS:
        members = target.members if isinstance(target, EnsembleSpec) else [target]
        return certify_eas(members, smoothing, x, label, rng, idx).record
    return certify_ebs(target, smoothing, x, label, rng, idx)


def certify_many(target, smoothing: SmoothingSpec, xs, labels, seed: int, jobs: int = 1,
                 ids: Sequence[int] | None = None) -> list[CertificationRecord]:
    """Certify each input on its own substream fork(id); output is sorted by id."""
    ids = list(range(len(xs))) if ids is None else list(ids)
    tasks = [(target, smoothing, np.asarray(x), int(y), seed, i) for x, y, i in zip(xs, labels, ids)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_certify_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        records = [_certify_one(t) for t in tasks]
    return sorted(records, key=lambda r: r.id)


# EBS versus EAS for two members

EBS_HIGHER = "EBSHigher"
EAS_HIGHER_OR_EQUAL = "EASHigherOrEqual"
UNDETERMINED = "Undetermined"


@dataclass
class StrategyComparison:
    verdict: str
    r_ebs: float
    r_eas: float
    ebs_probability: float
    threshold: float


def compare_smoothing_strategies(p_a: float, p_b: float, p_ab: float, p: float,
                                 sigma: float) -> StrategyComparison:
    """Compare smoothing the MME ensemble (EBS) against combining smoothed members (EAS).

    p_a, p_b: probabilities that each member is correct under noise; p_ab: both
    correct; p: probability the ensemble is correct when exactly one member is.
    """
    if not (0.5 < p_a < 1.0 and 0.5 < p_b < 1.0):
        raise ValueError("need 1/2 < p_a, p_b < 1")
    if not (0.0 <= p_ab <= min(p_a, p_b)):
        raise ValueError("need 0 <= p_ab <= min(p_a, p_b)")
    if p_a + p_b - p_ab > 1.0 + 1e-12:
        raise ValueError("p_a + p_b - p_ab cannot exceed 1")
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must lie in [0, 1]")
    delta = abs(p_a - p_b)
    p_min = min(p_a, p_b)
    spread = p_a + p_b - 2.0 * p_ab
    prob = p_ab + p * spread
    if prob >= 1.0:
        r_ebs = math.inf
    elif prob <= 0.0:
        r_ebs = -math.inf
    else:
        r_ebs = sigma * std_normal_quantile(prob)
    r_eas = 0.5 * sigma * (std_normal_quantile(p_a) + std_normal_quantile(p_b))
    if spread == 0.0:
        threshold = math.inf   # no disagreement mass: the ensembles coincide
    elif delta == 0.0:
        threshold = 0.5
    else:
        threshold = 0.5 + 1.0 / (2.0 + 4.0 * (p_min - p_ab) / delta)
    if p > threshold:
        verdict = EBS_HIGHER
    elif p <= 0.5:
        verdict = EAS_HIGHER_OR_EQUAL
    else:
        verdict = UNDETERMINED
    return StrategyComparison(verdict, r_ebs, r_eas, prob, threshold)


# soft smoothing

def soft_confidence(model: MlpClassifier, x, sigma: float, m: int, rng: RngStream,
                    return_se: bool = False, batch_size: int = DEFAULT_BATCH):
    """Monte-Carlo mean of the confidence vector under Gaussian noise."""
    if m < 1:
        raise ValueError("m must be at least 1")
    x = np.asarray(x, dtype=float).reshape(-1)
    total = np.zeros(model.num_classes)
    total_sq = np.zeros(model.num_classes)
    remaining = m
    while remaining > 0:
        b = min(batch_size, remaining)
        conf = model.confidences(x + sample_gaussian(rng, (b, x.size), sigma))
        total += conf.sum(axis=0)
        total_sq += (conf * conf).sum(axis=0)
        remaining -= b
    mean = total / m
    if not return_se:
        return mean
    var = np.maximum(total_sq / m - mean * mean, 0.0) * m / max(m - 1, 1)
    return mean, np.sqrt(var / m)


@dataclass
class ProbeResult:
    estimate: float
    standard_error: float
    h: float
    samples: int


def smoothness_probe(g: Callable[[np.ndarray], np.ndarray], x, u, h: float, samples: int,
                     sigma: float, rng: RngStream, batch_size: int = 200_000) -> ProbeResult:
    """Second difference of the Gaussian-smoothed g along unit direction u.

    Estimates (gbar(x+hu) - 2 gbar(x) + gbar(x-hu)) / h^2 with gbar = E g(. + eps),
    using the same noise draw at the three points.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    u = u / np.linalg.norm(u)
    s1 = 0.0
    s2 = 0.0
    remaining = samples
    while remaining > 0:
        b = min(batch_size, remaining)
        pts = x + sample_gaussian(rng, (b, x.size), sigma)
        dd = (np.asarray(g(pts + h * u)) - 2.0 * np.asarray(g(pts)) + np.asarray(g(pts - h * u))) / (h * h)
        s1 += float(dd.sum())
        s2 += float((dd * dd).sum())
        remaining -= b
    mean = s1 / samples
    var = max(s2 / samples - mean * mean, 0.0) * samples / max(samples - 1, 1)
    return ProbeResult(mean, math.sqrt(var / samples), h, samples)


# evaluation

@dataclass
class CurveResult:
    radii: list
    accuracy: list
    acr: float
    count: int = 0
    extra: dict = field(default_factory=dict)


def certified_accuracy_curve(records: Sequence[CertificationRecord], radii: Sequence[float]) -> CurveResult:
    if not records:
        raise ValueError("no records")
    radii = [float(r) for r in radii]
    acc = []
    for r in radii:
        hits = sum(1 for rec in records if rec.correct and not rec.abstain and rec.radius >= r)
        acc.append(hits / len(records))
    acr = sum(rec.radius if rec.correct else 0.0 for rec in records) / len(records)
    return CurveResult(radii, acc, acr, len(records))


RECORD_COLUMNS = ["id", "label", "prediction", "k", "n", "p_lower", "radius", "abstain"]


def write_records_csv(records: Sequence[CertificationRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.id, r.label, r.prediction, r.k, r.n, format(r.p_lower, ".17g"),
                        format(r.radius, ".17g"), int(r.abstain)])


def read_records_csv(path) -> list[CertificationRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RECORD_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        for row in reader:
            label, pred = int(row["label"]), int(row["prediction"])
            out.append(CertificationRecord(int(row["id"]), label, pred, int(row["k"]), int(row["n"]),
                                           float(row["p_lower"]), float(row["radius"]),
                                           row["abstain"] == "1", label == pred))
    return out
