"""Weighted (WE) and max-margin (MME) ensembles and their gradient/margin robustness conditions.

For an input x0 with label y0 and competing class y, write f^{y0/y} for the
confidence gap f_{y0} - f_y. With beta-smooth members a second-order Taylor
bound shows that the WE ensemble keeps predicting y0 on the whole L2 ball of
radius r whenever, for every y != y0,

    || sum_j w_j grad f_j^{y0/y}(x0) ||  <=  (1/r) sum_j w_j f_j^{y0/y}(x0) - beta r sum_j w_j,

and that it cannot be r-robust when the same inequality fails with
+ beta r sum_j w_j on the right. The two-member MME version runs over pairs
(y1, y2) of competing classes with 2 beta r in place of beta r sum_j w_j.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import MlpClassifier, input_jacobian, top_two

WE = "WE"
MME = "MME"

ROBUST = "CertifiedRobust"
NOT_ROBUST = "CertifiedNotRobust"
UNDETERMINED = "Undetermined"


class ProtocolError(ValueError):
    pass


class MispredictionError(ValueError):
    """The ensemble does not predict the claimed label at the centre point."""


class CapabilityError(NotImplementedError):
    pass


@dataclass(frozen=True)
class EnsembleSpec:
    """`weights` is required for WE and must be nonnegative with a positive sum."""

    members: tuple
    protocol: str = WE
    weights: tuple | None = None

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        if not members:
            raise ValueError("an ensemble needs at least one member")
        d, c = members[0].input_dim, members[0].num_classes
        for m in members:
            if m.input_dim != d or m.num_classes != c:
                raise ValueError("members must share input dimension and class count")
        if self.protocol == WE:
            w = np.ones(len(members)) if self.weights is None else np.asarray(self.weights, dtype=float)
            if w.shape != (len(members),):
                raise ValueError("one weight per member is required")
            if np.any(w < 0) or not np.any(w > 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite, nonnegative and not all zero")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))
        elif self.protocol == MME:
            object.__setattr__(self, "weights", None)
        else:
            raise ProtocolError(f"unknown protocol {self.protocol!r}")

    @classmethod
    def weighted(cls, members, weights=None) -> "EnsembleSpec":
        return cls(tuple(members), WE, weights)

    @classmethod
    def max_margin(cls, members) -> "EnsembleSpec":
        return cls(tuple(members), MME)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes


def _we_scores(spec: EnsembleSpec, x) -> np.ndarray:
    total = 0.0
    for w, m in zip(spec.weights, spec.members):
        if w != 0.0:
            total = total + w * m.confidences(x)
    return total


def we_predict(spec: EnsembleSpec, x):
    if spec.protocol != WE:
        raise ProtocolError("we_predict needs a WE ensemble")
    out = np.argmax(_we_scores(spec, x), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def mme_predict(spec: EnsembleSpec, x):
    if spec.protocol != MME:
        raise ProtocolError("mme_predict needs an MME ensemble")
    x = np.asarray(x, dtype=float)
    tops, margins = [], []
    for m in spec.members:
        conf = m.confidences(x)
        top, runner = top_two(conf)
        tops.append(top)
        margins.append(np.take_along_axis(conf, np.expand_dims(top, -1), -1)[..., 0]
                       - np.take_along_axis(conf, np.expand_dims(runner, -1), -1)[..., 0])
    chosen = np.argmax(np.stack(margins, axis=0), axis=0)
    out = np.choose(chosen, np.stack(tops, axis=0)) if x.ndim > 1 else np.stack(tops)[chosen]
    return int(out) if np.ndim(out) == 0 else out


def ensemble_predict(spec: EnsembleSpec, x):
    return we_predict(spec, x) if spec.protocol == WE else mme_predict(spec, x)


# condition terms

@dataclass
class ClassDiagnostic:
    competing: tuple
    grad_norm: float
    margin: float
    sufficient_rhs: float
    necessary_rhs: float
    sufficient_holds: bool
    necessary_holds: bool


@dataclass
class RobustnessVerdict:
    status: str
    radius: float
    beta: float
    diagnostics: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def verdict_from_terms(competing: Sequence, grad_norms, margins, r: float, beta: float,
                       smooth_scale: float, notes=()) -> RobustnessVerdict:
    """Apply the sufficient / necessary inequalities to precomputed per-class terms.

    `smooth_scale` multiplies beta*r: the weight sum for WE, 2 for two-member MME.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    diags = []
    for label, g, m in zip(competing, grad_norms, margins):
        suff = m / r - beta * r * smooth_scale
        nec = m / r + beta * r * smooth_scale
        diags.append(ClassDiagnostic(tuple(np.atleast_1d(label).tolist()), float(g), float(m),
                                     float(suff), float(nec), bool(g <= suff), bool(g <= nec)))
    if all(d.sufficient_holds for d in diags):
        status = ROBUST
    elif any(not d.necessary_holds for d in diags):
        status = NOT_ROBUST
    else:
        status = UNDETERMINED
    return RobustnessVerdict(status, float(r), float(beta), diags, list(notes))


@dataclass
class WeTerms:
    competing: list          # competing classes y != y0
    grads: np.ndarray        # (len(competing), d): sum_j w_j grad f_j^{y0/y}
    margins: np.ndarray      # sum_j w_j f_j^{y0/y}
    member_grads: np.ndarray  # (N, len(competing), d)
    member_margins: np.ndarray  # (N, len(competing))
    weight_sum: float

    @property
    def grad_norms(self) -> np.ndarray:
        return np.linalg.norm(self.grads, axis=-1)


def member_terms(model: MlpClassifier, x0, y0: int):
    """Per-class gap gradients and gaps of one member: (competing, grads (C-1, d), gaps (C-1,))."""
    conf = model.confidences(x0)
    jac = input_jacobian(model, x0)
    competing = [y for y in range(model.num_classes) if y != y0]
    grads = jac[y0][None, :] - jac[competing]
    gaps = conf[y0] - conf[competing]
    return competing, grads, gaps


def we_terms(members: Sequence[MlpClassifier], weights, x0, y0: int) -> WeTerms:
    weights = np.asarray(weights, dtype=float)
    per = [member_terms(m, x0, y0) for m in members]
    competing = per[0][0]
    mg = np.stack([p[1] for p in per])
    mm = np.stack([p[2] for p in per])
    return WeTerms(competing, np.tensordot(weights, mg, axes=1), weights @ mm, mg, mm,
                   float(np.sum(weights)))


def _check_we_prediction(members, weights, x0, y0):
    spec = EnsembleSpec.weighted(members, weights)
    pred = we_predict(spec, x0)
    if pred != y0:
        raise MispredictionError(f"WE ensemble predicts {pred} at x0, not {y0}")


@dataclass
class EriReport:
    r: float
    competing: list
    values: list
    minimum: float

    def to_dict(self) -> dict:
        return asdict(self)


def eri_from_terms(competing, grad_norms, margins, weight_sum: float, r: float) -> EriReport:
    if r <= 0:
        raise ValueError("r must be positive")
    vals = [float(g / weight_sum - m / (r * weight_sum)) for g, m in zip(grad_norms, margins)]
    return EriReport(float(r), list(competing), vals, min(vals))


def eri_we(members, weights, x0, y0: int, r: float) -> EriReport:
    """Ensemble robustness indicator per competing class; smaller is more robust."""
    t = we_terms(members, weights, x0, y0)
    return eri_from_terms(t.competing, t.grad_norms, t.margins, t.weight_sum, r)


def check_we_robustness(members, weights, x0, y0: int, r: float, beta: float) -> RobustnessVerdict:
    _check_we_prediction(members, weights, x0, y0)
    t = we_terms(members, weights, x0, y0)
    return verdict_from_terms(t.competing, t.grad_norms, t.margins, r, beta, t.weight_sum)


def check_single_robustness(model: MlpClassifier, x0, y0: int, r: float, beta: float) -> RobustnessVerdict:
    return check_we_robustness([model], [1.0], x0, y0, r, beta)


def mme_pair_terms(member_pair, x0, y0: int):
    """All (y1, y2) competing pairs with norms of summed gap gradients and summed gaps."""
    (c1, g1, m1), (c2, g2, m2) = (member_terms(m, x0, y0) for m in member_pair)
    pairs, norms, margins, cosines = [], [], [], []
    for (i, y1), (j, y2) in itertools.product(enumerate(c1), enumerate(c2)):
        pairs.append((y1, y2))
        norms.append(np.linalg.norm(g1[i] + g2[j]))
        margins.append(m1[i] + m2[j])
        cosines.append(_cosine(g1[i], g2[j]))
    return pairs, np.array(norms), np.array(margins), np.array(cosines), (m1, m2)


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


def check_mme_robustness(member_pair, x0, y0: int, r: float, beta: float) -> RobustnessVerdict:
    if len(member_pair) != 2:
        raise CapabilityError("the MME conditions are implemented for exactly two members")
    pred = mme_predict(EnsembleSpec.max_margin(member_pair), x0)
    if pred != y0:
        raise MispredictionError(f"MME ensemble predicts {pred} at x0, not {y0}")
    pairs, norms, margins, _, _ = mme_pair_terms(member_pair, x0, y0)
    note = ("the necessary condition assumes each member has y0 as its top or runner-up "
            "class throughout the ball; this is not verified")
    return verdict_from_terms(pairs, norms, margins, r, beta, 2.0, notes=[note])


def radius_from_terms(grad_norms, margins, weight_sum: float, beta: float) -> float:
    """Largest r meeting the sufficient inequality for every competing class."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    grad_norms = np.asarray(grad_norms, dtype=float)
    margins = np.asarray(margins, dtype=float)
    if np.any(margins <= 0):
        return 0.0
    if beta == 0:
        with np.errstate(divide="ignore", over="ignore"):
            radii = np.where(grad_norms > 0, margins / np.where(grad_norms > 0, grad_norms, 1.0), np.inf)
    else:
        a = beta * weight_sum
        disc = np.sqrt(grad_norms ** 2 + 4.0 * a * margins)
        # (-G + sqrt(G^2 + 4aM)) / (2a), written to avoid cancellation when 4aM << G^2
        with np.errstate(divide="ignore", over="ignore"):
            radii = 2.0 * margins / (grad_norms + disc)
    return float(np.min(radii))


def max_certified_radius_we(members, weights, x0, y0: int, beta: float) -> float:
    _check_we_prediction(members, weights, x0, y0)
    t = we_terms(members, weights, x0, y0)
    return radius_from_terms(t.grad_norms, t.margins, t.weight_sum, beta)


@dataclass
class RadiusBound:
    radius: float
    coefficient: float
    c: float
    beta_threshold: float
    max_gradient_cosine: float


def radius_bound_from_margins(m1, m2, w1: float, w2: float, r: float, delta: float,
                              cos_theta: float) -> RadiusBound:
    """Ensemble-vs-single radius lower bound from paired member gaps.

    m1[k], m2[k] are the two members' gaps for the k-th competing class (WE) or
    competing pair (MME, with w1 = w2 = 1).
    """
    if not (0.0 <= delta < 1.0):
        raise ValueError("delta must lie in [0, 1)")
    if not (-1.0 <= cos_theta <= 1.0):
        raise ValueError("cos_theta must lie in [-1, 1]")
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    denom = (w1 * m1 + w2 * m2) ** 2
    if np.any(denom == 0):
        raise ZeroDivisionError("both member margins are zero for some competing class")
    coef = float(np.min(2.0 * w1 * w2 * m1 * m2 / denom))
    inner = 1.0 - coef * (1.0 - cos_theta)
    if inner <= 0:
        raise ZeroDivisionError("1 - C(1 - cos theta) must be positive")
    radius = r * (1.0 - delta) / (1.0 + delta) * inner ** -0.5
    c = max(radius / r, 1.0)
    beta_thr = delta * float(np.min(np.minimum(m1, m2))) / (c * c * r * r)
    return RadiusBound(float(radius), coef, float(c), float(beta_thr), float("nan"))


def ensemble_radius_bound(member_pair, weights, x0, y0: int, r: float, delta: float,
                          cos_theta: float, protocol: str = WE) -> RadiusBound:
    """Radius R the two-member ensemble is guaranteed when both members are r-robust.

    The caller must check that beta is at most `beta_threshold` and that the
    gradient cosines are at most `cos_theta`; the largest observed cosine is reported.
    """
    if len(member_pair) != 2:
        raise CapabilityError("the bound is stated for two members")
    if protocol == WE:
        w1, w2 = (1.0, 1.0) if weights is None else (float(weights[0]), float(weights[1]))
        t = we_terms(member_pair, [w1, w2], x0, y0)
        m1, m2 = t.member_margins
        cosines = [_cosine(a, b) for a, b in zip(t.member_grads[0], t.member_grads[1])]
    elif protocol == MME:
        w1 = w2 = 1.0
        pairs, _, _, cosines, (g1, g2) = mme_pair_terms(member_pair, x0, y0)
        c1 = [y for y in range(member_pair[0].num_classes) if y != y0]
        m1 = np.array([g1[c1.index(a)] for a, _ in pairs])
        m2 = np.array([g2[c1.index(b)] for _, b in pairs])
    else:
        raise ProtocolError(protocol)
    out = radius_bound_from_margins(m1, m2, w1, w2, r, delta, cos_theta)
    out.max_gradient_cosine = float(np.max(cosines))
    return out


def simplex_grid(n: int, step: float) -> np.ndarray:
    """All weight vectors with entries in {0, step, ..., 1} summing to 1, lexicographic."""
    k = round(1.0 / step)
    if k < 1 or abs(k * step - 1.0) > 1e-9:
        raise ValueError("step must divide 1 evenly")
    rows = [c for c in itertools.product(range(k + 1), repeat=n) if sum(c) == k]
    return np.array(rows, dtype=float) / k


MAX_GRID_MEMBERS = 4


def optimal_weights_grid(members, xs, ys, step: float = 0.1):
    """Grid weights maximising the mean beta=0 certified radius over labelled points.

    Points the weighted ensemble misclassifies count as radius 0. Returns
    (weights, objective); ties go to the first grid point in lexicographic order.
    """
    n = len(members)
    if n > MAX_GRID_MEMBERS:
        raise CapabilityError(f"grid search supports at most {MAX_GRID_MEMBERS} members")
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.asarray(ys, dtype=int)
    grid = simplex_grid(n, step)
    confs = np.stack([m.confidences(xs) for m in members])            # (N, P, C)
    jacs = np.stack([input_jacobian(m, xs) for m in members])         # (N, P, C, d)
    best_w, best_obj = None, -np.inf
    for w in grid:
        scores = np.tensordot(w, confs, axes=1)                       # (P, C)
        pred = np.argmax(scores, axis=-1)
        total = 0.0
        for p, (y0, yhat) in enumerate(zip(ys, pred)):
            if yhat != y0:
                continue
            others = [y for y in range(scores.shape[1]) if y != y0]
            gaps = scores[p, y0] - scores[p, others]
            gj = np.tensordot(w, jacs[:, p], axes=1)                  # (C, d)
            norms = np.linalg.norm(gj[y0][None, :] - gj[others], axis=-1)
            total += radius_from_terms(norms, gaps, float(w.sum()), 0.0)
        obj = total / len(xs)
        if obj > best_obj:
            best_w, best_obj = w, obj
    return best_w, best_obj
