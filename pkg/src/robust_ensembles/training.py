"""Gaussian-augmented ensemble training with diversity regularizers.

Per noisy input x = x0 + eps with label y0, a pair of members (i, j) is valid
when both predict y0 at x. For a valid pair with runner-up classes r_i, r_j:

    gradient diversity  ||grad_x f_i^{y0/r_i}(x) + grad_x f_j^{y0/r_j}(x)||
    confidence margin   f_i^{r_i/y0}(x) + f_j^{r_j/y0}(x)

The training objective sums member cross-entropies plus rho1 and rho2 times
these terms over valid pairs i < j. Label and runner-up indices are frozen per
forward pass.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BoundMlp, Graph, Node, backward, one_hot
from .model import MlpClassifier
from .numstats import RngStream, sample_gaussian

NONE = "none"
DRT_PAIRWISE = "drt_pairwise"
DRT_AGGREGATE = "drt_aggregate"
GD_ONLY = "gd_only"
CM_ONLY = "cm_only"
ADP = "adp"
GAL = "gal"
VARIANTS = (NONE, DRT_PAIRWISE, DRT_AGGREGATE, GD_ONLY, CM_ONLY, ADP, GAL)

_ALIASES = {
    "none": NONE, "drtpairwise": DRT_PAIRWISE, "drt": DRT_PAIRWISE, "drtaggregate": DRT_AGGREGATE,
    "gdonly": GD_ONLY, "cmonly": CM_ONLY, "adp": ADP, "gal": GAL,
}

ED_FLOOR = 1e-12
LOG_FLOOR = 1e-30


def normalize_variant(name: str) -> str:
    key = name.replace("_", "").replace("-", "").lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown training variant {name!r}; choose from {VARIANTS}")
    return _ALIASES[key]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    variant: str = NONE
    rho1: float = 0.0
    rho2: float = 0.0
    alpha_adp: float = 2.0
    beta_adp: float = 0.5
    adp_entropy_per_member: bool = False
    gal_weight: float = 0.5
    sigma: float = 0.25
    k_noise: int = 2
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay_period: int = 30
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        for name in ("rho1", "rho2", "alpha_adp", "beta_adp", "gal_weight", "sigma", "lr", "momentum",
                     "lr_decay_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.k_noise < 1 or self.epochs < 0 or self.batch_size < 1 or self.lr_decay_period < 1:
            raise ValueError("k_noise, batch_size and lr_decay_period must be positive")

    @property
    def uses_gd(self) -> bool:
        return self.variant in (DRT_PAIRWISE, DRT_AGGREGATE, GD_ONLY)

    @property
    def uses_cm(self) -> bool:
        return self.variant in (DRT_PAIRWISE, DRT_AGGREGATE, CM_ONLY)

    def to_dict(self) -> dict:
        return asdict(self)


# batch terms; every function returns one value per row of x

@dataclass
class MemberPass:
    bound: BoundMlp
    probs: Node
    log_probs: Node
    pred: np.ndarray
    runner_up: np.ndarray


def member_pass(bound: BoundMlp, x: Node, y: np.ndarray) -> MemberPass:
    fwd = bound.forward(x)
    p = fwd.probs.value
    masked = p.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return MemberPass(bound, fwd.probs, fwd.log_probs, np.argmax(p, axis=-1), np.argmax(masked, axis=-1))


def cross_entropy_rows(mp: MemberPass, y: np.ndarray) -> Node:
    oh = mp.bound.graph.const(one_hot(y, mp.probs.value.shape[-1]))
    return -ad.sum(mp.log_probs * oh, axis=-1)


def margin_gradient_rows(mp: MemberPass, x: Node, y: np.ndarray) -> Node:
    return ad.input_gradient_node(mp.bound, x, y, mp.runner_up)


def runner_up_gap_rows(mp: MemberPass, y: np.ndarray) -> Node:
    c = mp.probs.value.shape[-1]
    diff = mp.bound.graph.const(one_hot(mp.runner_up, c) - one_hot(y, c))
    return ad.sum(mp.probs * diff, axis=-1)


def pair_valid(a: MemberPass, b: MemberPass, y: np.ndarray) -> np.ndarray:
    return ((a.pred == y) & (b.pred == y)).astype(float)


def entropy_rows(passes: Sequence[MemberPass]) -> Node:
    mean = passes[0].probs
    for mp in passes[1:]:
        mean = mean + mp.probs
    mean = mean * (1.0 / len(passes))
    return -ad.sum(mean * ad.log(mean + LOG_FLOOR), axis=-1)


def diversity_rows(passes: Sequence[MemberPass], y: np.ndarray) -> Node:
    """Gram determinant of the normalised non-label confidence vectors."""
    g = passes[0].bound.graph
    c = passes[0].probs.value.shape[-1]
    keep = g.const(1.0 - one_hot(y, c))
    unit = []
    for mp in passes:
        v = mp.probs * keep
        n = ad.l2norm(v, axis=-1, keepdims=True)
        unit.append(v / (n + g.const((n.value == 0).astype(float))))
    rows = [ad.stack([ad.sum(ui * uj, axis=-1) for uj in unit], axis=-1) for ui in unit]
    return ad.det(ad.stack(rows, axis=-2))


def adp_rows(passes, y, alpha_adp: float, beta_adp: float, per_member: bool = False) -> Node:
    scale = alpha_adp * (len(passes) if per_member else 1.0)
    return scale * entropy_rows(passes) + beta_adp * ad.log(diversity_rows(passes, y) + ED_FLOOR)


def gal_rows(passes, x: Node, y: np.ndarray) -> Node:
    g = x.graph
    grads = [ad.cross_entropy_input_gradient_node(mp.bound, x, y) for mp in passes]
    norms = [ad.l2norm(v, axis=-1) for v in grads]
    total = None
    for i, j in itertools.combinations(range(len(passes)), 2):
        den = norms[i] * norms[j]
        # a zero gradient has cosine 0 with everything: the numerator is 0 there too
        cos = ad.sum(grads[i] * grads[j], axis=-1) / (den + g.const((den.value == 0).astype(float)))
        e = ad.exp(cos)
        total = e if total is None else total + e
    return ad.log(total)


@dataclass
class BatchTerms:
    total: Node
    std: Node
    gd: Node | None
    cm: Node | None
    variant: Node | None
    correct: float
    terms: dict = field(default_factory=dict)


def batch_objective(bounds: Sequence[BoundMlp], x: Node, y: np.ndarray, config: TrainingConfig) -> BatchTerms:
    """Mean over rows of the regularized training objective."""
    y = np.asarray(y, dtype=int)
    g = x.graph
    rows = len(y)
    passes = [member_pass(b, x, y) for b in bounds]
    std = cross_entropy_rows(passes[0], y)
    for mp in passes[1:]:
        std = std + cross_entropy_rows(mp, y)
    per_row = std
    gd = cm = var = None
    v = config.variant
    rho1 = config.rho1 if config.uses_gd else 0.0
    rho2 = config.rho2 if config.uses_cm else 0.0
    if v in (DRT_PAIRWISE, GD_ONLY, CM_ONLY):
        grads = [margin_gradient_rows(mp, x, y) for mp in passes] if rho1 > 0 or v == GD_ONLY else None
        gaps = [runner_up_gap_rows(mp, y) for mp in passes]
        for i, j in itertools.combinations(range(len(passes)), 2):
            valid = g.const(pair_valid(passes[i], passes[j], y))
            if grads is not None:
                term = ad.l2norm(grads[i] + grads[j], axis=-1) * valid
                gd = term if gd is None else gd + term
            term = (gaps[i] + gaps[j]) * valid
            cm = term if cm is None else cm + term
    elif v == DRT_AGGREGATE:
        valid = np.ones(rows)
        for mp in passes:
            valid *= (mp.pred == y)
        valid_node = g.const(valid)
        if rho1 > 0:
            s = margin_gradient_rows(passes[0], x, y)
            for mp in passes[1:]:
                s = s + margin_gradient_rows(mp, x, y)
            gd = ad.l2norm(s, axis=-1) * valid_node
        s = runner_up_gap_rows(passes[0], y)
        for mp in passes[1:]:
            s = s + runner_up_gap_rows(mp, y)
        cm = s * valid_node
    elif v == ADP:
        var = adp_rows(passes, y, config.alpha_adp, config.beta_adp, config.adp_entropy_per_member)
        # the regularizer rewards ensemble entropy and diversity, so it enters with a minus sign
        per_row = per_row - var
    elif v == GAL:
        var = gal_rows(passes, x, y)
        per_row = per_row + config.gal_weight * var
    if gd is not None and rho1 > 0:
        per_row = per_row + rho1 * gd
    if cm is not None and rho2 > 0:
        per_row = per_row + rho2 * cm
    total = ad.sum(per_row) * (1.0 / rows)
    correct = float(np.mean([np.mean(mp.pred == y) for mp in passes]))
    terms = {"std": std, "gd": gd, "cm": cm, "variant": var}
    return BatchTerms(total, std, gd, cm, var, correct, terms)


# single-input API; arguments may be bound members in a shared graph or plain models

def _prepare(models, x_noisy):
    if all(isinstance(m, BoundMlp) for m in models):
        graph = models[0].graph
        bounds = list(models)
    else:
        graph = Graph()
        bounds = [m if isinstance(m, BoundMlp) else BoundMlp(graph, m, f"m{i}") for i, m in enumerate(models)]
    x = np.asarray(x_noisy, dtype=float)
    xn = graph.const(np.atleast_2d(x))
    return graph, bounds, xn


def _labels(y0, rows):
    return np.broadcast_to(np.asarray(y0, dtype=int), (rows,)).copy()


def std_loss(model, x_noisy, y0) -> Node:
    """-log f(x_noisy)_{y0}, summed over rows for a batch."""
    g, (b,), x = _prepare([model], x_noisy)
    y = _labels(y0, x.value.shape[0])
    return ad.sum(cross_entropy_rows(member_pass(b, x, y), y))


def gd_loss(model_i, model_j, x_noisy, y0) -> Node:
    g, (bi, bj), x = _prepare([model_i, model_j], x_noisy)
    y = _labels(y0, x.value.shape[0])
    pi, pj = member_pass(bi, x, y), member_pass(bj, x, y)
    valid = g.const(pair_valid(pi, pj, y))
    return ad.sum(ad.l2norm(margin_gradient_rows(pi, x, y) + margin_gradient_rows(pj, x, y), axis=-1) * valid)


def cm_loss(model_i, model_j, x_noisy, y0) -> Node:
    g, (bi, bj), x = _prepare([model_i, model_j], x_noisy)
    y = _labels(y0, x.value.shape[0])
    pi, pj = member_pass(bi, x, y), member_pass(bj, x, y)
    valid = g.const(pair_valid(pi, pj, y))
    return ad.sum((runner_up_gap_rows(pi, y) + runner_up_gap_rows(pj, y)) * valid)


def _all_correct(passes, y):
    valid = np.ones(len(y))
    for mp in passes:
        valid *= (mp.pred == y)
    return valid


def gd_loss_aggregate(members, x_noisy, y0) -> Node:
    g, bounds, x = _prepare(list(members), x_noisy)
    y = _labels(y0, x.value.shape[0])
    passes = [member_pass(b, x, y) for b in bounds]
    s = margin_gradient_rows(passes[0], x, y)
    for mp in passes[1:]:
        s = s + margin_gradient_rows(mp, x, y)
    return ad.sum(ad.l2norm(s, axis=-1) * g.const(_all_correct(passes, y)))


def cm_loss_aggregate(members, x_noisy, y0) -> Node:
    g, bounds, x = _prepare(list(members), x_noisy)
    y = _labels(y0, x.value.shape[0])
    passes = [member_pass(b, x, y) for b in bounds]
    s = runner_up_gap_rows(passes[0], y)
    for mp in passes[1:]:
        s = s + runner_up_gap_rows(mp, y)
    return ad.sum(s * g.const(_all_correct(passes, y)))


def adp_loss(members, x_noisy, y0, alpha_adp: float, beta_adp: float, per_member: bool = False) -> Node:
    """alpha * H(mean confidence) + beta * log(ED + 1e-12), ED the Gram determinant of
    the normalised non-label confidence vectors."""
    if len(members) < 2:
        raise ValueError("ADP needs at least two members")
    g, bounds, x = _prepare(list(members), x_noisy)
    y = _labels(y0, x.value.shape[0])
    passes = [member_pass(b, x, y) for b in bounds]
    return ad.sum(adp_rows(passes, y, alpha_adp, beta_adp, per_member))


def gal_loss(members, x_noisy, y0) -> Node:
    """log sum_{i<j} exp(cos(grad_x CE_i, grad_x CE_j))."""
    if len(members) < 2:
        raise ValueError("GAL needs at least two members")
    g, bounds, x = _prepare(list(members), x_noisy)
    y = _labels(y0, x.value.shape[0])
    passes = [member_pass(b, x, y) for b in bounds]
    return ad.sum(gal_rows(passes, x, y))


# optimisation

@dataclass
class OptimizerState:
    velocity: dict
    step: int = 0


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState | None, lr: float,
                      momentum: float):
    """v <- momentum * v + g; p <- p - lr * v. Returns new (params, state)."""
    if state is None:
        state = OptimizerState({k: np.zeros_like(v) for k, v in params.items()})
    new_params, new_vel = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        v = momentum * state.velocity[name] + g
        new_vel[name] = v
        new_params[name] = p - lr * v
    return new_params, OptimizerState(new_vel, state.step + 1)


def model_params(members: Sequence[MlpClassifier]) -> dict:
    out = {}
    for i, m in enumerate(members):
        for l, (w, b) in enumerate(m.layers):
            out[f"m{i}.W{l}"] = np.array(w)
            out[f"m{i}.b{l}"] = np.array(b)
    return out


def models_from_params(template: Sequence[MlpClassifier], params: dict) -> list[MlpClassifier]:
    return [m.with_layers([(params[f"m{i}.W{l}"], params[f"m{i}.b{l}"]) for l in range(len(m.layers))])
            for i, m in enumerate(template)]


HISTORY_COLUMNS = ["epoch", "std_loss", "gd_loss", "cm_loss", "variant_loss", "train_acc"]


@dataclass
class TrainResult:
    members: list
    history: list


def train(members: Sequence[MlpClassifier], dataset, config: TrainingConfig, log=None) -> TrainResult:
    """Train all members jointly; returns new models and per-epoch history rows."""
    feats = np.asarray(dataset.features, dtype=float)
    labels = np.asarray(dataset.labels, dtype=int)
    for m in members:
        if m.input_dim != feats.shape[1]:
            raise ValueError("member input dimension does not match the dataset")
    root = RngStream(config.seed)
    order_rng, noise_rng = root.fork(0), root.fork(1)
    params = model_params(members)
    state = None
    current = list(members)
    history = []
    n = len(labels)
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_period)
        perm = order_rng.permutation(n)
        sums = dict.fromkeys(["std", "gd", "cm", "variant", "acc"], 0.0)
        seen = 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            xb = np.repeat(feats[idx], config.k_noise, axis=0)
            yb = np.repeat(labels[idx], config.k_noise)
            xb = xb + sample_gaussian(noise_rng, xb.shape, config.sigma)
            graph = Graph()
            bounds = [BoundMlp(graph, m, f"m{i}") for i, m in enumerate(current)]
            terms = batch_objective(bounds, graph.const(xb), yb, config)
            for name, node in terms.terms.items():
                if node is not None and not np.all(np.isfinite(node.value)):
                    raise TrainingError(f"non-finite {name} term in epoch {epoch}, batch {bi}")
            if not np.isfinite(terms.total.value):
                raise TrainingError(f"non-finite total loss in epoch {epoch}, batch {bi}")
            grads = backward(graph, terms.total)
            params, state = sgd_momentum_step(params, grads, state, lr, config.momentum)
            for name, arr in params.items():
                if not np.all(np.isfinite(arr)):
                    raise TrainingError(f"non-finite parameter {name} after epoch {epoch}, batch {bi}")
            current = models_from_params(members, params)
            rows = len(yb)
            seen += rows
            sums["std"] += float(terms.std.value.sum())
            for key in ("gd", "cm", "variant"):
                node = terms.terms[key]
                if node is not None:
                    sums[key] += float(node.value.sum())
            sums["acc"] += terms.correct * rows
        row = {"epoch": epoch, "std_loss": sums["std"] / seen, "gd_loss": sums["gd"] / seen,
               "cm_loss": sums["cm"] / seen, "variant_loss": sums["variant"] / seen,
               "train_acc": sums["acc"] / seen}
        history.append(row)
        if log is not None:
            log(row)
    return TrainResult(current, history)


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [format(float(row[c]), ".17g") for c in HISTORY_COLUMNS[1:]])


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in reader]
