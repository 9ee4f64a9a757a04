"""Fault-line solver: minimal concept add/delete sets that flip a decision.

The discrete problem — choose deletions over the predicted class's concepts
and additions over the alternate class's concepts so the alternate logit
beats the predicted logit by margin tau, at minimal L1 cost — is relaxed to
a box-constrained continuous one, solved by monotone projected FISTA with
backtracking and adaptive restart, then rounded and polished back onto the
discrete lattice. A full-enumeration oracle is provided for verification.

Perturbation semantics: each concept contributes a per-map footprint (the
squared CAV components); deltas scale an identity-at-zero multiplicative
mask per feature map, so delta = 0 leaves the activations untouched,
delta_pred = -1 suppresses a concept's maps and delta_alt = +1 amplifies
them. The combined multiplier is clamped to [0, 4].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .backend import (
    ActivationTensor,
    ClassifierHead,
    ShapeError,
    global_average_pool,
    logits,
)
from .cav import CAV, ClassConceptSet

MULT_LO, MULT_HI = 0.0, 4.0


@dataclass(frozen=True)
class FaultLineQuery:
    image_id: str
    activation: ActivationTensor
    c_pred: str
    c_alt: str

    def __post_init__(self):
        if self.c_pred == self.c_alt:
            raise ValueError("c_pred and c_alt must differ")


def validate_query(head: ClassifierHead, query: FaultLineQuery) -> None:
    """Check that c_pred really is the head's argmax on the activation."""
    y = logits(head, query.activation)
    pred = head.class_labels[int(np.argmax(y))]
    if pred != query.c_pred:
        raise ValueError(
            f"query says c_pred={query.c_pred!r} but head predicts {pred!r}"
        )


@dataclass(frozen=True)
class FaultLineHyperparams:
    alpha: float = 1.0
    beta: float = 0.1
    lam: float = 0.1
    tau: float = 0.5
    max_iters: int = 500
    step_size: float = 1.0
    rounding_threshold: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam, self.tau) < 0:
            raise ValueError("alpha, beta, lam, tau must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.rounding_threshold <= 1:
            raise ValueError("rounding_threshold must be in (0, 1]")


@dataclass
class FaultLine:
    query: FaultLineQuery
    delta_pred: np.ndarray  # values in {-1, 0}
    delta_alt: np.ndarray  # values in {0, 1}
    nft: list[str]  # concept ids deleted (delta_pred = -1)
    pft: list[str]  # concept ids added (delta_alt = +1)
    objective: float
    margin: float  # g_alt(I') - g_pred(I')
    flipped: bool
    iterations: int = 0
    trace: list[float] = field(default_factory=list)
    restarts: int = 0


def perturb_activations(
    a: ActivationTensor,
    v_pred: list[CAV],
    delta_pred: np.ndarray,
    v_alt: list[CAV],
    delta_alt: np.ndarray,
) -> ActivationTensor:
    """Apply the concept masks to the activation tensor.

    I'[k,i,j] = A[k,i,j] * clamp((1 + sum_q dpred_q * vpred_q[k]^2)
                                 * (1 + sum_r dalt_r * valt_r[k]^2), 0, 4)
    """
    delta_pred = np.asarray(delta_pred, dtype=np.float64)
    delta_alt = np.asarray(delta_alt, dtype=np.float64)
    if len(v_pred) != delta_pred.shape[0] or len(v_alt) != delta_alt.shape[0]:
        raise ShapeError("delta length must match CAV count")
    for cav in list(v_pred) + list(v_alt):
        if cav.v.shape[0] != a.m:
            raise ShapeError("CAV dimension must match activation maps")
    mask_pred = np.ones(a.m)
    for q, cav in enumerate(v_pred):
        mask_pred += delta_pred[q] * cav.v**2
    mask_alt = np.ones(a.m)
    for r, cav in enumerate(v_alt):
        mask_alt += delta_alt[r] * cav.v**2
    mult = np.clip(mask_pred * mask_alt, MULT_LO, MULT_HI)
    return ActivationTensor(a.values * mult[:, None, None])


def hinge_loss(
    head: ClassifierHead,
    a_perturbed: ActivationTensor,
    c_pred: str,
    c_alt: str,
    tau: float,
) -> float:
    """D = max(g_pred(I') - g_alt(I'), -tau)."""
    y = logits(head, a_perturbed)
    diff = y[head.class_index(c_pred)] - y[head.class_index(c_alt)]
    return float(max(diff, -tau))


class _ReducedProblem:
    """Logit difference as a function of the delta vector only.

    Because the head is linear over GAP, the perturbed logit difference
    collapses to d . mult(delta) + bias_diff with d[k] = (w_pred[k] -
    w_alt[k]) * gap[k]; the solver never touches the full tensor.
    """

    def __init__(
        self,
        head: ClassifierHead,
        query: FaultLineQuery,
        v_pred: list[CAV],
        v_alt: list[CAV],
        hp: FaultLineHyperparams,
    ):
        gap = global_average_pool(query.activation)
        ip, ia = head.class_index(query.c_pred), head.class_index(query.c_alt)
        self.d = (head.weights[ip] - head.weights[ia]) * gap
        self.bias_diff = float(head.bias[ip] - head.bias[ia])
        m = head.m
        self.Wp = (
            np.stack([c.v**2 for c in v_pred]) if v_pred else np.zeros((0, m))
        )
        self.Wa = (
            np.stack([c.v**2 for c in v_alt]) if v_alt else np.zeros((0, m))
        )
        self.n_pred = len(v_pred)
        self.n_alt = len(v_alt)
        self.n = self.n_pred + self.n_alt
        self.hp = hp
        self.lower = np.concatenate(
            [-np.ones(self.n_pred), np.zeros(self.n_alt)]
        )
        self.upper = np.concatenate(
            [np.zeros(self.n_pred), np.ones(self.n_alt)]
        )
        self.pen = np.concatenate(
            [np.full(self.n_pred, hp.beta), np.full(self.n_alt, hp.lam)]
        )

    def split(self, x: np.ndarray):
        return x[: self.n_pred], x[self.n_pred :]

    def _masks(self, x: np.ndarray):
        dp, da = self.split(x)
        mask_pred = 1.0 + dp @ self.Wp
        mask_alt = 1.0 + da @ self.Wa
        prod = mask_pred * mask_alt
        return mask_pred, mask_alt, prod, np.clip(prod, MULT_LO, MULT_HI)

    def diff(self, x: np.ndarray) -> float:
        return float(self.d @ self._masks(x)[3] + self.bias_diff)

    def margin(self, x: np.ndarray) -> float:
        return -self.diff(x)

    def smooth(self, x: np.ndarray) -> float:
        return self.hp.alpha * max(self.diff(x), -self.hp.tau)

    def grad_smooth(self, x: np.ndarray) -> np.ndarray:
        mask_pred, mask_alt, prod, _ = self._masks(x)
        diff = float(self.d @ np.clip(prod, MULT_LO, MULT_HI) + self.bias_diff)
        if diff <= -self.hp.tau:
            return np.zeros(self.n)
        active = (prod > MULT_LO) & (prod < MULT_HI)
        da = self.d * active
        gp = self.Wp @ (da * mask_alt)
        ga = self.Wa @ (da * mask_pred)
        return self.hp.alpha * np.concatenate([gp, ga])

    def penalty(self, x: np.ndarray) -> float:
        return float(self.pen @ np.abs(x))

    def objective(self, x: np.ndarray) -> float:
        return self.smooth(x) + self.penalty(x)

    def prox(self, z: np.ndarray, t: float) -> np.ndarray:
        shrunk = np.sign(z) * np.maximum(np.abs(z) - t * self.pen, 0.0)
        return np.clip(shrunk, self.lower, self.upper)


def _fista(prob: _ReducedProblem, hp: FaultLineHyperparams):
    """Monotone projected FISTA with backtracking and adaptive restart."""
    x = np.zeros(prob.n)
    y = x.copy()
    t = 1.0
    fx = prob.objective(x)
    trace = [fx]
    restarts = 0
    iterations = 0

    def prox_step(base: np.ndarray):
        step = hp.step_size
        g = prob.grad_smooth(base)
        f_base = prob.smooth(base)
        for _ in range(60):
            cand = prob.prox(base - step * g, step)
            delta = cand - base
            quad = f_base + g @ delta + (delta @ delta) / (2 * step)
            if prob.smooth(cand) <= quad + 1e-12:
                return cand
            step *= 0.5
        return cand

    for iterations in range(1, hp.max_iters + 1):
        x_new = prox_step(y)
        f_new = prob.objective(x_new)
        if f_new > fx + 1e-12:
            # objective went up: drop momentum, take a plain step from x
            restarts += 1
            t = 1.0
            x_new = prox_step(x)
            f_new = prob.objective(x_new)
            if f_new > fx:
                x_new, f_new = x, fx
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = x_new + ((t - 1.0) / t_next) * (x_new - x)
        moved = float(np.max(np.abs(x_new - x))) if prob.n else 0.0
        x, fx, t = x_new, f_new, t_next
        trace.append(fx)
        if moved < 1e-10 and iterations > 1:
            break
    return x, trace, restarts, iterations


def _key(prob: _ReducedProblem, x: np.ndarray):
    """Tie-break key: objective, then fewer changes, then lexicographic."""
    return (prob.objective(x), int(np.count_nonzero(x)), tuple(x))


def _extreme(prob: _ReducedProblem, idx: int) -> float:
    return -1.0 if idx < prob.n_pred else 1.0


def _point_from_support(prob: _ReducedProblem, support: tuple[int, ...]) -> np.ndarray:
    x = np.zeros(prob.n)
    for i in support:
        x[i] = _extreme(prob, i)
    return x


def _minimal_flipping_subsets(
    prob: _ReducedProblem, support: list[int]
) -> list[tuple[int, ...]]:
    """Subset-minimal flipping subsets of the support (inclusion-minimal)."""
    flipping_by_size: list[tuple[int, ...]] = []
    for size in range(1, len(support) + 1):
        for combo in combinations(support, size):
            if prob.margin(_point_from_support(prob, combo)) > 0:
                flipping_by_size.append(combo)
    minimal: list[tuple[int, ...]] = []
    for s in flipping_by_size:  # already ordered by size
        sset = set(s)
        if not any(set(m) <= sset for m in minimal):
            minimal.append(s)
    return minimal


def _greedy_repair(prob: _ReducedProblem, x: np.ndarray) -> np.ndarray:
    """Drop components one at a time while the margin stays >= 0."""
    x = x.copy()
    changed = True
    while changed:
        changed = False
        for i in np.flatnonzero(x):
            trial = x.copy()
            trial[i] = 0.0
            if prob.margin(trial) >= 0:
                x = trial
                changed = True
    return x


def _greedy_extend(prob: _ReducedProblem, x: np.ndarray) -> np.ndarray | None:
    """Add the best margin-improving component until the decision flips."""
    x = x.copy()
    for _ in range(prob.n):
        if prob.margin(x) > 0:
            return x
        best_i, best_margin = -1, prob.margin(x)
        for i in range(prob.n):
            if x[i] != 0:
                continue
            trial = x.copy()
            trial[i] = _extreme(prob, i)
            mg = prob.margin(trial)
            if mg > best_margin + 1e-15:
                best_i, best_margin = i, mg
        if best_i < 0:
            return None
        x[best_i] = _extreme(prob, best_i)
    return x if prob.margin(x) > 0 else None


def _hill_climb(prob: _ReducedProblem, x: np.ndarray, flips_only: bool) -> np.ndarray:
    """Single-coordinate toggles accepted when they improve the tie-break key."""
    x = x.copy()
    for _ in range(200):
        best = None
        key0 = _key(prob, x)
        for i in range(prob.n):
            trial = x.copy()
            trial[i] = 0.0 if x[i] != 0 else _extreme(prob, i)
            if flips_only and prob.margin(trial) <= 0:
                continue
            k = _key(prob, trial)
            if k < key0 and (best is None or k < best[0]):
                best = (k, trial)
        if best is None:
            break
        x = best[1]
    return x


_ENUM_CAP = 12


def solve_faultline(
    head: ClassifierHead,
    query: FaultLineQuery,
    sigma_pred: ClassConceptSet,
    sigma_alt: ClassConceptSet,
    hp: FaultLineHyperparams | None = None,
    seed: int = 0,
) -> FaultLine:
    """Relax, run FISTA, round, and polish to a discrete fault-line.

    Returns the best flipping assignment found (subset-minimal: removing
    any part of it un-flips the decision). If no candidate flips, the
    best-objective assignment is returned with flipped=False as a
    diagnostic rather than an error.
    """
    hp = hp or FaultLineHyperparams()
    validate_query(head, query)
    v_pred, v_alt = sigma_pred.selected_cavs, sigma_alt.selected_cavs
    prob = _ReducedProblem(head, query, v_pred, v_alt, hp)

    if prob.n == 0:
        return _result(head, query, sigma_pred, sigma_alt, hp, prob,
                       np.zeros(0), [prob.objective(np.zeros(0))], 0, 0)

    x_cont, trace, restarts, iterations = _fista(prob, hp)

    rounded = np.where(
        np.abs(x_cont) >= hp.rounding_threshold,
        np.where(np.arange(prob.n) < prob.n_pred, -1.0, 1.0),
        0.0,
    )
    support = [int(i) for i in np.flatnonzero(rounded)]

    candidates: list[np.ndarray] = [np.zeros(prob.n), rounded.copy()]
    if support and len(support) <= _ENUM_CAP:
        minimal = _minimal_flipping_subsets(prob, support)
        candidates.extend(_point_from_support(prob, s) for s in minimal)
        if not minimal:
            # no flip inside the support: best-objective subset still useful
            best_sub = min(
                (
                    _point_from_support(prob, combo)
                    for size in range(len(support) + 1)
                    for combo in combinations(support, size)
                ),
                key=lambda p: _key(prob, p),
            )
            candidates.append(best_sub)
    elif support:
        candidates.append(_greedy_repair(prob, rounded))

    if not any(prob.margin(c) > 0 for c in candidates):
        extended = _greedy_extend(prob, np.zeros(prob.n))
        if extended is not None:
            candidates.append(_greedy_repair(prob, extended))

    flipping = [c for c in candidates if prob.margin(c) > 0]
    if flipping:
        best = min(flipping, key=lambda c: _key(prob, c))
        best = _hill_climb(prob, best, flips_only=True)
        best = _minimal_reduce(prob, best)
    else:
        best = min(candidates, key=lambda c: _key(prob, c))
        best = _hill_climb(prob, best, flips_only=False)

    return _result(
        head, query, sigma_pred, sigma_alt, hp, prob, best, trace, restarts,
        iterations,
    )


def _minimal_reduce(prob: _ReducedProblem, x: np.ndarray) -> np.ndarray:
    """Replace a flipping point by its best subset-minimal flipping subset."""
    support = [int(i) for i in np.flatnonzero(x)]
    if not support or len(support) > _ENUM_CAP:
        return _greedy_repair(prob, x)
    minimal = _minimal_flipping_subsets(prob, support)
    if not minimal:
        return x
    return min(
        (_point_from_support(prob, s) for s in minimal),
        key=lambda p: _key(prob, p),
    )


def _result(
    head: ClassifierHead,
    query: FaultLineQuery,
    sigma_pred: ClassConceptSet,
    sigma_alt: ClassConceptSet,
    hp: FaultLineHyperparams,
    prob: _ReducedProblem,
    x: np.ndarray,
    trace: list[float],
    restarts: int,
    iterations: int,
) -> FaultLine:
    dp, da = prob.split(x)
    # recompute margin through the public perturbation path
    perturbed = perturb_activations(
        query.activation, sigma_pred.selected_cavs, dp,
        sigma_alt.selected_cavs, da,
    )
    y = logits(head, perturbed)
    margin = float(
        y[head.class_index(query.c_alt)] - y[head.class_index(query.c_pred)]
    )
    objective = hp.alpha * max(-margin, -hp.tau) + prob.penalty(x)
    nft = [sigma_pred.selected[i] for i in np.flatnonzero(dp == -1.0)]
    pft = [sigma_alt.selected[i] for i in np.flatnonzero(da == 1.0)]
    return FaultLine(
        query=query,
        delta_pred=dp.copy(),
        delta_alt=da.copy(),
        nft=nft,
        pft=pft,
        objective=objective,
        margin=margin,
        flipped=margin > 0,
        iterations=iterations,
        trace=trace,
        restarts=restarts,
    )


def brute_force_faultline(
    head: ClassifierHead,
    query: FaultLineQuery,
    sigma_pred: ClassConceptSet,
    sigma_alt: ClassConceptSet,
    hp: FaultLineHyperparams | None = None,
) -> FaultLine:
    """Exact discrete minimizer by full enumeration (test oracle).

    Ties break toward fewer total changes, then lexicographically smaller
    delta vectors.
    """
    hp = hp or FaultLineHyperparams()
    validate_query(head, query)
    v_pred, v_alt = sigma_pred.selected_cavs, sigma_alt.selected_cavs
    n = len(v_pred) + len(v_alt)
    if n > 16:
        raise ValueError(f"instance too large for enumeration: {n} > 16")
    prob = _ReducedProblem(head, query, v_pred, v_alt, hp)

    best_x, best_key = None, None
    for bits in range(1 << n):
        x = np.zeros(n)
        for i in range(n):
            if bits >> i & 1:
                x[i] = _extreme(prob, i)
        key = _key(prob, x)
        if best_key is None or key < best_key:
            best_x, best_key = x, key
    return _result(
        head, query, sigma_pred, sigma_alt, hp, prob, best_x, [], 0, 0
    )
