"""Concept activation vectors and class-specific concept selection.

A CAV is the unit normal of a logistic separator trained to tell one
concept's superpixel features from features drawn out of the other
concepts. Concept relevance for a class is the directional derivative of
that class's logit along the CAV, aggregated over the class's images into
a fraction-positive score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression

from .backend import (
    ActivationTensor,
    ClassifierHead,
    LabeledActivationSet,
    grad_logit_wrt_pooled,
)
from .mining import Xconcept

# sklearn's C maps to an L2 term of 1/(2C) per sample-sum loss
_L2_PENALTY = 1e-3
_SKLEARN_C = 1.0 / (2.0 * _L2_PENALTY)


class InseparableError(ValueError):
    """Concept and random features coincide; no direction separates them."""

    def __init__(self, message: str):
        super().__init__(message)
        self.accuracy = 0.5


@dataclass(frozen=True)
class CAV:
    concept_id: str
    v: np.ndarray  # unit m-vector
    separator_accuracy: float

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        norm = np.linalg.norm(v)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("CAV direction must be a nonzero finite vector")
        object.__setattr__(self, "v", v / norm)


@dataclass
class ClassConceptEntry:
    concept_id: str
    tcav_score: float  # fraction of class images with positive sensitivity
    mean_sensitivity: float


@dataclass
class ClassConceptSet:
    class_label: str
    entries: list[ClassConceptEntry]  # sorted descending by score
    selected: list[str]  # top-n concept ids
    selected_cavs: list[CAV] = field(default_factory=list)


def _holdout_split(n_concept: int, n_random: int, seed: int):
    """Per-side deterministic stride split, ~25% held out per side.

    The same rule applies to each side independently of which one is
    "concept", so swapping sides yields the mirror split exactly (this is
    what makes fit_cav antisymmetric under a side swap).
    """
    train, test = [], []
    offset = 0
    for n_side in (n_concept, n_random):
        start = seed % 4
        held = set(range(start % n_side, n_side, 4)) if n_side > 3 else {0}
        for i in range(n_side):
            (test if i in held else train).append(offset + i)
        offset += n_side
    return np.asarray(train), np.asarray(test)


def fit_cav(
    concept_features: list[np.ndarray] | np.ndarray,
    random_features: list[np.ndarray] | np.ndarray,
    seed: int = 0,
    concept_id: str = "",
) -> CAV:
    """Fit a logistic separator (L2 penalty 1e-3) concept-vs-random.

    The returned direction is the normalized weight vector, oriented so
    concept examples score higher than random ones on average. Accuracy
    is measured on a held-out quarter of each side.
    """
    Xc = np.atleast_2d(np.asarray(concept_features, dtype=np.float64))
    Xr = np.atleast_2d(np.asarray(random_features, dtype=np.float64))
    if len(Xc) < 2 or len(Xr) < 2:
        raise ValueError("need at least 2 examples per side")
    X = np.vstack([Xc, Xr])
    y = np.concatenate([np.ones(len(Xc)), np.zeros(len(Xr))])
    if np.allclose(X, X[0], atol=1e-12):
        raise InseparableError(
            f"concept {concept_id or '<anon>'}: all features identical"
        )

    train_idx, test_idx = _holdout_split(len(Xc), len(Xr), seed)
    clf = LogisticRegression(
        C=_SKLEARN_C, solver="lbfgs", tol=1e-10, max_iter=10_000
    )
    clf.fit(X[train_idx], y[train_idx])
    accuracy = float(clf.score(X[test_idx], y[test_idx]))

    w = clf.coef_.ravel()
    norm = np.linalg.norm(w)
    if norm < 1e-15:
        raise InseparableError(
            f"concept {concept_id or '<anon>'}: separator collapsed to zero"
        )
    v = w / norm
    if (Xc @ v).mean() < (Xr @ v).mean():
        v = -v
    return CAV(concept_id=concept_id, v=v, separator_accuracy=accuracy)


def directional_derivative(
    head: ClassifierHead, a: ActivationTensor, c: str, cav: CAV
) -> float:
    """Sensitivity of the class-c logit along the CAV, in GAP feature space."""
    if head.m != a.m or head.m != cav.v.shape[0]:
        raise ValueError("head, activation and CAV dimensions must agree")
    return float(grad_logit_wrt_pooled(head, c) @ cav.v)


def fit_concept_cavs(
    concepts: list[Xconcept], seed: int = 0
) -> dict[str, CAV]:
    """Fit one CAV per xconcept against features pooled from the others."""
    if len(concepts) < 2:
        raise ValueError("need at least 2 concepts to form a random side")
    rng = np.random.default_rng(seed)
    cavs: dict[str, CAV] = {}
    for concept in sorted(concepts, key=lambda c: c.concept_id):
        own = np.stack([sp.feature for sp in concept.members])
        pool = [
            sp.feature
            for other in concepts
            if other.concept_id != concept.concept_id
            for sp in other.members
        ]
        pool_arr = np.stack(pool)
        take = len(own)
        replace = take > len(pool_arr)
        idx = rng.choice(len(pool_arr), size=take, replace=replace)
        cavs[concept.concept_id] = fit_cav(
            own, pool_arr[idx], seed=seed, concept_id=concept.concept_id
        )
    return cavs


def class_specific_xconcepts(
    xconcepts: list[Xconcept],
    cavs: dict[str, CAV],
    dataset: LabeledActivationSet,
    head: ClassifierHead,
    c: str,
    n: int = 5,
) -> ClassConceptSet:
    """Rank xconcepts for a class by fraction-positive sensitivity; keep top n.

    Pruning the tail is what discards concepts incoherent for the class
    pair (a wheel never helps separate zebras from cats).
    """
    if n > len(xconcepts):
        raise ValueError(f"n={n} exceeds number of concepts ({len(xconcepts)})")
    items = dataset.items_for_class(c)
    if not items:
        raise ValueError(f"class {c!r} has no images")
    entries = []
    for concept in xconcepts:
        cav = cavs[concept.concept_id]
        sens = [directional_derivative(head, it.activation, c, cav) for it in items]
        sens = np.asarray(sens)
        entries.append(
            ClassConceptEntry(
                concept_id=concept.concept_id,
                tcav_score=float(np.mean(sens > 0)),
                mean_sensitivity=float(sens.mean()),
            )
        )
    entries.sort(
        key=lambda e: (-e.tcav_score, -e.mean_sensitivity, e.concept_id)
    )
    selected = [e.concept_id for e in entries[:n]]
    return ClassConceptSet(
        class_label=c,
        entries=entries,
        selected=selected,
        selected_cavs=[cavs[cid] for cid in selected],
    )


def save_cavs(cavs: dict[str, CAV], path: str | Path) -> None:
    doc = {
        "cavs": [
            {
                "concept_id": cid,
                "v": cav.v.tolist(),
                "accuracy": cav.separator_accuracy,
            }
            for cid, cav in sorted(cavs.items())
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_cavs(path: str | Path) -> dict[str, CAV]:
    doc = json.loads(Path(path).read_text())
    return {
        rec["concept_id"]: CAV(
            concept_id=rec["concept_id"],
            v=np.asarray(rec["v"], dtype=np.float64),
            separator_accuracy=float(rec["accuracy"]),
        )
        for rec in doc["cavs"]
    }
