"""Mining explainable concepts from a labeled activation set.

Pipeline: per image and class, rank feature maps by their pooled-gradient
importance weights, keep the top p as superpixels, then K-means the
superpixel feature vectors (with distance-based outlier trimming and one
refit) and pick K by mean silhouette score.

A superpixel's clustering feature is the GAP vector of its source image
restricted to the map's top-quartile spatial locations, which ties the
vector to the localized region the map fires on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_samples

from .backend import (
    ActivationTensor,
    ClassifierHead,
    LabeledActivationSet,
    grad_logit_wrt_activations,
)


class DegenerateClusteringError(ValueError):
    """All points coincide; silhouette is undefined."""


@dataclass
class Superpixel:
    image_id: str
    map_index: int
    class_label: str
    alpha: float
    feature: np.ndarray  # m-vector used for clustering
    localization: np.ndarray  # (u, v) boolean mask for display


@dataclass
class Xconcept:
    concept_id: str
    members: list[Superpixel]
    centroid: np.ndarray
    example_image_ids: list[str]


def importance_weights(
    a: ActivationTensor, c: str, head: ClassifierHead
) -> np.ndarray:
    """Per-map importance: the class-c logit gradient pooled over space."""
    grad = grad_logit_wrt_activations(head, a, c)
    return grad.sum(axis=(1, 2)) / (a.u * a.v)


def localization_mask(a: ActivationTensor, map_index: int) -> np.ndarray:
    """Top-quartile spatial locations of one feature map."""
    fmap = a.values[map_index]
    return fmap >= np.quantile(fmap, 0.75)


def superpixel_feature(a: ActivationTensor, map_index: int) -> np.ndarray:
    """GAP vector of the image restricted to the map's top-quartile mask."""
    mask = localization_mask(a, map_index)
    return a.values[:, mask].mean(axis=1)


def select_top_superpixels(
    dataset: LabeledActivationSet, head: ClassifierHead, p: int
) -> list[Superpixel]:
    """Top-p maps by signed importance, per image and per class.

    Yields p * C superpixels per image; ties go to the lower map index.
    """
    m = head.m
    if not 1 <= p <= m:
        raise ValueError(f"p must be in [1, {m}], got {p}")
    out: list[Superpixel] = []
    for item in dataset.items:
        a = item.activation
        feats = {}  # map_index -> feature, shared across classes
        for c in head.class_labels:
            alpha = importance_weights(a, c, head)
            order = np.lexsort((np.arange(m), -alpha))
            for k in order[:p]:
                k = int(k)
                if k not in feats:
                    feats[k] = superpixel_feature(a, k)
                out.append(
                    Superpixel(
                        image_id=item.image_id,
                        map_index=k,
                        class_label=c,
                        alpha=float(alpha[k]),
                        feature=feats[k],
                        localization=localization_mask(a, k),
                    )
                )
    return out


def _trim_outliers(
    X: np.ndarray, labels: np.ndarray, centers: np.ndarray, fraction: float
) -> np.ndarray:
    """Indices kept after dropping the `fraction` farthest-from-centroid points."""
    n = X.shape[0]
    n_drop = int(fraction * n)
    if n_drop == 0:
        return np.arange(n)
    dists = np.linalg.norm(X - centers[labels], axis=1)
    order = np.lexsort((np.arange(n), dists))  # ascending distance, stable
    return np.sort(order[: n - n_drop])


def cluster_xconcepts(
    superpixels: list[Superpixel],
    k_min: int,
    k_max: int,
    outlier_fraction: float = 0.05,
    seed: int = 0,
) -> list[Xconcept]:
    """Group superpixels into xconcepts; K chosen by mean silhouette score.

    For each K in [k_min, k_max]: fit K-means (k-means++ seeding, fixed
    seed), drop the outlier_fraction of points farthest from their
    centroid, refit once on the kept points, and score. The best-scoring
    K wins; ties go to the smaller K. Retained points partition exactly
    into the returned concepts.
    """
    if not superpixels:
        raise ValueError("no superpixels to cluster")
    if not (2 <= k_min <= k_max):
        raise ValueError(f"invalid k range [{k_min}, {k_max}]")
    if k_max >= len(superpixels):
        raise ValueError(
            f"k_max={k_max} must be < number of superpixels ({len(superpixels)})"
        )
    if not 0 <= outlier_fraction < 0.5:
        raise ValueError(f"outlier_fraction must be in [0, 0.5), got {outlier_fraction}")

    X = np.stack([sp.feature for sp in superpixels])
    if np.allclose(X, X[0], atol=1e-12):
        raise DegenerateClusteringError(
            "degenerate clustering: all superpixel features identical"
        )

    best = None  # (score, K, kept_idx, labels)
    for k in range(k_min, k_max + 1):
        km = KMeans(
            n_clusters=k, init="k-means++", n_init=10,
            algorithm="lloyd", random_state=seed,
        ).fit(X)
        kept = _trim_outliers(X, km.labels_, km.cluster_centers_, outlier_fraction)
        if len(kept) <= k:
            continue
        Xk = X[kept]
        km2 = KMeans(
            n_clusters=k, init="k-means++", n_init=10,
            algorithm="lloyd", random_state=seed,
        ).fit(Xk)
        labels = km2.labels_
        if len(np.unique(labels)) < 2:
            continue
        # sklearn assigns singleton clusters a silhouette of 0, matching
        # the convention used here
        score = float(silhouette_samples(Xk, labels).mean())
        if best is None or score > best[0] + 1e-12:
            best = (score, k, kept, labels)
    if best is None:
        raise ValueError("no feasible K in the requested range")

    _, k, kept, labels = best
    concepts = []
    width = max(3, len(str(k)))
    for ci in range(k):
        members = [superpixels[kept[i]] for i in np.flatnonzero(labels == ci)]
        if not members:
            continue
        centroid = np.mean([sp.feature for sp in members], axis=0)
        seen: dict[str, None] = {}
        for sp in members:
            seen.setdefault(sp.image_id, None)
        concepts.append(
            Xconcept(
                concept_id=f"xc_{ci:0{width}d}",
                members=members,
                centroid=centroid,
                example_image_ids=list(seen),
            )
        )
    return concepts


def filter_xconcepts(
    concepts: list[Xconcept],
    allow: list[str] | None = None,
    deny: list[str] | None = None,
) -> list[Xconcept]:
    """Optional allow/deny filtering by concept id (manual noise removal)."""
    out = concepts
    if allow is not None:
        allowed = set(allow)
        out = [c for c in out if c.concept_id in allowed]
    if deny is not None:
        denied = set(deny)
        out = [c for c in out if c.concept_id not in denied]
    return out


def save_xconcepts(concepts: list[Xconcept], path: str | Path) -> None:
    doc = {
        "concepts": [
            {
                "id": c.concept_id,
                "centroid": c.centroid.tolist(),
                "members": [
                    {
                        "image_id": sp.image_id,
                        "map": sp.map_index,
                        "class": sp.class_label,
                        "alpha": sp.alpha,
                    }
                    for sp in c.members
                ],
                "examples": c.example_image_ids,
            }
            for c in concepts
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_xconcepts(
    path: str | Path, dataset: LabeledActivationSet
) -> list[Xconcept]:
    """Rebuild xconcepts from a store; features are recomputed from the dataset."""
    doc = json.loads(Path(path).read_text())
    concepts = []
    for entry in doc["concepts"]:
        members = []
        for mrec in entry["members"]:
            item = dataset.get(mrec["image_id"])
            members.append(
                Superpixel(
                    image_id=mrec["image_id"],
                    map_index=int(mrec["map"]),
                    class_label=mrec["class"],
                    alpha=float(mrec["alpha"]),
                    feature=superpixel_feature(item.activation, int(mrec["map"])),
                    localization=localization_mask(item.activation, int(mrec["map"])),
                )
            )
        centroid = np.asarray(entry["centroid"], dtype=np.float64)
        concepts.append(
            Xconcept(
                concept_id=entry["id"],
                members=members,
                centroid=centroid,
                example_image_ids=list(entry["examples"]),
            )
        )
    return concepts
