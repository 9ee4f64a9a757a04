"""Bundled six-class synthetic fixture.

A hand-engineered animal classifier over twelve named concept maps, built
so three alternate-class queries have known critical concepts:

  * Goat -> Sheep needs wool added and beard + horns removed,
  * Dog -> Thylacine needs only stripes added,
  * Toad -> Frog needs only bumps removed.

Each concept owns one feature map; the shipped CAV store carries the exact
axis directions, so the solver's behaviour on these queries is a matter of
arithmetic, not of fit quality. Image index 0 of each class is noise-free
(the query targets); the rest carry small level noise, and index 7 of
Sheep/Toad is a confusable the head misclassifies (for trust reporting).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backend import (
    ActivationTensor,
    ClassifierHead,
    LabeledActivationSet,
    LabeledItem,
    save_activation_set,
    save_head,
)

CONCEPTS = (
    "wool", "beard", "horns", "stripes", "bumps", "fur",
    "smooth_skin", "snout", "hooves", "floppy_ears", "body", "grass",
)
CLASSES = ("Dog", "Thylacine", "Frog", "Toad", "Goat", "Sheep")
U, V = 4, 3  # spatial grid; one cell per concept map

# per-class concept levels (GAP value of each map)
PROFILES = {
    "Dog": {"stripes": 0.48, "fur": 0.8, "snout": 1.0, "floppy_ears": 0.8,
            "body": 1.0, "grass": 0.5},
    "Thylacine": {"stripes": 1.3, "fur": 0.5, "snout": 0.9, "body": 1.0,
                  "grass": 0.4},
    "Frog": {"smooth_skin": 1.1, "body": 1.0, "grass": 0.6},
    "Toad": {"bumps": 1.2, "smooth_skin": 0.6, "body": 1.0, "grass": 0.4},
    "Goat": {"wool": 0.3, "beard": 1.2, "horns": 1.0, "fur": 0.4,
             "snout": 0.2, "hooves": 0.8, "body": 1.0, "grass": 0.5},
    "Sheep": {"wool": 1.3, "fur": 0.9, "snout": 0.2, "hooves": 0.7,
              "body": 1.0, "grass": 0.5},
}

WEIGHTS = {
    "Dog": {"fur": 1.5, "snout": 3.2, "floppy_ears": 1.8, "body": 0.8,
            "grass": 0.2},
    "Thylacine": {"stripes": 5.0, "fur": 0.2, "snout": 1.5, "body": 0.8,
                  "grass": 0.2},
    "Frog": {"smooth_skin": 4.0, "body": 0.8, "grass": 0.2},
    "Toad": {"bumps": 4.5, "smooth_skin": 0.5, "body": 0.8, "grass": 0.2},
    "Goat": {"beard": 4.0, "horns": 3.5, "fur": 0.3, "snout": 0.2,
             "hooves": 1.0, "body": 0.8, "grass": 0.2},
    "Sheep": {"wool": 5.0, "fur": 1.0, "snout": 0.2, "hooves": 0.7,
              "body": 0.8, "grass": 0.2},
}
# lifts the goat logit so removing beard+horns alone cannot flip to Sheep
BIASES = {"Goat": 2.24}

# confusable images (index 7): true class keeps its label, activations
# follow another class's profile, so the head gets them wrong
CONFUSABLES = {"Sheep": "Goat", "Toad": "Frog"}

LEVEL_NOISE = 0.02


def _levels_for(profile: dict[str, float]) -> np.ndarray:
    levels = np.zeros(len(CONCEPTS))
    for name, value in profile.items():
        levels[CONCEPTS.index(name)] = value
    return levels


def _tensor_from_levels(levels: np.ndarray) -> ActivationTensor:
    """One map per concept: flat at its level, 1.44x hot in its own cell,
    plus a zero-mean spatial ramp so top-quartile masks are unambiguous.
    GAP of each map equals its level exactly."""
    cells = U * V
    ramp = (np.arange(cells, dtype=np.float64).reshape(U, V) - (cells - 1) / 2)
    values = np.empty((len(CONCEPTS), U, V))
    for k, level in enumerate(levels):
        pattern = np.ones(cells)
        pattern[k] = 1.5
        pattern = pattern / pattern.mean()
        values[k] = level * pattern.reshape(U, V) + 1e-9 * ramp
    return ActivationTensor(values)


def build_head() -> ClassifierHead:
    weights = np.zeros((len(CLASSES), len(CONCEPTS)))
    bias = np.zeros(len(CLASSES))
    for ci, cls in enumerate(CLASSES):
        for name, w in WEIGHTS[cls].items():
            weights[ci, CONCEPTS.index(name)] = w
        bias[ci] = BIASES.get(cls, 0.0)
    return ClassifierHead(weights=weights, bias=bias, class_labels=CLASSES)


def build_dataset(images_per_class: int = 8, seed: int = 7) -> LabeledActivationSet:
    rng = np.random.default_rng(seed)
    items = []
    for cls in CLASSES:
        base = _levels_for(PROFILES[cls])
        for i in range(images_per_class):
            if i == 7 and cls in CONFUSABLES:
                levels = _levels_for(PROFILES[CONFUSABLES[cls]])
            elif i == 0:
                levels = base.copy()  # noise-free query target
            else:
                noise = 1.0 + LEVEL_NOISE * rng.standard_normal(len(CONCEPTS))
                levels = np.where(base > 0, base * noise, 0.0)
            items.append(
                LabeledItem(
                    image_id=f"{cls.lower()}_{i:03d}",
                    activation=_tensor_from_levels(levels),
                    true_class=cls,
                )
            )
    return LabeledActivationSet(items=items, class_labels=CLASSES)


def build_fixture(out_dir: str | Path, images_per_class: int = 8,
                  seed: int = 7) -> Path:
    """Write activations, head, concept/CAV stores and a config file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    head = build_head()
    dataset = build_dataset(images_per_class, seed)
    save_activation_set(dataset, out / "activations.flx")
    save_head(head, out / "head.json")

    uv = U * V
    concepts_doc = {"concepts": []}
    for k, name in enumerate(CONCEPTS):
        members = []
        examples = []
        for item in dataset.items:
            level = item.activation.values[k].mean()
            if level >= 0.15:
                members.append(
                    {
                        "image_id": item.image_id,
                        "map": k,
                        "class": item.true_class,
                        "alpha": float(
                            head.weights[head.class_index(item.true_class), k] / uv
                        ),
                    }
                )
                if len(examples) < 6:
                    examples.append(item.image_id)
        concepts_doc["concepts"].append(
            {
                "id": name,
                "centroid": np.eye(len(CONCEPTS))[k].tolist(),
                "members": members,
                "examples": examples,
            }
        )
    (out / "xconcepts.json").write_text(json.dumps(concepts_doc, indent=2))

    cavs_doc = {
        "cavs": [
            {
                "concept_id": name,
                "v": np.eye(len(CONCEPTS))[k].tolist(),
                "accuracy": 1.0,
            }
            for k, name in enumerate(CONCEPTS)
        ]
    }
    (out / "cavs.json").write_text(json.dumps(cavs_doc, indent=2))

    config = {
        "activations": "activations.flx",
        "head": "head.json",
        "xconcepts": "xconcepts.json",
        "cavs": "cavs.json",
        "miner": {"p": 2, "k_min": 2, "k_max": 8, "outlier_fraction": 0.05},
        "cav": {"n_per_class": 3},
        "solver": {
            "alpha": 1.0, "beta": 0.1, "lambda": 0.1, "tau": 0.5,
            "max_iters": 500, "step_size": 1.0, "rounding_threshold": 0.5,
        },
        "policy": {"max_turns": 5},
        "service": {"port": 8000, "journal_dir": "sessions",
                    "checkpoint": "policy.flxpol"},
        "seed": seed,
    }
    (out / "config.json").write_text(json.dumps(config, indent=2))
    return out / "config.json"
