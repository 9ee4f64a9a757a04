"""Model backend: activation tensors, a linear classifier head, and file IO.

Every downstream stage works on precomputed last-layer activations plus a
GAP + linear head, so nothing here (or above) ever needs to differentiate
through a full backbone. Real CNN exporters plug in by writing the same
activation file format ("FLX1") and head sidecar that this module reads:
the whole contract is three functions — activations per image id, logits
from activations, and the logit gradient with respect to activations.

All arrays are float64 in memory and float32 little-endian on disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FLXACT01"


class ActivationFormatError(Exception):
    """Raised on malformed activation files; ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class ShapeError(ValueError):
    pass


class UnknownClassError(KeyError):
    pass


@dataclass(frozen=True)
class ActivationTensor:
    """Last-conv-layer activations of one image: m maps of u x v reals."""

    values: np.ndarray  # shape (m, u, v), float64

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"expected 3-d (m,u,v) array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("activation values must be finite")
        object.__setattr__(self, "values", arr)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def u(self) -> int:
        return self.values.shape[1]

    @property
    def v(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ClassifierHead:
    """Linear head over globally average pooled activations."""

    weights: np.ndarray  # (C, m)
    bias: np.ndarray  # (C,)
    class_labels: tuple[str, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        labels = tuple(self.class_labels)
        if w.ndim != 2:
            raise ShapeError(f"weights must be 2-d (C,m), got shape {w.shape}")
        if len(labels) != w.shape[0]:
            raise ShapeError(
                f"{len(labels)} labels but {w.shape[0]} weight rows"
            )
        if len(labels) < 2:
            raise ShapeError("need at least 2 classes")
        if len(set(labels)) != len(labels):
            raise ValueError("class labels must be distinct")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "class_labels", labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_labels)

    @property
    def m(self) -> int:
        return self.weights.shape[1]

    def class_index(self, label: str) -> int:
        try:
            return self.class_labels.index(label)
        except ValueError:
            raise UnknownClassError(label) from None


@dataclass
class LabeledItem:
    image_id: str
    activation: ActivationTensor
    true_class: str


@dataclass
class LabeledActivationSet:
    """Uniformly shaped activation tensors with true-class labels."""

    items: list[LabeledItem]
    class_labels: tuple[str, ...]
    class_index: dict[str, list[str]] = field(init=False)

    def __post_init__(self):
        self.class_labels = tuple(self.class_labels)
        shapes = {it.activation.values.shape for it in self.items}
        if len(shapes) > 1:
            raise ShapeError(f"inconsistent activation shapes: {sorted(shapes)}")
        index: dict[str, list[str]] = {c: [] for c in self.class_labels}
        for it in self.items:
            if it.true_class not in index:
                raise UnknownClassError(it.true_class)
            index[it.true_class].append(it.image_id)
        self.class_index = index

    def __len__(self) -> int:
        return len(self.items)

    def get(self, image_id: str) -> LabeledItem:
        for it in self.items:
            if it.image_id == image_id:
                return it
        raise KeyError(image_id)

    def items_for_class(self, label: str) -> list[LabeledItem]:
        ids = set(self.class_index[label])
        return [it for it in self.items if it.image_id in ids]


def global_average_pool(a: ActivationTensor) -> np.ndarray:
    """Mean of each feature map, as an m-vector."""
    return a.values.mean(axis=(1, 2))


def logits(head: ClassifierHead, a: ActivationTensor) -> np.ndarray:
    """Class scores: weights @ GAP(a) + bias."""
    if head.m != a.m:
        raise ShapeError(f"head expects m={head.m}, activation has m={a.m}")
    return head.weights @ global_average_pool(a) + head.bias


def logits_from_pooled(head: ClassifierHead, pooled: np.ndarray) -> np.ndarray:
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape != (head.m,):
        raise ShapeError(f"pooled vector shape {pooled.shape} != ({head.m},)")
    return head.weights @ pooled + head.bias


def predict(head: ClassifierHead, a: ActivationTensor) -> str:
    """Predicted class label (argmax of logits)."""
    return head.class_labels[int(np.argmax(logits(head, a)))]


def grad_logit_wrt_activations(
    head: ClassifierHead, a: ActivationTensor, c: str
) -> np.ndarray:
    """Gradient of the class-c logit with respect to every activation.

    For the GAP + linear head this is analytic: d y_c / d a[k,i,j] =
    weights[c,k] / (u*v), independent of the activation values.
    """
    ci = head.class_index(c)
    if head.m != a.m:
        raise ShapeError(f"head expects m={head.m}, activation has m={a.m}")
    g = np.empty_like(a.values)
    g[:] = (head.weights[ci] / (a.u * a.v))[:, None, None]
    return g


def grad_logit_wrt_pooled(head: ClassifierHead, c: str) -> np.ndarray:
    """Gradient of the class-c logit with respect to the GAP feature vector."""
    return head.weights[head.class_index(c)].copy()


# ---------------------------------------------------------------------------
# FLX1 activation files
#
# layout: 8-byte magic "FLXACT01"
#         uint32 LE manifest length, then UTF-8 JSON manifest
#           {"classes": [...], "m": m, "u": u, "v": v,
#            "items": [{"id": ..., "class": ..., "offset": ...}]}
#         contiguous float32 LE payloads, row-major [map][row][col];
#         offsets are bytes from the start of the payload section.
# ---------------------------------------------------------------------------


def save_activation_set(dataset: LabeledActivationSet, path: str | Path) -> None:
    path = Path(path)
    if dataset.items:
        m, u, v = dataset.items[0].activation.values.shape
    else:
        m = u = v = 0
    item_entries = []
    payloads = []
    offset = 0
    nbytes = m * u * v * 4
    for it in dataset.items:
        item_entries.append(
            {"id": it.image_id, "class": it.true_class, "offset": offset}
        )
        payloads.append(
            np.ascontiguousarray(it.activation.values, dtype="<f4").tobytes()
        )
        offset += nbytes
    manifest = {
        "classes": list(dataset.class_labels),
        "m": m,
        "u": u,
        "v": v,
        "items": item_entries,
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_activation_set(path: str | Path) -> LabeledActivationSet:
    """Read an FLX1 activation file.

    Error codes: "bad-magic" and "bad-manifest" for malformed headers,
    "truncated-payload" for short payload sections, "unknown-label" for
    items whose class is missing from the manifest class list.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise ActivationFormatError("bad-magic", f"{path} is not an FLX1 file")
    (mlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    mstart = len(MAGIC) + 4
    if mstart + mlen > len(raw):
        raise ActivationFormatError("bad-manifest", "manifest extends past EOF")
    try:
        manifest = json.loads(raw[mstart : mstart + mlen].decode("utf-8"))
        classes = list(manifest["classes"])
        m, u, v = int(manifest["m"]), int(manifest["u"]), int(manifest["v"])
        entries = manifest["items"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ActivationFormatError("bad-manifest", str(exc)) from exc
    payload = raw[mstart + mlen :]
    nbytes = m * u * v * 4
    items = []
    for entry in entries:
        label = entry["class"]
        if label not in classes:
            raise ActivationFormatError(
                "unknown-label", f"item {entry['id']!r} has class {label!r}"
            )
        off = int(entry["offset"])
        if off + nbytes > len(payload):
            raise ActivationFormatError(
                "truncated-payload", f"item {entry['id']!r} extends past EOF"
            )
        arr = np.frombuffer(payload[off : off + nbytes], dtype="<f4").reshape(m, u, v)
        items.append(
            LabeledItem(
                image_id=entry["id"],
                activation=ActivationTensor(arr.astype(np.float64)),
                true_class=label,
            )
        )
    return LabeledActivationSet(items=items, class_labels=tuple(classes))


def save_head(head: ClassifierHead, path: str | Path) -> None:
    doc = {
        "weights": head.weights.tolist(),
        "bias": head.bias.tolist(),
        "classes": list(head.class_labels),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_head(path: str | Path) -> ClassifierHead:
    doc = json.loads(Path(path).read_text())
    return ClassifierHead(
        weights=np.asarray(doc["weights"], dtype=np.float64),
        bias=np.asarray(doc["bias"], dtype=np.float64),
        class_labels=tuple(doc["classes"]),
    )
