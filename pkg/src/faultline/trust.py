"""Parse-graph data model and quantitative trust metrics.

Three "minds" are parse graphs over detected objects/parts: the machine's
own interpretation, and the machine as inferred by the user. Justified
positive/negative trust and reliance are overlap fractions between the
user's believed-correct/believed-failed subgraphs and the machine's actual
outcome subgraphs, summed over the three inference processes that tagged
each node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

PROCESSES = ("alpha", "beta", "gamma")
POSITIVE, NEGATIVE = "+", "-"


@dataclass(frozen=True)
class Node:
    node_id: str
    kind: str  # "object" | "part"
    attributes: tuple[tuple[str, str], ...] = ()
    process: str = "alpha"  # which inference process detected it
    polarity: str | None = None  # "+" believed/actually correct, "-" failed

    def __post_init__(self):
        if self.process not in PROCESSES:
            raise ValueError(f"unknown process tag {self.process!r}")
        if self.polarity not in (None, POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be '+', '-' or None")


Edge = tuple[str, str, str]  # (from_id, to_id, relation)


@dataclass
class ParseGraph:
    nodes: dict[str, Node] = field(default_factory=dict)
    edges: set[Edge] = field(default_factory=set)

    def __post_init__(self):
        for a, b, _ in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"edge ({a}, {b}) references a missing node")

    @classmethod
    def build(cls, nodes: list[Node], edges: list[Edge]) -> "ParseGraph":
        by_id: dict[str, Node] = {}
        for n in nodes:
            if n.node_id in by_id:
                raise ValueError(f"duplicate node id {n.node_id!r}")
            by_id[n.node_id] = n
        return cls(nodes=by_id, edges=set(edges))

    def size(self) -> int:
        """Node count + edge count."""
        return len(self.nodes) + len(self.edges)

    def _induced(self, keep: dict[str, Node]) -> "ParseGraph":
        edges = {e for e in self.edges if e[0] in keep and e[1] in keep}
        return ParseGraph(nodes=keep, edges=edges)

    def restrict_process(self, z: str) -> "ParseGraph":
        return self._induced(
            {i: n for i, n in self.nodes.items() if n.process == z}
        )

    def restrict_polarity(self, polarity: str) -> "ParseGraph":
        return self._induced(
            {i: n for i, n in self.nodes.items() if n.polarity == polarity}
        )

    def processes_present(self) -> set[str]:
        return {n.process for n in self.nodes.values()}


def graph_intersection(g1: ParseGraph, g2: ParseGraph) -> ParseGraph:
    """Nodes matching on (id, kind) in both graphs; edges present in both."""
    nodes = {
        i: n
        for i, n in g1.nodes.items()
        if i in g2.nodes and g2.nodes[i].kind == n.kind
    }
    edges = {
        e for e in g1.edges & g2.edges if e[0] in nodes and e[1] in nodes
    }
    return ParseGraph(nodes=nodes, edges=edges)


@dataclass
class AnnotatedMind:
    """One game's record: the user's belief graph and the machine's truth."""

    index: int
    pg_minu: ParseGraph  # nodes marked believed-correct (+) / believed-failed (-)
    pg_m: ParseGraph  # nodes marked actually-correct (+) / actually-failed (-)

    def __post_init__(self):
        for g in (self.pg_minu, self.pg_m):
            for n in g.nodes.values():
                if n.polarity not in (POSITIVE, NEGATIVE):
                    raise ValueError(
                        f"node {n.node_id!r} must carry exactly one polarity mark"
                    )


def _polarity_trust(games: list[AnnotatedMind], polarity: str,
                    normalize: bool) -> tuple[float, list[float]]:
    if not games:
        raise ValueError("no games to score")
    per_game = []
    for game in games:
        truth = game.pg_m.restrict_polarity(polarity)
        denom = truth.size()
        total = 0.0
        if denom > 0:  # empty-denominator terms contribute 0
            for z in PROCESSES:
                believed = (
                    game.pg_minu.restrict_process(z).restrict_polarity(polarity)
                )
                total += graph_intersection(believed, truth).size() / denom
            if normalize:
                populated = len(truth.processes_present())
                if populated:
                    total /= populated
        per_game.append(total)
    return sum(per_game) / len(games), per_game


def compute_jpt(games: list[AnnotatedMind], normalize: bool = False) -> float:
    """Justified positive trust: overlap of believed-correct with actually-correct."""
    return _polarity_trust(games, POSITIVE, normalize)[0]


def compute_jnt(games: list[AnnotatedMind], normalize: bool = False) -> float:
    """Justified negative trust: overlap of believed-failed with actually-failed."""
    return _polarity_trust(games, NEGATIVE, normalize)[0]


def compute_reliance(games: list[AnnotatedMind], normalize: bool = False) -> float:
    """Overlap of per-process belief with per-process truth, against full truth size."""
    if not games:
        raise ValueError("no games to score")
    totals = []
    for game in games:
        denom = game.pg_m.size()
        total = 0.0
        if denom > 0:
            for z in PROCESSES:
                believed = game.pg_minu.restrict_process(z)
                truth = game.pg_m.restrict_process(z)
                total += graph_intersection(believed, truth).size() / denom
            if normalize:
                populated = len(game.pg_m.processes_present())
                if populated:
                    total /= populated
        totals.append(total)
    return sum(totals) / len(games)


def classification_trust_report(
    model_verdicts: dict[str, bool],
    user_predictions: dict[str, bool],
) -> "TrustReport":
    """Classification-level trust: JPT is the fraction of correctly
    classified images the user expected to succeed, JNT the fraction of
    misclassified ones the user expected to fail; their size-weighted sum
    is the overall justified-trust score (= prediction accuracy)."""
    if set(model_verdicts) != set(user_predictions):
        raise ValueError("verdicts and predictions must cover the same images")
    if not model_verdicts:
        raise ValueError("empty verdict set")
    correct = [i for i, v in sorted(model_verdicts.items()) if v]
    wrong = [i for i, v in sorted(model_verdicts.items()) if not v]
    jpt = (
        sum(1 for i in correct if user_predictions[i]) / len(correct)
        if correct else 0.0
    )
    jnt = (
        sum(1 for i in wrong if not user_predictions[i]) / len(wrong)
        if wrong else 0.0
    )
    jt = justified_trust_classification(model_verdicts, user_predictions)
    per_game = [
        {
            "image": i,
            "model_correct": model_verdicts[i],
            "predicted_success": user_predictions[i],
        }
        for i in sorted(model_verdicts)
    ]
    return TrustReport(
        jpt=jpt, jnt=jnt, reliance=jt, per_game=per_game, jt_classification=jt
    )


def justified_trust_classification(
    model_verdicts: dict[str, bool],  # image -> model classified correctly?
    user_predictions: dict[str, bool],  # image -> user expects success?
) -> float:
    """Accuracy of the user's success/failure predictions, in [0, 1].

    The two per-set percentages (predicted successes among correctly
    classified images, predicted failures among misclassified ones) are
    weighted by set size, which makes the sum a plain prediction accuracy.
    """
    if set(model_verdicts) != set(user_predictions):
        raise ValueError("verdicts and predictions must cover the same images")
    if not model_verdicts:
        raise ValueError("empty verdict set")
    total = len(model_verdicts)
    hits = sum(
        1
        for img, correct in model_verdicts.items()
        if user_predictions[img] == correct
    )
    return hits / total


@dataclass
class TrustReport:
    jpt: float
    jnt: float
    reliance: float
    per_game: list[dict]
    jt_classification: float

    def to_json(self) -> dict:
        return {
            "jpt": self.jpt,
            "jnt": self.jnt,
            "reliance": self.reliance,
            "per_game": self.per_game,
            "jt_classification": self.jt_classification,
        }


def build_trust_report(
    games: list[AnnotatedMind],
    model_verdicts: dict[str, bool],
    user_predictions: dict[str, bool],
    normalize: bool = False,
) -> TrustReport:
    jpt, jpt_games = _polarity_trust(games, POSITIVE, normalize)
    jnt, jnt_games = _polarity_trust(games, NEGATIVE, normalize)
    rc = compute_reliance(games, normalize)
    per_game = [
        {"game": g.index, "jpt": p, "jnt": n}
        for g, p, n in zip(games, jpt_games, jnt_games)
    ]
    return TrustReport(
        jpt=jpt,
        jnt=jnt,
        reliance=rc,
        per_game=per_game,
        jt_classification=justified_trust_classification(
            model_verdicts, user_predictions
        ),
    )


# --- JSON parse-graph files -------------------------------------------------


def graph_to_json(g: ParseGraph) -> dict:
    return {
        "nodes": [
            {
                "id": n.node_id,
                "kind": n.kind,
                "attrs": dict(n.attributes),
                "z": n.process,
                "polarity": n.polarity,
            }
            for n in g.nodes.values()
        ],
        "edges": [{"from": a, "to": b, "rel": r} for a, b, r in sorted(g.edges)],
    }


def graph_from_json(doc: dict) -> ParseGraph:
    nodes = [
        Node(
            node_id=rec["id"],
            kind=rec["kind"],
            attributes=tuple(sorted(rec.get("attrs", {}).items())),
            process=rec.get("z", "alpha"),
            polarity=rec.get("polarity"),
        )
        for rec in doc["nodes"]
    ]
    edges = [(e["from"], e["to"], e["rel"]) for e in doc["edges"]]
    return ParseGraph.build(nodes, edges)


def load_games(path: str | Path) -> list[AnnotatedMind]:
    doc = json.loads(Path(path).read_text())
    return [
        AnnotatedMind(
            index=rec["game"],
            pg_minu=graph_from_json(rec["pg_minu"]),
            pg_m=graph_from_json(rec["pg_m"]),
        )
        for rec in doc["games"]
    ]
