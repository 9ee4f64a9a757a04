"""Pipeline configuration: file paths plus per-stage parameters."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .optimizer import FaultLineHyperparams
from .policy import LearningConfig

DATA_DIR_ENV = "FAULTLINE_DATA_DIR"


@dataclass
class MinerParams:
    p: int = 2
    k_min: int = 2
    k_max: int = 8
    outlier_fraction: float = 0.05
    allow: list[str] | None = None
    deny: list[str] | None = None


@dataclass
class PipelineConfig:
    data_dir: Path
    activations: Path
    head: Path
    xconcepts: Path
    cavs: Path
    miner: MinerParams = field(default_factory=MinerParams)
    n_per_class: int = 3
    solver: FaultLineHyperparams = field(default_factory=FaultLineHyperparams)
    policy: LearningConfig = field(default_factory=LearningConfig)
    seed: int = 0
    port: int = 8000
    journal_dir: Path = Path("sessions")
    checkpoint: Path = Path("policy.flxpol")

    def validate_inputs(self, require: tuple[str, ...]) -> None:
        for name in require:
            p: Path = getattr(self, name)
            if not p.exists():
                raise FileNotFoundError(f"{name} file missing: {p}")


def load_config(path: str | Path, seed_override: int | None = None) -> PipelineConfig:
    """Read a JSON config; relative paths resolve against data_dir.

    data_dir itself defaults to $FAULTLINE_DATA_DIR, then to the config
    file's own directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    if "data_dir" in doc:
        base = Path(doc["data_dir"])
        if not base.is_absolute():
            base = (path.parent / base).resolve()
    elif os.environ.get(DATA_DIR_ENV):
        base = Path(os.environ[DATA_DIR_ENV]).resolve()
    else:
        base = path.parent.resolve()

    def rel(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    miner_doc = doc.get("miner", {})
    solver_doc = doc.get("solver", {})
    policy_doc = doc.get("policy", {})
    service_doc = doc.get("service", {})
    return PipelineConfig(
        data_dir=base,
        activations=rel(doc.get("activations", "activations.flx")),
        head=rel(doc.get("head", "head.json")),
        xconcepts=rel(doc.get("xconcepts", "xconcepts.json")),
        cavs=rel(doc.get("cavs", "cavs.json")),
        miner=MinerParams(
            p=int(miner_doc.get("p", 2)),
            k_min=int(miner_doc.get("k_min", 2)),
            k_max=int(miner_doc.get("k_max", 8)),
            outlier_fraction=float(miner_doc.get("outlier_fraction", 0.05)),
            allow=miner_doc.get("allow"),
            deny=miner_doc.get("deny"),
        ),
        n_per_class=int(doc.get("cav", {}).get("n_per_class", 3)),
        solver=FaultLineHyperparams(
            alpha=float(solver_doc.get("alpha", 1.0)),
            beta=float(solver_doc.get("beta", 0.1)),
            lam=float(solver_doc.get("lambda", 0.1)),
            tau=float(solver_doc.get("tau", 0.5)),
            max_iters=int(solver_doc.get("max_iters", 500)),
            step_size=float(solver_doc.get("step_size", 1.0)),
            rounding_threshold=float(solver_doc.get("rounding_threshold", 0.5)),
        ),
        policy=LearningConfig(
            **{
                k: policy_doc[k]
                for k in LearningConfig.__dataclass_fields__
                if k in policy_doc
            }
        ),
        seed=int(doc.get("seed", 0)) if seed_override is None else seed_override,
        port=int(service_doc.get("port", 8000)),
        journal_dir=rel(service_doc.get("journal_dir", "sessions")),
        checkpoint=rel(service_doc.get("checkpoint", "policy.flxpol")),
    )
