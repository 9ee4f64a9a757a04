import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from faultline.backend import ActivationTensor, ClassifierHead
from faultline.cav import CAV, ClassConceptSet
from faultline.config import load_config
from faultline.fixtures import build_fixture
from faultline.optimizer import FaultLineQuery


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    build_fixture(out)
    return out


@pytest.fixture(scope="session")
def fixture_config(fixture_dir):
    return load_config(fixture_dir / "config.json")


def random_instance(rng, n_pred, n_alt, m=10, u=2, v=2, gap_boost=0.0):
    """Two-class random fault-line instance with concentrated random CAVs."""
    w = rng.normal(0, 1.0, size=(2, m))
    b = np.array([abs(rng.normal(1.0, 0.5)) + 0.2, 0.0])
    vals = rng.uniform(0.2, 1.5, size=(m, u, v))
    a = ActivationTensor(vals)
    y = w @ vals.mean(axis=(1, 2)) + b
    if y[0] <= y[1]:
        b = b + np.array([y[1] - y[0] + abs(rng.normal(0.5, 0.3)), 0.0])
    b = b + np.array([gap_boost, 0.0])
    head = ClassifierHead(weights=w, bias=b, class_labels=("pred", "alt"))
    query = FaultLineQuery(
        image_id="inst", activation=a, c_pred="pred", c_alt="alt"
    )

    def cavs(n, prefix):
        out = []
        for i in range(n):
            v_ = rng.normal(0, 1, size=m)
            v_[rng.integers(m)] += rng.uniform(1.0, 3.0)
            out.append(
                CAV(concept_id=f"{prefix}{i}", v=v_, separator_accuracy=1.0)
            )
        return out

    cp, ca = cavs(n_pred, "p"), cavs(n_alt, "a")
    sigma_pred = ClassConceptSet("pred", [], [c.concept_id for c in cp], cp)
    sigma_alt = ClassConceptSet("alt", [], [c.concept_id for c in ca], ca)
    return head, query, sigma_pred, sigma_alt
