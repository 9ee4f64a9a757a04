"""Acceptance suite: one test per release criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; tolerances are fixed here and nowhere else.
"""

import functools
import json
import threading
import time
from itertools import combinations

import numpy as np
import pytest
import torch

from conftest import random_instance
from faultline.backend import (
    ActivationTensor,
    ClassifierHead,
    grad_logit_wrt_activations,
    load_activation_set,
    load_head,
    logits,
    global_average_pool,
    logits_from_pooled,
)
from faultline.cav import CAV, directional_derivative
from faultline.config import load_config
from faultline.mining import Superpixel, cluster_xconcepts, save_xconcepts
from faultline.optimizer import (
    FaultLineHyperparams,
    brute_force_faultline,
    perturb_activations,
    solve_faultline,
)
from faultline.policy import (
    LearningConfig,
    PolicyModel,
    attach_nstep_returns,
    compute_targets,
    evaluate_policy,
    preferred_pair_population,
    simulate_dialog,
    surrogate_loss,
    train_policy,
    SimulatedUser,
    valid_action_mask,
    masked_log_probs,
)
from faultline.trust import (
    AnnotatedMind,
    Node,
    ParseGraph,
    compute_jnt,
    compute_jpt,
    compute_reliance,
    graph_intersection,
    justified_trust_classification,
)


def criterion(name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[ACCEPTANCE] {name}: FAIL")
                raise
            print(f"\n[ACCEPTANCE] {name}: PASS")

        return wrapper

    return decorate


HP_RANDOM = FaultLineHyperparams(alpha=1.0, beta=0.1, lam=0.1, tau=0.1)


def draw_instances(seed, count):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n_pred = int(rng.integers(2, 7))
        n_alt = int(rng.integers(2, 13 - n_pred))
        out.append(random_instance(rng, n_pred, n_alt))
    return out


@criterion("oracle optimality (200 instances, >=80% match, margins re-verified)")
def test_oracle_optimality():
    start = time.time()
    instances = draw_instances(42, 200)
    matches = 0
    for head, query, sp, sa in instances:
        fl = solve_faultline(head, query, sp, sa, HP_RANDOM, seed=0)
        bf = brute_force_faultline(head, query, sp, sa, HP_RANDOM)
        assert bf.objective <= fl.objective + 1e-9
        if abs(bf.objective - fl.objective) < 1e-9:
            matches += 1
        if fl.flipped:
            pert = perturb_activations(
                query.activation, sp.selected_cavs, fl.delta_pred,
                sa.selected_cavs, fl.delta_alt,
            )
            y = logits(head, pert)
            margin = y[1] - y[0]
            assert abs(margin - fl.margin) < 1e-9
            assert margin >= 0.0
    elapsed = time.time() - start
    assert matches >= 0.80 * len(instances), f"only {matches}/200 matched"
    assert elapsed < 120.0, f"took {elapsed:.1f}s"


@criterion("minimality (no strict subset of PFT+NFT flips; beta=lam=0.1)")
def test_minimality():
    instances = draw_instances(43, 120)
    checked = 0
    for head, query, sp, sa in instances:
        fl = solve_faultline(head, query, sp, sa, HP_RANDOM, seed=0)
        if not fl.flipped:
            continue
        checked += 1
        n_pred = fl.delta_pred.shape[0]
        support = [
            (i, fl.delta_pred[i]) for i in range(n_pred) if fl.delta_pred[i] != 0
        ] + [
            (n_pred + i, fl.delta_alt[i])
            for i in range(fl.delta_alt.shape[0])
            if fl.delta_alt[i] != 0
        ]
        for size in range(len(support)):
            for sub in combinations(support, size):
                dp = np.zeros(n_pred)
                da = np.zeros(fl.delta_alt.shape[0])
                for idx, val in sub:
                    if idx < n_pred:
                        dp[idx] = val
                    else:
                        da[idx - n_pred] = val
                pert = perturb_activations(
                    query.activation, sp.selected_cavs, dp, sa.selected_cavs, da
                )
                y = logits(head, pert)
                assert y[1] - y[0] <= 0, "a strict subset also flips"
    assert checked >= 40, f"too few flipping instances to be meaningful: {checked}"


@criterion("qualitative reconstruction (Goat->Sheep, Dog->Thylacine, Toad->Frog)")
def test_fig2_reconstruction(fixture_dir, capsys):
    from faultline.cli import main

    cases = [
        ("goat_000", "Sheep", {"wool"}, {"beard", "horns"}),
        ("dog_000", "Thylacine", {"stripes"}, set()),
        ("toad_000", "Frog", set(), {"bumps"}),
    ]
    for image_id, c_alt, want_pft, want_nft in cases:
        rc = main(
            ["--config", str(fixture_dir / "config.json"), "explain",
             image_id, c_alt]
        )
        assert rc == 0
        bundle = json.loads(capsys.readouterr().out)
        assert set(bundle["pft"]) == want_pft, (image_id, bundle["pft"])
        assert set(bundle["nft"]) == want_nft, (image_id, bundle["nft"])
        assert bundle["flipped"] is True


@criterion("gradient checks (backend, CAV sensitivity, policy surrogate)")
def test_gradient_checks():
    rng = np.random.default_rng(7)

    # backend: analytic activation gradient vs central differences
    worst = 0.0
    for _ in range(20):
        c, m, u, v = 4, 3, 2, 2
        head = ClassifierHead(
            weights=rng.normal(size=(c, m)), bias=rng.normal(size=c),
            class_labels=tuple(f"c{i}" for i in range(c)),
        )
        a = ActivationTensor(rng.normal(size=(m, u, v)))
        label = f"c{int(rng.integers(c))}"
        ci = head.class_index(label)
        grad = grad_logit_wrt_activations(head, a, label)
        k, i, j = (int(rng.integers(d)) for d in (m, u, v))
        h = 1e-5
        plus, minus = a.values.copy(), a.values.copy()
        plus[k, i, j] += h
        minus[k, i, j] -= h
        fd = (
            logits(head, ActivationTensor(plus))[ci]
            - logits(head, ActivationTensor(minus))[ci]
        ) / (2 * h)
        worst = max(worst, abs(grad[k, i, j] - fd) / max(abs(fd), 1e-12))
    assert worst < 1e-4, f"backend gradient rel err {worst}"

    # CAV sensitivity vs finite difference along the direction
    worst = 0.0
    for _ in range(20):
        m = 6
        head = ClassifierHead(
            weights=rng.normal(size=(3, m)), bias=rng.normal(size=3),
            class_labels=("x", "y", "z"),
        )
        a = ActivationTensor(rng.normal(size=(m, 2, 3)))
        cav = CAV("c", rng.normal(size=m), 1.0)
        got = directional_derivative(head, a, "y", cav)
        pooled = global_average_pool(a)
        h = 1e-6
        fd = (
            logits_from_pooled(head, pooled + h * cav.v)[1]
            - logits_from_pooled(head, pooled - h * cav.v)[1]
        ) / (2 * h)
        worst = max(worst, abs(got - fd) / max(abs(fd), 1e-12))
    assert worst < 1e-4, f"directional derivative rel err {worst}"

    # policy surrogate loss vs central differences on 20 random coordinates
    labels = ("a", "b", "c", "d")
    policy = PolicyModel(labels, seed=1)
    user = SimulatedUser(
        belief={(p, q): 0.5 for p in labels for q in labels if p != q},
        learning_rate=0.2,
    )
    sim_rng = np.random.default_rng(3)
    batch = []
    ep = 0
    while len(batch) < 6:
        episode = simulate_dialog(
            policy, user, lambda i, c: None, 3,
            image_id=f"i{ep}", c_pred=labels[ep % 4], epsilon=0.5, rng=sim_rng,
        )
        batch.extend(episode.transitions)
        ep += 1
    batch = batch[:6]
    attach_nstep_returns(batch, LearningConfig())
    advantages, returns = compute_targets(policy, batch, LearningConfig())

    def loss_value():
        return surrogate_loss(policy, batch, advantages, returns, 0.5)

    loss = loss_value()
    policy.zero_grad()
    loss.backward()
    params = [p for p in policy.parameters() if p.grad is not None]
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        p = params[int(rng.integers(len(params)))]
        flat = p.data.view(-1)
        idx = int(rng.integers(flat.numel()))
        grad = float(p.grad.view(-1)[idx])
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + h
        lp = float(loss_value().detach())
        with torch.no_grad():
            flat[idx] = orig - h
        lm = float(loss_value().detach())
        with torch.no_grad():
            flat[idx] = orig
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(grad - fd) / max(abs(fd), abs(grad), 1e-8))
    assert worst < 1e-3, f"policy surrogate gradient rel err {worst}"


@criterion("FISTA behavior (monotone traces; tau=0 no-penalty margin argmax)")
def test_fista_behavior():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n_pred = int(rng.integers(2, 7))
        n_alt = int(rng.integers(2, 13 - n_pred))
        head, query, sp, sa = random_instance(rng, n_pred, n_alt)
        fl = solve_faultline(head, query, sp, sa, HP_RANDOM, seed=0)
        trace = np.asarray(fl.trace)
        assert np.all(np.diff(trace) <= 1e-9), "trace increased"
        assert trace[-1] <= trace[0] + 1e-12

    hp0 = FaultLineHyperparams(alpha=1.0, beta=0.0, lam=0.0, tau=0.0)
    produced = 0
    rng = np.random.default_rng(12)
    while produced < 25:
        n_pred, n_alt = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        head, query, sp, sa = random_instance(rng, n_pred, n_alt, gap_boost=3.0)
        n = n_pred + n_alt
        best = -np.inf
        for bits in range(1 << n):
            dp = np.array([-1.0 if bits >> i & 1 else 0.0 for i in range(n_pred)])
            da = np.array(
                [1.0 if bits >> (n_pred + i) & 1 else 0.0 for i in range(n_alt)]
            )
            pert = perturb_activations(
                query.activation, sp.selected_cavs, dp, sa.selected_cavs, da
            )
            y = logits(head, pert)
            best = max(best, y[1] - y[0])
        if best > 0:
            continue
        produced += 1
        fl = solve_faultline(head, query, sp, sa, hp0, seed=0)
        assert fl.margin == pytest.approx(best, abs=1e-9)


@criterion("clustering (planted 3 blobs: K=3, >=95% agreement, deterministic)")
def test_clustering(tmp_path):
    rng = np.random.default_rng(8)
    centers = [np.eye(4)[i] for i in range(3)]
    sps = []
    truth = []
    for ci, center in enumerate(centers):
        for i in range(30):
            sps.append(
                Superpixel(
                    image_id=f"b{ci}_{i}", map_index=0, class_label="x",
                    alpha=1.0,
                    feature=center + 0.1 * rng.standard_normal(4),
                    localization=np.ones((1, 1), dtype=bool),
                )
            )
            truth.append(ci)
    truth = np.array(truth)
    concepts = cluster_xconcepts(sps, 2, 6, outlier_fraction=0.05, seed=0)
    assert len(concepts) == 3, f"chose K={len(concepts)}"
    assignment = {}
    for ci, concept in enumerate(concepts):
        for sp in concept.members:
            assignment[sp.image_id] = ci
    retained = [i for i, sp in enumerate(sps) if sp.image_id in assignment]
    from itertools import permutations

    best = max(
        sum(1 for i in retained if assignment[sps[i].image_id] == perm[truth[i]])
        for perm in permutations(range(3))
    )
    assert best / len(retained) >= 0.95

    again = cluster_xconcepts(sps, 2, 6, outlier_fraction=0.05, seed=0)
    p1, p2 = tmp_path / "c1.json", tmp_path / "c2.json"
    save_xconcepts(concepts, p1)
    save_xconcepts(again, p2)
    assert p1.read_bytes() == p2.read_bytes(), "not byte-deterministic"


@criterion("trust metrics (hand-enumerated 2-game fixture to 1e-12)")
def test_trust_metrics():
    def n(nid, kind="object", z="alpha", pol=None):
        return Node(node_id=nid, kind=kind, process=z, polarity=pol)

    pg_m1 = ParseGraph.build(
        [
            n("m1", "object", "alpha", "+"),
            n("m2", "part", "alpha", "+"),
            n("m3", "part", "beta", "+"),
            n("m4", "part", "beta", "-"),
            n("m5", "object", "gamma", "-"),
        ],
        [("m1", "m2", "has"), ("m1", "m3", "has"), ("m1", "m5", "near")],
    )
    pg_u1 = ParseGraph.build(
        [
            n("m1", "object", "alpha", "+"),
            n("m2", "part", "beta", "+"),
            n("m4", "part", "beta", "-"),
            n("m6", "object", "alpha", "+"),
        ],
        [("m1", "m2", "has")],
    )
    pg_m2 = ParseGraph.build(
        [n("n1", "object", "alpha", "+"), n("n2", "part", "gamma", "-")], []
    )
    pg_u2 = ParseGraph.build(
        [n("n1", "object", "alpha", "+"), n("n2", "part", "gamma", "-")], []
    )
    games = [
        AnnotatedMind(1, pg_minu=pg_u1, pg_m=pg_m1),
        AnnotatedMind(2, pg_minu=pg_u2, pg_m=pg_m2),
    ]
    assert abs(compute_jpt(games) - 0.7) < 1e-12
    assert abs(compute_jnt(games) - 0.75) < 1e-12
    assert abs(compute_reliance(games) - 0.625) < 1e-12

    # identity and disjoint trivial cases, exact
    pg = ParseGraph.build([n("a", pol="+")], [])
    assert compute_jpt([AnnotatedMind(0, pg, pg)]) == 1.0
    other = ParseGraph.build([n("b", pol="+")], [])
    assert compute_jpt([AnnotatedMind(0, other, pg)]) == 0.0
    assert graph_intersection(pg, other).size() == 0

    rng = np.random.default_rng(5)
    for _ in range(100):
        k = int(rng.integers(1, 10))
        verdicts = {f"i{j}": bool(rng.integers(2)) for j in range(k)}
        predictions = {f"i{j}": bool(rng.integers(2)) for j in range(k)}
        jt = justified_trust_classification(verdicts, predictions)
        assert 0.0 <= jt <= 1.0


@criterion("policy learning (2000 episodes beats uniform; update every 15)")
def test_policy_learning():
    start = time.time()
    labels = tuple(f"class_{i}" for i in range(6))
    cfg = LearningConfig(max_turns=6)
    users = preferred_pair_population(labels, seed=3)
    policy = PolicyModel(labels, seed=0)
    stats = train_policy(policy, users, 2000, cfg, seed=11)
    assert stats["updates"] == stats["interactions"] // cfg.update_every

    held_out = preferred_pair_population(labels, seed=3)
    trained = evaluate_policy(policy, held_out, 300, cfg, seed=99)
    uniform = evaluate_policy(
        PolicyModel(labels, seed=0), held_out, 300, cfg, seed=99, uniform=True
    )
    assert trained["mean_length"] < uniform["mean_length"], (
        trained["mean_length"], uniform["mean_length"],
    )
    assert trained["mean_reward"] > uniform["mean_reward"]
    elapsed = time.time() - start
    assert elapsed < 300.0, f"took {elapsed:.1f}s"


@criterion("service durability (restart byte-identical; 50 sessions no leakage)")
def test_service_durability(fixture_dir, tmp_path):
    from fastapi.testclient import TestClient
    from faultline.service import ExplanationService, create_app

    cfg = load_config(fixture_dir / "config.json")
    cfg.journal_dir = tmp_path / "sessions"
    cfg.checkpoint = tmp_path / "policy.flxpol"
    service = ExplanationService(cfg)
    client = TestClient(create_app(service))

    # kill-and-restart mid-session: leave one answered and one open turn
    sid = client.post("/sessions").json()["session_id"]
    fl = client.post(
        f"/sessions/{sid}/faultline",
        json={"image_id": "goat_000", "c_alt": "Toad"},
    ).json()
    wrong = (service.get_session(sid).open_quiz.correct_index + 1) % len(
        fl["quiz"]["options"]
    )
    client.post(f"/sessions/{sid}/quiz/{fl['quiz']['quiz_id']}", json={"answer": wrong})
    client.post(
        f"/sessions/{sid}/faultline",
        json={"image_id": "goat_000", "c_alt": "Sheep"},
    )
    snapshot = service.get_session(sid).state_snapshot()

    reborn = ExplanationService(cfg)
    assert reborn.get_session(sid).state_snapshot() == snapshot

    # 50 concurrent scripted sessions with zero cross-session leakage
    images = {
        "Goat": "goat_000", "Dog": "dog_000", "Toad": "toad_000",
        "Frog": "frog_000", "Sheep": "sheep_000", "Thylacine": "thylacine_000",
    }
    alts = {
        "Goat": "Sheep", "Dog": "Thylacine", "Toad": "Frog",
        "Frog": "Toad", "Sheep": "Goat", "Thylacine": "Dog",
    }
    preds = list(images)
    results = {}
    lock = threading.Lock()
    errors = []

    def script(i):
        try:
            my_sid = client.post("/sessions").json()["session_id"]
            pred = preds[i % len(preds)]
            image_id = images[pred]
            r = client.post(
                f"/sessions/{my_sid}/faultline",
                json={"image_id": image_id, "c_alt": alts[pred]},
            )
            assert r.status_code == 200
            quiz = r.json()["quiz"]
            right = service.get_session(my_sid).open_quiz.correct_index
            ans = right if i % 2 == 0 else (right + 1) % len(quiz["options"])
            res = client.post(
                f"/sessions/{my_sid}/quiz/{quiz['quiz_id']}", json={"answer": ans}
            )
            assert res.status_code == 200
            with lock:
                results[my_sid] = (image_id, i % 2 == 0, res.json()["correct"])
        except BaseException as exc:  # surface in the main thread
            with lock:
                errors.append(exc)

    threads = [threading.Thread(target=script, args=(i,)) for i in range(50)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors, errors[0]
    assert len(results) == 50
    for my_sid, (image_id, intended, got) in results.items():
        assert intended == got
        session = service.get_session(my_sid)
        assert len(session.quiz_log) == 1
        assert session.quiz_log[0]["image_id"] == image_id
