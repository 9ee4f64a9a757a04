"""Batch entry points: mine concepts, fit CAVs, explain, train, evaluate, serve.

Results go to stdout (JSON with --json), progress to stderr. Exit codes:
0 success, 2 usage/missing files, 3 malformed data files, 4 computation
errors (degenerate clustering, inseparable concepts, bad parameters),
5 unknown image/class/concept ids.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backend import (
    ActivationFormatError,
    UnknownClassError,
    load_activation_set,
    load_head,
    predict,
)
from .cav import (
    class_specific_xconcepts,
    fit_concept_cavs,
    load_cavs,
    save_cavs,
)
from .config import load_config
from .fixtures import build_fixture
from .mining import (
    cluster_xconcepts,
    filter_xconcepts,
    load_xconcepts,
    save_xconcepts,
    select_top_superpixels,
)
from .optimizer import FaultLineQuery, solve_faultline
from .policy import (
    LearningConfig,
    PolicyModel,
    evaluate_policy,
    preferred_pair_population,
    save_policy,
    train_policy,
)
from .service import ExplanationService, faultline_bundle
from .trust import build_trust_report, load_games

EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_COMPUTE = 4
EXIT_UNKNOWN_ID = 5


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(doc: dict, as_json: bool, summary: str) -> None:
    if as_json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(summary)


def cmd_mine(args) -> int:
    cfg = load_config(args.config, args.seed)
    cfg.validate_inputs(("activations", "head"))
    dataset = load_activation_set(cfg.activations)
    head = load_head(cfg.head)
    _progress(f"mining: {len(dataset)} images, p={cfg.miner.p}")
    superpixels = select_top_superpixels(dataset, head, cfg.miner.p)
    concepts = cluster_xconcepts(
        superpixels, cfg.miner.k_min, cfg.miner.k_max,
        cfg.miner.outlier_fraction, seed=cfg.seed,
    )
    concepts = filter_xconcepts(concepts, cfg.miner.allow, cfg.miner.deny)
    out = Path(args.out) if args.out else cfg.xconcepts
    save_xconcepts(concepts, out)
    doc = {
        "concepts": len(concepts),
        "superpixels": len(superpixels),
        "store": str(out),
    }
    _emit(doc, args.json, f"mined {len(concepts)} xconcepts -> {out}")
    return 0


def cmd_fit_cavs(args) -> int:
    cfg = load_config(args.config, args.seed)
    cfg.validate_inputs(("activations", "xconcepts"))
    dataset = load_activation_set(cfg.activations)
    concepts = load_xconcepts(cfg.xconcepts, dataset)
    _progress(f"fitting CAVs for {len(concepts)} concepts")
    cavs = fit_concept_cavs(concepts, seed=cfg.seed)
    out = Path(args.out) if args.out else cfg.cavs
    save_cavs(cavs, out)
    doc = {
        "cavs": len(cavs),
        "store": str(out),
        "accuracy": {cid: cav.separator_accuracy for cid, cav in cavs.items()},
    }
    _emit(doc, args.json, f"fitted {len(cavs)} CAVs -> {out}")
    return 0


def cmd_explain(args) -> int:
    cfg = load_config(args.config, args.seed)
    cfg.validate_inputs(("activations", "head", "xconcepts", "cavs"))
    dataset = load_activation_set(cfg.activations)
    head = load_head(cfg.head)
    concepts = load_xconcepts(cfg.xconcepts, dataset)
    cavs = load_cavs(cfg.cavs)
    item = dataset.get(args.image_id)
    c_pred = predict(head, item.activation)
    if args.c_alt not in head.class_labels:
        raise UnknownClassError(args.c_alt)
    query = FaultLineQuery(
        image_id=args.image_id, activation=item.activation,
        c_pred=c_pred, c_alt=args.c_alt,
    )
    sigma_pred = class_specific_xconcepts(
        concepts, cavs, dataset, head, c_pred, n=cfg.n_per_class
    )
    sigma_alt = class_specific_xconcepts(
        concepts, cavs, dataset, head, args.c_alt, n=cfg.n_per_class
    )
    _progress(f"solving fault-line {c_pred} -> {args.c_alt} for {args.image_id}")
    fl = solve_faultline(head, query, sigma_pred, sigma_alt, cfg.solver,
                         seed=cfg.seed)
    bundle = faultline_bundle(fl, {c.concept_id: c for c in concepts})
    print(json.dumps(bundle, indent=2, sort_keys=True))
    return 0


def cmd_train_policy(args) -> int:
    cfg = load_config(args.config, args.seed)
    cfg.validate_inputs(("head",))
    head = load_head(cfg.head)
    policy = PolicyModel(head.class_labels, seed=cfg.seed)
    users = preferred_pair_population(head.class_labels, seed=cfg.seed)
    log_path = Path(args.out).with_suffix(".log.jsonl") if args.out else None
    _progress(f"training policy for {args.episodes} episodes")
    stats = train_policy(
        policy, users, args.episodes, cfg.policy, seed=cfg.seed,
        log_path=log_path,
    )
    out = Path(args.out) if args.out else cfg.checkpoint
    final_eps = 0.0 if args.episodes else cfg.policy.epsilon_start
    save_policy(policy, out, episodes=args.episodes, epsilon=final_eps)
    doc = {
        "episodes": stats["episodes"],
        "interactions": stats["interactions"],
        "updates": stats["updates"],
        "checkpoint": str(out),
    }
    _emit(doc, args.json, f"trained {args.episodes} episodes -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.seed)
    reports = []
    for path in args.inputs:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(p)
        if p.suffix == ".jsonl":
            reports.append(_evaluate_journal(cfg, p))
        else:
            games = load_games(p)
            doc = json.loads(p.read_text())
            verdicts = {k: bool(v) for k, v in doc.get("model_verdicts", {}).items()}
            predictions = {
                k: bool(v) for k, v in doc.get("user_predictions", {}).items()
            }
            if not verdicts:
                # degenerate verdict set keeps jt defined for games-only files
                verdicts = {"_": True}
                predictions = {"_": True}
            report = build_trust_report(games, verdicts, predictions)
            reports.append({"input": str(p), **report.to_json()})
    out = {"reports": reports}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _evaluate_journal(cfg, journal: Path) -> dict:
    cfg.validate_inputs(("activations", "head", "xconcepts", "cavs"))
    service = ExplanationService(cfg)
    session_id = journal.stem
    report = service.trust_report(session_id)
    return {"input": str(journal), **report}


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = load_config(args.config, args.seed)
    cfg.validate_inputs(("activations", "head", "xconcepts", "cavs"))
    service = ExplanationService(cfg)
    app = create_app(service, static_dir=args.static)
    _progress(f"serving on port {cfg.port}")
    uvicorn.run(app, host="127.0.0.1", port=cfg.port, log_level="warning")
    return 0


def cmd_make_fixture(args) -> int:
    out = Path(args.out or "fixture")
    config_path = build_fixture(out, seed=args.seed if args.seed is not None else 7)
    _emit(
        {"config": str(config_path)}, args.json,
        f"fixture written; config at {config_path}",
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faultline",
        description="concept-level counterfactual explanations with a dialog policy",
    )
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output path override")
    parser.add_argument("--json", action="store_true", help="JSON output")
    parser.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("mine", help="mine xconcepts from the activation set")
    sub.add_parser("fit-cavs", help="fit concept activation vectors")
    p_explain = sub.add_parser("explain", help="solve one fault-line query")
    p_explain.add_argument("image_id")
    p_explain.add_argument("c_alt")
    p_train = sub.add_parser("train-policy", help="train the selection policy")
    p_train.add_argument("--episodes", type=int, default=2000)
    p_eval = sub.add_parser("evaluate", help="trust metrics over games/journals")
    p_eval.add_argument("inputs", nargs="+")
    sub.add_parser("serve", help="run the dialog HTTP service")
    parser_fix = sub.add_parser("make-fixture", help="write the bundled synthetic fixture")
    del parser_fix
    for name, p in sub.choices.items():
        if name == "serve":
            p.add_argument("--static", help="static frontend directory")
    return parser


COMMANDS = {
    "mine": cmd_mine,
    "fit-cavs": cmd_fit_cavs,
    "explain": cmd_explain,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "serve": cmd_serve,
    "make-fixture": cmd_make_fixture,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        try:
            import torch

            torch.set_num_threads(max(1, args.threads))
        except ImportError:
            pass
    needs_config = args.command not in ("make-fixture",)
    if needs_config and not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ActivationFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UnknownClassError, KeyError) as exc:
        print(f"error: unknown id: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_ID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
