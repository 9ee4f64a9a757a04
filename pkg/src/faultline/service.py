"""Stateful HTTP/JSON dialog service over the explanation pipeline.

Each session walks the interaction loop: pick an image, see the
policy-ranked alternate classes, request a fault-line for one, answer the
comprehension quiz, repeat; every answer feeds the replay pool and the
policy updates after every fifteenth interaction service-wide. All state
mutations append to a per-session JSON-lines journal before the response
is sent, so killing and restarting the process reconstructs every session
exactly.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .backend import (
    ClassifierHead,
    LabeledActivationSet,
    load_activation_set,
    load_head,
    predict,
)
from .cav import ClassConceptSet, class_specific_xconcepts, load_cavs
from .config import PipelineConfig
from .mining import Xconcept, load_xconcepts
from .optimizer import FaultLine, FaultLineQuery, solve_faultline
from .policy import (
    DialogState,
    LearningConfig,
    PolicyModel,
    ReplayBuffer,
    Transition,
    attach_nstep_returns,
    encode_state,
    load_policy,
    rank_actions,
    reward,
    save_policy,
    update_policy,
)
from .trust import classification_trust_report


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class OpenQuiz:
    quiz_id: str
    image_id: str
    c_alt: str
    turn: int
    prompt: str
    options: list[dict]
    correct_index: int  # never serialized to the client


@dataclass
class Session:
    session_id: str
    created_at: float
    mode: str  # "live" | "replay"
    dialog_state: DialogState | None = None
    quiz_log: list[dict] = field(default_factory=list)
    open_quiz: OpenQuiz | None = None
    quiz_counter: int = 0
    prefix: list[np.ndarray] = field(default_factory=list)
    pending: list[Transition] = field(default_factory=list)
    pending_skeleton: dict | None = None
    shown_bundles: dict[tuple[str, str], dict] = field(default_factory=dict)
    idempotency: dict[str, dict] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def state_snapshot(self) -> str:
        """Canonical serialization used for durability comparisons."""
        doc = self.dialog_state.to_json() if self.dialog_state else None
        return json.dumps(doc, sort_keys=True)


def _hp_hash(hp) -> str:
    key = json.dumps(
        [hp.alpha, hp.beta, hp.lam, hp.tau, hp.max_iters, hp.step_size,
         hp.rounding_threshold]
    )
    return hashlib.sha1(key.encode()).hexdigest()[:12]


def faultline_bundle(fl: FaultLine, concepts: dict[str, Xconcept]) -> dict:
    examples = {
        cid: concepts[cid].example_image_ids
        for cid in fl.pft + fl.nft
        if cid in concepts
    }
    return {
        "query": {
            "image_id": fl.query.image_id,
            "c_pred": fl.query.c_pred,
            "c_alt": fl.query.c_alt,
        },
        "pft": list(fl.pft),
        "nft": list(fl.nft),
        "margin": fl.margin,
        "objective": fl.objective,
        "iterations": fl.iterations,
        "flipped": fl.flipped,
        "concept_examples": examples,
    }


class ExplanationService:
    """All service state and operations; the HTTP layer is a thin shim."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.dataset: LabeledActivationSet = load_activation_set(config.activations)
        self.head: ClassifierHead = load_head(config.head)
        self.concept_list = load_xconcepts(config.xconcepts, self.dataset)
        self.concepts = {c.concept_id: c for c in self.concept_list}
        self.cavs = load_cavs(config.cavs)
        self.class_sets: dict[str, ClassConceptSet] = {
            c: class_specific_xconcepts(
                self.concept_list, self.cavs, self.dataset, self.head, c,
                n=config.n_per_class,
            )
            for c in self.head.class_labels
        }
        self.predictions = {
            item.image_id: predict(self.head, item.activation)
            for item in self.dataset.items
        }

        if Path(config.checkpoint).exists():
            self.policy, header = load_policy(config.checkpoint)
            self.checkpoint_sequence = int(header.get("sequence", 0))
        else:
            self.policy = PolicyModel(
                self.head.class_labels, seed=config.seed
            )
            self.checkpoint_sequence = 0
        self.learning = config.policy
        self.replay = ReplayBuffer(self.learning.replay_capacity)
        self.policy_lock = threading.Lock()
        self.sessions_lock = threading.Lock()
        self.sessions: dict[str, Session] = {}
        self.bundle_cache: dict[tuple[str, str, str], dict] = {}
        self.cache_lock = threading.Lock()
        self.interactions = 0
        self.update_rng = np.random.default_rng(config.seed + 1)

        self.journal_dir = Path(config.journal_dir)
        self.journal_dir.mkdir(parents=True, exist_ok=True)
        for journal in sorted(self.journal_dir.glob("*.jsonl")):
            self._replay_journal(journal)

    # -- journaling -----------------------------------------------------------

    def _journal_path(self, session_id: str) -> Path:
        return self.journal_dir / f"{session_id}.jsonl"

    def _append(self, session_id: str, event: dict) -> None:
        line = json.dumps(event, sort_keys=True)
        with open(self._journal_path(session_id), "a") as fh:
            fh.write(line + "\n")
            fh.flush()

    def _replay_journal(self, path: Path) -> None:
        session: Session | None = None
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                event = json.loads(line)
                kind = event["event"]
                if kind == "created":
                    session = Session(
                        session_id=event["session_id"],
                        created_at=event["created_at"],
                        mode="replay",
                    )
                elif session is None:
                    continue
                elif kind == "faultline":
                    self._apply_faultline_event(session, event)
                elif kind == "quiz":
                    self._apply_quiz_event(session, event)
                elif kind == "idempotent":
                    session.idempotency[event["key"]] = event["response"]
        if session is not None:
            with self.sessions_lock:
                self.sessions[session.session_id] = session
            self.interactions += len(session.quiz_log)

    def _apply_faultline_event(self, session: Session, event: dict) -> None:
        image_id, c_alt = event["image_id"], event["c_alt"]
        if (
            session.dialog_state is None
            or session.dialog_state.current_image_id != image_id
        ):
            session.dialog_state = DialogState(
                session_id=session.session_id,
                current_image_id=image_id,
                c_pred=event["c_pred"],
            )
        enc = encode_state(session.dialog_state, self.head.class_labels)
        session.pending_skeleton = {
            "encoding": enc,
            "prefix": session.prefix + [enc],
            "action": self.head.class_labels.index(c_alt),
        }
        session.prefix = session.prefix + [enc]
        session.dialog_state.begin_turn(c_alt)
        session.shown_bundles[(image_id, c_alt)] = event["bundle"]
        with self.cache_lock:
            self.bundle_cache.setdefault(
                (image_id, c_alt, event["hp_hash"]), event["bundle"]
            )
        session.quiz_counter += 1
        session.open_quiz = OpenQuiz(
            quiz_id=event["quiz_id"],
            image_id=image_id,
            c_alt=c_alt,
            turn=session.dialog_state.turn_count,
            prompt=event["prompt"],
            options=event["options"],
            correct_index=event["correct_index"],
        )

    def _apply_quiz_event(self, session: Session, event: dict) -> None:
        session.pending_skeleton = None
        session.dialog_state.complete_turn(event["correct"])
        session.quiz_log.append(
            {
                "quiz_id": event["quiz_id"],
                "image_id": event["image_id"],
                "c_alt": event["c_alt"],
                "correct": event["correct"],
                "reward": event["reward"],
                "turn": event["turn"],
            }
        )
        session.open_quiz = None

    # -- operations -----------------------------------------------------------

    def create_session(self) -> dict:
        session = Session(
            session_id=uuid.uuid4().hex, created_at=time.time(), mode="live"
        )
        with self.sessions_lock:
            self.sessions[session.session_id] = session
        self._append(
            session.session_id,
            {
                "event": "created",
                "session_id": session.session_id,
                "created_at": session.created_at,
            },
        )
        return {
            "session_id": session.session_id,
            "created_at": session.created_at,
            "mode": session.mode,
        }

    def get_session(self, session_id: str) -> Session:
        with self.sessions_lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise ServiceError(404, "unknown-session", f"no session {session_id!r}")
        return session

    def list_images(self) -> list[dict]:
        return [
            {"id": item.image_id, "predicted_class": self.predictions[item.image_id]}
            for item in self.dataset.items
        ]

    def _state_for_image(self, session: Session, image_id: str) -> DialogState:
        if (
            session.dialog_state is not None
            and session.dialog_state.current_image_id == image_id
        ):
            return session.dialog_state
        return DialogState(
            session_id=session.session_id,
            current_image_id=image_id,
            c_pred=self.predictions[image_id],
        )

    def list_candidate_alts(self, session_id: str, image_id: str) -> dict:
        session = self.get_session(session_id)
        if image_id not in self.predictions:
            raise ServiceError(404, "unknown-image", f"no image {image_id!r}")
        state = self._state_for_image(session, image_id)
        with self.policy_lock:
            ranked = rank_actions(self.policy, state, prefix=session.prefix)
        return {
            "image_id": image_id,
            "c_pred": state.c_pred,
            "alternates": ranked,
        }

    def _solve_bundle(self, image_id: str, c_alt: str) -> dict:
        key = (image_id, c_alt, _hp_hash(self.config.solver))
        with self.cache_lock:
            cached = self.bundle_cache.get(key)
        if cached is not None:
            return cached
        item = self.dataset.get(image_id)
        c_pred = self.predictions[image_id]
        query = FaultLineQuery(
            image_id=image_id, activation=item.activation,
            c_pred=c_pred, c_alt=c_alt,
        )
        fl = solve_faultline(
            self.head, query, self.class_sets[c_pred], self.class_sets[c_alt],
            self.config.solver, seed=self.config.seed,
        )
        bundle = faultline_bundle(fl, self.concepts)
        with self.cache_lock:
            self.bundle_cache[key] = bundle
        return bundle

    def _make_quiz(self, session: Session, bundle: dict) -> OpenQuiz:
        image_id = bundle["query"]["image_id"]
        c_pred, c_alt = bundle["query"]["c_pred"], bundle["query"]["c_alt"]
        session.quiz_counter += 1
        quiz_id = f"{session.session_id[:8]}-q{session.quiz_counter}"
        correct = {"add": sorted(bundle["pft"]), "remove": sorted(bundle["nft"])}
        rng = np.random.default_rng(
            self.config.seed
            + int(hashlib.sha1(f"{image_id}:{c_alt}".encode()).hexdigest()[:8], 16)
        )
        pool = sorted(
            set(self.class_sets[c_pred].selected)
            | set(self.class_sets[c_alt].selected)
        )
        options = [correct]
        seen = {json.dumps(correct, sort_keys=True)}
        attempts = 0
        while len(options) < 4 and attempts < 40:
            attempts += 1
            adds = sorted(
                rng.choice(pool, size=min(len(pool), int(rng.integers(0, 3))),
                           replace=False).tolist()
            )
            removes = sorted(
                rng.choice(pool, size=min(len(pool), int(rng.integers(0, 3))),
                           replace=False).tolist()
            )
            if not adds and not removes:
                continue
            cand = {"add": adds, "remove": removes}
            blob = json.dumps(cand, sort_keys=True)
            if blob not in seen:
                seen.add(blob)
                options.append(cand)
        order = rng.permutation(len(options))
        shuffled = [options[i] for i in order]
        correct_index = int(np.flatnonzero(order == 0)[0])
        prompt = (
            f"Which concept changes flip the model from {c_pred} to {c_alt} "
            f"on image {image_id}?"
        )
        return OpenQuiz(
            quiz_id=quiz_id,
            image_id=image_id,
            c_alt=c_alt,
            turn=session.dialog_state.turn_count,  # begin_turn already ran
            prompt=prompt,
            options=shuffled,
            correct_index=correct_index,
        )

    def _finalize_episode(self, session: Session) -> None:
        if session.pending:
            attach_nstep_returns(session.pending, self.learning)
            with self.policy_lock:
                for t in session.pending:
                    self.replay.append(t)
            session.pending = []

    def get_faultline(self, session_id: str, image_id: str, c_alt: str,
                      idempotency_key: str | None = None) -> dict:
        session = self.get_session(session_id)
        with session.lock:
            if idempotency_key and idempotency_key in session.idempotency:
                return session.idempotency[idempotency_key]
            if image_id not in self.predictions:
                raise ServiceError(404, "unknown-image", f"no image {image_id!r}")
            c_pred = self.predictions[image_id]
            if c_alt not in self.head.class_labels:
                raise ServiceError(422, "unknown-class", f"no class {c_alt!r}")
            if c_alt == c_pred:
                raise ServiceError(
                    422, "invalid-alternate",
                    "alternate class equals the predicted class",
                )
            # idempotent re-view of an already-shown fault-line
            shown = session.shown_bundles.get((image_id, c_alt))
            if shown is not None and session.open_quiz is not None and (
                session.open_quiz.image_id == image_id
                and session.open_quiz.c_alt == c_alt
            ):
                return self._faultline_response(session, shown)
            if session.open_quiz is not None:
                raise ServiceError(
                    409, "quiz-open",
                    "answer the open quiz before requesting another fault-line",
                )
            if shown is not None:
                return self._faultline_response(session, shown)

            if (
                session.dialog_state is None
                or session.dialog_state.current_image_id != image_id
            ):
                self._finalize_episode(session)  # abandoning the previous image
                session.dialog_state = DialogState(
                    session_id=session.session_id,
                    current_image_id=image_id,
                    c_pred=c_pred,
                )
            if c_alt in session.dialog_state.exposure:
                raise ServiceError(
                    422, "already-exposed",
                    f"class {c_alt!r} was already shown for this image",
                )

            bundle = self._solve_bundle(image_id, c_alt)
            enc = encode_state(session.dialog_state, self.head.class_labels)
            session.dialog_state.begin_turn(c_alt)
            quiz = self._make_quiz(session, bundle)
            # order: quiz counter already advanced inside _make_quiz
            session.open_quiz = quiz
            session.pending_skeleton = {
                "encoding": enc,
                "prefix": session.prefix + [enc],
                "action": self.head.class_labels.index(c_alt),
            }
            session.prefix = session.prefix + [enc]
            session.shown_bundles[(image_id, c_alt)] = bundle
            self._append(
                session.session_id,
                {
                    "event": "faultline",
                    "image_id": image_id,
                    "c_pred": c_pred,
                    "c_alt": c_alt,
                    "bundle": bundle,
                    "hp_hash": _hp_hash(self.config.solver),
                    "quiz_id": quiz.quiz_id,
                    "prompt": quiz.prompt,
                    "options": quiz.options,
                    "correct_index": quiz.correct_index,
                },
            )
            response = self._faultline_response(session, bundle)
            if idempotency_key:
                session.idempotency[idempotency_key] = response
                self._append(
                    session.session_id,
                    {"event": "idempotent", "key": idempotency_key,
                     "response": response},
                )
            return response

    def _faultline_response(self, session: Session, bundle: dict) -> dict:
        quiz = session.open_quiz
        quiz_doc = None
        if quiz is not None:
            quiz_doc = {
                "quiz_id": quiz.quiz_id,
                "prompt": quiz.prompt,
                "options": quiz.options,
            }
        return {"bundle": bundle, "quiz": quiz_doc}

    def submit_quiz(self, session_id: str, quiz_id: str, answer: int,
                    idempotency_key: str | None = None) -> dict:
        session = self.get_session(session_id)
        with session.lock:
            if idempotency_key and idempotency_key in session.idempotency:
                return session.idempotency[idempotency_key]
            quiz = session.open_quiz
            if quiz is None or quiz.quiz_id != quiz_id:
                answered = any(
                    rec["quiz_id"] == quiz_id for rec in session.quiz_log
                )
                if answered:
                    raise ServiceError(
                        409, "already-answered", f"quiz {quiz_id!r} was already submitted"
                    )
                raise ServiceError(404, "unknown-quiz", f"no open quiz {quiz_id!r}")
            if not 0 <= answer < len(quiz.options):
                raise ServiceError(422, "invalid-answer", "answer index out of range")

            correct = answer == quiz.correct_index
            turn = quiz.turn
            r = reward(correct, turn)
            session.dialog_state.complete_turn(correct)
            session.quiz_log.append(
                {
                    "quiz_id": quiz.quiz_id,
                    "image_id": quiz.image_id,
                    "c_alt": quiz.c_alt,
                    "correct": correct,
                    "reward": r,
                    "turn": turn,
                }
            )
            skeleton = session.pending_skeleton
            session.pending_skeleton = None
            session.open_quiz = None

            next_enc = encode_state(session.dialog_state, self.head.class_labels)
            no_actions = not (
                (next_enc[: self.policy.num_classes] == 0)
                & (next_enc[self.policy.num_classes : 2 * self.policy.num_classes] == 0)
            ).any()
            terminal = correct or no_actions
            if skeleton is not None:
                session.pending.append(
                    Transition(
                        encoding=skeleton["encoding"],
                        prefix=skeleton["prefix"],
                        action=skeleton["action"],
                        reward=r,
                        next_encoding=next_enc,
                        terminal=terminal,
                    )
                )
            if terminal:
                self._finalize_episode(session)

            self._append(
                session.session_id,
                {
                    "event": "quiz",
                    "quiz_id": quiz.quiz_id,
                    "image_id": quiz.image_id,
                    "c_alt": quiz.c_alt,
                    "answer": answer,
                    "correct": correct,
                    "reward": r,
                    "turn": turn,
                },
            )

        update_fired = self._count_interaction()
        if correct:
            next_prompt = "Comprehension reached for this image; pick a new image."
        else:
            next_prompt = "Not quite; request a fault-line for another alternate class."
        response = {
            "correct": correct,
            "reward": r,
            "next_prompt": next_prompt,
            "policy_updated": update_fired,
        }
        if idempotency_key:
            with session.lock:
                session.idempotency[idempotency_key] = response
                self._append(
                    session.session_id,
                    {"event": "idempotent", "key": idempotency_key,
                     "response": response},
                )
        return response

    def _count_interaction(self) -> bool:
        """Policy update fires on every update_every-th interaction."""
        with self.policy_lock:
            self.interactions += 1
            if self.interactions % self.learning.update_every != 0:
                return False
            if len(self.replay) == 0:
                return False
            batch = min(self.learning.batch_size, len(self.replay))
            update_policy(
                self.policy, self.replay, batch, self.learning, self.update_rng
            )
            self.checkpoint_sequence += 1
            save_policy(
                self.policy,
                self.config.checkpoint,
                episodes=0,
                epsilon=0.0,
                sequence=self.checkpoint_sequence,
            )
            return True

    def trust_report(self, session_id: str) -> dict:
        """Per-image trust from the session's quiz outcomes.

        A user who answers an image's final quiz correctly has modeled the
        classifier on that image, so their implied success/failure
        prediction matches the verdict; a wrong answer implies the
        opposite prediction.
        """
        session = self.get_session(session_id)
        with session.lock:
            log = list(session.quiz_log)
        if not log:
            raise ServiceError(
                422, "empty-test-phase", "no answered quizzes in this session"
            )
        final_outcome: dict[str, bool] = {}
        for rec in log:
            final_outcome[rec["image_id"]] = rec["correct"]
        verdicts = {}
        predictions = {}
        for image_id, quiz_correct in final_outcome.items():
            truth = self.dataset.get(image_id).true_class
            verdict = self.predictions[image_id] == truth
            verdicts[image_id] = verdict
            predictions[image_id] = verdict if quiz_correct else not verdict
        return classification_trust_report(verdicts, predictions).to_json()


# --- HTTP layer ---------------------------------------------------------------


class FaultlineRequest(BaseModel):
    image_id: str
    c_alt: str


class QuizRequest(BaseModel):
    answer: int


def create_app(service: ExplanationService, static_dir: str | Path | None = None):
    app = FastAPI(title="faultline dialog service")

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message},
        )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions")
    def create_session():
        return service.create_session()

    @app.get("/images")
    def images():
        return {"images": service.list_images()}

    @app.get("/sessions/{session_id}/images/{image_id}/alts")
    def alts(session_id: str, image_id: str):
        return service.list_candidate_alts(session_id, image_id)

    @app.post("/sessions/{session_id}/faultline")
    async def faultline(session_id: str, body: FaultlineRequest, request: Request):
        return service.get_faultline(
            session_id, body.image_id, body.c_alt,
            idempotency_key=request.headers.get("Idempotency-Key"),
        )

    @app.post("/sessions/{session_id}/quiz/{quiz_id}")
    async def quiz(session_id: str, quiz_id: str, body: QuizRequest,
                   request: Request):
        return service.submit_quiz(
            session_id, quiz_id, body.answer,
            idempotency_key=request.headers.get("Idempotency-Key"),
        )

    @app.get("/sessions/{session_id}/trust")
    def trust(session_id: str):
        return service.trust_report(session_id)

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount(
            "/", StaticFiles(directory=static_dir, html=True), name="ui"
        )

    return app
