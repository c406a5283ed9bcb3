"""HTTP session service: the closed loop exposed as a stateful dialogue.

Each session owns a private copy of the student's ability vector; the loaded
model and dataset are immutable shared state. Sessions persist as one JSON
file apiece (atomic write-rename), so a process restart replays the same
item sequence for the same responses and seed.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from scipy.special import expit

from .diagnosis import NcdModel, q_mask_array
from .feedback import (
    FeedbackContext,
    ProviderConfig,
    build_prompt,
    generate_feedback,
    report_document,
)
from .ingest import DataBundle
from .selection import (
    SelectionState,
    create_selection_state,
    record_response,
    select_next,
    trace_jsonl,
    weight_matrix,
)


@dataclass
class SelectionDefaults:
    budget: int = 10
    lambda_mix: float = 0.5
    n_samples: int = 16
    threshold: float = 0.6
    ability_lr: float = 1.0
    max_pool: int = 512

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "lambda_mix": self.lambda_mix,
            "n_samples": self.n_samples,
            "threshold": self.threshold,
            "ability_lr": self.ability_lr,
            "max_pool": self.max_pool,
        }


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class Session:
    session_id: str
    student_ref: str              # raw student id or "fresh"
    seed: int
    budget: int
    lambda_mix: float
    threshold: float
    n_samples: int
    ability_lr: float
    state: SelectionState
    pending_item: int | None = None
    status: str = "active"
    created_at: str = field(default_factory=_now)
    updated_at: str = field(default_factory=_now)
    feedback_cache: dict | None = None

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "student_ref": self.student_ref,
            "seed": self.seed,
            "budget": self.budget,
            "lambda_mix": self.lambda_mix,
            "threshold": self.threshold,
            "n_samples": self.n_samples,
            "ability_lr": self.ability_lr,
            "candidate_ids": list(self.state.candidate_ids),
            "selected": list(self.state.selected),
            "responses": [list(r) for r in self.state.responses],
            "trace": self.state.trace,
            "theta_initial": self.state.student_snapshot.tolist(),
            "theta": self.state.theta.tolist(),
            "pending_item": self.pending_item,
            "status": self.status,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "feedback_cache": self.feedback_cache,
        }

    @classmethod
    def from_json(cls, doc: dict, model: NcdModel, q_mask: np.ndarray) -> "Session":
        """Rebuild a persisted session; the weight matrix is re-estimated
        deterministically from the stored snapshot, pool, and seed."""
        theta_initial = np.array(doc["theta_initial"], dtype=np.float64)
        candidates = [int(q) for q in doc["candidate_ids"]]
        weight = None
        if doc["budget"] > 0 and candidates:
            weight = weight_matrix(model, theta_initial, candidates, q_mask,
                                   n_samples=doc["n_samples"], seed=doc["seed"])
        state = SelectionState(
            student_snapshot=theta_initial,
            theta=np.array(doc["theta"], dtype=np.float64),
            candidate_ids=candidates,
            weight=weight,
            budget=doc["budget"],
            lambda_mix=doc["lambda_mix"],
            ability_lr=doc["ability_lr"],
            seed=doc["seed"],
            selected=[int(q) for q in doc["selected"]],
            responses=[(int(q), int(c)) for q, c in doc["responses"]],
            trace=doc.get("trace", []),
        )
        return cls(
            session_id=doc["session_id"],
            student_ref=doc["student_ref"],
            seed=doc["seed"],
            budget=doc["budget"],
            lambda_mix=doc["lambda_mix"],
            threshold=doc["threshold"],
            n_samples=doc["n_samples"],
            ability_lr=doc["ability_lr"],
            state=state,
            pending_item=doc["pending_item"],
            status=doc["status"],
            created_at=doc["created_at"],
            updated_at=doc["updated_at"],
            feedback_cache=doc.get("feedback_cache"),
        )


class SessionStore:
    """One JSON document per session, written atomically."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._meta = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._cache: dict[str, Session] = {}

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._meta:
            return self._locks.setdefault(session_id, threading.Lock())

    def path_for(self, session_id: str) -> Path:
        return self.directory / f"{session_id}.json"

    def save(self, session: Session) -> None:
        session.updated_at = _now()
        path = self.path_for(session.session_id)
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(session.to_json(), fh)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        if session.state.trace:
            trace_path = self.directory / f"{session.session_id}.trace.jsonl"
            with open(trace_path, "w") as fh:
                fh.write(trace_jsonl(session.state) + "\n")
        self._cache[session.session_id] = session

    def load(self, session_id: str, model: NcdModel, q_mask: np.ndarray) -> Session:
        if session_id in self._cache:
            return self._cache[session_id]
        path = self.path_for(session_id)
        if not path.exists():
            raise ApiError(404, "not_found", f"unknown session {session_id}")
        with open(path) as fh:
            session = Session.from_json(json.load(fh), model, q_mask)
        self._cache[session_id] = session
        return session

    def forget(self) -> None:
        """Drop in-memory caches (used by tests to simulate a restart)."""
        with self._meta:
            self._cache.clear()
            self._locks.clear()


def create_app(model: NcdModel | None, bundle: DataBundle | None,
               sessions_dir: str | Path,
               provider: ProviderConfig | None = None,
               defaults: SelectionDefaults | None = None,
               cors_origins: list[str] | None = None) -> FastAPI:
    app = FastAPI(title="learnloop session service")
    provider = provider or ProviderConfig()
    defaults = defaults or SelectionDefaults()
    store = SessionStore(sessions_dir)
    app.state.store = store
    app.state.model = model
    app.state.bundle = bundle

    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_origins or ["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    q_mask = None
    if model is not None and bundle is not None:
        q_mask = q_mask_array(bundle.q_matrix, model.d)

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def handle_validation(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"code": "bad_request", "message": str(exc)})

    def require_loaded():
        if model is None or bundle is None:
            raise ApiError(503, "model_not_loaded",
                           "no trained model is loaded")

    def mastery_payload(theta: np.ndarray) -> list[dict]:
        values = expit(theta)
        maps = bundle.id_maps
        return [
            {"skill_id": maps.raw_knowledge(k), "name": maps.knowledge_names[k],
             "value": float(values[k])}
            for k in range(model.d)
        ]

    def summary(session: Session) -> dict:
        return {
            "session_id": session.session_id,
            "student_id": session.student_ref,
            "status": session.status,
            "budget": session.budget,
            "step": len(session.state.selected),
            "steps_remaining": session.budget - len(session.state.selected),
            "pending_item": (bundle.id_maps.raw_item(session.pending_item)
                             if session.pending_item is not None else None),
            "created_at": session.created_at,
            "updated_at": session.updated_at,
        }

    def locked(session_id: str):
        return store.lock_for(session_id)

    @app.get("/api/health")
    def health():
        return {"status": "ok", "model_loaded": model is not None}

    @app.post("/api/sessions", status_code=201)
    async def create_session(request: Request):
        require_loaded()
        payload = await request.json() if await request.body() else {}
        student = payload.get("student_id", "fresh")
        if student in (None, "", "fresh"):
            student_ref = "fresh"
            theta0 = np.zeros(model.d)
        else:
            student_ref = str(student)
            if student_ref not in bundle.id_maps.student_map:
                raise ApiError(404, "not_found",
                               f"unknown student {student_ref}")
            theta0 = model.theta[bundle.id_maps.student_map[student_ref]].copy()

        budget = int(payload.get("budget", defaults.budget))
        if budget < 0:
            raise ApiError(400, "bad_request", "budget must be >= 0")
        lambda_mix = float(payload.get("lambda_mix", defaults.lambda_mix))
        if not (0.0 <= lambda_mix <= 1.0):
            raise ApiError(400, "bad_request", "lambda_mix must be in [0,1]")
        threshold = float(payload.get("threshold", defaults.threshold))
        seed = int(payload.get("seed", np.random.SeedSequence().entropy % (2 ** 31)))

        state = create_selection_state(
            model, theta0, bundle.q_matrix, q_mask, bundle.graph,
            budget=budget, lambda_mix=lambda_mix, threshold=threshold,
            n_samples=defaults.n_samples, ability_lr=defaults.ability_lr,
            seed=seed, max_pool=defaults.max_pool)
        # a session can never serve more items than the candidate pool holds
        if state.budget > len(state.candidate_ids):
            state.budget = len(state.candidate_ids)
            budget = state.budget
        session = Session(
            session_id=uuid.uuid4().hex,
            student_ref=student_ref,
            seed=seed,
            budget=budget,
            lambda_mix=lambda_mix,
            threshold=threshold,
            n_samples=defaults.n_samples,
            ability_lr=defaults.ability_lr,
            state=state,
            status="finished" if budget == 0 else "active",
        )
        with locked(session.session_id):
            store.save(session)
        return {**summary(session), "mastery": mastery_payload(state.theta)}

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str):
        require_loaded()
        with locked(session_id):
            session = store.load(session_id, model, q_mask)
            return summary(session)

    @app.post("/api/sessions/{session_id}/next")
    def next_item(session_id: str):
        require_loaded()
        with locked(session_id):
            session = store.load(session_id, model, q_mask)
            if session.status == "finished":
                raise ApiError(409, "finished", "session is finished")
            if session.pending_item is not None:
                raise ApiError(409, "conflict",
                               "an unanswered item is outstanding")
            item = select_next(session.state, model, q_mask)
            session.pending_item = item
            store.save(session)
            maps = bundle.id_maps
            return {
                "item_id": maps.raw_item(item),
                "text": maps.item_texts[item],
                "knowledge": [maps.knowledge_names[k]
                              for k in sorted(bundle.q_matrix.rows[item])],
                "step": len(session.state.selected),
                "steps_remaining": session.budget - len(session.state.selected),
            }

    @app.post("/api/sessions/{session_id}/responses")
    async def submit_response(session_id: str, request: Request):
        require_loaded()
        payload = await request.json()
        if payload.get("correct") not in (0, 1, True, False):
            raise ApiError(400, "bad_request", "correct must be 0 or 1")
        correct = int(payload["correct"])
        raw_item = str(payload.get("item_id", ""))
        with locked(session_id):
            session = store.load(session_id, model, q_mask)
            if session.pending_item is None:
                raise ApiError(409, "conflict", "no outstanding item to answer")
            maps = bundle.id_maps
            if raw_item not in maps.item_map or \
                    maps.item_map[raw_item] != session.pending_item:
                raise ApiError(409, "conflict",
                               f"item {raw_item} is not the outstanding item")
            item = session.pending_item
            before = expit(session.state.theta)
            record_response(session.state, model, q_mask, item, correct)
            after = expit(session.state.theta)
            session.pending_item = None
            if len(session.state.selected) >= session.budget:
                session.status = "finished"
            store.save(session)
            deltas = [
                {"skill_id": maps.raw_knowledge(k),
                 "name": maps.knowledge_names[k],
                 "before": float(before[k]), "after": float(after[k])}
                for k in sorted(bundle.q_matrix.rows[item])
            ]
            return {
                "mastery_deltas": deltas,
                "steps_remaining": session.budget - len(session.state.selected),
                "status": session.status,
            }

    @app.get("/api/sessions/{session_id}/mastery")
    def get_mastery(session_id: str):
        require_loaded()
        with locked(session_id):
            session = store.load(session_id, model, q_mask)
            return {"session_id": session_id,
                    "mastery": mastery_payload(session.state.theta)}

    @app.post("/api/sessions/{session_id}/feedback")
    def get_feedback(session_id: str):
        require_loaded()
        with locked(session_id):
            session = store.load(session_id, model, q_mask)
            n_responses = len(session.state.responses)
            if session.feedback_cache and \
                    session.feedback_cache.get("n_responses") == n_responses:
                return session.feedback_cache["document"]
            maps = bundle.id_maps
            context = FeedbackContext(
                mastery_row=expit(session.state.theta),
                knowledge_names=list(maps.knowledge_names),
                recommended=list(session.state.selected),
                item_texts=list(maps.item_texts),
                q_matrix=bundle.q_matrix,
            )
            report = generate_feedback(build_prompt(context), provider, context)
            document = report_document(
                report, session.student_ref,
                [maps.raw_item(q) for q in session.state.selected], _now())
            document["session_id"] = session_id
            session.feedback_cache = {"n_responses": n_responses,
                                      "document": document}
            store.save(session)
            return document

    @app.get("/api/items/{raw_item_id}")
    def get_item(raw_item_id: str):
        require_loaded()
        maps = bundle.id_maps
        if raw_item_id not in maps.item_map:
            raise ApiError(404, "not_found", f"unknown item {raw_item_id}")
        item = maps.item_map[raw_item_id]
        return {
            "item_id": raw_item_id,
            "text": maps.item_texts[item],
            "knowledge": [
                {"skill_id": maps.raw_knowledge(k), "name": maps.knowledge_names[k]}
                for k in sorted(bundle.q_matrix.rows[item])
            ],
        }

    return app
