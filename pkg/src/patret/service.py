"""HTTP facade: search, record lookup, and blind A/B study logging.

Two retrieval configurations load side by side as opaque variants "A"
and "B".  Which configuration backs which letter lives only in the
server config; no response ever carries that mapping, and study clients
never see even the letter (the server resolves it from the participant
and task).  Session submissions append to a durable JSONL log that is
replayed on restart, so the study report is reproducible from disk.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
from dataclasses import asdict, dataclass
from datetime import date, datetime
from math import fsum
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from .config import ServiceConfig
from .enrichment import EnrichmentCache
from .index import TemporalIndex, load_embeddings, load_index, query_topk
from .metrics import PairedSamples, paired_t_test
from .records import Corpus, ingest_metadata

VARIANTS = ("A", "B")
TIMER_TOLERANCE_SECONDS = 2.0


class DuplicateSessionError(ValueError):
    pass


@dataclass(frozen=True)
class SessionLog:
    """One completed study task: who, what, rating, and timing.

    requery_count and timer_restarted are client-reported context (how
    many times the task re-queried; whether the timer restarted after a
    reload); the report ignores them but they stay in the durable log
    for analysis.
    """

    session_id: str
    participant_id: str
    task_id: str
    variant: str
    satisfaction: int
    duration_seconds: float
    started_at: str
    submitted_at: str
    requery_count: int = 0
    timer_restarted: bool = False

    def __post_init__(self):
        if self.satisfaction not in (1, 2, 3, 4, 5):
            raise ValueError(f"satisfaction must be 1..5, got {self.satisfaction}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        started = parse_timestamp(self.started_at)
        submitted = parse_timestamp(self.submitted_at)
        if submitted < started:
            raise ValueError("submitted_at precedes started_at")
        wall = (submitted - started).total_seconds()
        if abs(wall - self.duration_seconds) > TIMER_TOLERANCE_SECONDS:
            raise ValueError(
                f"duration {self.duration_seconds:.1f}s disagrees with timestamps "
                f"({wall:.1f}s) beyond {TIMER_TOLERANCE_SECONDS:.0f}s"
            )

    def public_dict(self) -> dict:
        d = asdict(self)
        d.pop("variant")  # responses stay blind
        return d


def parse_timestamp(value: str) -> datetime:
    try:
        return datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValueError(f"unparseable timestamp {value!r}") from exc


class VariantAssignment:
    """Deterministic, per-participant balanced task-to-variant mapping.

    Each participant's configured task list is shuffled with a seed
    derived from (study seed, participant); the first half maps to A,
    the rest to B.  Tasks outside the configured list fall back to a
    hash-based coin flip.
    """

    def __init__(self, seed: int, task_ids):
        self.seed = seed
        self.task_ids = [str(t) for t in task_ids]

    def _shuffled(self, participant_id: str) -> list:
        digest = hashlib.sha256(f"{self.seed}:{participant_id}".encode()).digest()
        rng = random.Random(int.from_bytes(digest[:8], "little"))
        order = sorted(self.task_ids)
        rng.shuffle(order)
        return order

    def task_order(self, participant_id: str) -> list:
        return self._shuffled(participant_id)

    def variant_for(self, participant_id: str, task_id: str) -> str:
        order = self._shuffled(participant_id)
        if task_id in order:
            half = len(order) // 2
            return "A" if order.index(task_id) < half else "B"
        digest = hashlib.sha256(
            f"{self.seed}:{participant_id}:{task_id}".encode()
        ).digest()
        return VARIANTS[digest[0] % 2]


class SessionStore:
    """Append-only JSONL session log with atomic duplicate detection."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._sessions: list = []
        self._keys: set = set()
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._admit(SessionLog(**json.loads(line)), persist=False)

    def _admit(self, log: SessionLog, persist: bool) -> None:
        key = (log.participant_id, log.task_id)
        if key in self._keys:
            raise DuplicateSessionError(
                f"session for participant {log.participant_id!r} task {log.task_id!r} "
                "already recorded"
            )
        if persist:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(log), separators=(",", ":")) + "\n")
                fh.flush()
        self._keys.add(key)
        self._sessions.append(log)

    def append(self, log: SessionLog) -> None:
        with self._lock:
            self._admit(log, persist=True)

    def all(self) -> list:
        with self._lock:
            return list(self._sessions)

    def task_ids_for(self, participant_id: str) -> list:
        with self._lock:
            return sorted(
                s.task_id for s in self._sessions if s.participant_id == participant_id
            )


def load_sessions(path) -> list:
    """Read a session JSONL log (the on-disk format of SessionStore)."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(SessionLog(**json.loads(line)))
    return out


def study_report(sessions) -> dict:
    """Per-variant means and paired t-tests over participant means.

    Raises ValueError("incomplete pairs...") when a participant lacks a
    variant, and ValueError("degenerate differences...") on
    zero-variance paired data.
    """
    by_participant: dict = {}
    for s in sessions:
        by_participant.setdefault(s.participant_id, {"A": [], "B": []})[s.variant].append(s)
    if not by_participant:
        raise ValueError("incomplete pairs: no sessions logged")
    incomplete = [p for p, v in by_participant.items() if not v["A"] or not v["B"]]
    if incomplete:
        raise ValueError(
            "incomplete pairs: participants missing a variant: "
            + ", ".join(sorted(incomplete))
        )
    if len(by_participant) < 2:
        raise ValueError("incomplete pairs: need at least 2 participants for the t-test")

    def participant_means(extract) -> list:
        pairs = []
        for pid in sorted(by_participant):
            v = by_participant[pid]
            pairs.append(
                (
                    fsum(extract(s) for s in v["A"]) / len(v["A"]),
                    fsum(extract(s) for s in v["B"]) / len(v["B"]),
                )
            )
        return pairs

    out: dict = {
        "participants": len(by_participant),
        "session_counts": {
            "A": sum(1 for s in sessions if s.variant == "A"),
            "B": sum(1 for s in sessions if s.variant == "B"),
        },
    }
    for metric, extract in (
        ("satisfaction", lambda s: float(s.satisfaction)),
        ("duration_seconds", lambda s: s.duration_seconds),
    ):
        pairs = participant_means(extract)
        try:
            test = paired_t_test(PairedSamples(pairs=tuple(pairs)))
        except ValueError as exc:
            raise ValueError(f"{exc} (metric: {metric})") from exc
        out[metric] = {
            "mean_A": fsum(a for a, _ in pairs) / len(pairs),
            "mean_B": fsum(b for _, b in pairs) / len(pairs),
            "t": test.t,
            "df": test.df,
            "p_two_tailed": test.p_two_tailed,
        }
    return out


class ServiceState:
    """Loaded indexes, corpus metadata, and study machinery."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        corpus: Corpus = ingest_metadata(config.metadata)
        self.records = corpus.by_id()
        self.indexes: dict = {}
        self.query_vectors: dict = {}
        for name, variant in config.variants.items():
            self.indexes[name] = load_index(variant.index)
            vectors: dict = {}
            if variant.query_embeddings:
                matrix, metadata = load_embeddings(variant.query_embeddings)
                for row, meta in enumerate(metadata):
                    vectors[meta[0]] = matrix[row]
            self.query_vectors[name] = vectors
        self.texts_by_record: dict = {}
        if config.enrichment_cache:
            self.texts_by_record = EnrichmentCache(config.enrichment_cache).texts_by_record()
        self.assignment = VariantAssignment(
            config.assignment_seed, [t[0] for t in config.study_tasks]
        )
        self.store = SessionStore(config.sessions_log)

    def vector_for(self, variant: str, record_id: str) -> Optional[np.ndarray]:
        vec = self.query_vectors.get(variant, {}).get(record_id)
        if vec is not None:
            return vec
        index = self.indexes[variant]
        row = index.row_of(record_id)
        return index.vectors64[row] if row is not None else None


class QueryRequest(BaseModel):
    record_id: Optional[str] = None
    vector: Optional[list] = None
    cutoff_date: Optional[str] = None
    k: int = 10
    variant: Optional[str] = None
    participant_id: Optional[str] = None
    task_id: Optional[str] = None
    exclude_same_patent: bool = False


class SessionRequest(BaseModel):
    participant_id: str = Field(min_length=1)
    task_id: str = Field(min_length=1)
    satisfaction: int
    started_at: str
    submitted_at: str
    duration_seconds: Optional[float] = None
    requery_count: int = 0
    timer_restarted: bool = False


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="patret retrieval service")

    if state.config.cors_origin:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware,
            allow_origins=[state.config.cors_origin],
            allow_methods=["*"],
            allow_headers=["*"],
        )

    def check_auth(request: Request) -> None:
        env = state.config.bearer_token_env
        if not env:
            return
        import os

        expected = os.environ.get(env, "")
        if not expected:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {expected}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    auth = Depends(check_auth)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "records": len(state.records)}

    @app.get("/records/{record_id}", dependencies=[auth])
    def get_record(record_id: str):
        rec = state.records.get(record_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown record {record_id!r}")
        body = rec.to_json_dict()
        body["texts"] = state.texts_by_record.get(record_id, [])
        body["image_url"] = f"/images/{record_id}"
        return body

    def resolve_variant(req: QueryRequest) -> str:
        by_study = req.participant_id is not None and req.task_id is not None
        if req.variant is not None and by_study:
            raise HTTPException(
                status_code=400,
                detail="pass either variant or participant_id+task_id, not both",
            )
        if req.variant is not None:
            if req.variant not in state.indexes:
                raise HTTPException(status_code=400, detail=f"unknown variant {req.variant!r}")
            return req.variant
        if by_study:
            return state.assignment.variant_for(req.participant_id, req.task_id)
        return "A"

    @app.post("/query", dependencies=[auth])
    def post_query(req: QueryRequest):
        if (req.record_id is None) == (req.vector is None):
            raise HTTPException(
                status_code=400, detail="provide exactly one of record_id or vector"
            )
        if req.k < 1 or req.k > state.config.k_cap:
            raise HTTPException(
                status_code=400, detail=f"k must be in [1, {state.config.k_cap}]"
            )
        variant = resolve_variant(req)
        index: TemporalIndex = state.indexes[variant]

        query_class = None
        exclude_patent = None
        if req.record_id is not None:
            rec = state.records.get(req.record_id)
            if rec is None:
                raise HTTPException(status_code=404, detail=f"unknown record {req.record_id!r}")
            vec = state.vector_for(variant, req.record_id)
            if vec is None:
                raise HTTPException(
                    status_code=422,
                    detail=f"no embedding available for record {req.record_id!r}",
                )
            cutoff = date.fromisoformat(req.cutoff_date) if req.cutoff_date else rec.grant_date
            query_class = rec.class_id
            if req.exclude_same_patent:
                exclude_patent = rec.patent_id
        else:
            if req.cutoff_date is None:
                raise HTTPException(
                    status_code=400, detail="cutoff_date is required for vector queries"
                )
            vec = np.asarray(req.vector, dtype=np.float64)
            if vec.ndim != 1 or vec.shape[0] != index.dim:
                raise HTTPException(
                    status_code=422,
                    detail=f"vector dim {vec.shape} does not match index dim {index.dim}",
                )
            cutoff = date.fromisoformat(req.cutoff_date)

        result = query_topk(
            index,
            vec,
            cutoff_date=cutoff,
            k=req.k,
            exclude_patent=exclude_patent,
            exclude_record=req.record_id,
            query_record_id=req.record_id,
        )
        return {
            "query_record_id": req.record_id,
            "cutoff_date": cutoff.isoformat(),
            "k": req.k,
            "hits": [
                {
                    "record_id": h.record_id,
                    "score": h.score,
                    "class_id": h.class_id,
                    "patent_id": h.patent_id,
                    "grant_date": h.grant_date.isoformat(),
                    "class_match": (h.class_id == query_class) if query_class else None,
                }
                for h in result.hits
            ],
        }

    @app.get("/images/{record_id}", dependencies=[auth])
    def get_image(record_id: str):
        root = state.config.static_image_root
        if not root:
            raise HTTPException(status_code=404, detail="no static image root configured")
        for ext in (".png", ".pgm", ".jpg"):
            candidate = Path(root) / f"{record_id}{ext}"
            if candidate.exists():
                return FileResponse(candidate)
        raise HTTPException(status_code=404, detail=f"no image for record {record_id!r}")

    @app.get("/study/tasks", dependencies=[auth])
    def get_tasks(participant_id: str):
        by_id = dict(state.config.study_tasks)
        order = state.assignment.task_order(participant_id)
        return {
            "participant_id": participant_id,
            "tasks": [{"task_id": t, "record_id": by_id[t]} for t in order],
        }

    @app.get("/study/progress", dependencies=[auth])
    def get_progress(participant_id: str):
        # lets an interrupted client resume: everything but the running
        # timer is recoverable server-side
        return {
            "participant_id": participant_id,
            "submitted_task_ids": state.store.task_ids_for(participant_id),
        }

    @app.post("/sessions", status_code=201, dependencies=[auth])
    def post_session(req: SessionRequest):
        try:
            started = parse_timestamp(req.started_at)
            submitted = parse_timestamp(req.submitted_at)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        wall = (submitted - started).total_seconds()
        duration = req.duration_seconds if req.duration_seconds is not None else wall
        variant = state.assignment.variant_for(req.participant_id, req.task_id)
        sid = hashlib.sha256(
            f"{req.participant_id}:{req.task_id}".encode()
        ).hexdigest()[:12]
        try:
            log = SessionLog(
                session_id=f"s-{sid}",
                participant_id=req.participant_id,
                task_id=req.task_id,
                variant=variant,
                satisfaction=req.satisfaction,
                duration_seconds=float(duration),
                started_at=req.started_at,
                submitted_at=req.submitted_at,
                requery_count=req.requery_count,
                timer_restarted=req.timer_restarted,
            )
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        try:
            state.store.append(log)
        except DuplicateSessionError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return log.public_dict()

    @app.get("/study/report", dependencies=[auth])
    def get_report():
        try:
            return study_report(state.store.all())
        except ValueError as exc:
            message = str(exc)
            status = 409 if message.startswith("incomplete pairs") else 422
            raise HTTPException(status_code=status, detail=message)

    return app


def create_app_from_config(config: ServiceConfig) -> FastAPI:
    return create_app(ServiceState(config))
