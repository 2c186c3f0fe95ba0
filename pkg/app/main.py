import asyncio
import logging
import threading
import uuid
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse
from sqlalchemy.orm import Session

from app.config import AppConfig, load_config, setup_logging
from app.crud import get_trace, list_traces, save_trace
from app.database import configure_database, get_db
from app.errors import ConsultationFailed, error_response
from app.llm import make_backend_factory
from app.orchestrator import assign_trace_id, consult
from app.schemas import (
    ConsultationQuery, ConsultRequest, ConsultResponse, HealthResponse, LegalBasisItem, OrchestrationTrace,
    TraceListResponse, TraceSummary,
)
from app.statute_index import StatuteIndex, open_index
from app.trace import append_trace_jsonl, trace_to_record

logger = logging.getLogger(__name__)

# 關機時等待進行中請求的秒數
DRAIN_GRACE_S = 30.0
_trace_file_lock = threading.Lock()


@asynccontextmanager
async def lifespan(app: FastAPI):
    cfg = load_config()
    setup_logging(cfg.log_level)
    configure_database(cfg.database_url, echo=cfg.debug)
    app.state.config = cfg
    app.state.index = await asyncio.to_thread(open_index, cfg.corpus_path, cfg.index_cache_path)
    app.state.backend_factory = make_backend_factory(cfg.backend, test_mode=cfg.test_mode)
    app.state.in_flight = 0
    app.state.draining = False
    logger.info("服務啟動: %s:%d, 後端 %s", cfg.bind_host, cfg.bind_port, cfg.backend.kind)
    yield
    app.state.draining = True
    waited = 0.0
    while app.state.in_flight > 0 and waited < DRAIN_GRACE_S:
        await asyncio.sleep(0.05)
        waited += 0.05
    logger.info("服務關閉，未完成請求 %d", app.state.in_flight)


app = FastAPI(title="Legal Consultation Service", lifespan=lifespan)


# 未就緒或關機中一律回 503
@app.middleware("http")
async def track_in_flight(request: Request, call_next):
    state = request.app.state
    if getattr(state, "draining", False):
        return JSONResponse(status_code=503, content={"detail": error_response("SHUTTING_DOWN", "服務正在關閉")})
    if getattr(state, "index", None) is None:
        return JSONResponse(status_code=503, content={"detail": error_response("NOT_READY", "服務尚未就緒")})
    state.in_flight += 1
    try:
        return await call_next(request)
    finally:
        state.in_flight -= 1


def get_app_config(request: Request) -> AppConfig:
    return request.app.state.config


async def get_index(request: Request) -> StatuteIndex:
    return request.app.state.index


def get_backend_factory(request: Request):
    return request.app.state.backend_factory


# 先寫入追蹤再回應
def persist_trace(db: Session, cfg: AppConfig, trace: OrchestrationTrace, failed: bool = False) -> None:
    save_trace(db, trace, failed=failed)
    if cfg.trace_dir:
        with _trace_file_lock:
            Path(cfg.trace_dir).mkdir(parents=True, exist_ok=True)
            append_trace_jsonl(trace, Path(cfg.trace_dir) / "traces.jsonl")


# 法律諮詢
@app.post("/consult", response_model=ConsultResponse)
def consult_api(
    request: ConsultRequest,
    db: Session = Depends(get_db),
    cfg: AppConfig = Depends(get_app_config),
    index: StatuteIndex = Depends(get_index),
    backend_factory=Depends(get_backend_factory),
):
    if not request.question or not request.question.strip():
        raise HTTPException(status_code=400, detail=error_response("EMPTY_QUERY", "問題不能為空"))
    q = ConsultationQuery(id=uuid.uuid4().hex, text=request.question, metadata=request.metadata)
    try:
        opinion, trace = consult(q, cfg.orchestrator, backend_factory(), index, prompt_dir=cfg.prompt_dir)
    except ConsultationFailed as e:
        trace = assign_trace_id(e.trace, q, cfg.orchestrator)
        persist_trace(db, cfg, trace, failed=True)
        raise HTTPException(
            status_code=502,
            detail=error_response(e.cause.error_code, e.message, trace_id=trace.trace_id)
        )
    trace = assign_trace_id(trace, q, cfg.orchestrator)
    persist_trace(db, cfg, trace)
    return ConsultResponse(
        success=True,
        response=opinion.response,
        legal_basis=[LegalBasisItem(**c.model_dump()) for c in opinion.legal_basis],
        trace_id=trace.trace_id,
    )


# 查詢單一追蹤
@app.get("/trace/{trace_id}")
def read_trace(trace_id: str, db: Session = Depends(get_db)):
    return trace_to_record(get_trace(db, trace_id))


# 查詢追蹤清單
@app.get("/traces", response_model=TraceListResponse)
def list_trace(
    query_id: Optional[str] = Query(None),
    limit: int = Query(10, ge=1, le=100),
    offset: int = Query(0, ge=0),
    db: Session = Depends(get_db),
):
    result = list_traces(db, limit, offset, query_id)
    return TraceListResponse(
        success=True,
        trace=[TraceSummary.model_validate(row) for row in result["trace"]],
        total=result["total"]
    )


# 只讀 app.state，不進執行緒池
@app.get("/healthz", response_model=HealthResponse)
async def healthz(index: StatuteIndex = Depends(get_index)):
    return HealthResponse(status="ok", index_doc_count=index.doc_count)
