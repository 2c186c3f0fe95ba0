import json
import logging
import threading

from fastapi import HTTPException
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session

from app.errors import MalformedTrace, error_response
from app.models import ConsultationTrace
from app.schemas import OrchestrationTrace
from app.trace import trace_from_record, trace_to_record

logger = logging.getLogger(__name__)

# 追蹤寫入需序列化
_write_lock = threading.Lock()


# 追蹤紀錄儲存
def save_trace(db: Session, trace: OrchestrationTrace, failed: bool = False) -> ConsultationTrace:
    if not trace.trace_id:
        raise HTTPException(status_code=500, detail=error_response("MISSING_TRACE_ID", "追蹤紀錄缺少 trace_id"))
    row = ConsultationTrace(
        trace_id=trace.trace_id,
        query_id=trace.query_id,
        terminal_reason=trace.terminal_reason.value if trace.terminal_reason else None,
        iterations_run=trace.iterations_run,
        failed=int(failed),
        payload=json.dumps(trace_to_record(trace), ensure_ascii=False, sort_keys=True),
    )
    with _write_lock:
        try:
            row = db.merge(row)
            db.commit()
        except SQLAlchemyError as e:
            db.rollback()
            logger.error("追蹤紀錄寫入失敗: %s", e)
            raise HTTPException(
                status_code=500,
                detail=error_response("DATABASE_ERROR", f"資料庫操作失敗: {str(e)}")
            )
    return row


# 查詢單一追蹤
def get_trace(db: Session, trace_id: str) -> OrchestrationTrace:
    row = db.query(ConsultationTrace).filter(ConsultationTrace.trace_id == trace_id).first()
    if not row:
        raise HTTPException(
            status_code=404,
            detail=error_response("TRACE_NOT_FOUND", f"追蹤ID:{trace_id}不存在")
        )
    try:
        return trace_from_record(json.loads(row.payload))
    except (json.JSONDecodeError, MalformedTrace) as e:
        raise HTTPException(status_code=500, detail=error_response("MALFORMED_TRACE", str(e)))


# 查詢追蹤清單，新的在前
def list_traces(db: Session, limit: int = 10, offset: int = 0, query_id: str = None):
    query = db.query(ConsultationTrace)
    if query_id:
        query = query.filter(ConsultationTrace.query_id == query_id)
    total = query.count()
    rows = (query.order_by(ConsultationTrace.created_at.desc(), ConsultationTrace.trace_id)
            .offset(offset).limit(limit).all())
    return {"trace": rows, "total": total}
