from sqlalchemy import Column, DateTime, Integer, String, Text
from sqlalchemy.sql import func

from app.database import Base


# 每次諮詢的追蹤紀錄，payload 為 schema_version 1 的 JSON
class ConsultationTrace(Base):
    __tablename__ = "consultation_trace"
    trace_id = Column(String(32), primary_key=True, index=True)
    query_id = Column(String(64), nullable=False, index=True)
    terminal_reason = Column(String(32), nullable=True)
    iterations_run = Column(Integer, nullable=False, default=0)
    failed = Column(Integer, nullable=False, default=0)
    payload = Column(Text, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now(), index=True)
