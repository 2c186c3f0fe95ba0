import hashlib
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

from app.errors import LegalConsultError, MalformedTrace
from app.schemas import ChatMessage, OrchestrationTrace, TerminalReason, TraceStep

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1


def digest(text: str) -> str:
    return hashlib.sha256((text or "").encode("utf-8")).hexdigest()[:16]


def compute_trace_id(query_id: str, query_text: str, config_digest: str, timestamp: str) -> str:
    h = hashlib.sha256()
    for part in (query_id, query_text, config_digest, timestamp):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:32]


class StepBuilder:
    def __init__(self, backend=None):
        self.backend = backend
        self.output_text = ""
        self.attempts = 0
        self.decision: Optional[str] = None
        self.warnings: List[str] = []

    # 每次成功取得模型回覆就累計一次
    def ask(self, messages: List[ChatMessage], role: str, temperature=None, max_tokens=None) -> str:
        reply = self.backend.complete(messages, role=role, temperature=temperature, max_tokens=max_tokens)
        self.attempts += 1
        return reply

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)


# 單次諮詢中每個代理呼叫記錄一個步驟
class TraceRecorder:
    def __init__(self, query_id: str, store_raw: bool = False, test_mode: bool = False):
        self.query_id = query_id
        self.store_raw = store_raw
        self.test_mode = test_mode
        self.steps: List[TraceStep] = []

    @contextmanager
    def step(self, agent_role: str, action: str, input_text: str, backend=None):
        builder = StepBuilder(backend)
        started = time.perf_counter()
        error = None
        try:
            yield builder
        except LegalConsultError as e:
            error = e.error_code
            raise
        finally:
            duration = 0.0 if self.test_mode else (time.perf_counter() - started) * 1000
            self.steps.append(TraceStep(
                step_index=len(self.steps),
                agent_role=agent_role,
                action=action,
                decision=builder.decision,
                input_digest=digest(input_text),
                output_digest=digest(builder.output_text),
                duration_ms=duration,
                attempts=builder.attempts,
                warnings=list(builder.warnings),
                error=error,
                raw_input=input_text if self.store_raw else None,
                raw_output=builder.output_text if self.store_raw else None,
            ))

    def build(self, iterations_run: int = 0, terminal_reason: Optional[TerminalReason] = None,
              trace_id: Optional[str] = None) -> OrchestrationTrace:
        return OrchestrationTrace(
            query_id=self.query_id,
            steps=list(self.steps),
            iterations_run=iterations_run,
            terminal_reason=terminal_reason,
            trace_id=trace_id,
        )


def backend_call_sequence(trace: OrchestrationTrace) -> List[str]:
    roles = []
    for step in trace.steps:
        roles.extend([step.agent_role] * step.attempts)
    return roles


# 以固定格式輸出追蹤紀錄
def replay_trace(trace: OrchestrationTrace) -> str:
    if not trace.steps:
        raise MalformedTrace("追蹤紀錄沒有任何步驟")
    reason = trace.terminal_reason.value if trace.terminal_reason else "-"
    lines = [
        f"trace {trace.trace_id or '-'} query {trace.query_id}",
        f"iterations_run={trace.iterations_run} terminal_reason={reason}",
    ]
    for step in trace.steps:
        line = (f"#{step.step_index:<3} {step.agent_role:<14} {step.action:<12} "
                f"in={step.input_digest} out={step.output_digest} "
                f"{step.duration_ms:.1f}ms attempts={step.attempts}")
        if step.decision:
            line += f" decision={step.decision}"
        if step.error:
            line += f" error={step.error}"
        lines.append(line)
        for warning in step.warnings:
            lines.append(f"     warning: {warning}")
    return "\n".join(lines) + "\n"


def trace_to_record(trace: OrchestrationTrace) -> dict:
    return {"schema_version": TRACE_SCHEMA_VERSION, **trace.model_dump(mode="json")}


def trace_from_record(record: dict) -> OrchestrationTrace:
    record = dict(record)
    version = record.pop("schema_version", TRACE_SCHEMA_VERSION)
    if version != TRACE_SCHEMA_VERSION:
        raise MalformedTrace(f"不支援的追蹤版本: {version}")
    try:
        return OrchestrationTrace.model_validate(record)
    except ValueError as e:
        raise MalformedTrace(str(e))


def append_trace_jsonl(trace: OrchestrationTrace, path) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(trace_to_record(trace), ensure_ascii=False, sort_keys=True) + "\n")


def read_traces_jsonl(path) -> List[OrchestrationTrace]:
    traces = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            try:
                traces.append(trace_from_record(json.loads(line)))
            except json.JSONDecodeError as e:
                raise MalformedTrace(f"追蹤檔格式錯誤: {e}")
    return traces
