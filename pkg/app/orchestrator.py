import hashlib
import logging
import time
from datetime import datetime, timezone
from typing import Callable, Optional, Tuple

from app import agents
from app.config import OrchestratorConfig
from app.errors import ConsultationFailed, ConsultationTimeout, LegalConsultError
from app.graph import encode_prompt, validate_query
from app.schemas import (
    ConsultationQuery, DecisionKind, ElementGraph, LegalOpinion, OrchestrationTrace, TerminalReason,
)
from app.statute_index import StatuteIndex
from app.trace import TraceRecorder, compute_trace_id

logger = logging.getLogger(__name__)

FROZEN_TIMESTAMP = "1970-01-01T00:00:00+00:00"


def config_digest(cfg: OrchestratorConfig) -> str:
    return hashlib.sha256(cfg.model_dump_json().encode("utf-8")).hexdigest()[:16]


def _now(cfg: OrchestratorConfig) -> str:
    return FROZEN_TIMESTAMP if cfg.test_mode else datetime.now(timezone.utc).isoformat()


def assign_trace_id(trace: OrchestrationTrace, q: ConsultationQuery, cfg: OrchestratorConfig) -> OrchestrationTrace:
    trace_id = compute_trace_id(q.id, q.text, config_digest(cfg), _now(cfg))
    return trace.model_copy(update={"trace_id": trace_id})


class _Deadline:
    def __init__(self, budget_s: float, clock: Callable[[], float]):
        self.clock = clock
        self.budget_s = budget_s
        self.expires_at = clock() + budget_s

    def check(self) -> None:
        if self.clock() > self.expires_at:
            raise ConsultationTimeout(f"諮詢超過時間預算 {self.budget_s:.0f} 秒")


# 三階段流程：元素抽取、管理者路由的草稿迭代、內容改寫
def consult(
    q: ConsultationQuery,
    cfg: OrchestratorConfig,
    backend,
    index: StatuteIndex,
    prompt_dir=None,
    clock: Callable[[], float] = time.monotonic,
    on_graph: Optional[Callable[[ElementGraph], None]] = None,
) -> Tuple[LegalOpinion, OrchestrationTrace]:
    validate_query(q)
    recorder = TraceRecorder(q.id, store_raw=cfg.debug, test_mode=cfg.test_mode)
    deadline = _Deadline(cfg.wall_clock_budget_s, clock)
    common = dict(recorder=recorder, cfg=cfg, prompt_dir=prompt_dir)
    t = 0
    terminal: Optional[TerminalReason] = None
    try:
        deadline.check()
        graph = agents.extract_elements(q, backend, **common)
        if on_graph:
            on_graph(graph)
        u = encode_prompt(graph, q)
        deadline.check()
        draft = agents.draft_initial(u, backend, **common)
        while t < cfg.max_iterations:
            deadline.check()
            decision = agents.manager_decide(draft, backend, **common)
            if decision.kind == DecisionKind.pass_:
                terminal = TerminalReason.decision_empty if decision.degraded else TerminalReason.pass_
                break
            if decision.wants_format:
                deadline.check()
                suggestions = agents.format_suggestions(draft, backend, **common)
                deadline.check()
                draft = agents.apply_suggestions(draft, suggestions, backend, **common)
            if decision.wants_law:
                deadline.check()
                statutes = agents.law_search(q, draft, backend, index, cfg.top_k_statutes, **common)
                if statutes.items:
                    deadline.check()
                    draft = agents.integrate_statutes(draft, statutes, backend, **common)
            t += 1
            draft = draft.model_copy(update={"iteration": t})
        else:
            terminal = TerminalReason.budget_exhausted
            logger.info("達到迭代上限 %d，直接進行內容改寫", cfg.max_iterations)
        deadline.check()
        opinion = agents.content_check(q, draft, backend, index, **common)
    except LegalConsultError as e:
        logger.error("諮詢 %s 失敗: %s", q.id, e.error_code)
        raise ConsultationFailed(e, recorder.build(t, terminal))
    logger.info("諮詢 %s 完成: %d 輪, %s", q.id, t, terminal.value)
    return opinion, recorder.build(t, terminal)
