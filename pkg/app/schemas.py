import logging
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

# 元素圖 JSON 的六個欄位，提示詞與解析器共用
GRAPH_KEYS = ("entities", "events", "relationships", "user_claims", "key_facts", "legal_questions")


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)


# 諮詢問題
class ConsultationQuery(FrozenModel):
    id: str
    text: str
    metadata: Dict[str, str] = Field(default_factory=dict)


# 元素圖節點與邊
class Entity(FrozenModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")
    name: str
    type_label: str = Field(alias="type")
    attributes: Dict[str, str] = Field(default_factory=dict)


class Event(FrozenModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")
    description: str
    time: Optional[str] = None
    attributes: Dict[str, str] = Field(default_factory=dict)


class Relationship(FrozenModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")
    relation_type: str = Field(alias="type")
    source: str
    target: str


class ElementGraph(FrozenModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")
    entities: List[Entity]
    events: List[Event]
    relationships: List[Relationship]
    user_claims: List[str]
    key_facts: List[str]
    legal_questions: List[str]


class Violation(FrozenModel):
    code: str
    path: str
    message: str


class ValidationReport(FrozenModel):
    violations: List[Violation] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def codes(self) -> List[str]:
        return [v.code for v in self.violations]


class EncodedPrompt(FrozenModel):
    graph_section: str
    query_section: str
    separator: str
    full_text: str

    @model_validator(mode="after")
    def check_concatenation(self):
        if self.full_text != self.graph_section + self.separator + self.query_section:
            raise ValueError("full_text 必須等於 graph_section + separator + query_section")
        return self


# 草稿與最終意見
class Draft(FrozenModel):
    text: str
    iteration: int = Field(0, ge=0)
    applied_suggestions: List[str] = Field(default_factory=list)
    integrated_statute_ids: List[str] = Field(default_factory=list)


class Statute(FrozenModel):
    law_name: str = Field(..., min_length=1)
    article_id: str = Field(..., min_length=1)
    text: str = Field(..., min_length=1)

    @property
    def key(self):
        return (self.law_name, self.article_id)

    @property
    def statute_id(self) -> str:
        return f"《{self.law_name}》{self.article_id}"


class StatuteCitation(FrozenModel):
    law_name: str = ""
    article_id: str = ""
    text: str = Field(..., min_length=1)
    verified: bool = True


class LegalOpinion(FrozenModel):
    response: str = Field(..., min_length=1)
    legal_basis: List[StatuteCitation] = Field(..., min_length=1)
    source_query_id: str


class CitationMention(FrozenModel):
    law_name: Optional[str] = None
    article_id: str
    start: int = Field(..., ge=0)
    end: int = Field(..., ge=0)
    resolved: bool = False


# 模型訊息
class Role(str, Enum):
    system = "system"
    user = "user"
    assistant = "assistant"


class ChatMessage(FrozenModel):
    role: Role
    content: str

    @model_validator(mode="after")
    def check_content(self):
        if self.role in (Role.system, Role.user) and not self.content.strip():
            raise ValueError(f"{self.role.value} 訊息內容不能為空")
        return self


# 代理輸出
class DecisionKind(str, Enum):
    pass_ = "Pass"
    format_check = "FormatCheck"
    law_search = "LawSearch"
    both = "Both"


class ManagerDecision(FrozenModel):
    kind: DecisionKind
    raw_text: str
    degraded: bool = False

    @property
    def wants_format(self) -> bool:
        return self.kind in (DecisionKind.format_check, DecisionKind.both)

    @property
    def wants_law(self) -> bool:
        return self.kind in (DecisionKind.law_search, DecisionKind.both)


class Suggestions(FrozenModel):
    items: List[str] = Field(..., min_length=1)
    raw_text: str


class StatuteList(FrozenModel):
    items: List[Statute]
    scores: List[float]
    query_terms: List[str]


# 追蹤紀錄
class TerminalReason(str, Enum):
    pass_ = "pass"
    decision_empty = "decision_empty"
    budget_exhausted = "budget_exhausted"


class TraceStep(FrozenModel):
    step_index: int = Field(..., ge=0)
    agent_role: str
    action: str
    decision: Optional[str] = None
    input_digest: str
    output_digest: str
    duration_ms: float = Field(0.0, ge=0)
    attempts: int = Field(1, ge=0)
    warnings: List[str] = Field(default_factory=list)
    error: Optional[str] = None
    raw_input: Optional[str] = None
    raw_output: Optional[str] = None


class OrchestrationTrace(FrozenModel):
    query_id: str
    steps: List[TraceStep]
    iterations_run: int = Field(0, ge=0)
    terminal_reason: Optional[TerminalReason] = None
    trace_id: Optional[str] = None

    @field_validator("steps")
    def validate_step_order(cls, value):
        for prev, cur in zip(value, value[1:]):
            if cur.step_index <= prev.step_index:
                raise ValueError("step_index 必須嚴格遞增")
        return value


# 評估指標
class MetricScore(FrozenModel):
    precision: float = Field(..., ge=0, le=1)
    recall: float = Field(..., ge=0, le=1)
    f1: float = Field(..., ge=0, le=1)

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "MetricScore":
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(precision=precision, recall=recall, f1=f1)


class InstanceScores(FrozenModel):
    rouge_1: float
    rouge_2: float
    rouge_l: float
    bleu_1: float
    bleu_2: float
    bleu_n: float


class EvalReport(FrozenModel):
    instances: List[InstanceScores]
    macro: Dict[str, float]
    count: int = Field(..., ge=1)
    bleu_n: int = 4
    external: Dict[str, Optional[float]] = Field(
        default_factory=lambda: {"bertscore": None, "bleurt": None, "llm_score": None}
    )


# 資料集
class Split(str, Enum):
    train = "train"
    val = "val"
    test = "test"


class Triplet(FrozenModel):
    id: str
    query: str
    positive: str
    negative: str
    split: Split


class DpoInputs(FrozenModel):
    logp_pos: float
    logp_neg: float
    beta: float = 0.1

    @model_validator(mode="after")
    def warn_improper_logprob(self):
        if self.logp_pos > 0 or self.logp_neg > 0:
            logger.warning("對數似然大於 0，可能不是來自正規化分佈: (%s, %s)", self.logp_pos, self.logp_neg)
        return self


class DatasetStats(FrozenModel):
    split: str
    qa_pairs: int = Field(..., ge=1)
    mean_query_length: float = Field(..., ge=0)
    mean_positive_length: float = Field(..., ge=0)
    mean_negative_length: float = Field(..., ge=0)


class NegativeReport(FrozenModel):
    violations: List[Violation] = Field(default_factory=list)
    citations: List[CitationMention] = Field(default_factory=list)
    length_ratio: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def codes(self) -> List[str]:
        return [v.code for v in self.violations]


class FlagReport(FrozenModel):
    suspect: bool
    reasons: List[str] = Field(default_factory=list)
    suggested_revision: Optional[str] = None
    raw_text: str = ""


# API 請求與回應
class ConsultRequest(BaseModel):
    question: Optional[str] = None
    metadata: Dict[str, str] = Field(default_factory=dict)


class LegalBasisItem(BaseModel):
    law_name: str
    article_id: str
    text: str
    verified: bool


class ConsultResponse(BaseModel):
    success: bool = True
    response: str
    legal_basis: List[LegalBasisItem]
    trace_id: str


class HealthResponse(BaseModel):
    status: str
    index_doc_count: int


class TraceSummary(BaseModel):
    trace_id: str
    query_id: str
    terminal_reason: Optional[str] = None
    created_at: Optional[datetime] = None
    model_config = {"from_attributes": True}


class TraceListResponse(BaseModel):
    success: bool = True
    trace: List[TraceSummary]
    total: int
