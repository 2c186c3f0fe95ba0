import json
import logging
import re
from pathlib import Path
from typing import Iterator, Optional

from pydantic import ValidationError

from app.errors import EmptyQuery, InvalidGraph, InvariantViolation, NoStructuredPayload, SchemaMismatch
from app.schemas import (
    GRAPH_KEYS, ConsultationQuery, ElementGraph, EncodedPrompt, LegalOpinion, ValidationReport, Violation,
)

logger = logging.getLogger(__name__)

# u = [P_G ; q] 的分隔標記
PROMPT_SEPARATOR = "\n\nUser Question:\n"

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)


# 驗證元素圖，違規以資料回傳
def validate_graph(graph: ElementGraph) -> ValidationReport:
    violations = []
    if not graph.entities:
        violations.append(Violation(code="empty-entities", path="entities", message="至少需要一個實體"))
    names = set()
    for i, entity in enumerate(graph.entities):
        path = f"entities[{i}]"
        if not entity.name.strip():
            violations.append(Violation(code="empty-entity-name", path=f"{path}.name", message="實體名稱不能為空"))
        elif entity.name in names:
            violations.append(Violation(code="duplicate-entity-name", path=f"{path}.name", message=f"實體名稱重複: {entity.name}"))
        names.add(entity.name)
    for i, event in enumerate(graph.events):
        if not event.description.strip():
            violations.append(Violation(code="empty-event-description", path=f"events[{i}].description", message="事件描述不能為空"))
    for i, rel in enumerate(graph.relationships):
        path = f"relationships[{i}]"
        if not rel.relation_type.strip():
            violations.append(Violation(code="empty-relation-type", path=f"{path}.type", message="關係類型不能為空"))
        for end in ("source", "target"):
            ref = getattr(rel, end)
            if ref not in names:
                violations.append(Violation(code="unresolved-endpoint", path=f"{path}.{end}", message=f"找不到實體: {ref}"))
    for key in ("user_claims", "key_facts", "legal_questions"):
        for i, item in enumerate(getattr(graph, key)):
            if not item.strip():
                violations.append(Violation(code="empty-list-item", path=f"{key}[{i}]", message="清單項目不能為空"))
    return ValidationReport(violations=violations)


def _graph_payload(graph: ElementGraph) -> dict:
    return {
        "entities": [
            {"name": e.name, "type": e.type_label, "attributes": dict(sorted(e.attributes.items()))}
            for e in graph.entities
        ],
        "events": [
            {"description": e.description, "time": e.time, "attributes": dict(sorted(e.attributes.items()))}
            for e in graph.events
        ],
        "relationships": [
            {"type": r.relation_type, "source": r.source, "target": r.target}
            for r in graph.relationships
        ],
        "user_claims": list(graph.user_claims),
        "key_facts": list(graph.key_facts),
        "legal_questions": list(graph.legal_questions),
    }


# 序列化成 P_G
def serialize_graph(graph: ElementGraph) -> str:
    report = validate_graph(graph)
    if not report.ok:
        raise InvalidGraph(report)
    return json.dumps(_graph_payload(graph), ensure_ascii=False, indent=2)


def validate_query(q: ConsultationQuery) -> ConsultationQuery:
    if not q.text.strip():
        raise EmptyQuery("諮詢問題不能為空")
    return q


def encode_prompt(graph: ElementGraph, q: ConsultationQuery) -> EncodedPrompt:
    validate_query(q)
    graph_section = serialize_graph(graph)
    return EncodedPrompt(
        graph_section=graph_section,
        query_section=q.text,
        separator=PROMPT_SEPARATOR,
        full_text=graph_section + PROMPT_SEPARATOR + q.text,
    )


def strip_fences(raw: str) -> str:
    match = _FENCE_RE.search(raw)
    return match.group(1) if match else raw


def _balanced_end(text: str, start: int) -> Optional[int]:
    depth = 0
    in_string = False
    escaped = False
    for pos in range(start, len(text)):
        ch = text[pos]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return pos
    return None


# 找出最外層且可解析的 JSON 物件
def find_json_object(raw: str) -> Optional[dict]:
    text = strip_fences(raw)
    start = text.find("{")
    while start != -1:
        end = _balanced_end(text, start)
        if end is not None:
            try:
                value = json.loads(text[start:end + 1])
            except json.JSONDecodeError:
                value = None
            if isinstance(value, dict):
                return value
        start = text.find("{", start + 1)
    return None


def parse_graph(raw: str) -> ElementGraph:
    payload = find_json_object(raw)
    if payload is None:
        raise NoStructuredPayload("模型輸出中找不到 JSON 物件")
    missing = [key for key in GRAPH_KEYS if key not in payload]
    if missing:
        raise SchemaMismatch("缺少欄位", key_path=missing[0])
    try:
        graph = ElementGraph.model_validate(payload)
    except ValidationError as e:
        err = e.errors()[0]
        key_path = ".".join(str(part) for part in err["loc"])
        raise SchemaMismatch(err["msg"], key_path=key_path)
    report = validate_graph(graph)
    if not report.ok:
        raise InvariantViolation(f"元素圖不符合約束: {', '.join(report.codes)}", report=report)
    return graph


# 圖檔讀寫
def dump_graph(graph: ElementGraph, path) -> None:
    Path(path).write_text(serialize_graph(graph) + "\n", encoding="utf-8")


def load_graph(path) -> ElementGraph:
    return parse_graph(Path(path).read_text(encoding="utf-8"))


def iter_graphs_jsonl(path) -> Iterator[ElementGraph]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield parse_graph(line)


# 雙段式意見輸出
def render_opinion(opinion: LegalOpinion) -> str:
    lines = ["Response", "========", opinion.response.strip(), "", "Legal Basis", "==========="]
    for i, item in enumerate(opinion.legal_basis, start=1):
        if item.law_name:
            head = f"{i}. 《{item.law_name}》{item.article_id}"
        else:
            head = f"{i}."
        if not item.verified:
            head += " [unverified]"
        lines.append(head)
        lines.append(f"   {item.text.strip()}")
    return "\n".join(lines) + "\n"
