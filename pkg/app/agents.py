import logging
import re
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple

from app.config import OrchestratorConfig
from app.errors import (
    EmptyDraft, EmptyIndex, EmptyQuery, ExtractionFailed, FormatCheckEmpty, InvariantViolation, NoStructuredPayload,
    NotFound, NoTermsProposed, SchemaMismatch, SectionMissing,
)
from app.graph import parse_graph
from app.schemas import (
    GRAPH_KEYS, ChatMessage, ConsultationQuery, DecisionKind, Draft, ElementGraph, EncodedPrompt, LegalOpinion,
    ManagerDecision, Role, Statute, StatuteCitation, StatuteList, Suggestions,
)
from app.statute_index import StatuteIndex, extract_citations, lookup, search, tokenize
from app.trace import StepBuilder, TraceRecorder

logger = logging.getLogger(__name__)

PROMPT_DIR = Path(__file__).parent / "prompts"

# 代理角色，也是腳本後端的鍵
ELEMENT = "element"
DRAFT = "draft"
MANAGER = "manager"
FORMAT_CHECK = "format_check"
LAW_SEARCH = "law_search"
CONTENT_CHECK = "content_check"

MAX_SEARCH_TERMS = 5

_LIST_MARKER_RE = re.compile(r"^\s*(?:\d+\s*[.)、．]|[（(]\s*\d+\s*[)）]|[-*•·●▪])\s*")
_TERM_SPLIT_RE = re.compile(r"[\n,，、;；]")
# 標題須獨占一行，或以冒號接續內容
_SECTION_HEAD_RE = re.compile(
    r"^[ \t]*(?:#+[ \t]*)?(?:\*\*)?[ \t]*(response|答复|legal basis|法律依据)[ \t]*(?:\*\*)?[ \t]*"
    r"(?:[:：][ \t]*(?:\*\*)?|(?:\*\*)?[ \t]*$)",
    re.IGNORECASE | re.MULTILINE,
)
_PASS_RE = re.compile(r"(?<![a-z])pass(?![a-z])")
_SECTION_NAMES = {"response": "response", "答复": "response", "legal basis": "legal_basis", "法律依据": "legal_basis"}


@lru_cache(maxsize=64)
def _read_prompt(name: str, prompt_dir: Optional[str]) -> str:
    path = Path(prompt_dir) / f"{name}.txt" if prompt_dir else None
    if path is None or not path.exists():
        path = PROMPT_DIR / f"{name}.txt"
    lines = path.read_text(encoding="utf-8").splitlines()
    if lines and lines[0].startswith("# version:"):
        lines = lines[1:]
    return "\n".join(lines).strip()


def load_prompt(name: str, prompt_dir: Optional[str] = None) -> str:
    return _read_prompt(name, str(prompt_dir) if prompt_dir else None)


def prompt_version(name: str, prompt_dir: Optional[str] = None) -> int:
    path = Path(prompt_dir) / f"{name}.txt" if prompt_dir else PROMPT_DIR / f"{name}.txt"
    if not path.exists():
        path = PROMPT_DIR / f"{name}.txt"
    first = path.read_text(encoding="utf-8").splitlines()[0]
    return int(first.split(":", 1)[1]) if first.startswith("# version:") else 0


def _messages(system_prompt: str, user_text: str) -> List[ChatMessage]:
    return [ChatMessage(role=Role.system, content=system_prompt), ChatMessage(role=Role.user, content=user_text)]


def _ask(step: StepBuilder, role: str, user_text: str, cfg: OrchestratorConfig, prompt_dir=None) -> str:
    decoding = cfg.decoding_for(role)
    return step.ask(_messages(load_prompt(role, prompt_dir), user_text), role,
                    temperature=decoding.temperature, max_tokens=decoding.max_tokens)


def _runtime(recorder: Optional[TraceRecorder], cfg: Optional[OrchestratorConfig], query_id: str = "-"):
    return recorder or TraceRecorder(query_id), cfg or OrchestratorConfig()


def strip_list_marker(line: str) -> str:
    return _LIST_MARKER_RE.sub("", line, count=1).strip()


# Element Agent
_SCHEMA_REMINDER = (
    "Your previous reply could not be parsed. Reply with a single JSON object that has exactly these keys: "
    + ", ".join(GRAPH_KEYS)
    + ". Relationship source and target must name entities."
)


def extract_elements(q: ConsultationQuery, backend, recorder: Optional[TraceRecorder] = None,
                     cfg: Optional[OrchestratorConfig] = None, prompt_dir=None) -> ElementGraph:
    recorder, cfg = _runtime(recorder, cfg, q.id)
    if not q.text.strip():
        raise EmptyQuery("諮詢問題不能為空")
    with recorder.step(ELEMENT, "element", q.text, backend) as step:
        first_raw = _ask(step, ELEMENT, q.text, cfg, prompt_dir)
        step.output_text = first_raw
        try:
            return parse_graph(first_raw)
        except (NoStructuredPayload, SchemaMismatch, InvariantViolation) as first_error:
            step.warn(f"元素圖解析失敗 ({first_error.error_code})，重試一次")
        second_raw = _ask(step, ELEMENT, f"{q.text}\n\n{_SCHEMA_REMINDER}", cfg, prompt_dir)
        step.output_text = second_raw
        try:
            return parse_graph(second_raw)
        except (NoStructuredPayload, SchemaMismatch, InvariantViolation) as second_error:
            raise ExtractionFailed(f"元素圖抽取失敗: {second_error.message}", [first_raw, second_raw])


# Draft Agent
def draft_initial(u: EncodedPrompt, backend, recorder: Optional[TraceRecorder] = None,
                  cfg: Optional[OrchestratorConfig] = None, prompt_dir=None) -> Draft:
    recorder, cfg = _runtime(recorder, cfg)
    with recorder.step(DRAFT, "draft", u.full_text, backend) as step:
        reply = _ask(step, DRAFT, u.full_text, cfg, prompt_dir)
        step.output_text = reply
        if not reply.strip():
            raise EmptyDraft("初稿為空")
        return Draft(text=reply, iteration=0)


# Manager Agent: 只看草稿，不看問題
def classify_manager_reply(text: str) -> Optional[DecisionKind]:
    low = text.lower()
    wants_format = "formatcheckagent" in low
    wants_law = "lawsearchagent" in low
    if wants_format and wants_law:
        return DecisionKind.both
    if wants_format:
        return DecisionKind.format_check
    if wants_law:
        return DecisionKind.law_search
    if _PASS_RE.search(low):
        return DecisionKind.pass_
    return None


_MANAGER_REMINDER = "Reply with one of: Pass / Call: FormatCheckAgent / Call: LawSearchAgent / Call: FormatCheckAgent then LawSearchAgent."


def manager_decide(draft: Draft, backend, recorder: Optional[TraceRecorder] = None,
                   cfg: Optional[OrchestratorConfig] = None, prompt_dir=None) -> ManagerDecision:
    recorder, cfg = _runtime(recorder, cfg)
    with recorder.step(MANAGER, "manager", draft.text, backend) as step:
        reply = _ask(step, MANAGER, draft.text, cfg, prompt_dir)
        kind = classify_manager_reply(reply)
        if kind is None:
            step.warn("無法判讀管理者回覆，重試一次")
            reply = _ask(step, MANAGER, f"{draft.text}\n\n{_MANAGER_REMINDER}", cfg, prompt_dir)
            kind = classify_manager_reply(reply)
        step.output_text = reply
        degraded = kind is None
        if degraded:
            step.warn("管理者回覆仍無法判讀，視為 Pass")
            kind = DecisionKind.pass_
        step.decision = kind.value
        logger.info("管理者決策: %s", kind.value)
        return ManagerDecision(kind=kind, raw_text=reply, degraded=degraded)


# FormatCheck Agent
def split_suggestions(text: str) -> List[str]:
    items = []
    for line in text.splitlines():
        item = strip_list_marker(line)
        if item:
            items.append(item)
    return items


def format_suggestions(draft: Draft, backend, recorder: Optional[TraceRecorder] = None,
                       cfg: Optional[OrchestratorConfig] = None, prompt_dir=None) -> Suggestions:
    recorder, cfg = _runtime(recorder, cfg)
    with recorder.step(FORMAT_CHECK, "format", draft.text, backend) as step:
        reply = _ask(step, FORMAT_CHECK, draft.text, cfg, prompt_dir)
        step.output_text = reply
        items = split_suggestions(reply)
        if not items:
            raise FormatCheckEmpty("格式檢查沒有提出任何建議")
        return Suggestions(items=items, raw_text=reply)


def apply_suggestions(draft: Draft, s: Suggestions, backend, recorder: Optional[TraceRecorder] = None,
                      cfg: Optional[OrchestratorConfig] = None, prompt_dir=None) -> Draft:
    recorder, cfg = _runtime(recorder, cfg)
    numbered = "\n".join(f"{i}. {item}" for i, item in enumerate(s.items, start=1))
    user_text = f"Draft:\n{draft.text}\n\nRevise the draft by applying these suggestions:\n{numbered}"
    with recorder.step(DRAFT, "apply", user_text, backend) as step:
        reply = _ask(step, DRAFT, user_text, cfg, prompt_dir)
        step.output_text = reply
        if not reply.strip():
            raise EmptyDraft("修訂後草稿為空")
        if reply == draft.text:
            step.warn("修訂結果與原稿相同")
        return Draft(
            text=reply,
            iteration=draft.iteration,
            applied_suggestions=[*draft.applied_suggestions, *s.items],
            integrated_statute_ids=list(draft.integrated_statute_ids),
        )


# LawSearch Agent: 模型提出檢索詞，再以 BM25 查詢
def split_terms(text: str) -> List[str]:
    terms = []
    for chunk in _TERM_SPLIT_RE.split(text):
        term = strip_list_marker(chunk).strip("\"'“”‘’「」 ")
        if term and tokenize(term) and term not in terms:
            terms.append(term)
    return terms[:MAX_SEARCH_TERMS]


def merge_results(results: List[Tuple[Statute, float]], k: int) -> List[Tuple[Statute, float]]:
    best = {}
    for statute, score in results:
        if statute.key not in best or score > best[statute.key][1]:
            best[statute.key] = (statute, score)
    ranked = sorted(best.values(), key=lambda item: (-item[1], item[0].law_name, item[0].article_id))
    return ranked[:k]


def law_search(q: ConsultationQuery, draft: Draft, backend, index: StatuteIndex, k: int = 3,
               recorder: Optional[TraceRecorder] = None, cfg: Optional[OrchestratorConfig] = None,
               prompt_dir=None) -> StatuteList:
    recorder, cfg = _runtime(recorder, cfg, q.id)
    if index.doc_count == 0:
        raise EmptyIndex("法條索引為空")
    user_text = f"Question:\n{q.text}\n\nDraft:\n{draft.text}"
    with recorder.step(LAW_SEARCH, "law", user_text, backend) as step:
        reply = _ask(step, LAW_SEARCH, user_text, cfg, prompt_dir)
        terms = split_terms(reply)
        if not terms:
            step.warn(f"{NoTermsProposed.error_code}: 改用原始問題檢索")
            terms = [q.text]
        results = []
        for term in terms:
            try:
                results.extend(search(index, term, k))
            except EmptyQuery:
                continue
        ranked = merge_results(results, k)
        if not ranked:
            step.warn("檢索沒有找到任何法條")
        step.output_text = "\n".join(s.statute_id for s, _ in ranked)
        return StatuteList(items=[s for s, _ in ranked], scores=[score for _, score in ranked], query_terms=terms)


def integrate_statutes(draft: Draft, l: StatuteList, backend, recorder: Optional[TraceRecorder] = None,
                       cfg: Optional[OrchestratorConfig] = None, prompt_dir=None) -> Draft:
    recorder, cfg = _runtime(recorder, cfg)
    if not l.items:
        raise ValueError("沒有可整合的法條")
    articles = "\n\n".join(f"{s.statute_id}\n{s.text}" for s in l.items)
    user_text = (f"Draft:\n{draft.text}\n\nRevise the draft so that its conclusions cite these statutes:\n{articles}")
    with recorder.step(DRAFT, "integrate", user_text, backend) as step:
        reply = _ask(step, DRAFT, user_text, cfg, prompt_dir)
        step.output_text = reply
        if not reply.strip():
            raise EmptyDraft("整合法條後草稿為空")
        ids = list(draft.integrated_statute_ids)
        for statute in l.items:
            if statute.statute_id not in ids:
                ids.append(statute.statute_id)
        return Draft(
            text=reply,
            iteration=draft.iteration,
            applied_suggestions=list(draft.applied_suggestions),
            integrated_statute_ids=ids,
        )


# ContentCheck Agent
def split_sections(text: str) -> dict:
    heads = list(_SECTION_HEAD_RE.finditer(text))
    sections = {}
    for i, head in enumerate(heads):
        name = _SECTION_NAMES[head.group(1).lower()]
        end = heads[i + 1].start() if i + 1 < len(heads) else len(text)
        # 同名標題取最後一個
        sections[name] = text[head.end():end].strip()
    return sections


def resolve_legal_basis(section: str, index: Optional[StatuteIndex]) -> List[StatuteCitation]:
    citations = []
    seen = set()
    for line in section.splitlines():
        line = strip_list_marker(line)
        if not line:
            continue
        mentions = [m for m in extract_citations(line) if m.law_name]
        if not mentions:
            citations.append(StatuteCitation(text=line, verified=False))
            continue
        for mention in mentions:
            try:
                if index is None:
                    raise NotFound("沒有索引")
                statute = lookup(index, mention.law_name, mention.article_id)
            except NotFound:
                citations.append(StatuteCitation(law_name=mention.law_name, article_id=mention.article_id,
                                                 text=line, verified=False))
                continue
            if statute.key in seen:
                continue
            seen.add(statute.key)
            citations.append(StatuteCitation(law_name=statute.law_name, article_id=statute.article_id,
                                             text=statute.text, verified=True))
    return citations


def _missing_section(sections: dict) -> Optional[str]:
    for name in ("response", "legal_basis"):
        if not sections.get(name):
            return name
    return None


_CONTENT_REMINDER = "Your previous reply is missing a section. Reply with both labeled sections: 'Response:' and 'Legal Basis:'."


def content_check(q: ConsultationQuery, draft: Draft, backend, index: Optional[StatuteIndex] = None,
                  recorder: Optional[TraceRecorder] = None, cfg: Optional[OrchestratorConfig] = None,
                  prompt_dir=None) -> LegalOpinion:
    recorder, cfg = _runtime(recorder, cfg, q.id)
    if not draft.text.strip():
        raise EmptyDraft("草稿為空")
    user_text = f"Question:\n{q.text}\n\nDraft:\n{draft.text}"
    with recorder.step(CONTENT_CHECK, "content_check", user_text, backend) as step:
        reply = _ask(step, CONTENT_CHECK, user_text, cfg, prompt_dir)
        sections = split_sections(reply)
        missing = _missing_section(sections)
        if missing:
            step.warn(f"缺少段落 {missing}，重試一次")
            reply = _ask(step, CONTENT_CHECK, f"{user_text}\n\n{_CONTENT_REMINDER}", cfg, prompt_dir)
            sections = split_sections(reply)
            missing = _missing_section(sections)
        step.output_text = reply
        if missing:
            raise SectionMissing(missing)
        legal_basis = resolve_legal_basis(sections["legal_basis"], index)
        if not legal_basis:
            raise SectionMissing("legal_basis")
        return LegalOpinion(response=sections["response"], legal_basis=legal_basis, source_query_id=q.id)
