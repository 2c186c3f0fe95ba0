import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, Optional, Protocol, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.agents import load_prompt
from app.errors import (
    EmptyBatch, EmptySplit, GenerationRejected, InvariantViolation, NonpositiveBeta, NonuniformBeta, ParseError,
)
from app.metrics import metric_tokenize
from app.schemas import (
    ChatMessage, DatasetStats, DpoInputs, FlagReport, NegativeReport, Role, Split, Triplet, Violation,
)
from app.statute_index import StatuteIndex, verify_citations

logger = logging.getLogger(__name__)

NEGATIVE = "negative"
FLAG = "flag"

# 負例長度必須落在正例的 [0.3, 2.0] 倍
NEGATIVE_LENGTH_BAND = (0.3, 2.0)
REVIEW_SCHEMA_VERSION = 1


# 讀取三元組 JSONL，錯誤附上行號
def load_triplets(path) -> List[Triplet]:
    triplets = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                triplet = Triplet(
                    id=str(record["id"]),
                    query=record["query"],
                    positive=record["positive"],
                    negative=record["negative"],
                    split=record["split"],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
                raise ParseError(line_no, str(e)[:100])
            for field in ("query", "positive", "negative"):
                if not getattr(triplet, field).strip():
                    raise InvariantViolation(f"第 {line_no} 行 {field} 為空", line=line_no, code="empty-text")
            if triplet.positive == triplet.negative:
                raise InvariantViolation(f"第 {line_no} 行正負例相同", line=line_no, code="duplicate-of-positive")
            triplets.append(triplet)
    return triplets


def _mean_length(texts: List[str]) -> float:
    return sum(len(metric_tokenize(t)) for t in texts) / len(texts)


def compute_stats(data: List[Triplet]) -> Dict[str, DatasetStats]:
    if not data:
        raise EmptySplit("資料集為空")
    stats = {}
    for split in Split:
        rows = [t for t in data if t.split == split]
        if not rows:
            continue
        stats[split.value] = DatasetStats(
            split=split.value,
            qa_pairs=len(rows),
            mean_query_length=_mean_length([t.query for t in rows]),
            mean_positive_length=_mean_length([t.positive for t in rows]),
            mean_negative_length=_mean_length([t.negative for t in rows]),
        )
    return stats


def render_stats(stats: Dict[str, DatasetStats]) -> str:
    df = pd.DataFrame([
        {
            "Split": s.split,
            "#QA Pairs": f"{s.qa_pairs:,}",
            "QLength": f"{s.mean_query_length:.2f}",
            "ALength (+)": f"{s.mean_positive_length:.2f}",
            "ALength (-)": f"{s.mean_negative_length:.2f}",
        }
        for s in stats.values()
    ])
    return df.to_string(index=False)


# DPO 目標函數
def dpo_gap(inputs: DpoInputs) -> float:
    return inputs.logp_pos - inputs.logp_neg


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise NonpositiveBeta(f"beta 必須大於 0: {beta}")


def log_sigmoid(z: float) -> float:
    return float(-np.logaddexp(0.0, -z))


def dpo_pref(delta: float, beta: float) -> float:
    _check_beta(beta)
    return float(np.exp(log_sigmoid(beta * delta)))


def dpo_loss(batch: List[DpoInputs]) -> float:
    if not batch:
        raise EmptyBatch("batch 不能為空")
    beta = batch[0].beta
    _check_beta(beta)
    if any(item.beta != beta for item in batch):
        raise NonuniformBeta("batch 內 beta 必須一致")
    deltas = np.array([dpo_gap(item) for item in batch], dtype=np.float64)
    # -log σ(z) = softplus(-z)
    return float(np.mean(np.logaddexp(0.0, -beta * deltas)))


def dpo_loss_grad(inputs: DpoInputs) -> float:
    _check_beta(inputs.beta)
    z = inputs.beta * dpo_gap(inputs)
    return -inputs.beta * float(np.exp(-np.logaddexp(0.0, z)))


class LogLikelihoodScorer(Protocol):
    def score(self, query: str, answer: str) -> float:
        ...


def build_dpo_inputs(triplet: Triplet, scorer: LogLikelihoodScorer, beta: float = 0.1) -> DpoInputs:
    return DpoInputs(
        logp_pos=scorer.score(triplet.query, triplet.positive),
        logp_neg=scorer.score(triplet.query, triplet.negative),
        beta=beta,
    )


# 負例驗證
def validate_negative(y_minus: str, y_plus: str, index: StatuteIndex) -> NegativeReport:
    violations = []
    citations = verify_citations(y_minus, index) if y_minus else []
    if not y_minus.strip():
        violations.append(Violation(code="empty-output", path="negative", message="負例為空"))
    if y_minus.strip() == y_plus.strip():
        violations.append(Violation(code="duplicate-of-positive", path="negative", message="負例與正例相同"))
    for mention in citations:
        if not mention.resolved:
            cited = f"《{mention.law_name}》{mention.article_id}" if mention.law_name else mention.article_id
            violations.append(Violation(code="unresolved-citation", path=f"negative[{mention.start}:{mention.end}]",
                                        message=f"引用的法條不存在: {cited}"))
    pos_len = len(metric_tokenize(y_plus))
    ratio = len(metric_tokenize(y_minus)) / pos_len if pos_len else 0.0
    low, high = NEGATIVE_LENGTH_BAND
    if not low <= ratio <= high:
        violations.append(Violation(code="length-out-of-band", path="negative",
                                    message=f"長度比例 {ratio:.2f} 不在 [{low}, {high}]"))
    return NegativeReport(violations=violations, citations=citations, length_ratio=ratio)


def _chat(backend, role: str, user_text: str, prompt_dir=None) -> str:
    messages = [
        ChatMessage(role=Role.system, content=load_prompt(role, prompt_dir)),
        ChatMessage(role=Role.user, content=user_text),
    ]
    return backend.complete(messages, role=role)


def generate_negative(q: str, y_plus: str, backend, index: StatuteIndex,
                      prompt_dir=None) -> Tuple[str, NegativeReport]:
    user_text = f"Question:\n{q}\n\nReference answer:\n{y_plus}"
    attempts, reports = [], []
    for attempt in range(2):
        text = user_text
        if reports:
            text += "\n\nYour previous answer was rejected for: " + ", ".join(reports[-1].codes)
        y_minus = _chat(backend, NEGATIVE, text, prompt_dir).strip()
        report = validate_negative(y_minus, y_plus, index)
        attempts.append(y_minus)
        reports.append(report)
        if report.ok:
            return y_minus, report
        logger.warning("負例第 %d 次驗證失敗: %s", attempt + 1, ", ".join(report.codes))
    raise GenerationRejected(attempts, reports)


_OK_RE = re.compile(r"ok[.!。！]?", re.IGNORECASE)
_FLAG_RE = re.compile(r"FLAG\s*[:：]\s*(.*?)(?:[;；]?\s*SUGGEST\s*[:：]\s*(.*))?\s*$", re.IGNORECASE | re.DOTALL)


def parse_flag_reply(reply: str) -> FlagReport:
    text = reply.strip()
    if _OK_RE.fullmatch(text):
        return FlagReport(suspect=False, raw_text=reply)
    match = _FLAG_RE.match(text)
    reasons = []
    if match:
        reasons = [r.strip(" ;；") for r in re.split(r"[|\n]", match.group(1)) if r.strip(" ;；")]
    if not reasons:
        return FlagReport(suspect=True, reasons=["parse-failure"], raw_text=reply)
    suggestion = (match.group(2) or "").strip() or None
    return FlagReport(suspect=True, reasons=reasons, suggested_revision=suggestion, raw_text=reply)


# 解析失敗一律視為可疑
def flag_suspect(q: str, reference_answer: str, backend, prompt_dir=None) -> FlagReport:
    reply = _chat(backend, FLAG, f"Question:\n{q}\n\nReference answer:\n{reference_answer}", prompt_dir)
    report = parse_flag_reply(reply)
    if report.suspect:
        logger.info("答案被標記: %s", "; ".join(report.reasons))
    return report


def read_jsonl(path) -> List[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise ParseError(line_no, str(e)[:100])
    return records


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def _pool_map(fn, items: List[dict], max_workers: int) -> List:
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        return list(pool.map(fn, items))


# 批次產生負例，結果依輸入順序合併
def generate_negatives(records: List[dict], backend_factory: Callable, index: StatuteIndex, max_workers: int = 4,
                       prompt_dir=None) -> Tuple[List[dict], List[dict]]:
    def run(record):
        try:
            y_minus, _ = generate_negative(record["query"], record["positive"], backend_factory(), index, prompt_dir)
            return {**record, "negative": y_minus, "schema_version": REVIEW_SCHEMA_VERSION}, None
        except GenerationRejected as e:
            return None, {
                "schema_version": REVIEW_SCHEMA_VERSION,
                "id": record.get("id"),
                "kind": "rejected-negative",
                "query": record["query"],
                "positive": record["positive"],
                "attempts": e.attempts,
                "codes": [r.codes for r in e.reports],
            }

    results = _pool_map(run, records, max_workers)
    accepted = [ok for ok, _ in results if ok is not None]
    rejected = [bad for _, bad in results if bad is not None]
    logger.info("負例產生完成: 接受 %d, 退回 %d", len(accepted), len(rejected))
    return accepted, rejected


def flag_answers(records: List[dict], backend_factory: Callable, max_workers: int = 4,
                 prompt_dir=None) -> List[dict]:
    def run(record):
        answer = record.get("answer", record.get("positive", ""))
        report = flag_suspect(record["query"], answer, backend_factory(), prompt_dir)
        return {"schema_version": REVIEW_SCHEMA_VERSION, "id": record.get("id"), "kind": "flag",
                **report.model_dump()}

    return _pool_map(run, records, max_workers)
