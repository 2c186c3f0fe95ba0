import json
import logging
import math
import re
from collections import Counter
from typing import List, Sequence, Tuple

import pandas as pd

from app.errors import EmptyCorpus
from app.schemas import EvalReport, InstanceScores, MetricScore
from app.statute_index import CJK

logger = logging.getLogger(__name__)

_METRIC_TOKEN_RE = re.compile(f"[{CJK}]|[^\\W_{CJK}]+")

# 高階精確度為零時的平滑值
BLEU_EPSILON = 1e-9
DEFAULT_BLEU_N = 4


# 中文逐字切分，拉丁字母與數字連續段視為一詞
def metric_tokenize(text: str) -> List[str]:
    return [tok.lower() for tok in _METRIC_TOKEN_RE.findall(text)]


def _tokens(text) -> List[str]:
    return metric_tokenize(text) if isinstance(text, str) else list(text)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n: int = 1) -> MetricScore:
    if n < 1:
        raise ValueError("n 必須 >= 1")
    cand = ngrams(_tokens(candidate), n)
    ref = ngrams(_tokens(reference), n)
    cand_total = sum(cand.values())
    ref_total = sum(ref.values())
    if cand_total == 0 or ref_total == 0:
        return MetricScore(precision=0.0, recall=0.0, f1=0.0)
    matched = sum((cand & ref).values())
    return MetricScore.from_pr(matched / cand_total, matched / ref_total)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> MetricScore:
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not cand or not ref:
        return MetricScore(precision=0.0, recall=0.0, f1=0.0)
    lcs = lcs_length(cand, ref)
    return MetricScore.from_pr(lcs / len(cand), lcs / len(ref))


def modified_precision(cand: Sequence[str], ref: Sequence[str], n: int) -> float:
    cand_counts = ngrams(cand, n)
    total = sum(cand_counts.values())
    if total == 0:
        return 0.0
    return sum((cand_counts & ngrams(ref, n)).values()) / total


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    return min(1.0, math.exp(1 - ref_len / cand_len))


def bleu(candidate, reference, max_n: int = DEFAULT_BLEU_N) -> float:
    if max_n < 1:
        raise ValueError("max_n 必須 >= 1")
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not cand or not ref:
        return 0.0
    precisions = [modified_precision(cand, ref, n) for n in range(1, max_n + 1)]
    # 沒有任何單字重疊時不做平滑
    if precisions[0] == 0.0:
        return 0.0
    log_mean = sum(math.log(p if p > 0 else BLEU_EPSILON) for p in precisions) / max_n
    return brevity_penalty(len(cand), len(ref)) * math.exp(log_mean)


def score_instance(prediction: str, reference: str, bleu_n: int = DEFAULT_BLEU_N) -> InstanceScores:
    cand = metric_tokenize(prediction)
    ref = metric_tokenize(reference)
    return InstanceScores(
        rouge_1=rouge_n(cand, ref, 1).f1,
        rouge_2=rouge_n(cand, ref, 2).f1,
        rouge_l=rouge_l(cand, ref).f1,
        bleu_1=bleu(cand, ref, 1),
        bleu_2=bleu(cand, ref, 2),
        bleu_n=bleu(cand, ref, bleu_n),
    )


# 逐筆計分後取宏平均，以百分比表示至小數第二位
def evaluate_corpus(pairs: List[Tuple[str, str]], bleu_n: int = DEFAULT_BLEU_N) -> EvalReport:
    if not pairs:
        raise EmptyCorpus("評估資料不能為空")
    instances = [score_instance(pred, ref, bleu_n) for pred, ref in pairs]
    macro = {}
    for name in InstanceScores.model_fields:
        values = [getattr(inst, name) for inst in instances]
        macro[name] = round(100 * sum(values) / len(values), 2)
    logger.info("評估完成: %d 筆", len(instances))
    return EvalReport(instances=instances, macro=macro, count=len(instances), bleu_n=bleu_n)


def column_labels(bleu_n: int) -> dict:
    return {
        "rouge_1": "Rouge-1",
        "rouge_2": "Rouge-2",
        "rouge_l": "Rouge-L",
        "bleu_1": "Bleu-1",
        "bleu_2": "Bleu-2",
        "bleu_n": f"Bleu-{bleu_n}",
    }


def render_report(report: EvalReport) -> str:
    labels = column_labels(report.bleu_n)
    row = {labels[name]: f"{value:.2f}" for name, value in report.macro.items()}
    for name, value in report.external.items():
        row[name] = "-" if value is None else f"{value:.2f}"
    df = pd.DataFrame([row], index=[f"n={report.count}"])
    return df.to_string()


def report_to_json(report: EvalReport) -> str:
    payload = {"schema_version": 1, **report.model_dump()}
    return json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True)
