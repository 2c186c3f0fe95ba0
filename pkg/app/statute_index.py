import json
import logging
import math
import re
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import ValidationError

from app.errors import (
    DuplicateStatute, EmptyCorpus, EmptyIndex, EmptyQuery, IndexFormatError, NotFound, ParseError,
)
from app.schemas import CitationMention, Statute

logger = logging.getLogger(__name__)

CJK = "\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff\U00020000-\U0002a6df"
_CJK_RUN_RE = re.compile(f"[{CJK}]+")
_TOKEN_RE = re.compile(f"[{CJK}]+|[^\\W_{CJK}]+")

INDEX_MAGIC = b"LCXIDX"
INDEX_FORMAT_VERSION = 1
_HEADER = struct.Struct(">6sH")

LAW_PREFIX = "中华人民共和国"


# CJK 單字加雙字，拉丁字母與數字以小寫詞處理，標點捨棄
def tokenize(text: str) -> List[str]:
    terms = []
    for match in _TOKEN_RE.finditer(text):
        run = match.group(0)
        if _CJK_RUN_RE.fullmatch(run):
            terms.extend(run)
            terms.extend(run[i:i + 2] for i in range(len(run) - 1))
        else:
            terms.append(run.lower())
    return terms


def indexed_text(statute: Statute) -> str:
    return f"{statute.law_name} {statute.article_id} {statute.text}"


@dataclass(frozen=True)
class StatuteIndex:
    statutes: Tuple[Statute, ...]
    postings: Dict[str, List[Tuple[int, int]]]
    doc_lengths: Tuple[int, ...]
    avg_doc_length: float
    k1: float = 1.2
    b: float = 0.75
    _keys: Dict[Tuple[str, str], int] = field(default_factory=dict, repr=False, compare=False)

    @property
    def doc_count(self) -> int:
        return len(self.statutes)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.doc_count
        return math.log((n - df + 0.5) / (df + 0.5) + 1)


def build_index(corpus: List[Statute], k1: float = 1.2, b: float = 0.75) -> StatuteIndex:
    if not corpus:
        raise EmptyCorpus("法條語料不能為空")
    keys = {}
    postings: Dict[str, List[Tuple[int, int]]] = {}
    lengths = []
    for doc_id, statute in enumerate(corpus):
        if statute.key in keys:
            raise DuplicateStatute(statute.key)
        keys[statute.key] = doc_id
        terms = tokenize(indexed_text(statute))
        lengths.append(len(terms))
        for term, tf in Counter(terms).items():
            postings.setdefault(term, []).append((doc_id, tf))
    avg = sum(lengths) / len(lengths)
    logger.info("法條索引建立完成: %d 篇, %d 個詞", len(corpus), len(postings))
    return StatuteIndex(
        statutes=tuple(corpus),
        postings=postings,
        doc_lengths=tuple(lengths),
        avg_doc_length=avg,
        k1=k1,
        b=b,
        _keys=keys,
    )


def bm25_term_score(index: StatuteIndex, idf: float, tf: int, doc_length: int) -> float:
    avg = index.avg_doc_length or 1.0
    norm = tf + index.k1 * (1 - index.b + index.b * doc_length / avg)
    return idf * tf * (index.k1 + 1) / norm


# BM25 查詢，同分依 (law_name, article_id) 排序
def search(index: StatuteIndex, query: str, k: int = 3) -> List[Tuple[Statute, float]]:
    if index.doc_count == 0:
        raise EmptyIndex("法條索引為空")
    terms = tokenize(query or "")
    if not terms:
        raise EmptyQuery("查詢內容不能為空")
    scores: Dict[int, float] = {}
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            scores[doc_id] = scores.get(doc_id, 0.0) + bm25_term_score(index, idf, tf, index.doc_lengths[doc_id])
    ranked = sorted(
        ((index.statutes[doc_id], score) for doc_id, score in scores.items() if score > 0),
        key=lambda item: (-item[1], item[0].law_name, item[0].article_id),
    )
    return ranked[:k]


# 法律名稱正規化：去掉書名號與國名前綴
def normalize_law_name(name: str) -> str:
    name = name.strip().strip("《》").strip()
    if name.startswith(LAW_PREFIX):
        name = name[len(LAW_PREFIX):]
    return name


_CN_DIGITS = {"零": 0, "〇": 0, "一": 1, "二": 2, "两": 2, "三": 3, "四": 4, "五": 5, "六": 6, "七": 7, "八": 8, "九": 9}
_CN_UNITS = {"十": 10, "百": 100, "千": 1000}


def chinese_to_int(text: str) -> Optional[int]:
    if text.isdigit():
        return int(text)
    total = 0
    current = 0
    for ch in text:
        if ch in _CN_DIGITS:
            current = _CN_DIGITS[ch]
        elif ch in _CN_UNITS:
            total += (current or 1) * _CN_UNITS[ch]
            current = 0
        else:
            return None
    return total + current


_ARTICLE_RE = re.compile(r"第([0-9零〇一二两三四五六七八九十百千]+)条(?:之([0-9一二三四五六七八九十]+))?")


def article_key(article_id: str) -> Optional[Tuple[int, int]]:
    match = _ARTICLE_RE.fullmatch(article_id.strip())
    if match:
        main = chinese_to_int(match.group(1))
        sub = chinese_to_int(match.group(2)) if match.group(2) else 0
        if main is None or sub is None:
            return None
        return main, sub
    english = re.fullmatch(r"(?:Article\s+)?(\d+)(?:-(\d+))?", article_id.strip())
    if english:
        return int(english.group(1)), int(english.group(2) or 0)
    return None


def lookup(index: StatuteIndex, law_name: str, article_id: str) -> Statute:
    doc_id = index._keys.get((law_name, article_id))
    if doc_id is not None:
        return index.statutes[doc_id]
    wanted_law = normalize_law_name(law_name)
    wanted_article = article_key(article_id)
    if wanted_article is not None:
        for statute in index.statutes:
            if normalize_law_name(statute.law_name) == wanted_law and article_key(statute.article_id) == wanted_article:
                return statute
    raise NotFound(f"找不到法條: 《{law_name}》{article_id}")


_ARTICLE_PATTERN = r"第[0-9零〇一二两三四五六七八九十百千]+条(?:之[0-9一二三四五六七八九十]+)?"
_FULL_CITATION_RE = re.compile(r"《([^《》]+)》\s*(" + _ARTICLE_PATTERN + ")")
_BARE_CITATION_RE = re.compile(_ARTICLE_PATTERN)
_LAW_CONTEXT_RE = re.compile(r"《([^《》]+)》")
_ENGLISH_CITATION_RE = re.compile(r"Article\s+(\d+(?:-\d+)?)\s+of\s+(?:the\s+)?((?:[A-Z][\w-]*\s+)*?(?:Law|Code))")


# 抽取條文引用，依出現位置排序
def extract_citations(text: str) -> List[CitationMention]:
    mentions = []
    covered = []
    for match in _FULL_CITATION_RE.finditer(text):
        law = normalize_law_name(match.group(1))
        mentions.append(CitationMention(law_name=law, article_id=match.group(2), start=match.start(), end=match.end()))
        covered.append((match.start(2), match.end(2)))
    for match in _BARE_CITATION_RE.finditer(text):
        if any(start <= match.start() < end for start, end in covered):
            continue
        context = None
        for law_match in _LAW_CONTEXT_RE.finditer(text, 0, match.start()):
            context = normalize_law_name(law_match.group(1))
        mentions.append(CitationMention(law_name=context, article_id=match.group(0), start=match.start(), end=match.end()))
    for match in _ENGLISH_CITATION_RE.finditer(text):
        mentions.append(CitationMention(
            law_name=match.group(2).strip(), article_id=f"Article {match.group(1)}", start=match.start(), end=match.end(),
        ))
    return sorted(mentions, key=lambda m: (m.start, m.end))


def verify_citations(text: str, index: StatuteIndex) -> List[CitationMention]:
    verified = []
    for mention in extract_citations(text):
        resolved = False
        if mention.law_name:
            try:
                lookup(index, mention.law_name, mention.article_id)
                resolved = True
            except NotFound:
                resolved = False
        verified.append(mention.model_copy(update={"resolved": resolved}))
    return verified


# 語料 JSONL：每行 {law_name, article_id, text}
def load_corpus(path) -> List[Statute]:
    statutes = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                statutes.append(Statute(law_name=record["law_name"], article_id=record["article_id"], text=record["text"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
                raise ParseError(line_no, str(e)[:100])
    return statutes


def save_index(index: StatuteIndex, path) -> None:
    payload = {
        "k1": index.k1,
        "b": index.b,
        "statutes": [s.model_dump() for s in index.statutes],
        "doc_lengths": list(index.doc_lengths),
        "postings": {term: [list(p) for p in plist] for term, plist in index.postings.items()},
    }
    body = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(_HEADER.pack(INDEX_MAGIC, INDEX_FORMAT_VERSION) + zlib.compress(body, 9))
    logger.info("索引已寫入 %s", path)


def load_index(path) -> StatuteIndex:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise IndexFormatError(f"索引檔過短: {path}")
    magic, version = _HEADER.unpack(data[:_HEADER.size])
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"不是法條索引檔: {path}")
    if version != INDEX_FORMAT_VERSION:
        raise IndexFormatError(f"不支援的索引版本 {version}: {path}")
    try:
        payload = json.loads(zlib.decompress(data[_HEADER.size:]).decode("utf-8"))
    except (zlib.error, ValueError) as e:
        raise IndexFormatError(f"索引檔損毀: {e}")
    statutes = tuple(Statute(**s) for s in payload["statutes"])
    lengths = tuple(payload["doc_lengths"])
    return StatuteIndex(
        statutes=statutes,
        postings={term: [tuple(p) for p in plist] for term, plist in payload["postings"].items()},
        doc_lengths=lengths,
        avg_doc_length=sum(lengths) / len(lengths),
        k1=payload["k1"],
        b=payload["b"],
        _keys={s.key: i for i, s in enumerate(statutes)},
    )


# 有快取就讀快取，否則由語料建立
def open_index(corpus_path, cache_path=None) -> StatuteIndex:
    if cache_path and Path(cache_path).exists():
        index = load_index(cache_path)
        logger.info("從快取載入索引 %s: %d 條", cache_path, index.doc_count)
        return index
    index = build_index(load_corpus(corpus_path))
    logger.info("由語料建立索引 %s: %d 條", corpus_path, index.doc_count)
    return index
