import math
import random
from collections import Counter

import pytest

from app.errors import DuplicateStatute, EmptyCorpus, EmptyQuery, IndexFormatError, NotFound, ParseError
from app.schemas import Statute
from app.statute_index import (
    article_key, build_index, chinese_to_int, extract_citations, indexed_text, load_corpus, load_index, lookup,
    normalize_law_name, open_index, save_index, search, tokenize, verify_citations,
)
from conftest import DATA_DIR, SMALL_CORPUS


def brute_force_scores(corpus, query, k1=1.2, b=0.75):
    docs = [tokenize(indexed_text(s)) for s in corpus]
    n = len(docs)
    avg = sum(len(d) for d in docs) / n
    scores = []
    for doc in docs:
        counts = Counter(doc)
        total = 0.0
        for term in tokenize(query):
            df = sum(1 for d in docs if term in d)
            tf = counts[term]
            if tf == 0:
                continue
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
            total += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(doc) / avg))
        scores.append(total)
    return scores


def test_tokenize():
    assert tokenize("醉驾") == ["醉", "驾", "醉驾"]
    assert tokenize("BM25") == ["bm25"]
    assert tokenize("") == []
    assert tokenize("第133条") == ["第", "133", "条"]


def test_build_single_document():
    statute = SMALL_CORPUS[0]
    index = build_index([statute])
    assert index.doc_count == 1
    assert index.avg_doc_length == len(tokenize(indexed_text(statute)))


def test_build_rejects_duplicates_and_empty():
    with pytest.raises(DuplicateStatute):
        build_index([SMALL_CORPUS[0], SMALL_CORPUS[0]])
    with pytest.raises(EmptyCorpus):
        build_index([])


def test_postings_match_brute_force(small_index):
    for doc_id, statute in enumerate(SMALL_CORPUS):
        counts = Counter(tokenize(indexed_text(statute)))
        for term, tf in counts.items():
            assert (doc_id, tf) in small_index.postings[term]
    total = sum(tf for plist in small_index.postings.values() for _, tf in plist)
    assert total == sum(small_index.doc_lengths)


def test_search_matches_hand_scores(small_index):
    expected = brute_force_scores(SMALL_CORPUS, "醉驾")
    results = search(small_index, "醉驾", k=3)
    assert [s.key for s, _ in results] == [SMALL_CORPUS[0].key]
    assert results[0][1] == pytest.approx(expected[0], abs=1e-9)
    assert expected[1] == expected[2] == 0.0


def test_search_singleton_exact_text():
    statute = SMALL_CORPUS[1]
    results = search(build_index([statute]), statute.text, k=1)
    assert results[0][0] == statute
    assert results[0][1] > 0


def test_search_out_of_vocabulary(small_index):
    assert search(small_index, "zzz qqq", k=3) == []


def test_search_empty_query(small_index):
    with pytest.raises(EmptyQuery):
        search(small_index, "，。", k=3)


LATIN_STATUTES = [
    Statute(law_name="道路交通安全法实施条例", article_id="第一百零四条",
            text="机动车安装 GPS 或 ETC 设备的，应当符合 GB 7258 标准。"),
    Statute(law_name="电子商务法", article_id="第九条",
            text="通过 app 或者 website 从事经营活动的，适用本法。"),
]


def test_search_equals_brute_force_on_random_queries(corpus):
    corpus = corpus + LATIN_STATUTES
    index = build_index(corpus)
    rng = random.Random(11)
    terms = sorted({t for s in corpus for t in tokenize(s.text)})
    bigrams = [t for t in terms if len(t) == 2 and not t.isascii()]
    unigrams = [t for t in terms if len(t) == 1 and not t.isascii()]
    latin = [t for t in terms if t.isascii()] + ["zzz", "BM25"]
    for _ in range(100):
        pieces = [rng.choice(bigrams) for _ in range(rng.randint(1, 3))]
        pieces += [rng.choice(latin) for _ in range(rng.randint(1, 2))]
        pieces += [rng.choice(unigrams) for _ in range(rng.randint(0, 2))]
        rng.shuffle(pieces)
        query = " ".join(pieces)
        expected = brute_force_scores(corpus, query)
        ranked = sorted(
            ((s, score) for s, score in zip(corpus, expected) if score > 0),
            key=lambda item: (-item[1], item[0].law_name, item[0].article_id),
        )
        results = search(index, query, k=len(corpus))
        assert [s.key for s, _ in results] == [s.key for s, _ in ranked]
        for (_, got), (_, want) in zip(results, ranked):
            assert got == pytest.approx(want, abs=1e-9)


def test_lookup_normalizes_names(index):
    statute = lookup(index, "刑法", "第133条之一")
    assert statute.article_id == "第一百三十三条之一"
    assert "醉酒驾驶机动车" in statute.text
    assert lookup(index, "刑法", "第133条之一") == statute
    with pytest.raises(NotFound):
        lookup(index, "刑法", "第999条")


def test_article_numbers():
    assert chinese_to_int("一百三十三") == 133
    assert chinese_to_int("十二") == 12
    assert chinese_to_int("一千一百六十五") == 1165
    assert article_key("第133条之一") == article_key("第一百三十三条之一") == (133, 1)
    assert article_key("Article 133-1") == (133, 1)
    assert normalize_law_name("《中华人民共和国刑法》") == "刑法"


def test_extract_citations():
    mentions = extract_citations("依据《刑法》第133条之一")
    assert len(mentions) == 1
    assert (mentions[0].law_name, mentions[0].article_id) == ("刑法", "第133条之一")
    assert extract_citations("没有任何引用。") == []


def test_extract_two_citations_in_order():
    mentions = extract_citations("依据《民法典》第六百七十五条和《刑法》第十二条")
    assert [m.article_id for m in mentions] == ["第六百七十五条", "第十二条"]
    assert mentions[0].start < mentions[1].start


def test_bare_article_takes_preceding_law():
    mentions = extract_citations("《刑法》第十二条规定了溯及力，第一百条规定了报告义务")
    assert [(m.law_name, m.article_id) for m in mentions] == [("刑法", "第十二条"), ("刑法", "第一百条")]


def test_verify_citations(index):
    assert [m.resolved for m in verify_citations("《刑法》第999条", index)] == [False]
    assert [m.resolved for m in verify_citations("《中华人民共和国刑法》第一百三十三条之一", index)] == [True]
    assert verify_citations("", index) == []


def test_load_corpus_reports_line(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"law_name": "刑法", "article_id": "第十二条", "text": "x"}\n{"law_name": "刑法"}\n',
                    encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        load_corpus(path)
    assert exc.value.line == 2


def test_index_file_round_trip_is_byte_stable(tmp_path, corpus, index):
    first, second = tmp_path / "a.idx", tmp_path / "b.idx"
    save_index(index, first)
    save_index(build_index(corpus), second)
    assert first.read_bytes() == second.read_bytes()
    loaded = load_index(first)
    assert loaded.doc_count == index.doc_count
    assert search(loaded, "醉驾", 3) == search(index, "醉驾", 3)
    assert lookup(loaded, "刑法", "第十二条") == lookup(index, "刑法", "第十二条")


def test_load_index_rejects_other_files(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(b"NOTANINDEXFILE")
    with pytest.raises(IndexFormatError):
        load_index(path)


def test_open_index_prefers_cache(tmp_path, index):
    cache = tmp_path / "cache.idx"
    save_index(build_index([Statute(law_name="测试法", article_id="第一条", text="测试")]), cache)
    assert open_index("missing.jsonl", cache).doc_count == 1
    assert open_index(DATA_DIR / "statutes.jsonl", tmp_path / "absent.idx").doc_count == index.doc_count
