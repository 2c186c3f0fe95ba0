import itertools

import pytest

from app import agents
from app.errors import EmptyDraft, ExtractionFailed, FormatCheckEmpty, SectionMissing
from app.graph import encode_prompt, serialize_graph
from app.schemas import DecisionKind, Draft, StatuteList, Suggestions
from app.statute_index import build_index
from app.trace import TraceRecorder
from conftest import SMALL_CORPUS

CONTENT_REPLY = (
    "Response:\n醉酒驾驶构成危险驾驶罪，但2011年5月1日之前的行为适用当时的法律。\n\n"
    "Legal Basis:\n1. 《中华人民共和国刑法》第十二条\n2. 《刑法》第133条之一"
)


@pytest.fixture
def recorder():
    return TraceRecorder("q-fixture", test_mode=True)


def test_extract_elements(appendix_graph, query, make_backend, recorder):
    backend = make_backend({"element": [serialize_graph(appendix_graph)]})
    assert agents.extract_elements(query, backend, recorder=recorder) == appendix_graph
    assert recorder.steps[0].attempts == 1
    assert recorder.steps[0].warnings == []


def test_extract_elements_retries_once(appendix_graph, query, make_backend, recorder):
    backend = make_backend({"element": ["我无法给出结构化结果。", f"```json\n{serialize_graph(appendix_graph)}\n```"]})
    assert agents.extract_elements(query, backend, recorder=recorder) == appendix_graph
    step = recorder.steps[0]
    assert step.attempts == 2
    assert len(step.warnings) == 1


def test_extract_elements_fails_after_retry(query, make_backend, recorder):
    backend = make_backend({"element": ["第一次说明文字", "第二次说明文字"]})
    with pytest.raises(ExtractionFailed) as exc:
        agents.extract_elements(query, backend, recorder=recorder)
    assert exc.value.raw_outputs == ["第一次说明文字", "第二次说明文字"]
    assert recorder.steps[0].error == "EXTRACTION_FAILED"


def test_draft_initial(appendix_graph, query, make_backend):
    u = encode_prompt(appendix_graph, query)
    draft = agents.draft_initial(u, make_backend({"draft": ["初稿…"]}))
    assert draft == Draft(text="初稿…", iteration=0)
    again = agents.draft_initial(u, make_backend({"draft": ["初稿…"]}))
    assert again == draft
    with pytest.raises(EmptyDraft):
        agents.draft_initial(u, make_backend({"draft": ["  "]}))


@pytest.mark.parametrize("reply,kind", [
    ("Pass", DecisionKind.pass_),
    ("Call: FormatCheckAgent", DecisionKind.format_check),
    ("Call: LawSearchAgent", DecisionKind.law_search),
    ("Call: FormatCheckAgent then LawSearchAgent", DecisionKind.both),
])
def test_manager_decide(reply, kind, make_backend):
    decision = agents.manager_decide(Draft(text="草稿"), make_backend({"manager": [reply]}))
    assert decision.kind == kind
    assert not decision.degraded


@pytest.mark.parametrize("reply", ["结论Pass", "PASS。", "（Pass）", "审核通过：pass"])
def test_manager_pass_next_to_cjk(reply):
    assert agents.classify_manager_reply(reply) == DecisionKind.pass_


@pytest.mark.parametrize("reply", ["passive voice", "bypass", "compassion"])
def test_manager_pass_needs_word_edges(reply):
    assert agents.classify_manager_reply(reply) is None


def test_manager_unreadable_reply_degrades_to_pass(make_backend, recorder):
    backend = make_backend({"manager": ["The draft looks wonderful.", "The draft looks wonderful."]})
    decision = agents.manager_decide(Draft(text="草稿"), backend, recorder=recorder)
    assert decision.kind == DecisionKind.pass_
    assert decision.degraded
    assert recorder.steps[0].attempts == 2
    assert len(recorder.steps[0].warnings) == 2


def test_classify_manager_reply_over_generated_corpus():
    prefixes = ["", "Call: ", "I suggest: ", "結論：", "结论"]
    tokens = ["FormatCheckAgent", "LawSearchAgent", "Pass", "passive", "looks fine"]
    for prefix in prefixes:
        for r in range(len(tokens) + 1):
            for combo in itertools.permutations(tokens, r):
                reply = prefix + " then ".join(combo)
                kind = agents.classify_manager_reply(reply)
                assert kind == agents.classify_manager_reply(reply)
                wants_format = "FormatCheckAgent" in combo
                wants_law = "LawSearchAgent" in combo
                if wants_format and wants_law:
                    assert kind == DecisionKind.both
                elif wants_format:
                    assert kind == DecisionKind.format_check
                elif wants_law:
                    assert kind == DecisionKind.law_search
                elif "Pass" in combo:
                    assert kind == DecisionKind.pass_
                else:
                    assert kind is None


def test_format_suggestions(make_backend):
    s = agents.format_suggestions(Draft(text="草稿"), make_backend({"format_check": ["1. 删除重复段落\n2. 拆分长句"]}))
    assert s.items == ["删除重复段落", "拆分长句"]
    mixed = agents.format_suggestions(Draft(text="草稿"), make_backend({"format_check": ["• a\n- b"]}))
    assert mixed.items == ["a", "b"]
    with pytest.raises(FormatCheckEmpty):
        agents.format_suggestions(Draft(text="草稿"), make_backend({"format_check": ["  \n "]}))


def test_apply_suggestions_appends(make_backend, recorder):
    draft = Draft(text="草稿", applied_suggestions=["旧建议"])
    s = Suggestions(items=["一", "二", "三"], raw_text="一\n二\n三")
    revised = agents.apply_suggestions(draft, s, make_backend({"draft": ["修订稿"]}), recorder=recorder)
    assert revised.text == "修订稿"
    assert revised.applied_suggestions == ["旧建议", "一", "二", "三"]
    assert recorder.steps[0].agent_role == agents.DRAFT
    assert recorder.steps[0].action == "apply"


def test_apply_suggestions_notes_noop(make_backend, recorder):
    draft = Draft(text="草稿")
    s = Suggestions(items=["一"], raw_text="一")
    revised = agents.apply_suggestions(draft, s, make_backend({"draft": ["草稿"]}), recorder=recorder)
    assert revised.text == "草稿"
    assert len(recorder.steps[0].warnings) == 1


def test_law_search_ranks_drunk_driving_first(query, small_index, make_backend):
    result = agents.law_search(query, Draft(text="草稿"), make_backend({"law_search": ["醉驾\n刑法"]}), small_index, k=3)
    assert result.items[0].key == SMALL_CORPUS[0].key
    assert result.query_terms == ["醉驾", "刑法"]
    assert result.scores == sorted(result.scores, reverse=True)


def test_law_search_falls_back_to_query(query, small_index, make_backend, recorder):
    result = agents.law_search(query, Draft(text="草稿"), make_backend({"law_search": ["，。"]}), small_index, k=3,
                               recorder=recorder)
    assert result.query_terms == [query.text]
    assert result.items
    assert recorder.steps[0].warnings


def test_law_search_singleton_corpus(query, make_backend):
    index = build_index([SMALL_CORPUS[0]])
    result = agents.law_search(query, Draft(text="草稿"), make_backend({"law_search": ["醉驾"]}), index, k=1)
    assert result.items == [SMALL_CORPUS[0]]


def test_split_terms_caps_and_dedupes():
    assert agents.split_terms("1. 醉驾\n2. 醉驾、刑法，危险驾驶; 拘役；罚金\n吊销") == ["醉驾", "刑法", "危险驾驶", "拘役", "罚金"]


def test_integrate_statutes(make_backend):
    statutes = StatuteList(items=SMALL_CORPUS[:2], scores=[2.0, 1.0], query_terms=["醉驾"])
    draft = agents.integrate_statutes(Draft(text="草稿"), statutes,
                                      make_backend({"draft": ["依据《刑法》第133条之一，醉驾构成危险驾驶罪。"]}))
    assert draft.integrated_statute_ids == [s.statute_id for s in SMALL_CORPUS[:2]]
    assert "第133条之一" in draft.text
    again = agents.integrate_statutes(draft, StatuteList(items=SMALL_CORPUS[:1], scores=[2.0], query_terms=[]),
                                      make_backend({"draft": ["再次整合"]}))
    assert again.integrated_statute_ids == draft.integrated_statute_ids


def test_content_check_resolves_full_text(query, index, make_backend):
    opinion = agents.content_check(query, Draft(text="草稿"), make_backend({"content_check": [CONTENT_REPLY]}), index)
    assert opinion.response.startswith("醉酒驾驶构成危险驾驶罪")
    assert [(c.article_id, c.verified) for c in opinion.legal_basis] == [
        ("第十二条", True), ("第一百三十三条之一", True),
    ]
    assert opinion.legal_basis[1].text.startswith("在道路上驾驶机动车")
    assert opinion.source_query_id == query.id


def test_content_check_ignores_prose_starting_with_label(query, index, make_backend):
    reply = ("Response:\n醉驾构成危险驾驶罪。\n法律依据方面，请参考下列条文。\n\n"
             "Legal Basis:\n《中华人民共和国刑法》第一百三十三条之一")
    opinion = agents.content_check(query, Draft(text="草稿"), make_backend({"content_check": [reply]}), index)
    assert opinion.response == "醉驾构成危险驾驶罪。\n法律依据方面，请参考下列条文。"
    assert [(c.article_id, c.verified) for c in opinion.legal_basis] == [("第一百三十三条之一", True)]


@pytest.mark.parametrize("text,expected", [
    ("Response:\n甲\nLegal Basis:\n乙", {"response": "甲", "legal_basis": "乙"}),
    ("**答复：** 甲\n\n**法律依据**\n乙", {"response": "甲", "legal_basis": "乙"}),
    ("## Response\n甲\n答复如下是正文\n## Legal Basis\n乙", {"response": "甲\n答复如下是正文", "legal_basis": "乙"}),
    ("Response:\n草\nResponse:\n甲\nLegal Basis:\n乙", {"response": "甲", "legal_basis": "乙"}),
    ("Legal basis for this answer is unclear.", {}),
])
def test_split_sections(text, expected):
    assert agents.split_sections(text) == expected


def test_content_check_keeps_unverified_lines(query, index, make_backend):
    reply = "Response:\n可以起诉。\n\nLegal Basis:\n《刑法》第999条"
    opinion = agents.content_check(query, Draft(text="草稿"), make_backend({"content_check": [reply]}), index)
    assert opinion.legal_basis[0].verified is False
    assert opinion.legal_basis[0].text == "《刑法》第999条"


def test_content_check_missing_section(query, make_backend, recorder):
    backend = make_backend({"content_check": ["Response:\n只有答复", "Response:\n还是只有答复"]})
    with pytest.raises(SectionMissing) as exc:
        agents.content_check(query, Draft(text="草稿"), backend, recorder=recorder)
    assert exc.value.which == "legal_basis"
    assert recorder.steps[0].attempts == 2


def test_prompts_are_versioned():
    for name in ("element", "draft", "manager", "format_check", "law_search", "content_check", "negative", "flag"):
        assert agents.prompt_version(name) >= 1
        assert not agents.load_prompt(name).startswith("# version")


def test_prompt_dir_overrides(tmp_path):
    (tmp_path / "manager.txt").write_text("# version: 2\n自訂管理者提示", encoding="utf-8")
    assert agents.load_prompt("manager", tmp_path) == "自訂管理者提示"
    assert agents.prompt_version("manager", tmp_path) == 2
    assert agents.load_prompt("draft", tmp_path) == agents.load_prompt("draft")
