import json
import random

import pytest
from faker import Faker

from app.errors import EmptyQuery, InvalidGraph, InvariantViolation, NoStructuredPayload, SchemaMismatch
from app.graph import (
    PROMPT_SEPARATOR, dump_graph, encode_prompt, find_json_object, iter_graphs_jsonl, load_graph, parse_graph,
    render_opinion, serialize_graph, validate_graph,
)
from app.schemas import (
    GRAPH_KEYS, ConsultationQuery, ElementGraph, Entity, Event, LegalOpinion, Relationship, StatuteCitation,
)


def random_graph(fake: Faker, rng: random.Random) -> ElementGraph:
    names = [f"{fake.first_name()}-{i}" for i in range(rng.randint(1, 5))]
    return ElementGraph(
        entities=[
            Entity(name=name, type_label=fake.word(), attributes={fake.word(): fake.sentence() for _ in range(rng.randint(0, 2))})
            for name in names
        ],
        events=[
            Event(description=fake.sentence(), time=rng.choice([None, str(fake.year())]),
                  attributes={fake.word(): fake.word() for _ in range(rng.randint(0, 2))})
            for _ in range(rng.randint(0, 3))
        ],
        relationships=[
            Relationship(relation_type=fake.word(), source=rng.choice(names), target=rng.choice(names))
            for _ in range(rng.randint(0, 3))
        ],
        user_claims=[fake.sentence() for _ in range(rng.randint(0, 3))],
        key_facts=[fake.sentence() for _ in range(rng.randint(0, 3))],
        legal_questions=[fake.sentence() for _ in range(rng.randint(0, 3))],
    )


def test_appendix_graph_is_valid(appendix_graph):
    assert validate_graph(appendix_graph).ok
    assert len(appendix_graph.entities) == 4
    assert len(appendix_graph.events) == 1
    assert len(appendix_graph.relationships) == 3
    assert len(appendix_graph.user_claims) == 3
    assert len(appendix_graph.key_facts) == 4
    assert len(appendix_graph.legal_questions) == 3


def test_unresolved_endpoint(appendix_graph):
    graph = appendix_graph.model_copy(update={
        "relationships": [Relationship(relation_type="Ruling", source="Judge", target="User")]
    })
    report = validate_graph(graph)
    assert report.codes == ["unresolved-endpoint"]
    assert report.violations[0].path == "relationships[0].source"


def test_empty_entities(appendix_graph):
    graph = appendix_graph.model_copy(update={"entities": [], "relationships": []})
    assert validate_graph(graph).codes == ["empty-entities"]


def test_duplicate_entity_name(appendix_graph):
    entities = list(appendix_graph.entities) + [Entity(name="User", type_label="Person")]
    graph = appendix_graph.model_copy(update={"entities": entities})
    assert validate_graph(graph).codes == ["duplicate-entity-name"]


def test_serialize_is_deterministic(appendix_graph):
    copy = ElementGraph.model_validate(appendix_graph.model_dump(by_alias=True))
    assert serialize_graph(appendix_graph) == serialize_graph(copy)


def test_serialize_keeps_schema_order(appendix_graph):
    text = serialize_graph(appendix_graph)
    positions = [text.index(f'"{key}"') for key in GRAPH_KEYS]
    assert positions == sorted(positions)


def test_serialize_never_omits_keys():
    graph = ElementGraph(entities=[Entity(name="甲", type_label="Person")], events=[], relationships=[],
                         user_claims=[], key_facts=[], legal_questions=[])
    payload = json.loads(serialize_graph(graph))
    assert list(payload) == list(GRAPH_KEYS)
    assert payload["events"] == []


def test_serialize_rejects_invalid_graph(appendix_graph):
    graph = appendix_graph.model_copy(update={"entities": [], "relationships": []})
    with pytest.raises(InvalidGraph):
        serialize_graph(graph)


def test_encode_prompt_concatenates(appendix_graph):
    q = ConsultationQuery(id="q1", text="我该怎么办?")
    u = encode_prompt(appendix_graph, q)
    assert u.full_text == serialize_graph(appendix_graph) + PROMPT_SEPARATOR + "我该怎么办?"
    assert encode_prompt(appendix_graph, q).full_text == u.full_text


def test_encode_prompt_lists_legal_question(appendix_graph, query):
    u = encode_prompt(appendix_graph, query)
    assert "Was drunk driving a criminal offense in 2011?" in u.graph_section
    assert u.query_section == query.text


def test_encode_prompt_rejects_empty_query(appendix_graph):
    with pytest.raises(EmptyQuery):
        encode_prompt(appendix_graph, ConsultationQuery(id="q1", text="   "))


def test_parse_fenced_equals_unfenced(appendix_graph):
    text = serialize_graph(appendix_graph)
    assert parse_graph(f"```json\n{text}\n```") == parse_graph(text) == appendix_graph


def test_parse_embedded_in_prose(appendix_graph):
    text = serialize_graph(appendix_graph)
    assert parse_graph(f"Sure! Here is the graph: {text} Hope this helps.") == appendix_graph


def test_parse_skips_unparseable_braces(appendix_graph):
    text = serialize_graph(appendix_graph)
    assert parse_graph("Notes {not json} then " + text) == appendix_graph


def test_parse_without_payload():
    with pytest.raises(NoStructuredPayload):
        parse_graph("I cannot help with that.")


def test_parse_missing_key(appendix_graph):
    payload = json.loads(serialize_graph(appendix_graph))
    del payload["key_facts"]
    with pytest.raises(SchemaMismatch) as exc:
        parse_graph(json.dumps(payload))
    assert exc.value.key_path == "key_facts"


def test_parse_wrong_type(appendix_graph):
    payload = json.loads(serialize_graph(appendix_graph))
    payload["user_claims"] = "What should I do?"
    with pytest.raises(SchemaMismatch) as exc:
        parse_graph(json.dumps(payload))
    assert exc.value.key_path.startswith("user_claims")


def test_parse_reports_invariant_violation(appendix_graph):
    payload = json.loads(serialize_graph(appendix_graph))
    payload["relationships"].append({"type": "Ruling", "source": "Judge", "target": "User"})
    with pytest.raises(InvariantViolation) as exc:
        parse_graph(json.dumps(payload))
    assert exc.value.report.codes == ["unresolved-endpoint"]


def test_find_json_object_handles_braces_in_strings():
    assert find_json_object('x {"a": "}{"} y') == {"a": "}{"}


def test_round_trip_randomized():
    fake = Faker()
    Faker.seed(20240501)
    rng = random.Random(7)
    for _ in range(1000):
        graph = random_graph(fake, rng)
        assert parse_graph(serialize_graph(graph)) == graph


def test_graph_files(tmp_path, appendix_graph):
    path = tmp_path / "graph.json"
    dump_graph(appendix_graph, path)
    assert load_graph(path) == appendix_graph
    lines = tmp_path / "graphs.jsonl"
    lines.write_text(json.dumps(json.loads(serialize_graph(appendix_graph)), ensure_ascii=False) + "\n\n",
                     encoding="utf-8")
    assert list(iter_graphs_jsonl(lines)) == [appendix_graph]


def test_render_opinion_marks_unverified():
    opinion = LegalOpinion(
        response="可以起诉。",
        legal_basis=[
            StatuteCitation(law_name="中华人民共和国民法典", article_id="第六百七十五条", text="借款人应当按照约定的期限返还借款。"),
            StatuteCitation(text="《某法》第9条", verified=False),
        ],
        source_query_id="q1",
    )
    assert render_opinion(opinion) == (
        "Response\n========\n可以起诉。\n\nLegal Basis\n===========\n"
        "1. 《中华人民共和国民法典》第六百七十五条\n   借款人应当按照约定的期限返还借款。\n"
        "2. [unverified]\n   《某法》第9条\n"
    )
