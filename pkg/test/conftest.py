import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

import app.models  # noqa: F401 註冊資料表
from app.config import OrchestratorConfig
from app.database import Base, get_db
from app.graph import load_graph
from app.llm import ScriptedBackend, load_scenario, scenario_from_dict
from app.main import app
from app.schemas import ConsultationQuery, Statute
from app.statute_index import build_index, load_corpus

ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = ROOT / "data"
GOLDEN_DIR = Path(__file__).resolve().parent / "golden"

# 三篇法條的小語料，BM25 手算用
SMALL_CORPUS = [
    Statute(law_name="中华人民共和国刑法", article_id="第一百三十三条之一",
            text="在道路上驾驶机动车，有下列情形之一的，处拘役，并处罚金：（二）醉酒驾驶机动车的。"),
    Statute(law_name="中华人民共和国民法典", article_id="第一千一百六十五条",
            text="行为人因过错侵害他人民事权益造成损害的，应当承担侵权责任。"),
    Statute(law_name="中华人民共和国民法典", article_id="第六百六十七条",
            text="借款合同是借款人向贷款人借款，到期返还借款并支付利息的合同。"),
]


@pytest.fixture(scope="session")
def corpus():
    return load_corpus(DATA_DIR / "statutes.jsonl")


@pytest.fixture(scope="session")
def index(corpus):
    return build_index(corpus)


@pytest.fixture(scope="session")
def small_index():
    return build_index(SMALL_CORPUS)


@pytest.fixture
def appendix_graph():
    return load_graph(DATA_DIR / "element_graph.json")


@pytest.fixture
def question():
    return (DATA_DIR / "question.txt").read_text(encoding="utf-8").strip()


@pytest.fixture
def query(question):
    return ConsultationQuery(id="q-fixture", text=question)


@pytest.fixture
def scenario():
    return load_scenario(DATA_DIR / "scenario.json")


@pytest.fixture
def scenario_data():
    return json.loads((DATA_DIR / "scenario.json").read_text(encoding="utf-8"))


@pytest.fixture
def orch_cfg():
    return OrchestratorConfig(test_mode=True)


@pytest.fixture
def make_backend():
    def factory(data):
        return ScriptedBackend(scenario_from_dict(data))
    return factory


@pytest.fixture
def config_path(tmp_path):
    cfg = {
        "backend": {"kind": "scripted", "scenario_path": str(DATA_DIR / "scenario.json")},
        "corpus_path": str(DATA_DIR / "statutes.jsonl"),
        "database_url": f"sqlite:///{tmp_path / 'traces.db'}",
        "log_level": "WARNING",
        "test_mode": True,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture
def clean_env(monkeypatch):
    for name in ("LEGAL_CONFIG", "LEGAL_BACKEND_ENDPOINT", "LEGAL_MODEL_ID", "LEGAL_CORPUS_PATH",
                 "LEGAL_LOG_LEVEL", "LEGAL_TEST_MODE", "DATABASE_URL"):
        monkeypatch.delenv(name, raising=False)
    return monkeypatch


# 使用暫存 SQLite 檔案，每個請求各自一個 session
@pytest.fixture(scope="function")
def session_factory(tmp_path):
    engine = create_engine(f"sqlite:///{tmp_path / 'test.db'}", connect_args={"check_same_thread": False})
    Base.metadata.create_all(bind=engine)
    TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    yield TestingSessionLocal
    Base.metadata.drop_all(bind=engine)
    engine.dispose()


@pytest.fixture(scope="function")
def db(session_factory):
    db = session_factory()
    try:
        yield db
    finally:
        db.close()


@pytest.fixture(scope="function")
def client(clean_env, config_path, session_factory):
    clean_env.setenv("LEGAL_CONFIG", str(config_path))

    def override_get_db():
        db = session_factory()
        try:
            yield db
        finally:
            db.close()

    app.dependency_overrides[get_db] = override_get_db
    with TestClient(app) as c:
        yield c
    app.dependency_overrides.clear()
