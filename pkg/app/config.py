import json
import logging
import os
from pathlib import Path
from typing import Dict, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from app.errors import ConfigError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


# 模型後端設定
class BackendConfig(BaseModel):
    kind: Literal["openai", "scripted"] = "openai"
    endpoint: str = "https://api.openai.com/v1"
    model_id: str = "qwen2.5-14b-instruct"
    temperature: float = Field(0.0, ge=0, le=2)
    max_tokens: int = Field(2048, gt=0)
    timeout: float = Field(60.0, gt=0, description="每次請求逾時秒數")
    max_retries: int = Field(3, ge=0)
    api_key_env: str = "OPENAI_API_KEY"
    scenario_path: Optional[str] = None


class AgentDecoding(BaseModel):
    temperature: Optional[float] = Field(None, ge=0, le=2)
    max_tokens: Optional[int] = Field(None, gt=0)


# 流程設定，T 預設 5 輪
class OrchestratorConfig(BaseModel):
    max_iterations: int = Field(5, ge=1)
    top_k_statutes: int = Field(3, ge=1)
    wall_clock_budget_s: float = Field(120.0, gt=0)
    agent_overrides: Dict[str, AgentDecoding] = Field(default_factory=dict)
    debug: bool = False
    test_mode: bool = False

    def decoding_for(self, role: str) -> AgentDecoding:
        return self.agent_overrides.get(role, AgentDecoding())


class AppConfig(BaseModel):
    backend: BackendConfig = Field(default_factory=BackendConfig)
    orchestrator: OrchestratorConfig = Field(default_factory=OrchestratorConfig)
    corpus_path: str = "data/statutes.jsonl"
    index_cache_path: Optional[str] = None
    bind_host: str = "127.0.0.1"
    bind_port: int = Field(8000, gt=0, lt=65536)
    log_level: str = "INFO"
    database_url: str = "sqlite:///./traces.db"
    trace_dir: Optional[str] = None
    prompt_dir: Optional[str] = None
    test_mode: bool = False
    debug: bool = False

    @field_validator("log_level")
    def validate_log_level(cls, value):
        value = value.upper()
        if value not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"未知的日誌層級: {value}")
        return value

    def check_paths(self) -> "AppConfig":
        required = [("corpus_path", self.corpus_path)]
        if self.backend.kind == "scripted":
            required.append(("backend.scenario_path", self.backend.scenario_path))
        if self.prompt_dir:
            required.append(("prompt_dir", self.prompt_dir))
        for name, path in required:
            if not path or not Path(path).exists():
                raise ConfigError(f"{name} 指向的路徑不存在: {path}", path=str(path))
        return self


_ENV_OVERRIDES = {
    "LEGAL_BACKEND_ENDPOINT": ("backend", "endpoint"),
    "LEGAL_MODEL_ID": ("backend", "model_id"),
    "LEGAL_CORPUS_PATH": (None, "corpus_path"),
    "LEGAL_LOG_LEVEL": (None, "log_level"),
    "DATABASE_URL": (None, "database_url"),
}


def _truthy(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes")


# 讀取設定檔並套用環境變數覆寫
def load_config(path: Optional[str] = None, check: bool = True) -> AppConfig:
    load_dotenv()
    path = path or os.getenv("LEGAL_CONFIG")
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"找不到設定檔: {path}", path=str(path))
        except json.JSONDecodeError as e:
            raise ConfigError(f"設定檔格式錯誤 {path}: {e}", path=str(path))
    for env_name, (section, key) in _ENV_OVERRIDES.items():
        value = os.getenv(env_name)
        if value:
            target = data.setdefault(section, {}) if section else data
            target[key] = value
    if _truthy(os.getenv("LEGAL_TEST_MODE", "")):
        data["test_mode"] = True
    try:
        config = AppConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"設定內容不合法: {e.errors()[0]['loc']} {e.errors()[0]['msg']}")
    # 測試模式與除錯旗標同步到流程設定
    config.orchestrator.test_mode = config.orchestrator.test_mode or config.test_mode
    config.orchestrator.debug = config.orchestrator.debug or config.debug
    return config.check_paths() if check else config


def setup_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        datefmt="%Y-%m-%d %H:%M:%S")
