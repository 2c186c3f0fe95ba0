import hashlib
import json
import logging
import os
import random
import threading
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import requests

from app.config import BackendConfig
from app.errors import (
    BackendError, ConfigError, MissingCredential, RemoteStatus, RetriesExhausted, ScriptExhausted, Timeout, Transport,
)
from app.schemas import ChatMessage, Role

logger = logging.getLogger(__name__)

BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2
BACKOFF_CAP_S = 8.0

ScriptedScenario = Dict[Tuple[str, int], str]


def messages_digest(messages: List[ChatMessage]) -> str:
    h = hashlib.sha256()
    for m in messages:
        h.update(m.role.value.encode("utf-8"))
        h.update(b"\x00")
        h.update(m.content.encode("utf-8"))
        h.update(b"\x01")
    return h.hexdigest()[:16]


def backoff_delay(attempt: int, jitter: bool = True, rng: Optional[random.Random] = None) -> float:
    ceiling = min(BACKOFF_CAP_S, BACKOFF_BASE_S * BACKOFF_FACTOR ** attempt)
    if not jitter:
        return ceiling
    return (rng or random).uniform(0, ceiling)


def _check_messages(messages: List[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages 不能為空")
    if messages[0].role not in (Role.system, Role.user):
        raise ValueError("第一則訊息必須是 system 或 user")


def _is_transient(error: BackendError) -> bool:
    if isinstance(error, (Timeout, Transport)):
        return True
    return isinstance(error, RemoteStatus) and (error.code == 429 or error.code >= 500)


# 呼叫 OpenAI 相容的 chat completions 端點
def complete(
    messages: List[ChatMessage],
    cfg: BackendConfig,
    session=None,
    temperature: Optional[float] = None,
    max_tokens: Optional[int] = None,
    jitter: bool = True,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    _check_messages(messages)
    api_key = os.getenv(cfg.api_key_env, "").strip()
    if not api_key:
        raise MissingCredential(f"未設定環境變數 {cfg.api_key_env}")
    http = session or requests
    url = cfg.endpoint.rstrip("/") + "/chat/completions"
    body = {
        "model": cfg.model_id,
        "messages": [{"role": m.role.value, "content": m.content} for m in messages],
        "temperature": cfg.temperature if temperature is None else temperature,
        "max_tokens": cfg.max_tokens if max_tokens is None else max_tokens,
    }
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
    last_error: Optional[BackendError] = None
    for attempt in range(cfg.max_retries + 1):
        try:
            response = http.post(url, json=body, headers=headers, timeout=cfg.timeout)
        except requests.Timeout as e:
            last_error = Timeout(f"請求逾時: {e}")
        except requests.RequestException as e:
            last_error = Transport(f"連線失敗: {e}")
        else:
            if response.status_code == 200:
                try:
                    return response.json()["choices"][0]["message"]["content"] or ""
                except (ValueError, KeyError, IndexError, TypeError):
                    raise RemoteStatus(200, response.text)
            last_error = RemoteStatus(response.status_code, response.text)
            if not _is_transient(last_error):
                raise last_error
        if attempt < cfg.max_retries:
            delay = backoff_delay(attempt, jitter=jitter)
            logger.warning("模型請求第 %d 次失敗 (%s)，%.2f 秒後重試", attempt + 1, last_error.error_code, delay)
            sleep(delay)
    raise RetriesExhausted(cfg.max_retries + 1, last_error)


# 代理透過 complete 呼叫模型，role 為呼叫者名稱
class ChatBackend:
    def complete(self, messages: List[ChatMessage], role: str = "default", temperature: Optional[float] = None,
                 max_tokens: Optional[int] = None) -> str:
        raise NotImplementedError


class OpenAICompatibleBackend(ChatBackend):
    def __init__(self, cfg: BackendConfig, test_mode: bool = False):
        self.cfg = cfg
        self.jitter = not test_mode
        self.session = requests.Session()

    def complete(self, messages, role="default", temperature=None, max_tokens=None):
        logger.debug("呼叫模型 role=%s model=%s", role, self.cfg.model_id)
        return complete(messages, self.cfg, session=self.session, temperature=temperature,
                        max_tokens=max_tokens, jitter=self.jitter)


# 依角色依序回放腳本回覆，用完即報錯
class ScriptedBackend(ChatBackend):
    def __init__(self, scenario: ScriptedScenario):
        if not scenario:
            raise ValueError("腳本不能為空")
        self.scenario = dict(scenario)
        self.counters: Dict[str, int] = {}
        self.calls: List[Tuple[str, str]] = []
        self._lock = threading.Lock()

    def complete(self, messages, role="default", temperature=None, max_tokens=None):
        _check_messages(messages)
        with self._lock:
            index = self.counters.get(role, 0)
            key = (role, index)
            if key not in self.scenario:
                raise ScriptExhausted(role, index)
            self.counters[role] = index + 1
            self.calls.append((role, messages_digest(messages)))
            return self.scenario[key]

    @property
    def call_roles(self) -> List[str]:
        return [role for role, _ in self.calls]


def scripted_backend(scenario: ScriptedScenario) -> ScriptedBackend:
    return ScriptedBackend(scenario)


# 腳本檔格式: {"manager": ["Pass"], "draft": ["..."]}，非字串回覆以 JSON 文字回放
def scenario_from_dict(data: Dict[str, list]) -> ScriptedScenario:
    scenario: ScriptedScenario = {}
    for role, replies in data.items():
        if isinstance(replies, str):
            replies = [replies]
        for i, reply in enumerate(replies):
            scenario[(role, i)] = reply if isinstance(reply, str) else json.dumps(reply, ensure_ascii=False)
    return scenario


def load_scenario(path) -> ScriptedScenario:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"找不到腳本檔: {path}", path=str(path))
    except json.JSONDecodeError as e:
        raise ConfigError(f"腳本檔格式錯誤 {path}: {e}", path=str(path))
    return scenario_from_dict(data)


def make_backend_factory(cfg: BackendConfig, test_mode: bool = False) -> Callable[[], ChatBackend]:
    if cfg.kind == "scripted":
        scenario = load_scenario(cfg.scenario_path)
        return lambda: ScriptedBackend(scenario)
    shared = OpenAICompatibleBackend(cfg, test_mode=test_mode)
    return lambda: shared
