from typing import Any, Optional


# 統一錯誤回應格式
def error_response(error_code: str, message: str, **extra: Any):
    payload = {"success": False, "error_code": error_code, "message": message}
    payload.update(extra)
    return payload


class LegalConsultError(Exception):
    error_code = "INTERNAL_ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    def to_response(self):
        return error_response(self.error_code, self.message)


# 設定
class ConfigError(LegalConsultError):
    error_code = "CONFIG_ERROR"

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


# 元素圖
class InvalidGraph(LegalConsultError):
    error_code = "INVALID_GRAPH"

    def __init__(self, report):
        codes = ", ".join(v.code for v in report.violations)
        super().__init__(f"元素圖不合法: {codes}")
        self.report = report


class EmptyQuery(LegalConsultError):
    error_code = "EMPTY_QUERY"


class NoStructuredPayload(LegalConsultError):
    error_code = "NO_STRUCTURED_PAYLOAD"


class SchemaMismatch(LegalConsultError):
    error_code = "SCHEMA_MISMATCH"

    def __init__(self, message: str, key_path: str = ""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class InvariantViolation(LegalConsultError):
    error_code = "INVARIANT_VIOLATION"

    def __init__(self, message: str, report=None, line: Optional[int] = None, code: str = ""):
        super().__init__(message)
        self.report = report
        self.line = line
        self.code = code


# 模型後端
class BackendError(LegalConsultError):
    error_code = "BACKEND_ERROR"


class Transport(BackendError):
    error_code = "TRANSPORT_ERROR"


class RemoteStatus(BackendError):
    error_code = "REMOTE_STATUS"

    def __init__(self, code: int, body: str):
        super().__init__(f"遠端回應狀態 {code}: {body[:200]}")
        self.code = code
        self.body = body[:200]


class Timeout(BackendError):
    error_code = "BACKEND_TIMEOUT"


class RetriesExhausted(BackendError):
    error_code = "RETRIES_EXHAUSTED"

    def __init__(self, attempts: int, last_error: Exception):
        super().__init__(f"重試 {attempts} 次後仍失敗: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class MissingCredential(BackendError):
    error_code = "MISSING_CREDENTIAL"


class ScriptExhausted(BackendError):
    error_code = "SCRIPT_EXHAUSTED"

    def __init__(self, agent_role: str, call_index: int):
        super().__init__(f"腳本已用盡: ({agent_role}, {call_index})")
        self.agent_role = agent_role
        self.call_index = call_index


# 代理
class AgentError(LegalConsultError):
    error_code = "AGENT_ERROR"


class ExtractionFailed(AgentError):
    error_code = "EXTRACTION_FAILED"

    def __init__(self, message: str, raw_outputs: list):
        super().__init__(message)
        self.raw_outputs = raw_outputs


class EmptyDraft(AgentError):
    error_code = "EMPTY_DRAFT"


class FormatCheckEmpty(AgentError):
    error_code = "FORMAT_CHECK_EMPTY"


class NoTermsProposed(AgentError):
    error_code = "NO_TERMS_PROPOSED"


class SectionMissing(AgentError):
    error_code = "SECTION_MISSING"

    def __init__(self, which: str):
        super().__init__(f"缺少段落: {which}")
        self.which = which


class ConsultationTimeout(AgentError):
    error_code = "CONSULTATION_TIMEOUT"


# 包住代理或後端錯誤，附上已完成的部分追蹤
class ConsultationFailed(LegalConsultError):
    error_code = "CONSULTATION_FAILED"

    def __init__(self, cause: LegalConsultError, trace):
        super().__init__(f"{cause.error_code}: {cause.message}")
        self.cause = cause
        self.trace = trace


class MalformedTrace(LegalConsultError):
    error_code = "MALFORMED_TRACE"


# 法條索引
class EmptyCorpus(LegalConsultError):
    error_code = "EMPTY_CORPUS"


class EmptyIndex(LegalConsultError):
    error_code = "EMPTY_INDEX"


class DuplicateStatute(LegalConsultError):
    error_code = "DUPLICATE_STATUTE"

    def __init__(self, key):
        super().__init__(f"法條重複: {key[0]} {key[1]}")
        self.key = key


class NotFound(LegalConsultError):
    error_code = "STATUTE_NOT_FOUND"


class IndexFormatError(LegalConsultError):
    error_code = "INDEX_FORMAT_ERROR"


# 資料集
class ParseError(LegalConsultError):
    error_code = "PARSE_ERROR"

    def __init__(self, line: int, message: str = ""):
        super().__init__(f"第 {line} 行無法解析: {message}")
        self.line = line


class EmptySplit(LegalConsultError):
    error_code = "EMPTY_SPLIT"


class EmptyBatch(LegalConsultError):
    error_code = "EMPTY_BATCH"


class NonpositiveBeta(LegalConsultError):
    error_code = "NONPOSITIVE_BETA"


class NonuniformBeta(LegalConsultError):
    error_code = "NONUNIFORM_BETA"


class GenerationRejected(LegalConsultError):
    error_code = "GENERATION_REJECTED"

    def __init__(self, attempts: list, reports: list):
        codes = sorted({code for report in reports for code in report.codes})
        super().__init__(f"負例生成被拒絕: {', '.join(codes)}")
        self.attempts = attempts
        self.reports = reports


class MisalignedInputs(LegalConsultError):
    error_code = "MISALIGNED_INPUTS"
