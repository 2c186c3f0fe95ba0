# 命令列: consult / index / eval / dataset / trace / serve
import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from app.config import AppConfig, load_config, setup_logging
from app.dataset import (
    compute_stats, flag_answers, generate_negatives, load_triplets, read_jsonl, render_stats, write_jsonl,
)
from app.errors import (
    BackendError, ConfigError, ConsultationFailed, ExtractionFailed, LegalConsultError, MisalignedInputs, ParseError,
)
from app.graph import dump_graph, render_opinion
from app.llm import make_backend_factory
from app.metrics import DEFAULT_BLEU_N, evaluate_corpus, render_report, report_to_json
from app.orchestrator import assign_trace_id, consult
from app.schemas import ConsultationQuery
from app.statute_index import build_index, load_corpus, load_index, open_index, save_index, search
from app.trace import append_trace_jsonl, read_traces_jsonl, replay_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_EXTRACTION = 4


def exit_code_for(error: LegalConsultError) -> int:
    if isinstance(error, ConsultationFailed):
        error = error.cause
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, BackendError):
        return EXIT_BACKEND
    if isinstance(error, ExtractionFailed):
        return EXIT_EXTRACTION
    return EXIT_ERROR


def _load_config(args) -> AppConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "test_mode", False):
        cfg.test_mode = True
        cfg.orchestrator.test_mode = True
    setup_logging(args.log_level or cfg.log_level)
    return cfg


def query_id_for(text: str) -> str:
    return "q-" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _read_question(args) -> str:
    if args.question_file:
        return Path(args.question_file).read_text(encoding="utf-8").strip()
    return args.question or ""


# 單次諮詢
def cmd_consult(args) -> int:
    cfg = _load_config(args)
    if args.max_iter is not None:
        cfg.orchestrator.max_iterations = args.max_iter
    text = _read_question(args)
    q = ConsultationQuery(id=args.query_id or query_id_for(text), text=text)
    index = open_index(cfg.corpus_path, cfg.index_cache_path)
    backend = make_backend_factory(cfg.backend, test_mode=cfg.test_mode)()
    on_graph = (lambda graph: dump_graph(graph, args.graph_out)) if args.graph_out else None
    try:
        opinion, trace = consult(q, cfg.orchestrator, backend, index, prompt_dir=cfg.prompt_dir, on_graph=on_graph)
    except ConsultationFailed as e:
        if args.trace_out:
            append_trace_jsonl(assign_trace_id(e.trace, q, cfg.orchestrator), args.trace_out)
        raise
    trace = assign_trace_id(trace, q, cfg.orchestrator)
    if args.trace_out:
        append_trace_jsonl(trace, args.trace_out)
    sys.stdout.write(render_opinion(opinion))
    return EXIT_OK


# 索引建立與查詢
def cmd_index_build(args) -> int:
    index = build_index(load_corpus(args.corpus))
    save_index(index, args.out)
    print(f"indexed {index.doc_count} statutes -> {args.out}")
    return EXIT_OK


def cmd_index_search(args) -> int:
    index = load_index(args.index)
    for rank, (statute, score) in enumerate(search(index, args.query, args.k), start=1):
        print(f"{rank}\t{score:.4f}\t{statute.statute_id}")
    return EXIT_OK


# 每行一筆: {"prediction": ...} / {"reference": ...}，也接受 {"text": ...} 或純字串
def _texts(path, field: str) -> List[str]:
    texts = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, str(e)[:100])
            value = record.get(field, record.get("text")) if isinstance(record, dict) else record
            if not isinstance(value, str):
                raise ParseError(line_no, f"缺少 {field} 欄位")
            texts.append(value)
    return texts


# 評估
def cmd_eval(args) -> int:
    predictions, references = _texts(args.predictions, "prediction"), _texts(args.references, "reference")
    if len(predictions) != len(references):
        raise MisalignedInputs(f"預測 {len(predictions)} 筆, 參考 {len(references)} 筆, 數量不一致")
    report = evaluate_corpus(list(zip(predictions, references)), bleu_n=args.bleu_n)
    print(render_report(report))
    if args.json_out:
        Path(args.json_out).write_text(report_to_json(report), encoding="utf-8")
    return EXIT_OK


# 資料集工具
def cmd_dataset_stats(args) -> int:
    print(render_stats(compute_stats(load_triplets(args.triplets))))
    return EXIT_OK


def cmd_dataset_gen_neg(args) -> int:
    cfg = _load_config(args)
    index = open_index(cfg.corpus_path, cfg.index_cache_path)
    factory = make_backend_factory(cfg.backend, test_mode=cfg.test_mode)
    accepted, rejected = generate_negatives(read_jsonl(args.input), factory, index, args.workers, cfg.prompt_dir)
    write_jsonl(accepted, args.out)
    write_jsonl(rejected, args.review)
    print(f"accepted {len(accepted)}, rejected {len(rejected)}")
    return EXIT_OK


def cmd_dataset_flag(args) -> int:
    cfg = _load_config(args)
    factory = make_backend_factory(cfg.backend, test_mode=cfg.test_mode)
    reports = flag_answers(read_jsonl(args.input), factory, args.workers, cfg.prompt_dir)
    write_jsonl(reports, args.out)
    print(f"flagged {sum(1 for r in reports if r['suspect'])} of {len(reports)}")
    return EXIT_OK


def cmd_trace_show(args) -> int:
    for trace in read_traces_jsonl(args.trace_file):
        if args.trace_id and trace.trace_id != args.trace_id:
            continue
        sys.stdout.write(replay_trace(trace))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    if args.config:
        os.environ["LEGAL_CONFIG"] = args.config
    cfg = _load_config(args)
    uvicorn.run("app.main:app", host=args.host or cfg.bind_host, port=args.port or cfg.bind_port,
                log_level=cfg.log_level.lower())
    return EXIT_OK


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"必須是正整數: {value}")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="legal-consult", description="法律諮詢多代理系統")
    parser.add_argument("--log-level", default=None, help="覆寫設定檔的日誌層級")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("consult", help="回答一個法律諮詢問題")
    p.add_argument("question", nargs="?")
    p.add_argument("--question-file")
    p.add_argument("--query-id")
    p.add_argument("--config")
    p.add_argument("--test-mode", action="store_true")
    p.add_argument("--graph-out")
    p.add_argument("--trace-out")
    p.add_argument("--max-iter", type=_positive_int)
    p.set_defaults(func=cmd_consult)

    p = sub.add_parser("index", help="法條索引")
    index_sub = p.add_subparsers(dest="index_command", required=True)
    b = index_sub.add_parser("build")
    b.add_argument("corpus")
    b.add_argument("out")
    b.set_defaults(func=cmd_index_build)
    s = index_sub.add_parser("search")
    s.add_argument("index")
    s.add_argument("query")
    s.add_argument("-k", type=_positive_int, default=3)
    s.set_defaults(func=cmd_index_search)

    p = sub.add_parser("eval", help="ROUGE/BLEU 評估")
    p.add_argument("predictions")
    p.add_argument("references")
    p.add_argument("--bleu-n", type=_positive_int, default=DEFAULT_BLEU_N)
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dataset", help="資料集工具")
    dataset_sub = p.add_subparsers(dest="dataset_command", required=True)
    st = dataset_sub.add_parser("stats")
    st.add_argument("triplets")
    st.set_defaults(func=cmd_dataset_stats)
    g = dataset_sub.add_parser("gen-neg")
    g.add_argument("input")
    g.add_argument("--out", required=True)
    g.add_argument("--review", required=True)
    g.add_argument("--config")
    g.add_argument("--test-mode", action="store_true")
    g.add_argument("--workers", type=_positive_int, default=4)
    g.set_defaults(func=cmd_dataset_gen_neg)
    f = dataset_sub.add_parser("flag")
    f.add_argument("input")
    f.add_argument("--out", required=True)
    f.add_argument("--config")
    f.add_argument("--test-mode", action="store_true")
    f.add_argument("--workers", type=_positive_int, default=4)
    f.set_defaults(func=cmd_dataset_flag)

    p = sub.add_parser("trace", help="追蹤紀錄")
    trace_sub = p.add_subparsers(dest="trace_command", required=True)
    t = trace_sub.add_parser("show")
    t.add_argument("trace_file")
    t.add_argument("--trace-id")
    t.set_defaults(func=cmd_trace_show)

    p = sub.add_parser("serve", help="啟動 HTTP 服務")
    p.add_argument("--config")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LegalConsultError as e:
        code = exit_code_for(e)
        logger.error("%s: %s", e.error_code, e.message)
        print(f"error [{e.error_code}]: {e.message}", file=sys.stderr)
        return code
    except OSError as e:
        print(f"error [IO_ERROR]: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
