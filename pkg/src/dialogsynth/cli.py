"""Command-line entry point: ``generate``, ``check`` and ``eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Iterable, Sequence

from .agents import DialoguePipeline, LoopConfig, PromptTemplates, RecordResult, mean_iterations
from .agents.prompts import default_exemplar, default_rules
from .concept_checker import MatchConfig, factuality_pr, match_concepts
from .config import RunConfig, load_run_config
from .corpus import Dialogue, PatientCareRecord, read_dialogues, read_records
from .errors import BackendError, DialogSynthError, IngestError, OntologyConfigError, PreconditionError, RequestError
from .extractor import extract_concepts, extract_gcs, load_lexicon, record_lexicon, select_branch
from .forecast import (
    CommitPolicy,
    ForecastReport,
    UnrollConfig,
    build_dynamic_examples,
    build_static_example,
    evaluate_trajectory,
    read_label_map,
    read_trajectories,
)
from .gateway import make_chat_backend, make_embedder
from .intrinsic import UTTERANCE_METRICS, Judge, corpus_stats, self_bleu, verdict_summary
from .ontology import load_topic_ontology
from .topic_flow import validate_flow

log = logging.getLogger("dialogsynth")

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_INPUT = 2
EXIT_BACKEND = 3


class InputError(Exception):
    """Unreadable or malformed command input; maps to exit status 2."""


def _read_lines(path: str | Path) -> list[str]:
    try:
        return Path(path).read_text("utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except UnicodeDecodeError as exc:
        raise InputError(f"{path} is not UTF-8 text") from exc


def _dump(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _write_json(path: str | Path, doc: Any) -> None:
    Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=2, sort_keys=True) + "\n", "utf-8")


def _write_jsonl(path: str | Path, docs: Iterable[Any]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(_dump(d) + "\n")
            n += 1
    return n


def _sidecar(out: str | Path, suffix: str) -> Path:
    out = Path(out)
    return out.with_name(out.name + suffix)


def _label_universe(cfg: RunConfig) -> list[str] | None:
    if cfg.labels is None:
        return None
    return [ln.strip() for ln in _read_lines(cfg.labels) if ln.strip()]


def _load_records(path: str, cfg: RunConfig) -> list[PatientCareRecord]:
    try:
        return list(read_records(_read_lines(path), _label_universe(cfg)))
    except IngestError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _load_dialogues(path: str) -> list[Dialogue]:
    try:
        return list(read_dialogues(_read_lines(path)))
    except IngestError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _services(cfg: RunConfig):
    lexicon = load_lexicon(cfg.lexicon, cfg.allowed_tags)
    ontology = load_topic_ontology(cfg.ontology)
    embedder = make_embedder(cfg.embedder)
    return lexicon, ontology, embedder


# -- generate -----------------------------------------------------------------


def _is_backend_failure(result: RecordResult) -> bool:
    err = result.trace.error or ""
    return err.startswith((BackendError.__name__, RequestError.__name__))


def _run_windowed(pipeline: DialoguePipeline, records: Sequence[PatientCareRecord], workers: int, sink) -> bool:
    """Feed ``sink`` results in input order; on ctrl-c, finish what is running and return False."""
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        todo = iter(records)

        def refill():
            while len(pending) < 2 * workers:
                try:
                    rec = next(todo)
                except StopIteration:
                    return
                pending.append(pool.submit(pipeline.run, rec))

        try:
            refill()
            while pending:
                sink(pending[0].result())
                pending.popleft()
                refill()
            return True
        except KeyboardInterrupt:
            log.warning("interrupted: draining %d in-flight record(s)", len(pending))
            for fut in pending:
                fut.cancel()
            for fut in pending:
                if fut.cancelled():
                    continue
                try:
                    res = fut.result()
                except BaseException:  # the interrupted record itself; it will be redone on resume
                    continue
                sink(res)
            return False


def cmd_generate(args: argparse.Namespace, cfg: RunConfig) -> int:
    if cfg.generator is None:
        raise InputError("no generator backend configured (config 'generator' section or DIALOGSYNTH_GENERATOR_ENDPOINT)")
    records = _load_records(args.records, cfg)
    out = Path(args.out)
    rejects_path = Path(args.rejects) if args.rejects else _sidecar(out, ".rejects.jsonl")
    traces_path = Path(args.traces) if args.traces else _sidecar(out, ".traces.jsonl")
    marker = _sidecar(out, ".partial.json")

    done_ids: set[str] = set()
    mode = "w"
    if args.resume and marker.exists():
        done_ids = set(json.loads(marker.read_text("utf-8"))["completed_record_ids"])
        mode = "a"
    todo = [r for r in records if r.record_id not in done_ids]

    lexicon, ontology, embedder = _services(cfg)
    templates = PromptTemplates(cfg.templates)
    rules = cfg.rules.read_text("utf-8").strip() if cfg.rules else default_rules()
    exemplars = [p.read_text("utf-8").strip() for p in cfg.exemplars] or [default_exemplar()]
    try:
        loop = LoopConfig(**cfg.loop)
    except (TypeError, ValueError) as exc:
        raise PreconditionError(f"bad loop section: {exc}") from exc
    pipeline = DialoguePipeline(
        make_chat_backend(cfg.generator),
        lexicon,
        ontology,
        embedder,
        critic=make_chat_backend(cfg.critic) if cfg.critic else None,
        loop=loop,
        match=MatchConfig(cfg.similarity_threshold),
        templates=templates,
        rules=rules,
        exemplars=exemplars,
        temperature=cfg.temperature,
        max_tokens=cfg.generator.max_tokens,
        model_id=cfg.generator.model,
    )

    counts = {"backend_failures": 0}
    completed = sorted(done_ids)
    with open(out, mode, encoding="utf-8") as f_out, open(rejects_path, mode, encoding="utf-8") as f_rej, open(
        traces_path, mode, encoding="utf-8"
    ) as f_tr:

        def sink(res: RecordResult) -> None:
            tj = res.trace.to_json()
            f_tr.write(_dump(tj) + "\n")
            if res.accepted:
                f_out.write(_dump(res.dialogue.to_json()) + "\n")
            else:
                f_rej.write(_dump({"record_id": res.record_id, "status": tj["status"], "error": tj["error"], "iterations": tj["iterations"]}) + "\n")
                if _is_backend_failure(res):
                    counts["backend_failures"] += 1
            completed.append(res.record_id)
            for fh in (f_out, f_rej, f_tr):
                fh.flush()

        finished = _run_windowed(pipeline, todo, cfg.workers, sink)

    # recount from the trace file so a resumed run reports the whole corpus
    all_traces = [json.loads(ln) for ln in traces_path.read_text("utf-8").splitlines() if ln.strip()]
    summary = {
        "seed": cfg.seed,
        "records": len(records),
        "processed": len(all_traces),
        "accepted": sum(1 for t in all_traces if t["status"] == "accepted"),
        "rejected": sum(1 for t in all_traces if t["status"] != "accepted"),
        "backend_failures": counts["backend_failures"],
        "style_unapproved": sum(1 for t in all_traces if t["status"] == "accepted" and t["style_approved"] is False),
        "mean_iterations": mean_iterations(all_traces),
        "mean_refine_iterations": mean_iterations(all_traces, ("refine",)),
        "fatal_errors": counts["backend_failures"],
        "complete": finished,
    }
    if finished:
        if marker.exists():
            marker.unlink()
    else:
        _write_json(marker, {"completed_record_ids": completed, "resume": "rerun the same command with --resume"})
    _write_json(_sidecar(out, ".summary.json"), summary)
    print(_dump(summary))
    if counts["backend_failures"]:
        print(f"error: backend unreachable or refusing requests for {counts['backend_failures']} record(s)", file=sys.stderr)
        return EXIT_BACKEND
    if not finished:
        return 130
    return EXIT_OK


# -- check --------------------------------------------------------------------


def cmd_check(args: argparse.Namespace, cfg: RunConfig) -> int:
    records = {r.record_id: r for r in _load_records(args.records, cfg)}
    dialogues = _load_dialogues(args.dialogues)
    lexicon, ontology, embedder = _services(cfg)
    match_cfg = MatchConfig(cfg.similarity_threshold)
    per: list[dict] = []
    tot_m = tot_fp = tot_fn = 0
    unknown = failed = 0
    for d in dialogues:
        rec = records.get(d.source_record_id)
        if rec is None:
            unknown += 1
            per.append({"dialogue_id": d.dialogue_id, "error": f"unknown record {d.source_record_id!r}"})
            continue
        src = extract_concepts(rec, lexicon)
        tgt = extract_concepts(d, record_lexicon(rec, lexicon))
        rep = match_concepts(src, tgt, embedder, match_cfg)
        branch = select_branch(extract_gcs(rec))
        flow = validate_flow(d.topics, ontology, branch) if d.utterances else []
        p, r = factuality_pr(rep)
        ok = rep.ok and not flow
        failed += not ok
        tot_m += len(rep.matched)
        tot_fp += len(rep.hallucinated)
        tot_fn += len(rep.missing)
        per.append(
            {
                "dialogue_id": d.dialogue_id,
                "record_id": rec.record_id,
                "passed": ok,
                "precision": p,
                "recall": r,
                "fp": len(rep.hallucinated),
                "fn": len(rep.missing),
                "concepts": rep.to_json(),
                "flow": [v.to_json() for v in flow],
            }
        )
    summary = {
        "dialogues": len(dialogues),
        "passed": sum(1 for x in per if x.get("passed")),
        "failed": failed,
        "unknown_records": unknown,
        "precision": tot_m / (tot_m + tot_fp) if tot_m + tot_fp else 1.0,
        "recall": tot_m / (tot_m + tot_fn) if tot_m + tot_fn else 1.0,
        "fatal_errors": unknown + failed,
    }
    _write_json(args.out, {"summary": summary, "dialogues": per})
    print(_dump(summary))
    return EXIT_OK if summary["fatal_errors"] == 0 else EXIT_FINDINGS


# -- eval ---------------------------------------------------------------------


def _judge_corpus(args, cfg: RunConfig, ours: list[Dialogue]) -> tuple[list[dict], int]:
    if cfg.judge is None:
        raise InputError("judge metrics requested but no judge backend configured")
    judge = Judge(make_chat_backend(cfg.judge), PromptTemplates(cfg.templates), cfg.judge.temperature, cfg.judge.model, cfg.judge.max_tokens)
    metrics = [m.strip() for m in args.judge.split(",") if m.strip()]
    bad = set(metrics) - {"logic", "ranking", *UTTERANCE_METRICS}
    if bad:
        raise InputError(f"unknown judge metric(s): {sorted(bad)}")
    records = {r.record_id: r for r in _load_records(args.records, cfg)} if args.records else {}
    rules = cfg.rules.read_text("utf-8").strip() if cfg.rules else default_rules()
    exemplar = cfg.exemplars[0].read_text("utf-8").strip() if cfg.exemplars else default_exemplar()
    log_entries: list[dict] = []
    failures = 0

    def attempt(fn, *a, **kw):
        nonlocal failures
        try:
            v = fn(*a, **kw)
        except (BackendError, RequestError):
            raise
        except DialogSynthError as exc:
            failures += 1
            log.warning("judge failed: %s", exc)
            return
        log_entries.append(v.to_json())

    if "logic" in metrics:
        for d in ours:
            attempt(judge.judge_conversation, d, "logic")
    if "ranking" in metrics:
        if not args.compare:
            raise InputError("ranking needs at least one --compare corpus")
        others = [{d.source_record_id: d for d in _load_dialogues(p)} for p in args.compare]
        for i, d in enumerate(ours):
            group = [d] + [o[d.source_record_id] for o in others if d.source_record_id in o]
            if len(group) < 2:
                continue
            attempt(judge.judge_ranking, group, cfg.seed + i, d.source_record_id)
    for metric in (m for m in metrics if m in UTTERANCE_METRICS):
        for d in ours:
            rec = records.get(d.source_record_id)
            if metric in ("safety", "groundedness") and rec is None:
                raise InputError(f"{metric} needs --records containing {d.source_record_id!r}")
            protocol = "; ".join(rec.diagnosis_labels) if rec else ""
            for u in d.utterances:
                attempt(
                    judge.judge_utterance, u, metric, dialogue=d, record=rec,
                    rules=rules, protocol_text=protocol, role_exemplar=exemplar,
                )
    return log_entries, failures


def cmd_eval_intrinsic(args: argparse.Namespace, cfg: RunConfig) -> int:
    ours = _load_dialogues(args.dialogues)
    report: dict[str, Any] = {"seed": cfg.seed, "stats": corpus_stats(ours).to_json()}
    if args.self_bleu or not args.judge:
        if len(ours) < 2:
            raise InputError("self-BLEU needs at least two dialogues")
        report["self_bleu"] = self_bleu(ours)
    failures = 0
    if args.judge:
        entries, failures = _judge_corpus(args, cfg, ours)
        for e in entries:
            e.setdefault("seed", cfg.seed)
        log_path = Path(args.judgments) if args.judgments else _sidecar(args.out, ".judgments.jsonl")
        _write_jsonl(log_path, entries)
        report["judge"] = verdict_summary(entries)
        report["judge_failures"] = failures
    report["fatal_errors"] = failures
    _write_json(args.out, report)
    print(_dump(report))
    return EXIT_OK if failures == 0 else EXIT_FINDINGS


def cmd_eval_forecast(args: argparse.Namespace, cfg: RunConfig) -> int:
    try:
        trajs = read_trajectories(_read_lines(args.trajectories), args.trajectories)
        labels = read_label_map(_read_lines(args.labels), args.labels)
    except IngestError as exc:
        raise InputError(str(exc)) from exc
    if not trajs:
        raise InputError(f"{args.trajectories}: no trajectories")
    missing = [t.dialogue_id for t in trajs if t.dialogue_id not in labels]
    if missing:
        raise InputError(f"no ground-truth labels for: {', '.join(missing[:5])}")
    pol = CommitPolicy(args.tau)
    rep = ForecastReport(pol.tau, [evaluate_trajectory(t, labels[t.dialogue_id], pol) for t in trajs])
    doc = rep.to_json()
    doc["seed"] = cfg.seed
    _write_json(args.out, doc)
    print(_dump(doc["summary"]))
    return EXIT_OK


def cmd_eval_build_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    dialogues = _load_dialogues(args.dialogues)
    unroll = UnrollConfig(args.k)
    examples = []
    for d in dialogues:
        if args.mode == "static":
            examples.append(build_static_example(d))
        else:
            examples.extend(build_dynamic_examples(d, unroll))
    n = _write_jsonl(args.out, (e.to_json() for e in examples))
    print(_dump({"dialogues": len(dialogues), "examples": n, "mode": args.mode, "k": args.k}))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--workers", type=int, help="parallel records (overrides config)")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", required=True, help="primary output file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dialogsynth", description="Grounded EMS dialogue synthesis and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="turn patient care records into dialogues")
    g.add_argument("--records", required=True, help="JSONL of patient care records")
    g.add_argument("--rejects", help="rejected-record log (default: <out>.rejects.jsonl)")
    g.add_argument("--traces", help="per-record trace log (default: <out>.traces.jsonl)")
    g.add_argument("--resume", action="store_true", help="continue an interrupted run")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("check", parents=[common], help="audit a dialogue corpus against its records")
    c.add_argument("--dialogues", required=True)
    c.add_argument("--records", required=True)
    c.set_defaults(func=cmd_check)

    e = sub.add_parser("eval", help="evaluation harnesses")
    esub = e.add_subparsers(dest="mode", required=True)
    ei = esub.add_parser("intrinsic", parents=[common], help="diversity, corpus stats and LLM judges")
    ei.add_argument("--dialogues", required=True)
    ei.add_argument("--self-bleu", action="store_true")
    ei.add_argument("--judge", default="", help="comma list of logic,ranking,realism,safety,role,groundedness")
    ei.add_argument("--compare", action="append", default=[], help="competing corpus for ranking (repeatable)")
    ei.add_argument("--records", help="records for safety/groundedness context")
    ei.add_argument("--judgments", help="judgment log (default: <out>.judgments.jsonl)")
    ei.set_defaults(func=cmd_eval_intrinsic)

    ef = esub.add_parser("forecast", parents=[common], help="score diagnosis prediction trajectories")
    ef.add_argument("--trajectories", required=True)
    ef.add_argument("--labels", required=True)
    ef.add_argument("--tau", type=float, default=0.5)
    ef.set_defaults(func=cmd_eval_forecast)

    eb = esub.add_parser("build-train", parents=[common], help="write training examples")
    eb.add_argument("--dialogues", required=True)
    eb.add_argument("--mode", choices=("static", "dynamic"), default="dynamic")
    eb.add_argument("--k", type=int, default=5)
    eb.set_defaults(func=cmd_eval_build_train)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, {"workers": args.workers, "seed": args.seed})
        return args.func(args, cfg)
    except (InputError, PreconditionError, IngestError, OntologyConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BackendError, RequestError) as exc:
        print(f"error: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except DialogSynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINDINGS


if __name__ == "__main__":
    sys.exit(main())
