"""Command-line interface for batch runs.

Commands: ingest, extract, tables, figures, build-db, evaluate. All
persistent formats are line-delimited UTF-8 (see SCHEMAS.md); every output
file embeds the config hash and prompt-pack version. Extraction is
checkpointed per passage and resumable, and with the scripted mock backend
a resumed run reproduces an uninterrupted run byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import corpus, dbbuild, engine, evalkit, storage
from .conversation import (
    BackendParams,
    ChatBackend,
    HttpChatBackend,
    RateLimiter,
    RecordingBackend,
    RetryPolicy,
    ScriptedBackend,
)
from .promptpack import PromptPack

logger = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"


@dataclass
class RunConfig:
    property_name: str
    backend: str  # "mock" | "remote" | "record"
    model_name: str
    mode: engine.EngineMode
    concurrency: int = 1
    max_retries: int = 2
    rate_limit: float | None = None

    def __post_init__(self) -> None:
        if not self.property_name:
            raise ValueError("property must be nonempty")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max retries must be >= 0")


def _pack_fingerprint(pack: PromptPack) -> str:
    return storage.config_hash(
        {
            "name": pack.name,
            "version": pack.version,
            "nodes": {nid: t.template for nid, t in sorted(pack.nodes.items())},
        }
    )


def _load_pack(args) -> PromptPack:
    return PromptPack.load(args.pack) if args.pack else PromptPack.default()


def _make_backend(args) -> tuple[ChatBackend, RecordingBackend | None]:
    if args.backend == "mock":
        if not args.script:
            raise SystemExit("--script is required with the mock backend")
        return ScriptedBackend.from_file(args.script), None
    http = HttpChatBackend(args.endpoint, api_key_env=args.api_key_env)
    if args.backend == "record":
        recorder = RecordingBackend(http)
        return recorder, recorder
    return http, None


def _make_context(args, pack: PromptPack, backend: ChatBackend) -> engine.WorkflowContext:
    mode = engine.EngineMode(
        follow_up=not getattr(args, "no_follow_up", False),
        chat_retention=not getattr(args, "no_chat", False),
    )
    return engine.WorkflowContext(
        backend=backend,
        pack=pack,
        property_name=args.property,
        mode=mode,
        params=BackendParams(model_name=args.model),
        retry=RetryPolicy(attempts=1 + args.max_retries),
        limiter=RateLimiter(args.rate_limit) if args.rate_limit else None,
    )


def _extract_config_hash(args, pack: PromptPack, source: str) -> str:
    return storage.config_hash(
        {
            "command": source,
            "property": args.property,
            "model": args.model,
            "backend": args.backend,
            "follow_up": not getattr(args, "no_follow_up", False),
            "chat_retention": not getattr(args, "no_chat", False),
            "pack": _pack_fingerprint(pack),
        }
    )


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    docs: list[corpus.Document] = []
    errors = 0
    with open(args.manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            doc_id = entry["doc_id"]
            try:
                raw = Path(entry["path"]).read_text(encoding="utf-8")
                docs.append(
                    corpus.parse_document(
                        raw, entry["format"], doc_id, entry.get("title")
                    )
                )
            except Exception as exc:
                errors += 1
                print(f"ingest error: {doc_id}: {exc}", file=sys.stderr)
    meta = storage.meta_line(
        "corpus", storage.config_hash({"command": "ingest"}), None
    )
    storage.write_jsonl(args.out, (d.to_record() for d in docs), meta)
    n_sentences = sum(len(d.sentences) for d in docs)
    n_tables = sum(len(d.tables) for d in docs)
    n_figures = sum(len(d.figure_captions) for d in docs)
    print(
        f"ingest: {len(docs)} docs, {n_sentences} sentences, {n_tables} tables, "
        f"{n_figures} figure captions, {errors} errors -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# extract (text workflow, checkpointed)
# ---------------------------------------------------------------------------


def cmd_extract(args) -> int:
    RunConfig(
        property_name=args.property,
        backend=args.backend,
        model_name=args.model,
        mode=engine.EngineMode(not args.no_follow_up, not args.no_chat),
        concurrency=args.concurrency,
        max_retries=args.max_retries,
        rate_limit=args.rate_limit,
    )
    docs = corpus.load_documents(args.corpus)
    pack = _load_pack(args)
    backend, recorder = _make_backend(args)
    backend.ready()
    ctx = _make_context(args, pack, backend)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx.transcript_store = storage.DirectoryTranscriptStore(out_dir / "transcripts")
    records_path = out_dir / "records.jsonl"
    cfg_hash = _extract_config_hash(args, pack, "extract")

    checkpoint = storage.Checkpoint(out_dir / "checkpoint.jsonl")
    done = checkpoint.load()
    resume = bool(done) and records_path.exists()
    if resume:
        meta = storage.read_meta(records_path)
        if meta and meta.get("config_hash") != cfg_hash:
            print(
                "extract: config does not match the checkpointed run; "
                "use a fresh --out-dir",
                file=sys.stderr,
            )
            return 2
    writer = storage.RecordsWriter(
        records_path,
        storage.meta_line(
            "records", cfg_hash, pack.version_tag, property=args.property,
            source="text",
        ),
        resume=resume,
    )
    errors_fh = open(out_dir / "errors.jsonl", "a" if resume else "w", encoding="utf-8")

    units = [
        (doc, cand) for doc in docs for cand in engine.text_work_units(doc)
    ]
    pending = [
        (doc, cand)
        for doc, cand in units
        if engine.unit_id(doc.doc_id, cand.sentence_index) not in done
    ]
    if args.max_units is not None:
        pending = pending[: args.max_units]

    n_records = n_errors = 0

    def finish(doc, cand, result) -> None:
        nonlocal n_records, n_errors
        uid = engine.unit_id(doc.doc_id, cand.sentence_index)
        try:
            recs = result()
        except Exception as exc:
            n_errors += 1
            errors_fh.write(
                storage.canonical_json(
                    {"unit": uid, "error_type": type(exc).__name__, "error": str(exc)}
                )
                + "\n"
            )
            errors_fh.flush()
            logger.warning("unit %s failed: %s", uid, exc)
            recs = []
        n_records += writer.append_unit(recs)
        checkpoint.mark(uid)

    try:
        if args.concurrency > 1:
            with ThreadPoolExecutor(max_workers=args.concurrency) as pool:
                futures = [
                    (doc, cand, pool.submit(engine.process_text_unit, ctx, doc, cand))
                    for doc, cand in pending
                ]
                for doc, cand, fut in futures:
                    finish(doc, cand, fut.result)
        else:
            for doc, cand in pending:
                finish(
                    doc,
                    cand,
                    lambda d=doc, c=cand: engine.process_text_unit(ctx, d, c),
                )
    finally:
        writer.close()
        checkpoint.close()
        errors_fh.close()

    if recorder is not None:
        script_path = out_dir / "recorded_script.jsonl"
        recorder.write_script(script_path)
        print(f"extract: recorded script -> {script_path}")
    print(
        f"extract: {len(docs)} docs, {len(units)} candidates, "
        f"{len(pending)} processed, {n_records} new records, {n_errors} errors "
        f"-> {records_path}"
    )
    return 0


# ---------------------------------------------------------------------------
# tables / figures
# ---------------------------------------------------------------------------


def cmd_tables(args) -> int:
    docs = corpus.load_documents(args.corpus)
    pack = _load_pack(args)
    backend, recorder = _make_backend(args)
    backend.ready()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = storage.DirectoryTranscriptStore(out_dir / "transcripts")
    cfg_hash = _extract_config_hash(args, pack, "tables")

    records: list[engine.ExtractionRecord] = []
    n_errors = 0

    def on_error(unit: str, exc: Exception) -> None:
        nonlocal n_errors
        n_errors += 1

    for doc in docs:
        try:
            records.extend(
                engine.run_table_workflow(
                    doc,
                    args.property,
                    backend,
                    pack,
                    params=BackendParams(model_name=args.model),
                    retry=RetryPolicy(attempts=1 + args.max_retries),
                    limiter=RateLimiter(args.rate_limit) if args.rate_limit else None,
                    transcript_store=store,
                    on_error=on_error,
                )
            )
        except Exception as exc:
            n_errors += 1
            logger.warning("tables: %s failed: %s", doc.doc_id, exc)

    records_path = out_dir / "table_records.jsonl"
    storage.save_records(
        records_path,
        records,
        storage.meta_line(
            "records", cfg_hash, pack.version_tag, property=args.property,
            source="table",
        ),
    )
    if recorder is not None:
        recorder.write_script(out_dir / "recorded_script.jsonl")
    n_tables = sum(len(d.tables) for d in docs)
    print(
        f"tables: {n_tables} tables, {len(records)} records, {n_errors} errors "
        f"-> {records_path}"
    )
    return 0


def cmd_figures(args) -> int:
    docs = corpus.load_documents(args.corpus)
    pack = _load_pack(args)
    backend, recorder = _make_backend(args)
    backend.ready()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = storage.DirectoryTranscriptStore(out_dir / "transcripts")
    cfg_hash = _extract_config_hash(args, pack, "figures")

    relevant: list[dict] = []
    n_captions = 0
    n_errors = 0
    for doc in docs:
        try:
            results = engine.run_figure_workflow(
                doc,
                args.property,
                backend,
                pack,
                params=BackendParams(model_name=args.model),
                retry=RetryPolicy(attempts=1 + args.max_retries),
                limiter=RateLimiter(args.rate_limit) if args.rate_limit else None,
                transcript_store=store,
            )
        except Exception as exc:
            n_errors += 1
            logger.warning("figures: %s failed: %s", doc.doc_id, exc)
            continue
        n_captions += len(results)
        relevant.extend(
            {
                "doc_id": doc.doc_id,
                "figure_index": r.figure_index,
                "caption": r.caption,
            }
            for r in results
            if r.relevant
        )

    out_path = out_dir / "figures.jsonl"
    storage.write_jsonl(
        out_path,
        relevant,
        storage.meta_line(
            "figures", cfg_hash, pack.version_tag, property=args.property
        ),
    )
    if recorder is not None:
        recorder.write_script(out_dir / "recorded_script.jsonl")
    print(
        f"figures: {n_captions} captions classified, {len(relevant)} relevant, "
        f"{n_errors} errors -> {out_path}"
    )
    return 0


# ---------------------------------------------------------------------------
# build-db
# ---------------------------------------------------------------------------


def _resolve_unit_table(spec: str) -> dbbuild.UnitTable:
    if Path(spec).is_file():
        return dbbuild.UnitTable.load(spec)
    return dbbuild.UnitTable.bundled(spec)


def _ws(text: str) -> str:
    return " ".join(text.split())


def cmd_build_db(args) -> int:
    records = storage.load_records(args.records)
    upstream = storage.read_meta(args.records) or {}
    exclude = (
        sorted(s.strip() for s in args.exclude_elements.split(",") if s.strip())
        if args.exclude_elements
        else []
    )
    cfg_hash = storage.config_hash(
        {
            "command": "build-db",
            "tier": args.tier,
            "min_elements": args.min_elements,
            "exclude_elements": exclude,
            "unit_table": args.unit_table,
            "upstream": upstream.get("config_hash"),
        }
    )
    pack_version = upstream.get("pack_version")

    if args.tier in ("raw", "cleaned"):
        out_records = records if args.tier == "raw" else dbbuild.clean(records)
        storage.save_records(
            args.out,
            out_records,
            storage.meta_line("records", cfg_hash, pack_version, tier=args.tier),
        )
        print(
            f"build-db: {args.tier} tier, {len(records)} in, "
            f"{len(out_records)} out -> {args.out}"
        )
        return 0

    if not args.unit_table:
        print("build-db: --unit-table is required for the standardized tier",
              file=sys.stderr)
        return 2
    unit_table = _resolve_unit_table(args.unit_table)
    overrides = None
    if args.composition_overrides:
        with open(args.composition_overrides, encoding="utf-8") as fh:
            overrides = json.load(fh)
    cleaned = dbbuild.clean(records)
    db = dbbuild.standardize(cleaned, unit_table, overrides)
    entries = dbbuild.filter_domain(
        db.entries,
        min_elements=args.min_elements,
        exclude_elements=exclude or None,
    )

    out_path = Path(args.out)
    meta = storage.meta_line(
        "standardized", cfg_hash, pack_version, property=unit_table.property_name
    )
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("# " + meta + "\n")
        fh.write(
            "doc_id\tsentence_index\tmaterial_text\tcomposition\tvalue\tunit"
            "\tcanonical_value\tcanonical_unit\tcanonical_uncertainty\n"
        )
        for e in entries:
            rec = e.record
            idx = "" if rec.sentence_index is None else str(rec.sentence_index)
            unc = (
                ""
                if e.canonical_uncertainty is None
                else format(e.canonical_uncertainty, ".10g")
            )
            fh.write(
                "\t".join(
                    (
                        rec.doc_id,
                        idx,
                        _ws(rec.triplet.material),
                        e.composition.formula(),
                        _ws(rec.triplet.value),
                        _ws(rec.triplet.unit),
                        format(e.canonical_value, ".10g"),
                        e.canonical_unit,
                        unc,
                    )
                )
                + "\n"
            )

    exclusions_path = Path(str(out_path) + ".exclusions.jsonl")
    storage.write_jsonl(
        exclusions_path,
        (
            {
                "doc_id": x.record.doc_id,
                "sentence_index": x.record.sentence_index,
                "material": x.record.triplet.material,
                "value": x.record.triplet.value,
                "unit": x.record.triplet.unit,
                "reason": x.reason,
                "detail": x.detail,
            }
            for x in db.exclusions
        ),
        storage.meta_line("exclusions", cfg_hash, pack_version),
    )
    by_reason: dict[str, int] = {}
    for x in db.exclusions:
        by_reason[x.reason] = by_reason.get(x.reason, 0) + 1
    print(
        f"build-db: standardized tier, {len(records)} raw, {len(cleaned)} cleaned, "
        f"{len(db.entries)} standardized, {len(entries)} after filters "
        f"({dbbuild.unique_datapoints(entries)} unique datapoints, "
        f"{dbbuild.unique_compositions(entries)} unique compositions) -> {out_path}"
    )
    print(
        "build-db: exclusions "
        + ", ".join(f"{r}={n}" for r, n in sorted(by_reason.items()))
        + f" -> {exclusions_path}"
    )
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    gt = evalkit.GroundTruthSet.load(args.ground_truth)
    records = storage.load_records(args.records)
    overrides = (
        evalkit.EquivalenceOverrides.load(args.material_overrides)
        if args.material_overrides
        else None
    )
    try:
        report = evalkit.evaluate(gt, records, overrides)
    except evalkit.UnresolvedProvenance as exc:
        print("evaluate: unresolved provenance:", file=sys.stderr)
        for doc_id, idx in exc.keys:
            print(f"  {doc_id}#{idx}", file=sys.stderr)
        return 2
    print(report.render_table())
    flagged = [d for d in report.ledger if d.order_sensitive]
    if flagged:
        print(
            f"note: {len(flagged)} passage(s) where greedy matching is "
            "order-sensitive (see ledger)"
        )
    if args.out:
        obj = report.to_obj()
        obj["_meta"] = {
            "kind": "report",
            "config_hash": storage.config_hash({"command": "evaluate"}),
            "pack_version": (storage.read_meta(args.records) or {}).get("pack_version"),
        }
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, ensure_ascii=False, sort_keys=True, indent=1)
        print(f"evaluate: report -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_backend_args(sp: argparse.ArgumentParser, with_mode: bool = False) -> None:
    sp.add_argument("--property", required=True, help="property name, e.g. 'bulk modulus'")
    sp.add_argument("--backend", choices=("mock", "remote", "record"), default="mock")
    sp.add_argument("--script", help="mock script file (required with --backend mock)")
    sp.add_argument("--endpoint", default=DEFAULT_ENDPOINT)
    sp.add_argument("--api-key-env", default="CHAT_API_KEY",
                    help="environment variable holding the API credential")
    sp.add_argument("--model", default="gpt-4-0314")
    sp.add_argument("--pack", help="prompt pack file (default: bundled pack)")
    sp.add_argument("--max-retries", type=int, default=2,
                    help="retries after the first attempt on transient failures")
    sp.add_argument("--rate-limit", type=float, default=None,
                    help="backend requests per minute")
    if with_mode:
        sp.add_argument("--no-follow-up", action="store_true",
                        help="skip follow-up verification of multi-valued rows")
        sp.add_argument("--no-chat", action="store_true",
                        help="fresh conversation for every prompt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="propex",
        description="Extract (material, value, unit) property triplets from "
        "research papers with a conversational LLM.",
    )
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="parse paper files into a corpus file")
    sp.add_argument("--manifest", required=True,
                    help="jsonl manifest: doc_id, path, format per line")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("extract", help="run the text workflow over a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--concurrency", type=int, default=1)
    sp.add_argument("--max-units", type=int, default=None,
                    help="stop after this many work units (smoke runs)")
    _add_backend_args(sp, with_mode=True)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("tables", help="run the table workflow over a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out-dir", required=True)
    _add_backend_args(sp)
    sp.set_defaults(func=cmd_tables)

    sp = sub.add_parser("figures", help="classify figure captions for relevance")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out-dir", required=True)
    _add_backend_args(sp)
    sp.set_defaults(func=cmd_figures)

    sp = sub.add_parser("build-db", help="build raw/cleaned/standardized databases")
    sp.add_argument("--records", required=True)
    sp.add_argument("--tier", choices=("raw", "cleaned", "standardized"),
                    required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--unit-table",
                    help="unit table file, or bundled name such as "
                    "'bulk_modulus', 'cooling_rate', 'yield_strength'")
    sp.add_argument("--composition-overrides",
                    help="json file mapping material text to a formula")
    sp.add_argument("--min-elements", type=int, default=None)
    sp.add_argument("--exclude-elements", default=None,
                    help="comma-separated element symbols to exclude")
    sp.set_defaults(func=cmd_build_db)

    sp = sub.add_parser("evaluate", help="score records against ground truth")
    sp.add_argument("--ground-truth", required=True)
    sp.add_argument("--records", required=True)
    sp.add_argument("--material-overrides",
                    help="json file of equivalent material-name pairs")
    sp.add_argument("--out", help="write the machine-readable report here")
    sp.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
