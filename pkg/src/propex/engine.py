"""The extraction state machine.

Text workflow per candidate sentence: a relevancy classification in its own
conversation, then a fresh conversation over the assembled passage that first
decides single- vs multi-valued and then runs the matching branch. The single
branch asks three scalar questions (value, unit, material), each with a
"None" escape; any "None" discards the passage. The multi branch asks for a
three-column table and then verifies every surviving row with three Yes/No
follow-up questions that restate the passage and admit the table may be
wrong; any "No" discards the row. Each prompt re-includes the passage text.

Tables get a relevancy classification and one structured-extraction prompt
(no follow-up verification); figure captions get relevancy classification
only, for later human data extraction.

Two ablation switches: ``follow_up=False`` skips the multi-branch follow-up
questions (keeping every parsed row), ``chat_retention=False`` runs every
prompt in a fresh conversation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .conversation import (
    BackendParams,
    ChatBackend,
    Conversation,
    RateLimiter,
    RetryPolicy,
    Turn,
    fork_stateless,
)
from .corpus import TITLE_INDEX, Document, Passage, build_passage
from .prefilter import CandidateSentence, contains_number, prefilter_stream
from .promptpack import (
    MalformedTable,
    MalformedScalar,
    PromptPack,
    YesNo,
    parse_scalar,
    parse_table,
    parse_yes_no,
    render,
)

logger = logging.getLogger(__name__)


class MalformedYesNo(Exception):
    """Yes/No reply stayed unparsable after the verbatim re-ask."""


@dataclass(frozen=True)
class Triplet:
    """One extracted datapoint: material, value (as written), unit."""

    material: str
    value: str
    unit: str

    def __post_init__(self) -> None:
        if not self.material or not self.value or not self.unit:
            raise ValueError("triplet fields must be nonempty")
        if not contains_number(self.value):
            raise ValueError(f"triplet value has no numeral: {self.value!r}")


@dataclass(frozen=True)
class ExtractionRecord:
    triplet: Triplet
    doc_id: str
    sentence_index: int | None
    source: str  # "text" | "table" | "figure-candidate"
    branch: str  # "single" | "multi" | "table"
    transcript_id: str
    pack_version: str

    def to_record(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "sentence_index": self.sentence_index,
            "source": self.source,
            "branch": self.branch,
            "material": self.triplet.material,
            "value": self.triplet.value,
            "unit": self.triplet.unit,
            "transcript_id": self.transcript_id,
            "pack_version": self.pack_version,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ExtractionRecord":
        return cls(
            triplet=Triplet(record["material"], record["value"], record["unit"]),
            doc_id=record["doc_id"],
            sentence_index=record["sentence_index"],
            source=record["source"],
            branch=record["branch"],
            transcript_id=record["transcript_id"],
            pack_version=record["pack_version"],
        )


@dataclass(frozen=True)
class EngineMode:
    """Workflow switches: both True is the full method; (False, True) skips
    follow-up verification; ``chat_retention=False`` is the no-chat mode."""

    follow_up: bool = True
    chat_retention: bool = True


@dataclass(frozen=True)
class FigureRelevance:
    figure_index: int
    caption: str
    relevant: bool


class TranscriptStore(Protocol):
    def save(self, transcript_id: str, turns: list[Turn]) -> None: ...


class InMemoryTranscriptStore:
    def __init__(self) -> None:
        self.transcripts: dict[str, list[Turn]] = {}

    def save(self, transcript_id: str, turns: list[Turn]) -> None:
        self.transcripts[transcript_id] = list(turns)


@dataclass
class WorkflowContext:
    """Everything one extraction run shares across work units."""

    backend: ChatBackend
    pack: PromptPack
    property_name: str
    mode: EngineMode = field(default_factory=EngineMode)
    params: BackendParams = field(default_factory=BackendParams)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    limiter: RateLimiter | None = None
    transcript_store: TranscriptStore | None = None

    def save_transcript(self, transcript_id: str, turns: list[Turn]) -> None:
        if self.transcript_store is not None:
            self.transcript_store.save(transcript_id, turns)


class PassageDialog:
    """One logical dialog over a passage.

    With chat retention the dialog is a single conversation; without it,
    every prompt runs in a stateless fork. Either way the full ordered
    prompt/response log is kept for the transcript store.
    """

    def __init__(self, ctx: WorkflowContext) -> None:
        self._retain = ctx.mode.chat_retention
        self._conv = Conversation(
            backend=ctx.backend,
            params=ctx.params,
            retry=ctx.retry,
            limiter=ctx.limiter,
        )
        self.turns: list[Turn] = []

    def send(self, prompt: str) -> str:
        conv = self._conv if self._retain else fork_stateless(self._conv)
        response = conv.send(prompt)
        self.turns.extend(conv.transcript[-2:])
        return response


def _ask_yes_no(dialog: PassageDialog, prompt: str) -> bool:
    """Send a Yes/No prompt; one verbatim re-ask on a malformed reply."""
    answer = parse_yes_no(dialog.send(prompt))
    if answer is YesNo.MALFORMED:
        answer = parse_yes_no(dialog.send(prompt))
    if answer is YesNo.MALFORMED:
        raise MalformedYesNo(prompt.splitlines()[0][:80])
    return answer is YesNo.YES


def _ask_scalar(dialog: PassageDialog, prompt: str) -> str | None:
    """Send a scalar prompt; one verbatim re-ask on a malformed reply."""
    try:
        return parse_scalar(dialog.send(prompt))
    except MalformedScalar:
        return parse_scalar(dialog.send(prompt))


# ---------------------------------------------------------------------------
# Workflow steps
# ---------------------------------------------------------------------------


def classify_sentence(
    dialog: PassageDialog, sentence: str, property_name: str, pack: PromptPack
) -> bool:
    """Stage A: does this sentence carry a value of the property?"""
    prompt = render(
        pack.get("stageA_classify"),
        {"property": property_name, "sentence": sentence},
    )
    return _ask_yes_no(dialog, prompt)


def detect_multi_valued(
    dialog: PassageDialog, passage: Passage, property_name: str, pack: PromptPack
) -> bool:
    prompt = render(
        pack.get("multi_detect"),
        {"property": property_name, "text": passage.flatten()},
    )
    return _ask_yes_no(dialog, prompt)


def extract_single(
    dialog: PassageDialog, passage: Passage, property_name: str, pack: PromptPack
) -> Triplet | None:
    """Single-valued branch: ask value, unit, material in turn.

    A "None" (or non-numeric value) answer discards the passage immediately;
    the remaining questions are not asked.
    """
    text = passage.flatten()
    bindings = {"property": property_name, "text": text}
    value = _ask_scalar(dialog, render(pack.get("single_value"), bindings))
    if value is None or not contains_number(value):
        return None
    unit = _ask_scalar(dialog, render(pack.get("single_unit"), bindings))
    if unit is None:
        return None
    material = _ask_scalar(dialog, render(pack.get("single_material"), bindings))
    if material is None:
        return None
    return Triplet(material=material, value=value, unit=unit)


def _row_usable(material: str, value: str, unit: str) -> bool:
    return bool(material and value and unit and contains_number(value))


def extract_multi(
    dialog: PassageDialog,
    passage: Passage,
    property_name: str,
    pack: PromptPack,
    mode: EngineMode,
) -> list[Triplet]:
    """Multi-valued branch: structured table, then per-row verification.

    Rows with a missing cell are dropped outright. With ``follow_up`` on,
    each remaining row must collect three Yes answers (value, unit,
    material); the first No discards the row. With ``follow_up`` off every
    remaining row is kept, so the output is a superset of the verified one.
    """
    text = passage.flatten()
    prompt = render(
        pack.get("multi_table"), {"property": property_name, "text": text}
    )
    rows = parse_table(dialog.send(prompt))
    triplets: list[Triplet] = []
    for material, value, unit in rows:
        if not _row_usable(material, value, unit):
            continue
        if mode.follow_up:
            bindings = {
                "property": property_name,
                "text": text,
                "material": material,
                "value": value,
                "unit": unit,
            }
            kept = (
                _ask_yes_no(dialog, render(pack.get("followup_value"), bindings))
                and _ask_yes_no(dialog, render(pack.get("followup_unit"), bindings))
                and _ask_yes_no(
                    dialog, render(pack.get("followup_material"), bindings)
                )
            )
            if not kept:
                continue
        triplets.append(Triplet(material=material, value=value, unit=unit))
    return triplets


# ---------------------------------------------------------------------------
# Whole-document workflows
# ---------------------------------------------------------------------------


def text_work_units(doc: Document) -> list[CandidateSentence]:
    """Candidate sentences of a document, title first when it is numeric.

    The title is screened like any sentence (index TITLE_INDEX); body
    sentences pass through the numeric prefilter.
    """
    units: list[CandidateSentence] = []
    if contains_number(doc.title):
        units.append(CandidateSentence(doc.doc_id, TITLE_INDEX, doc.title))
    units.extend(prefilter_stream(doc))
    return units


def unit_id(doc_id: str, sentence_index: int) -> str:
    return f"{doc_id}#{sentence_index}"


def process_text_unit(
    ctx: WorkflowContext, doc: Document, candidate: CandidateSentence
) -> list[ExtractionRecord]:
    """Run Stage A and, when positive, the extraction branch for one sentence."""
    stage_a = PassageDialog(ctx)
    stage_a_id = f"{doc.doc_id}:{candidate.sentence_index}:stageA"
    try:
        relevant = classify_sentence(
            stage_a, candidate.text, ctx.property_name, ctx.pack
        )
    finally:
        ctx.save_transcript(stage_a_id, stage_a.turns)
    if not relevant:
        return []

    passage = build_passage(doc, candidate.sentence_index)
    dialog = PassageDialog(ctx)
    transcript_id = f"{doc.doc_id}:{candidate.sentence_index}:stageB"
    try:
        if detect_multi_valued(dialog, passage, ctx.property_name, ctx.pack):
            branch = "multi"
            triplets = extract_multi(
                dialog, passage, ctx.property_name, ctx.pack, ctx.mode
            )
        else:
            branch = "single"
            one = extract_single(dialog, passage, ctx.property_name, ctx.pack)
            triplets = [one] if one is not None else []
    finally:
        ctx.save_transcript(transcript_id, dialog.turns)
    return [
        ExtractionRecord(
            triplet=t,
            doc_id=doc.doc_id,
            sentence_index=candidate.sentence_index,
            source="text",
            branch=branch,
            transcript_id=transcript_id,
            pack_version=ctx.pack.version_tag,
        )
        for t in triplets
    ]


ErrorSink = Callable[[str, Exception], None]


def _report(on_error: ErrorSink | None, unit: str, exc: Exception) -> None:
    logger.warning("unit %s failed: %s: %s", unit, type(exc).__name__, exc)
    if on_error is not None:
        on_error(unit, exc)


def run_text_workflow(
    doc: Document,
    property_name: str,
    backend: ChatBackend,
    pack: PromptPack,
    mode: EngineMode = EngineMode(),
    params: BackendParams | None = None,
    retry: RetryPolicy | None = None,
    limiter: RateLimiter | None = None,
    transcript_store: TranscriptStore | None = None,
    on_error: ErrorSink | None = None,
) -> list[ExtractionRecord]:
    """Full text workflow over one document, in provenance order.

    Per-passage failures are reported and skipped; the run continues. Output
    order is deterministic: by sentence index, then row order within the
    passage.
    """
    backend.ready()
    ctx = WorkflowContext(
        backend=backend,
        pack=pack,
        property_name=property_name,
        mode=mode,
        params=params if params is not None else BackendParams(),
        retry=retry if retry is not None else RetryPolicy(),
        limiter=limiter,
        transcript_store=transcript_store,
    )
    records: list[ExtractionRecord] = []
    for candidate in text_work_units(doc):
        try:
            records.extend(process_text_unit(ctx, doc, candidate))
        except Exception as exc:
            _report(on_error, unit_id(doc.doc_id, candidate.sentence_index), exc)
    return records


def process_table(
    ctx: WorkflowContext, doc: Document, table_index: int
) -> list[ExtractionRecord]:
    """Classify one table and, when relevant, extract its rows."""
    table = doc.tables[table_index]
    dialog = PassageDialog(ctx)
    transcript_id = f"{doc.doc_id}:table:{table.index}"
    text = f"{table.text}\n{table.caption}" if table.caption else table.text
    bindings = {"property": ctx.property_name, "text": text}
    records: list[ExtractionRecord] = []
    try:
        if _ask_yes_no(dialog, render(ctx.pack.get("table_classify"), bindings)):
            rows = parse_table(
                dialog.send(render(ctx.pack.get("table_extract"), bindings))
            )
            for material, value, unit in rows:
                if not _row_usable(material, value, unit):
                    continue
                records.append(
                    ExtractionRecord(
                        triplet=Triplet(material, value, unit),
                        doc_id=doc.doc_id,
                        sentence_index=None,
                        source="table",
                        branch="table",
                        transcript_id=transcript_id,
                        pack_version=ctx.pack.version_tag,
                    )
                )
    finally:
        ctx.save_transcript(transcript_id, dialog.turns)
    return records


def run_table_workflow(
    doc: Document,
    property_name: str,
    backend: ChatBackend,
    pack: PromptPack,
    params: BackendParams | None = None,
    retry: RetryPolicy | None = None,
    limiter: RateLimiter | None = None,
    transcript_store: TranscriptStore | None = None,
    on_error: ErrorSink | None = None,
) -> list[ExtractionRecord]:
    """Table workflow: classify each table, extract relevant ones.

    No follow-up verification here; the data is already structured. A
    malformed extraction reply skips that table and is reported.
    """
    backend.ready()
    ctx = WorkflowContext(
        backend=backend,
        pack=pack,
        property_name=property_name,
        mode=EngineMode(),
        params=params if params is not None else BackendParams(),
        retry=retry if retry is not None else RetryPolicy(),
        limiter=limiter,
        transcript_store=transcript_store,
    )
    records: list[ExtractionRecord] = []
    for i in range(len(doc.tables)):
        try:
            records.extend(process_table(ctx, doc, i))
        except MalformedTable as exc:
            _report(on_error, f"{doc.doc_id}#table:{i}", exc)
    return records


def run_figure_workflow(
    doc: Document,
    property_name: str,
    backend: ChatBackend,
    pack: PromptPack,
    params: BackendParams | None = None,
    retry: RetryPolicy | None = None,
    limiter: RateLimiter | None = None,
    transcript_store: TranscriptStore | None = None,
) -> list[FigureRelevance]:
    """Classify every figure caption for relevance; no value extraction."""
    backend.ready()
    ctx = WorkflowContext(
        backend=backend,
        pack=pack,
        property_name=property_name,
        mode=EngineMode(),
        params=params if params is not None else BackendParams(),
        retry=retry if retry is not None else RetryPolicy(),
        limiter=limiter,
        transcript_store=transcript_store,
    )
    results: list[FigureRelevance] = []
    for fig in doc.figure_captions:
        dialog = PassageDialog(ctx)
        transcript_id = f"{doc.doc_id}:figure:{fig.index}"
        prompt = render(
            ctx.pack.get("figure_classify"),
            {"property": ctx.property_name, "text": fig.caption},
        )
        try:
            relevant = _ask_yes_no(dialog, prompt)
        finally:
            ctx.save_transcript(transcript_id, dialog.turns)
        results.append(FigureRelevance(fig.index, fig.caption, relevant))
    return results
