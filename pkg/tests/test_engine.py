from __future__ import annotations

import pytest

from propex.conversation import (
    MalformedBackendReply,
    RetryPolicy,
    ScriptedBackend,
)
from propex.corpus import (
    TITLE_INDEX,
    Document,
    FigureCaption,
    TableEntry,
    build_passage,
)
from propex.engine import (
    EngineMode,
    ExtractionRecord,
    InMemoryTranscriptStore,
    MalformedYesNo,
    PassageDialog,
    Triplet,
    WorkflowContext,
    classify_sentence,
    detect_multi_valued,
    extract_multi,
    extract_single,
    process_text_unit,
    run_figure_workflow,
    run_table_workflow,
    run_text_workflow,
    text_work_units,
)
from propex.prefilter import CandidateSentence
from propex.promptpack import MalformedScalar, PromptPack

from script_helpers import (
    Prompts,
    add_chat,
    add_no_chat,
    multi_branch_pairs,
    single_branch_pairs,
    table_reply,
)

PROP = "bulk modulus"
NO_SLEEP = RetryPolicy(attempts=3, base_delay=0.0, sleep=lambda _: None)


@pytest.fixture(scope="module")
def pack() -> PromptPack:
    return PromptPack.default()


@pytest.fixture(scope="module")
def prompts(pack) -> Prompts:
    return Prompts(pack, PROP)


def make_ctx(pack, script: dict[str, str], mode: EngineMode = EngineMode()):
    backend = ScriptedBackend(script)
    ctx = WorkflowContext(
        backend=backend,
        pack=pack,
        property_name=PROP,
        mode=mode,
        retry=NO_SLEEP,
        transcript_store=InMemoryTranscriptStore(),
    )
    return ctx, backend


DOC = Document(
    "doc1",
    "Elastic properties of alkali halides",
    [
        "Rock salt crystals are widely studied.",
        "The bulk modulus of NaCl is 24 GPa.",
        "Crystals were grown from the melt at 1074 K.",
    ],
)
PASSAGE = build_passage(DOC, 1)
TEXT = PASSAGE.flatten()


class TestClassifySentence:
    def test_yes(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(script, [(prompts.stage_a("s 1"), "Yes")])
        ctx, _ = make_ctx(pack, script)
        assert classify_sentence(PassageDialog(ctx), "s 1", PROP, pack) is True

    def test_no(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(script, [(prompts.stage_a("s 1"), "No")])
        ctx, _ = make_ctx(pack, script)
        assert classify_sentence(PassageDialog(ctx), "s 1", PROP, pack) is False

    def test_malformed_then_reask(self, pack, prompts):
        script: dict[str, str] = {}
        sent = "s 1"
        add_chat(
            script,
            [(prompts.stage_a(sent), "It does contain data."),
             (prompts.stage_a(sent), "Yes")],
        )
        ctx, backend = make_ctx(pack, script)
        assert classify_sentence(PassageDialog(ctx), sent, PROP, pack) is True
        assert len(backend.calls) == 2

    def test_malformed_twice_raises(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(
            script,
            [(prompts.stage_a("s 1"), "hmm"), (prompts.stage_a("s 1"), "hmm")],
        )
        ctx, _ = make_ctx(pack, script)
        with pytest.raises(MalformedYesNo):
            classify_sentence(PassageDialog(ctx), "s 1", PROP, pack)


class TestExtractSingle:
    def test_full_triplet(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(script, single_branch_pairs(prompts, TEXT, "24", "GPa", "NaCl"))
        ctx, _ = make_ctx(pack, script)
        dialog = PassageDialog(ctx)
        assert detect_multi_valued(dialog, PASSAGE, PROP, pack) is False
        assert extract_single(dialog, PASSAGE, PROP, pack) == Triplet(
            "NaCl", "24", "GPa"
        )

    def test_none_value_discards_and_skips_rest(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(script, single_branch_pairs(prompts, TEXT, None))
        ctx, backend = make_ctx(pack, script)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        assert extract_single(dialog, PASSAGE, PROP, pack) is None
        # only detect + value were asked; unit/material prompts never sent
        assert len(backend.calls) == 2

    def test_none_unit_discards(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(script, single_branch_pairs(prompts, TEXT, "24", None))
        ctx, _ = make_ctx(pack, script)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        assert extract_single(dialog, PASSAGE, PROP, pack) is None

    def test_malformed_value_reply_reasked_once(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(
            script,
            [
                (prompts.detect(TEXT), "No"),
                (prompts.value(TEXT), "The value is 24 GPa of course."),
                (prompts.value(TEXT), "24"),
                (prompts.unit(TEXT), "GPa"),
                (prompts.material(TEXT), "NaCl"),
            ],
        )
        ctx, _ = make_ctx(pack, script)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        assert extract_single(dialog, PASSAGE, PROP, pack) == Triplet(
            "NaCl", "24", "GPa"
        )

    def test_malformed_value_twice_raises(self, pack, prompts):
        bad = "The value is clearly 24 GPa here."
        script: dict[str, str] = {}
        add_chat(
            script,
            [
                (prompts.detect(TEXT), "No"),
                (prompts.value(TEXT), bad),
                (prompts.value(TEXT), bad),
            ],
        )
        ctx, _ = make_ctx(pack, script)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        with pytest.raises(MalformedScalar):
            extract_single(dialog, PASSAGE, PROP, pack)

    def test_non_numeric_value_discards(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(
            script,
            [(prompts.detect(TEXT), "No"), (prompts.value(TEXT), "unknown")],
        )
        ctx, _ = make_ctx(pack, script)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        assert extract_single(dialog, PASSAGE, PROP, pack) is None


ROWS = [("NaCl", "24", "GPa"), ("KCl", "18", "GPa")]


class TestExtractMulti:
    def test_all_followups_yes(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(
            script,
            multi_branch_pairs(
                prompts, TEXT, ROWS,
                [("Yes", "Yes", "Yes"), ("Yes", "Yes", "Yes")],
            ),
        )
        ctx, _ = make_ctx(pack, script)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        out = extract_multi(dialog, PASSAGE, PROP, pack, EngineMode())
        assert out == [Triplet("NaCl", "24", "GPa"), Triplet("KCl", "18", "GPa")]

    def test_no_on_material_discards_row(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(
            script,
            multi_branch_pairs(
                prompts, TEXT, ROWS,
                [("Yes", "Yes", "Yes"), ("Yes", "Yes", "No")],
            ),
        )
        ctx, _ = make_ctx(pack, script)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        out = extract_multi(dialog, PASSAGE, PROP, pack, EngineMode())
        assert out == [Triplet("NaCl", "24", "GPa")]

    def test_without_followups_all_rows_pass(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(script, multi_branch_pairs(prompts, TEXT, ROWS))
        ctx, _ = make_ctx(pack, script)
        mode = EngineMode(follow_up=False)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        out = extract_multi(dialog, PASSAGE, PROP, pack, mode)
        assert len(out) == 2

    def test_rows_with_missing_cells_dropped_before_followups(self, pack, prompts):
        rows = [("NaCl", "24", "GPa"), ("None", "18", "GPa"), ("KCl", "18", "")]
        script: dict[str, str] = {}
        add_chat(
            script,
            multi_branch_pairs(
                prompts, TEXT, rows, [("Yes", "Yes", "Yes"), None, None]
            ),
        )
        ctx, _ = make_ctx(pack, script)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        out = extract_multi(dialog, PASSAGE, PROP, pack, EngineMode())
        assert out == [Triplet("NaCl", "24", "GPa")]

    def test_followup_subset_invariant_on_fixed_script(self, pack, prompts):
        verdicts = [("Yes", "Yes", "Yes"), ("No", "", "")]
        chat_script: dict[str, str] = {}
        add_chat(script=chat_script, pairs=multi_branch_pairs(prompts, TEXT, ROWS, verdicts))
        nofu_script: dict[str, str] = {}
        add_chat(script=nofu_script, pairs=multi_branch_pairs(prompts, TEXT, ROWS))

        ctx, _ = make_ctx(pack, chat_script)
        dialog = PassageDialog(ctx)
        detect_multi_valued(dialog, PASSAGE, PROP, pack)
        with_fu = extract_multi(dialog, PASSAGE, PROP, pack, EngineMode())

        ctx2, _ = make_ctx(pack, nofu_script, EngineMode(follow_up=False))
        dialog2 = PassageDialog(ctx2)
        detect_multi_valued(dialog2, PASSAGE, PROP, pack)
        without_fu = extract_multi(
            dialog2, PASSAGE, PROP, pack, EngineMode(follow_up=False)
        )
        assert set(with_fu) <= set(without_fu)


def full_doc_script(pack, mode: EngineMode = EngineMode()) -> dict[str, str]:
    """Script for DOC: sentence 1 positive single-valued, 2 negative."""
    p = Prompts(pack, PROP)
    script: dict[str, str] = {}
    add = add_chat if mode.chat_retention else add_no_chat
    add(script, [(p.stage_a(DOC.sentences[1]), "Yes")])
    add(script, [(p.stage_a(DOC.sentences[2]), "No")])
    add(script, single_branch_pairs(p, TEXT, "24", "GPa", "NaCl"))
    return script


class TestRunTextWorkflow:
    def test_one_record_single_branch(self, pack):
        ctx, _ = make_ctx(pack, full_doc_script(pack))
        records = run_text_workflow(
            DOC, PROP, ctx.backend, pack, retry=NO_SLEEP,
            transcript_store=ctx.transcript_store,
        )
        assert len(records) == 1
        rec = records[0]
        assert rec.triplet == Triplet("NaCl", "24", "GPa")
        assert rec.doc_id == "doc1"
        assert rec.sentence_index == 1
        assert rec.source == "text"
        assert rec.branch == "single"
        assert rec.transcript_id == "doc1:1:stageB"
        assert rec.pack_version == "default/1"

    def test_prefiltered_sentences_never_reach_stage_a(self, pack):
        # sentence 0 has no digits: the script holds no stage-A entry for it,
        # so any attempt to classify it would fail the replay
        ctx, backend = make_ctx(pack, full_doc_script(pack))
        run_text_workflow(DOC, PROP, ctx.backend, pack, retry=NO_SLEEP)
        asked = {m[-1]["content"] for m in backend.calls if m}
        assert all(DOC.sentences[0] not in prompt for prompt in asked)

    def test_deterministic_record_stream(self, pack):
        out = []
        for _ in range(2):
            ctx, _ = make_ctx(pack, full_doc_script(pack))
            records = run_text_workflow(DOC, PROP, ctx.backend, pack, retry=NO_SLEEP)
            out.append([r.to_record() for r in records])
        assert out[0] == out[1]

    def test_no_chat_mode_delivers_single_prompt_contexts(self, pack):
        mode = EngineMode(chat_retention=False)
        ctx, backend = make_ctx(pack, full_doc_script(pack, mode), mode)
        records = run_text_workflow(
            DOC, PROP, ctx.backend, pack, mode=mode, retry=NO_SLEEP
        )
        assert len(records) == 1
        assert all(len(call) == 1 for call in backend.calls)

    def test_chat_mode_retains_context(self, pack):
        ctx, backend = make_ctx(pack, full_doc_script(pack))
        run_text_workflow(DOC, PROP, ctx.backend, pack, retry=NO_SLEEP)
        assert max(len(call) for call in backend.calls) == 7  # detect..material

    def test_errors_are_reported_and_run_continues(self, pack):
        p = Prompts(pack, PROP)
        script: dict[str, str] = {}
        # stage A for sentence 1 deliberately unscripted -> backend error
        add_chat(script, [(p.stage_a(DOC.sentences[2]), "No")])
        failures: list[str] = []
        backend = ScriptedBackend(script)
        records = run_text_workflow(
            DOC, PROP, backend, pack, retry=NO_SLEEP,
            on_error=lambda unit, exc: failures.append(unit),
        )
        assert records == []
        assert failures == ["doc1#1"]

    def test_numeric_title_is_screened(self, pack):
        doc = Document("doc2", "Bulk modulus of 5 oxides", ["No digits."])
        p = Prompts(pack, PROP)
        script: dict[str, str] = {}
        add_chat(script, [(p.stage_a(doc.title), "Yes")])
        title_text = build_passage(doc, TITLE_INDEX).flatten()
        add_chat(script, single_branch_pairs(p, title_text, "160", "GPa", "MgO"))
        backend = ScriptedBackend(script)
        records = run_text_workflow(doc, PROP, backend, pack, retry=NO_SLEEP)
        assert len(records) == 1
        assert records[0].sentence_index == TITLE_INDEX

    def test_every_multi_triplet_has_three_yes_answers(self, pack, prompts):
        script: dict[str, str] = {}
        add_chat(script, [(prompts.stage_a(DOC.sentences[1]), "Yes")])
        add_chat(script, [(prompts.stage_a(DOC.sentences[2]), "No")])
        add_chat(
            script,
            [(prompts.detect(TEXT), "Yes"),
             (prompts.table(TEXT), table_reply(ROWS)),
             (prompts.fu_value(TEXT, "24"), "Yes"),
             (prompts.fu_unit(TEXT, "24", "GPa"), "Yes"),
             (prompts.fu_material(TEXT, "24", "NaCl"), "Yes"),
             (prompts.fu_value(TEXT, "18"), "No")],
        )
        store = InMemoryTranscriptStore()
        backend = ScriptedBackend(script)
        records = run_text_workflow(
            DOC, PROP, backend, pack, retry=NO_SLEEP, transcript_store=store
        )
        assert len(records) == 1
        turns = store.transcripts["doc1:1:stageB"]
        yes_count = sum(
            1 for t in turns if t.role == "response" and t.text.strip() == "Yes"
        )
        assert yes_count == 1 + 3  # multi_detect plus three follow-ups


TABLE_DOC = Document(
    "doc3",
    "Moduli from compiled tables",
    ["Tables summarize 12 alloys."],
    tables=[
        TableEntry("Material | B | Unit\nMgO | 160 | GPa\nCaO | 114 | GPa", "Table 1. Moduli.", 0),
        TableEntry("Run | Duration\n1 | 2 h", "Table 2. Schedules.", 1),
    ],
    figure_captions=[
        FigureCaption("Bulk modulus versus pressure for MgO.", 0),
        FigureCaption("Micrograph of the fracture surface.", 1),
    ],
)


def table_doc_script(pack) -> dict[str, str]:
    p = Prompts(pack, PROP)
    script: dict[str, str] = {}
    t0 = TABLE_DOC.tables[0]
    text0 = f"{t0.text}\n{t0.caption}"
    add_chat(
        script,
        [
            (p.table_classify(text0), "Yes"),
            (
                p.table_extract(text0),
                table_reply([("MgO", "160", "GPa"), ("CaO", "114", "GPa")]),
            ),
        ],
    )
    t1 = TABLE_DOC.tables[1]
    add_chat(script, [(p.table_classify(f"{t1.text}\n{t1.caption}"), "No")])
    return script


class TestTableWorkflow:
    def test_relevant_table_extracted(self, pack):
        backend = ScriptedBackend(table_doc_script(pack))
        records = run_table_workflow(TABLE_DOC, PROP, backend, pack, retry=NO_SLEEP)
        assert [r.triplet for r in records] == [
            Triplet("MgO", "160", "GPa"),
            Triplet("CaO", "114", "GPa"),
        ]
        assert all(r.source == "table" and r.branch == "table" for r in records)
        assert all(r.sentence_index is None for r in records)
        assert records[0].transcript_id == "doc3:table:0"

    def test_irrelevant_table_sends_no_extraction_prompt(self, pack):
        backend = ScriptedBackend(table_doc_script(pack))
        run_table_workflow(TABLE_DOC, PROP, backend, pack, retry=NO_SLEEP)
        # script has no extract entry for table 1; replay succeeded, so the
        # engine never asked
        assert len(backend.calls) == 3

    def test_malformed_extraction_skips_table(self, pack):
        p = Prompts(pack, PROP)
        script: dict[str, str] = {}
        t0 = TABLE_DOC.tables[0]
        text0 = f"{t0.text}\n{t0.caption}"
        add_chat(
            script,
            [(p.table_classify(text0), "Yes"),
             (p.table_extract(text0), "I cannot build a table from this.")],
        )
        t1 = TABLE_DOC.tables[1]
        add_chat(script, [(p.table_classify(f"{t1.text}\n{t1.caption}"), "No")])
        errors: list[str] = []
        backend = ScriptedBackend(script)
        records = run_table_workflow(
            TABLE_DOC, PROP, backend, pack, retry=NO_SLEEP,
            on_error=lambda unit, exc: errors.append(unit),
        )
        assert records == []
        assert errors == ["doc3#table:0"]


class TestFigureWorkflow:
    def test_caption_classification(self, pack):
        p = Prompts(pack, PROP)
        script: dict[str, str] = {}
        add_chat(script, [(p.figure(TABLE_DOC.figure_captions[0].caption), "Yes")])
        add_chat(script, [(p.figure(TABLE_DOC.figure_captions[1].caption), "No")])
        backend = ScriptedBackend(script)
        out = run_figure_workflow(TABLE_DOC, PROP, backend, pack, retry=NO_SLEEP)
        assert [(r.figure_index, r.relevant) for r in out] == [(0, True), (1, False)]


class TestWorkUnits:
    def test_title_candidate_comes_first(self):
        doc = Document("d", "Title with 3 oxides", ["a 1.", "no digits", "b 2."])
        units = text_work_units(doc)
        assert [u.sentence_index for u in units] == [TITLE_INDEX, 0, 2]

    def test_non_numeric_title_not_screened(self):
        doc = Document("d", "No numerals here", ["a 1."])
        assert [u.sentence_index for u in text_work_units(doc)] == [0]


class TestTriplet:
    def test_rejects_empty_fields(self):
        with pytest.raises(ValueError):
            Triplet("", "1", "GPa")
        with pytest.raises(ValueError):
            Triplet("NaCl", "1", "")

    def test_rejects_numeral_free_value(self):
        with pytest.raises(ValueError):
            Triplet("NaCl", "large", "GPa")

    def test_record_roundtrip(self):
        rec = ExtractionRecord(
            Triplet("NaCl", "24", "GPa"), "d", 3, "text", "single", "d:3:stageB",
            "default/1",
        )
        assert ExtractionRecord.from_record(rec.to_record()) == rec
