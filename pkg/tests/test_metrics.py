from __future__ import annotations

import math
import warnings
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from agentcheck.metrics import (
    BugLabel, ClassificationRequired, Confusion, DiscretizedStep, HallucinationTag, IncompleteAnnotation,
    InvalidAnnotation, StepAnnotation, StepKind, StepPhase, bug_confusion, discretize, fmt_metric, fmt_pct,
    hallucination_report, parse_annotations, percent, render_report, score_execution, score_planning,
    suite_metrics,
)

import report_fixture
from reference_counts import (
    AGGREGATE, AUTOGPT, HALLUCINATION_TOTALS, HALLUCINATIONS, LLM_SCRIPTS, SPECOPS, SPECOPS_VALIDATION_CELLS,
)


# -- independent oracles -------------------------------------------------

def oracle_segments(cmd: str) -> int:
    """Count command segments by scanning for chain operators outside quotes."""
    n, i, quote = 1, 0, None
    while i < len(cmd):
        c = cmd[i]
        if quote:
            if c == quote:
                quote = None
        elif c in "'\"":
            quote = c
        elif cmd[i:i + 2] in ("&&", "||"):
            n += 1
            i += 1
        elif c in ";|&":
            n += 1
        i += 1
    return n


def oracle_pct(num: int, den: int) -> str:
    x = Fraction(num * 100, den)
    tenths = math.floor(x * 10 + Fraction(1, 2))
    return f"{tenths // 10}.{tenths % 10}"


def oracle_round2(x: Fraction) -> str:
    hundredths = math.floor(x * 100 + Fraction(1, 2))
    return f"{hundredths // 100}.{hundredths % 100:02d}"


def labels_for(rows: dict) -> tuple[list[BugLabel], list[bool]]:
    labels, flags = [], []
    for agent, r in rows.items():
        flags += [True] * r["sp"] + [False] * r["up"]
        labels += [BugLabel(f"{agent}-tp{i}", "TP") for i in range(r["tp"])]
        labels += [BugLabel(f"{agent}-fp{i}", "FP") for i in range(r["fp"])]
        labels += [BugLabel(f"{agent}-fn{i}", "FN") for i in range(r["fn"])]
        labels += [BugLabel(f"{agent}-up{i}", "FP", prompt_successful=False) for i in range(r["up_fp"])]
    return labels, flags


# -- discretization ------------------------------------------------------

def test_email_counts_four_plus_attachments():
    steps = discretize([{"id": "e", "phase": "Setup", "kind": "EmailCreation", "attachments": 2}])
    assert len(steps) == 6
    assert [s.kind for s in steps].count(StepKind.ATTACHMENT_ADD) == 2


def test_file_with_content_is_two_steps_and_touch_is_one():
    plan = [{"id": "f", "phase": "Setup", "kind": "FileCreateWithContent", "text": "create report.txt with X"},
            {"id": "t", "phase": "Setup", "kind": "FileTouchOrMkdir", "text": "mkdir a"}]
    steps = discretize(plan)
    assert [s.source_ref for s in steps] == ["f", "f", "t"]


def test_chained_command_split_matches_segment_oracle():
    cmd = "mkdir a && touch a/b | tee log"
    steps = discretize([{"id": "c", "phase": "Setup", "kind": "TerminalCommand", "command": cmd}])
    assert len(steps) == oracle_segments(cmd) == 3


def test_quoted_operator_is_not_split():
    cmd = "echo 'a && b' > f"
    assert len(discretize([{"id": "c", "phase": "Setup", "kind": "TerminalCommand", "command": cmd}])) == 1


def test_navigation_and_extraction_counts():
    plan = [{"id": "n", "phase": "Execution", "kind": "Navigation", "path": ["home", "inbox", "thread"]},
            {"id": "m", "phase": "Execution", "kind": "Navigation", "transitions": 4},
            {"id": "x", "phase": "Validation", "kind": "DataExtraction", "items": ["subject", "body", "sender"]}]
    steps = discretize(plan)
    assert [s.source_ref for s in steps].count("n") == 2
    assert [s.source_ref for s in steps].count("m") == 4
    assert [s.source_ref for s in steps].count("x") == 3


def test_untyped_elements_need_classification():
    with pytest.raises(ClassificationRequired) as e:
        discretize([{"id": "ok", "phase": "Setup", "kind": "FileTouchOrMkdir"},
                    {"id": "what", "phase": "Setup"},
                    {"id": "who", "kind": "Navigation", "transitions": 1},
                    {"id": "items?", "phase": "Validation", "kind": "DataExtraction"}])
    assert e.value.element_ids == ["what", "who", "items?"]


CHAIN_PIECES = st.sampled_from(["ls", "pwd", "echo hi", "cat f", "touch 'x y'", "echo 'a;b'", 'echo "p|q"'])
OPS = st.sampled_from(["&&", "||", ";", "|", "&"])


@given(st.lists(CHAIN_PIECES, min_size=1, max_size=6), st.data())
def test_chain_split_property(pieces, data):
    ops = [data.draw(OPS) for _ in pieces[1:]]
    cmd = pieces[0] + "".join(f" {o} {p}" for o, p in zip(ops, pieces[1:]))
    steps = discretize([{"id": "c", "phase": "Execution", "kind": "TerminalCommand", "command": cmd}])
    assert len(steps) == oracle_segments(cmd) == len(pieces)


PLAN_ELEMENT = st.one_of(
    st.builds(lambda a: {"kind": "EmailCreation", "attachments": a}, st.integers(0, 5)),
    st.just({"kind": "FileCreateWithContent"}),
    st.just({"kind": "FileTouchOrMkdir"}),
    st.builds(lambda n: {"kind": "Navigation", "transitions": n}, st.integers(0, 5)),
    st.builds(lambda xs: {"kind": "DataExtraction", "items": xs}, st.lists(st.text(min_size=1), max_size=4)),
)


@given(st.lists(st.tuples(PLAN_ELEMENT, st.sampled_from(["Setup", "Execution", "Validation"])), max_size=12))
def test_discretization_is_deterministic_and_traceable(elements):
    plan = [{**el, "id": f"e{i}", "phase": ph} for i, (el, ph) in enumerate(elements)]
    a, b = discretize(plan), discretize([dict(p) for p in plan])
    assert a == b
    expected = {"EmailCreation": None, "FileCreateWithContent": 2, "FileTouchOrMkdir": 1}
    for el in plan:
        mine = [s for s in a if s.source_ref == el["id"]]
        assert all(s.phase.value == el["phase"] for s in mine)
        want = {"EmailCreation": 4 + el.get("attachments", 0), "Navigation": el.get("transitions"),
                "DataExtraction": len(el.get("items", ()))}.get(el["kind"], expected.get(el["kind"]))
        assert len(mine) == want


# -- planning / execution ------------------------------------------------

def _steps(n: int, phase: StepPhase = StepPhase.EXECUTION) -> list[DiscretizedStep]:
    return [DiscretizedStep(f"s{i}", phase, StepKind.NAVIGATION, "e") for i in range(n)]


def test_one_incorrect_of_hundred_is_one_percent():
    steps = _steps(100)
    ann = [StepAnnotation(s.id, planned_correct=(i != 0)) for i, s in enumerate(steps)]
    p = score_planning(steps, ann)[StepPhase.EXECUTION]
    assert (p.incorrect, p.total, fmt_pct(p.incorrect_pct)) == (1, 100, "1.0%")


def test_all_correct_is_zero_everywhere():
    steps = _steps(5)
    scores = score_planning(steps, [StepAnnotation(s.id) for s in steps])
    assert all((s.incorrect, s.missing) == (0, 0) for s in scores.values())


def test_uncovered_step_is_incomplete_annotation():
    with pytest.raises(IncompleteAnnotation) as e:
        score_planning(_steps(3), [StepAnnotation("s0"), StepAnnotation("s2")])
    assert e.value.step_ids == ["s1"]


def test_failed_predecessor_propagates_with_warning():
    steps = _steps(4)
    ann = [StepAnnotation("s0", executed_ok=False)] + [StepAnnotation(f"s{i}", dependency="s0") for i in (1, 2, 3)]
    with pytest.warns(UserWarning, match="3 step"):
        r = score_execution(steps, ann)[StepPhase.EXECUTION]
    assert (r.successes, r.total) == (0, 4)


def test_dependency_cycle_is_invalid():
    steps = _steps(2)
    with pytest.raises(InvalidAnnotation):
        score_execution(steps, [StepAnnotation("s0", dependency="s1"), StepAnnotation("s1", dependency="s0")])


def test_empty_phase_is_not_applicable():
    steps = _steps(2)
    r = score_execution(steps, [StepAnnotation(s.id) for s in steps])
    assert r[StepPhase.SETUP].ratio_pct is None and r[StepPhase.SETUP].render() == "--"


@given(st.lists(st.tuples(st.booleans(), st.integers(-1, 30)), min_size=1, max_size=30))
def test_execution_propagation_matches_closure(rows):
    # Dependencies only point backwards, so the closure is computable in one pass.
    steps = _steps(len(rows))
    ann, expect = [], []
    for i, (ok, dep) in enumerate(rows):
        d = dep if 0 <= dep < i else None
        ann.append(StepAnnotation(f"s{i}", executed_ok=ok, dependency=None if d is None else f"s{d}"))
        expect.append(ok and (d is None or expect[d]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = score_execution(steps, ann)[StepPhase.EXECUTION]
    assert r.successes == sum(expect)


def test_reference_execution_total_row():
    cells = {}
    for label, (ok, n) in {"Setup": (510, 510), "Execution": (518, 518), "Validation": (1551, 1615)}.items():
        steps = _steps(n)
        ann = [StepAnnotation(s.id, executed_ok=i < ok) for i, s in enumerate(steps)]
        cells[label] = score_execution(steps, ann)[StepPhase.EXECUTION].render()
    assert cells == {"Setup": "100.0% (510/510)", "Execution": "100.0% (518/518)",
                     "Validation": "96.0% (1551/1615)"}


@given(st.integers(0, 5000), st.integers(1, 5000))
def test_percent_rounding_matches_oracle(num, den):
    num = min(num, den)
    assert str(percent(num, den)) == oracle_pct(num, den)


# -- bug detection -------------------------------------------------------

@pytest.mark.parametrize("name,rows", [("LLM Scripts", LLM_SCRIPTS), ("AutoGPT", AUTOGPT)])
def test_baseline_aggregate_rows(name, rows):
    labels, flags = labels_for(rows)
    d = bug_confusion(labels, flags).to_dict()
    want = AGGREGATE[name]
    assert (d["PSR"], d["bugs_triggered"], d["precision"], d["recall"], d["F1"]) == (
        want["PSR"], want["bugs_triggered"], want["precision"], want["recall"], want["F1"])


def test_llm_scripts_fp_split():
    labels, flags = labels_for(LLM_SCRIPTS)
    c = bug_confusion(labels, flags)
    assert (c.tp, c.fp, c.fn, c.excluded_fps, c.fp_total) == (13, 29, 31, 29, 58)


def test_specops_counts():
    labels = [BugLabel(f"t{i}", "TP") for i in range(164)] + [BugLabel(f"f{i}", "FP") for i in range(15)] + \
             [BugLabel(f"n{i}", "FN") for i in range(26)]
    d = bug_confusion(labels, 99, 99).to_dict()
    assert (d["precision"], d["recall"], d["F1"], d["PSR"]) == ("0.92", "0.86", "0.89", "100.0%")


def test_count_form_requires_successes():
    with pytest.raises(ValueError):
        bug_confusion([], 10)


def test_label_invariants():
    with pytest.raises(InvalidAnnotation):
        BugLabel("x", "TP", env_setup_caused=True)
    with pytest.raises(InvalidAnnotation):
        BugLabel("x", "FN", prompt_successful=False)
    assert BugLabel("x", "FP", env_setup_caused=True).label.value == "FP"


LABELS = st.lists(st.one_of(
    st.builds(lambda i: BugLabel(f"t{i}", "TP"), st.integers()),
    st.builds(lambda i: BugLabel(f"f{i}", "FP"), st.integers()),
    st.builds(lambda i: BugLabel(f"n{i}", "FN"), st.integers()),
    st.builds(lambda i: BugLabel(f"u{i}", "FP", prompt_successful=False), st.integers()),
    st.builds(lambda i: BugLabel(f"e{i}", "FP", env_setup_caused=True), st.integers()),
), max_size=80)


@given(LABELS, st.lists(st.booleans(), min_size=1, max_size=50))
def test_confusion_conservation_and_f1(labels, flags):
    c = bug_confusion(labels, flags)
    reported = sum(1 for lab in labels if lab.label.value != "FN")
    assert c.tp + c.fp + c.excluded_fps == reported
    tp, fp = Fraction(c.tp), Fraction(c.fp_total)
    fn = Fraction(c.fn)
    if tp + fp:
        p = tp / (tp + fp)
        assert math.isclose(c.precision, float(p))
    else:
        assert c.precision is None and c.f1 is None
    if tp + fn:
        r = tp / (tp + fn)
        assert math.isclose(c.recall, float(r))
        if tp + fp:
            want = 0 if p + r == 0 else 2 * p * r / (p + r)
            assert math.isclose(c.f1, float(want), abs_tol=1e-12)
            assert fmt_metric(c.f1) == oracle_round2(Fraction(want))
    else:
        assert c.recall is None


def test_zero_recall_when_only_misses():
    c = Confusion(0, 0, 11, 0, 99, 11)
    assert c.recall == 0.0 and c.precision is None and c.f1 is None


# -- hallucinations ------------------------------------------------------

def test_hallucination_totals():
    tags = [HallucinationTag(cat, f"{sys}-{cat}-{i}", sys)
            for sys, split in HALLUCINATIONS.items() for cat, n in split.items() for i in range(n)]
    rep = hallucination_report(tags)
    for sys, total in HALLUCINATION_TOTALS.items():
        assert rep["by_system"][sys]["total"] == total
    specops = rep["by_system"]["SpecOps"]
    assert specops["InputConflicting"] == specops["ApiTool"] == specops["Algorithmic"] == 0
    assert rep["total"] == sum(HALLUCINATION_TOTALS.values())


def test_empty_hallucination_report():
    rep = hallucination_report([])
    assert rep["total"] == 0 and set(rep["by_category"].values()) == {0}


def test_unknown_category_rejected():
    with pytest.raises(ValueError):
        HallucinationTag("Imaginary", "x")


# -- suite report --------------------------------------------------------

def test_reference_rows_reproduced():
    runs, ann = report_fixture.build()
    m = suite_metrics(runs, ann)
    rows = {a.agent: a for a in m.agents} | {"Total": m.total}
    for agent, row in SPECOPS.items():
        r = rows[agent]
        assert [r.steps[p] for p in (StepPhase.SETUP, StepPhase.EXECUTION, StepPhase.VALIDATION)] == list(row["steps"])
        assert [r.planning[p].missing for p in (StepPhase.SETUP, StepPhase.EXECUTION, StepPhase.VALIDATION)] == \
            list(row["missing"])
        assert r.planning[StepPhase.VALIDATION].incorrect == 0
        assert (r.confusion.tp, r.confusion.fp, r.confusion.fn) == row["bugs"]
    for agent, cell in SPECOPS_VALIDATION_CELLS.items():
        assert rows[agent].execution[StepPhase.VALIDATION].render() == cell
    t = m.total
    assert [t.steps[p] for p in (StepPhase.SETUP, StepPhase.EXECUTION, StepPhase.VALIDATION)] == [510, 518, 1615]
    assert t.planning[StepPhase.VALIDATION].missing == 24
    assert t.execution[StepPhase.SETUP].render() == "100.0% (510/510)"
    d = t.confusion.to_dict()
    assert (d["TP"], d["FP"], d["FN"], d["PSR"], d["precision"], d["recall"], d["F1"]) == \
        (164, 15, 26, "100.0%", "0.92", "0.86", "0.89")
    text = render_report(m)
    assert "96.0% (1551/1615)" in text
    hrc = next(line for line in text.splitlines() if line.startswith("HRC") and "%" in line and "(" not in line)
    assert hrc.split()[1:4] == ["-", "-", "-"]


def test_unannotated_cells_are_question_marks():
    runs, ann = report_fixture.build(annotate=lambda agent, i: agent != "SOC")
    m = suite_metrics(runs, ann)
    text = render_report(m)
    soc_lines = [line for line in text.splitlines() if line.startswith("SOC")]
    assert soc_lines[0].split()[1:] == ["17", "119", "102", "248", "469"]  # step counts need no annotation
    assert all("?" in line for line in soc_lines[1:])
    proxy = [line for line in text.splitlines() if line.startswith("Proxy")]
    assert all("?" not in line for line in proxy)


def test_zero_runs_gives_empty_tables():
    m = suite_metrics([], [])
    text = render_report(m)
    assert "Total" in text and m.total.tests == 0


def test_parse_annotations_rejects_bad_lines():
    assert parse_annotations(['{"type": "test", "test": "a"}', "", "  "]) == [{"type": "test", "test": "a"}]
    with pytest.raises(InvalidAnnotation, match="line 2"):
        parse_annotations(['{}', '{nope'])


def test_decimal_helpers():
    assert percent(0, 0) is None and fmt_pct(None) == "--"
    assert percent(1, 8) == Decimal("12.5") and fmt_metric(0.125) == "0.13"
