"""Evaluation machinery: step discretization, planning/execution scoring,
bug-detection confusion counts, hallucination tallies and cost reporting.

Everything here is a pure function of plan documents, annotations and run
records.  Annotations are supplied by people (or fixtures); nothing here
decides whether a step was correct.
"""

from __future__ import annotations

import json
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

from .llm import PricingTable, TokenLedger, usage_cost
from .testenv.sandbox import split_chain


class ClassificationRequired(ValueError):
    """Plan elements without a recognised kind or phase; they need a human label."""

    def __init__(self, element_ids: Sequence[str]) -> None:
        super().__init__(f"plan elements need classification: {list(element_ids)}")
        self.element_ids = list(element_ids)


class IncompleteAnnotation(ValueError):
    def __init__(self, step_ids: Sequence[str]) -> None:
        super().__init__(f"steps without annotation: {list(step_ids)}")
        self.step_ids = list(step_ids)


class InvalidAnnotation(ValueError):
    pass


class StepPhase(str, Enum):
    SETUP = "Setup"
    EXECUTION = "Execution"
    VALIDATION = "Validation"
    CLEANUP = "Cleanup"


REPORT_PHASES = (StepPhase.SETUP, StepPhase.EXECUTION, StepPhase.VALIDATION)


class StepKind(str, Enum):
    NAVIGATION = "Navigation"
    DATA_EXTRACTION = "DataExtraction"
    EMAIL_CREATION = "EmailCreation"
    ATTACHMENT_ADD = "AttachmentAdd"
    FILE_CREATE_WITH_CONTENT = "FileCreateWithContent"
    FILE_TOUCH_OR_MKDIR = "FileTouchOrMkdir"
    TERMINAL_COMMAND = "TerminalCommand"
    NATURAL_LANGUAGE = "NaturalLanguage"


EMAIL_BASE_STEPS = 4
FILE_WITH_CONTENT_STEPS = 2


# -- rounding ------------------------------------------------------------

def round_half_up(x: Union[float, Decimal, int], places: int) -> Decimal:
    q = Decimal(1).scaleb(-places)
    return Decimal(str(x)).quantize(q, rounding=ROUND_HALF_UP)


def percent(num: int, den: int) -> Optional[Decimal]:
    """``num/den`` as a percentage with one decimal, or None when ``den`` is 0."""
    if den == 0:
        return None
    return (Decimal(num) * 100 / Decimal(den)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


def metric2(x: Optional[float]) -> Optional[Decimal]:
    return None if x is None else round_half_up(x, 2)


def fmt_pct(p: Optional[Decimal]) -> str:
    return "--" if p is None else f"{p}%"


def fmt_metric(x: Optional[float]) -> str:
    return "-" if x is None else str(metric2(x))


# -- discretization ------------------------------------------------------

@dataclass(frozen=True)
class DiscretizedStep:
    id: str
    phase: StepPhase
    kind: StepKind
    source_ref: str
    text: str = ""

    def to_dict(self) -> dict:
        return {"id": self.id, "phase": self.phase.value, "kind": self.kind.value,
                "source_ref": self.source_ref, "text": self.text}


def _units(el: dict) -> list[tuple[StepKind, str]]:
    kind = StepKind(el["kind"])
    if kind is StepKind.EMAIL_CREATION:
        atts = el.get("attachments", 0)
        names = list(atts) if isinstance(atts, (list, tuple)) else [f"attachment {i + 1}" for i in range(int(atts))]
        parts = ["open composer", "set recipient", "set subject", "write body"][:EMAIL_BASE_STEPS]
        return [(kind, p) for p in parts] + [(StepKind.ATTACHMENT_ADD, n) for n in names]
    if kind is StepKind.FILE_CREATE_WITH_CONTENT:
        return [(kind, "create"), (kind, "populate")]
    if kind is StepKind.TERMINAL_COMMAND:
        segs = split_chain(el["command"])
        return [(kind, " ".join(tokens)) for _, tokens in segs] or [(kind, el["command"])]
    if kind is StepKind.NAVIGATION:
        if "transitions" in el:
            n = int(el["transitions"])
        else:
            n = max(len(el["path"]) - 1, 0)
        return [(kind, f"transition {i + 1}") for i in range(n)]
    if kind is StepKind.DATA_EXTRACTION:
        return [(kind, str(item)) for item in el["items"]]
    if kind is StepKind.NATURAL_LANGUAGE:
        stmts = el.get("statements")
        return [(kind, s) for s in stmts] if stmts is not None else [(kind, el.get("text", ""))]
    return [(kind, el.get("text", ""))]  # FileTouchOrMkdir, AttachmentAdd: one each


def _classifiable(el: dict) -> bool:
    try:
        StepPhase(el.get("phase"))
        kind = StepKind(el.get("kind"))
    except ValueError:
        return False
    need = {StepKind.TERMINAL_COMMAND: "command", StepKind.DATA_EXTRACTION: "items"}.get(kind)
    if need and need not in el:
        return False
    if kind is StepKind.NAVIGATION and "transitions" not in el and "path" not in el:
        return False
    return True


def discretize(plan: Iterable[dict]) -> list[DiscretizedStep]:
    """Countable atomic steps for a plan document, in plan order."""
    plan = list(plan)
    bad = [str(el.get("id", f"#{i}")) for i, el in enumerate(plan) if not _classifiable(el)]
    if bad:
        raise ClassificationRequired(bad)
    out = []
    for i, el in enumerate(plan):
        eid = str(el.get("id", f"e{i + 1}"))
        for k, (kind, text) in enumerate(_units(el), start=1):
            out.append(DiscretizedStep(f"{eid}.{k}", StepPhase(el["phase"]), kind, eid, text))
    return out


def count_by_phase(steps: Iterable[DiscretizedStep]) -> dict[StepPhase, int]:
    c = Counter(s.phase for s in steps)
    return {p: c.get(p, 0) for p in StepPhase}


# -- planning and execution scores --------------------------------------

@dataclass(frozen=True)
class StepAnnotation:
    step_id: str
    planned_correct: bool = True
    missing: bool = False  # an absent-but-necessary step; carries its own phase
    executed_ok: bool = True
    dependency: Optional[str] = None
    phase: Optional[StepPhase] = None

    @classmethod
    def from_dict(cls, d: dict) -> StepAnnotation:
        ph = d.get("phase")
        return cls(str(d["step_id"]), bool(d.get("planned_correct", True)), bool(d.get("missing", False)),
                   bool(d.get("executed_ok", True)), d.get("dependency"), StepPhase(ph) if ph else None)


@dataclass(frozen=True)
class PlanningScore:
    incorrect: int
    total: int
    missing: int

    @property
    def incorrect_pct(self) -> Optional[Decimal]:
        return percent(self.incorrect, self.total)


@dataclass(frozen=True)
class ExecutionScore:
    successes: int
    total: int

    @property
    def ratio_pct(self) -> Optional[Decimal]:
        return percent(self.successes, self.total)

    def render(self) -> str:
        return "--" if self.total == 0 else f"{self.ratio_pct}% ({self.successes}/{self.total})"


def _split(steps: Sequence[DiscretizedStep], annotations: Iterable[StepAnnotation]):
    ann = list(annotations)
    present = {a.step_id: a for a in ann if not a.missing}
    missing = [a for a in ann if a.missing]
    uncovered = [s.id for s in steps if s.id not in present]
    if uncovered:
        raise IncompleteAnnotation(uncovered)
    return present, missing


def score_planning(steps: Sequence[DiscretizedStep], annotations: Iterable[StepAnnotation]) -> dict[StepPhase, PlanningScore]:
    present, missing = _split(steps, annotations)
    out = {}
    for p in StepPhase:
        ph = [s for s in steps if s.phase is p]
        out[p] = PlanningScore(
            sum(1 for s in ph if not present[s.id].planned_correct), len(ph),
            sum(1 for a in missing if a.phase is p),
        )
    return out


def propagate_failures(steps: Sequence[DiscretizedStep], annotations: dict[str, StepAnnotation]) -> tuple[dict[str, bool], list[str]]:
    """Effective success per step after failing every dependent of a failed step."""
    ids = {s.id for s in steps}
    for s in steps:
        dep = annotations[s.id].dependency
        if dep is not None and dep not in ids:
            raise InvalidAnnotation(f"step {s.id} depends on unknown step {dep}")
    state: dict[str, bool] = {}
    corrected: list[str] = []

    def ok(sid: str, trail: tuple[str, ...]) -> bool:
        if sid in state:
            return state[sid]
        if sid in trail:
            raise InvalidAnnotation(f"dependency cycle: {' -> '.join(trail + (sid,))}")
        a = annotations[sid]
        dep_ok = True if a.dependency is None else ok(a.dependency, trail + (sid,))
        state[sid] = a.executed_ok and dep_ok
        if a.executed_ok and not dep_ok:
            corrected.append(sid)
        return state[sid]

    for s in steps:
        ok(s.id, ())
    return state, corrected


def score_execution(steps: Sequence[DiscretizedStep], annotations: Iterable[StepAnnotation]) -> dict[StepPhase, ExecutionScore]:
    present, _ = _split(steps, annotations)
    state, corrected = propagate_failures(steps, present)
    if corrected:
        warnings.warn(f"{len(corrected)} step(s) marked executed but depend on a failed step; counted as failed: "
                      f"{corrected}", stacklevel=2)
    out = {}
    for p in StepPhase:
        ph = [s for s in steps if s.phase is p]
        out[p] = ExecutionScore(sum(1 for s in ph if state[s.id]), len(ph))
    return out


# -- bug detection -------------------------------------------------------

class Label(str, Enum):
    TP = "TP"
    FP = "FP"
    FN = "FN"


@dataclass(frozen=True)
class BugLabel:
    report_id: str
    label: Label
    env_setup_caused: bool = False
    prompt_successful: bool = True
    test_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", Label(self.label))
        if self.env_setup_caused and self.label is not Label.FP:
            raise InvalidAnnotation(f"{self.report_id}: bugs caused by environment setup are false positives")
        if not self.prompt_successful and self.label is not Label.FP:
            raise InvalidAnnotation(f"{self.report_id}: reports from unsuccessful-prompt tests are false positives")

    @classmethod
    def from_dict(cls, d: dict) -> BugLabel:
        return cls(str(d["report_id"]), Label(d["label"]), bool(d.get("env_setup_caused", False)),
                   bool(d.get("prompt_successful", True)), str(d.get("test", d.get("test_id", ""))))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int  # from tests whose prompt was delivered
    fn: int
    excluded_fps: int  # reports from tests whose prompt never arrived, counted separately
    tests: int
    successful_prompts: int

    @property
    def fp_total(self) -> int:
        return self.fp + self.excluded_fps

    @property
    def psr(self) -> Optional[Decimal]:
        return percent(self.successful_prompts, self.tests)

    @property
    def bugs_triggered(self) -> int:
        return self.tp + self.fn

    @property
    def precision(self) -> Optional[float]:
        den = self.tp + self.fp_total
        return self.tp / den if den else None

    @property
    def recall(self) -> Optional[float]:
        den = self.tp + self.fn
        return self.tp / den if den else None

    @property
    def f1(self) -> Optional[float]:
        p, r = self.precision, self.recall
        if p is None or r is None:
            return None
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    def to_dict(self) -> dict:
        return {
            "TP": self.tp, "FP": self.fp, "FN": self.fn, "excluded_FPs": self.excluded_fps,
            "FP_total": self.fp_total, "tests": self.tests, "successful_prompts": self.successful_prompts,
            "PSR": fmt_pct(self.psr), "bugs_triggered": self.bugs_triggered,
            "precision": fmt_metric(self.precision), "recall": fmt_metric(self.recall), "F1": fmt_metric(self.f1),
        }


def bug_confusion(labels: Iterable[BugLabel], tests: Union[int, Sequence[bool]],
                  successful_prompts: Optional[int] = None) -> Confusion:
    """Confusion counts plus PSR.

    ``tests`` is either a per-test list of prompt-delivered flags or a count,
    in which case ``successful_prompts`` must be given.
    """
    if isinstance(tests, int):
        if successful_prompts is None:
            raise ValueError("successful_prompts is required when tests is a count")
        n, ok = tests, successful_prompts
    else:
        flags = list(tests)
        n, ok = len(flags), sum(1 for f in flags if f)
    if not 0 <= ok <= n:
        raise ValueError("successful prompts must be between 0 and the number of tests")
    c = Counter()
    for lab in labels:
        if not lab.prompt_successful:
            c["excluded"] += 1
        else:
            c[lab.label.value] += 1
    return Confusion(c["TP"], c["FP"], c["FN"], c["excluded"], n, ok)


# -- hallucinations ------------------------------------------------------

class HallucinationCategory(str, Enum):
    INPUT_CONFLICTING = "InputConflicting"
    UI = "UI"
    API_TOOL = "ApiTool"
    ALGORITHMIC = "Algorithmic"
    FALSE_VALIDATION = "FalseValidation"
    MISCELLANEOUS = "Miscellaneous"


@dataclass(frozen=True)
class HallucinationTag:
    category: HallucinationCategory
    failure_ref: str
    system: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", HallucinationCategory(self.category))

    @classmethod
    def from_dict(cls, d: dict) -> HallucinationTag:
        return cls(HallucinationCategory(d["category"]), str(d.get("failure_ref", "")), str(d.get("system", "")))


def hallucination_report(tags: Iterable[HallucinationTag]) -> dict:
    by_cat: Counter = Counter()
    by_sys: dict[str, Counter] = defaultdict(Counter)
    for t in tags:
        by_cat[t.category] += 1
        by_sys[t.system][t.category] += 1

    def full(c: Counter) -> dict:
        return {k.value: c.get(k, 0) for k in HallucinationCategory}

    return {
        "by_category": full(by_cat),
        "total": sum(by_cat.values()),
        "by_system": {s: {**full(c), "total": sum(c.values())} for s, c in sorted(by_sys.items())},
    }


# -- cost ----------------------------------------------------------------

def fmt_tokens(n: Union[int, float]) -> str:
    return f"{round_half_up(n / 1000, 1)}K"


@dataclass(frozen=True)
class CostRow:
    label: str
    tests: int
    runtime_seconds: float
    input_tokens: int
    output_tokens: int
    cost: float

    def averaged(self) -> dict:
        n = max(self.tests, 1)
        return {
            "runtime": self.runtime_seconds / n, "input_tokens": self.input_tokens / n,
            "output_tokens": self.output_tokens / n, "cost": self.cost / n,
        }


# -- suite report --------------------------------------------------------

@dataclass
class RunSummary:
    """What the report needs from one run directory."""

    test_id: str
    agent: str
    outcome: Optional[str]
    bug_count: int
    prompt_delivered: bool
    plan: list[dict]
    ledger: TokenLedger
    runtime_seconds: float = 0.0

    @classmethod
    def load(cls, directory: Path | str) -> RunSummary:
        d = Path(directory)
        run = json.loads((d / "run.json").read_text())
        timing = json.loads((d / "timing.json").read_text()) if (d / "timing.json").exists() else {}
        return cls(
            run["feature"]["id"], run["agent"]["name"], run.get("outcome"), run.get("bug_count", 0),
            bool(run.get("prompt_delivered")), json.loads((d / "plan.json").read_text()),
            TokenLedger.from_dict(json.loads((d / "ledger.json").read_text())),
            float(timing.get("runtime_seconds", 0.0)),
        )


@dataclass
class AgentMetrics:
    agent: str
    tests: int = 0
    annotated: bool = True
    steps: dict = field(default_factory=dict)  # StepPhase -> count
    planning: dict = field(default_factory=dict)  # StepPhase -> PlanningScore
    execution: dict = field(default_factory=dict)  # StepPhase -> ExecutionScore
    sp_tests: int = 0
    up_tests: int = 0
    confusion: Optional[Confusion] = None
    cost: Optional[CostRow] = None


@dataclass
class SuiteMetrics:
    agents: list[AgentMetrics]
    total: AgentMetrics
    hallucinations: dict
    outcomes: dict
    environment_failures: int
    bugs_on_environment_failures: int

    def to_dict(self) -> dict:
        def agent_dict(a: AgentMetrics) -> dict:
            return {
                "agent": a.agent, "tests": a.tests, "annotated": a.annotated,
                "steps": {p.value: a.steps.get(p, 0) for p in REPORT_PHASES},
                "planning": {p.value: {"incorrect": s.incorrect, "incorrect_pct": fmt_pct(s.incorrect_pct),
                                       "missing": s.missing, "total": s.total}
                             for p, s in a.planning.items() if p in REPORT_PHASES} if a.annotated else None,
                "execution": {p.value: s.render() for p, s in a.execution.items() if p in REPORT_PHASES}
                if a.annotated else None,
                "bugs": ({"SP_tests": a.sp_tests, "UP_tests": a.up_tests, **a.confusion.to_dict()}
                         if a.confusion else None),
                "cost": ({"tests": a.cost.tests, "runtime_s": round(a.cost.runtime_seconds, 3),
                          "input_tokens": a.cost.input_tokens, "output_tokens": a.cost.output_tokens,
                          "cost": float(round_half_up(a.cost.cost, 4))} if a.cost else None),
            }

        return {
            "agents": [agent_dict(a) for a in self.agents],
            "total": agent_dict(self.total),
            "hallucinations": self.hallucinations,
            "outcomes": self.outcomes,
            "environment_failures": self.environment_failures,
            "bugs_on_environment_failures": self.bugs_on_environment_failures,
        }


def parse_annotations(lines: Iterable[str]) -> list[dict]:
    out = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise InvalidAnnotation(f"line {i}: {e}") from e
    return out


def _steps_for(run: RunSummary) -> list[DiscretizedStep]:
    return discretize(run.plan)


def suite_metrics(runs: Sequence[RunSummary], annotations: Sequence[dict] = (),
                  pricing: Optional[PricingTable] = None) -> SuiteMetrics:
    by_test: dict[str, list[dict]] = defaultdict(list)
    for a in annotations:
        by_test[str(a.get("test", ""))].append(a)

    agents: dict[str, list[RunSummary]] = defaultdict(list)
    for r in runs:
        agents[r.agent].append(r)

    rows = [_agent_metrics(name, rs, by_test, pricing) for name, rs in sorted(agents.items())]
    total = _combine(rows, pricing is not None)
    tags = [HallucinationTag.from_dict({**a, "system": a.get("system", "")})
            for a in annotations if a.get("type") == "hallucination"]
    outcomes = Counter(r.outcome or "FrameworkError" for r in runs)
    env_fail = [r for r in runs if r.outcome == "EnvironmentFailure"]
    return SuiteMetrics(rows, total, hallucination_report(tags), dict(sorted(outcomes.items())),
                        len(env_fail), sum(r.bug_count for r in env_fail))


def _agent_metrics(name: str, runs: list[RunSummary], by_test: dict, pricing: Optional[PricingTable]) -> AgentMetrics:
    m = AgentMetrics(name, len(runs))
    all_steps: list[DiscretizedStep] = []
    step_ann: list[StepAnnotation] = []
    labels: list[BugLabel] = []
    flags: list[bool] = []
    for r in runs:
        steps = [DiscretizedStep(f"{r.test_id}/{s.id}", s.phase, s.kind, s.source_ref, s.text) for s in _steps_for(r)]
        all_steps += steps
        ann = by_test.get(r.test_id)
        if not ann:
            m.annotated = False
            continue
        prompt_ok = r.prompt_delivered
        for a in ann:
            if a.get("type") == "test" and "prompt_successful" in a:
                prompt_ok = bool(a["prompt_successful"])
        flags.append(prompt_ok)
        for a in ann:
            t = a.get("type")
            if t == "step":
                sa = StepAnnotation.from_dict(a)
                dep = f"{r.test_id}/{sa.dependency}" if sa.dependency else None
                step_ann.append(StepAnnotation(f"{r.test_id}/{sa.step_id}", sa.planned_correct, sa.missing,
                                               sa.executed_ok, dep, sa.phase))
            elif t == "bug":
                labels.append(BugLabel.from_dict({**a, "prompt_successful": a.get("prompt_successful", prompt_ok)}))
    m.steps = count_by_phase(all_steps)
    if m.annotated:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m.planning = score_planning(all_steps, step_ann)
            m.execution = score_execution(all_steps, step_ann)
        m.confusion = bug_confusion(labels, flags)
        m.sp_tests = sum(flags)
        m.up_tests = len(flags) - m.sp_tests
    if pricing is not None:
        ledger = TokenLedger()
        for r in runs:
            ledger.entries.extend(r.ledger.entries)
        t = ledger.total()
        cost = sum(usage_cost(u, pricing) for u in ledger.by_role().values())
        m.cost = CostRow(name, len(runs), sum(r.runtime_seconds for r in runs), t.input_tokens, t.output_tokens, cost)
    return m


def _combine(rows: list[AgentMetrics], with_cost: bool) -> AgentMetrics:
    t = AgentMetrics("Total", sum(r.tests for r in rows), all(r.annotated for r in rows))
    t.steps = {p: sum(r.steps.get(p, 0) for r in rows) for p in StepPhase}
    if t.annotated:
        t.planning = {p: PlanningScore(sum(r.planning[p].incorrect for r in rows), sum(r.planning[p].total for r in rows),
                                       sum(r.planning[p].missing for r in rows)) for p in StepPhase}
        t.execution = {p: ExecutionScore(sum(r.execution[p].successes for r in rows),
                                         sum(r.execution[p].total for r in rows)) for p in StepPhase}
        cs = [r.confusion for r in rows]
        t.confusion = Confusion(sum(c.tp for c in cs), sum(c.fp for c in cs), sum(c.fn for c in cs),
                                sum(c.excluded_fps for c in cs), sum(c.tests for c in cs),
                                sum(c.successful_prompts for c in cs))
        t.sp_tests = sum(r.sp_tests for r in rows)
        t.up_tests = sum(r.up_tests for r in rows)
    if with_cost:
        cs = [r.cost for r in rows]
        t.cost = CostRow("Total", sum(c.tests for c in cs), sum(c.runtime_seconds for c in cs),
                         sum(c.input_tokens for c in cs), sum(c.output_tokens for c in cs), sum(c.cost for c in cs))
    return t


# -- plain-text rendering -----------------------------------------------

def align(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _cell(m: AgentMetrics, fn) -> str:
    return fn() if m.annotated else "?"


def render_report(s: SuiteMetrics) -> str:
    rows = s.agents + [s.total]
    out = []

    def no_setup(m: AgentMetrics) -> bool:
        return m.steps.get(StepPhase.SETUP, 0) == 0

    out.append("Discretized steps")
    out.append(align(["Agent", "Tests", "Setup", "Execution", "Validation", "Sum"], [
        [m.agent, m.tests, "-" if no_setup(m) else m.steps[StepPhase.SETUP], m.steps[StepPhase.EXECUTION],
         m.steps[StepPhase.VALIDATION], sum(m.steps[p] for p in REPORT_PHASES)] for m in rows]))

    out.append("\nPlanning: incorrect (#I, %I) and missing (#M) steps")
    head = ["Agent"] + [f"{p.value} {c}" for p in REPORT_PHASES for c in ("#I", "%I", "#M")]
    body = []
    for m in rows:
        r = [m.agent]
        for p in REPORT_PHASES:
            if p is StepPhase.SETUP and no_setup(m):
                r += ["-", "-", "-"]
                continue
            r += [_cell(m, lambda: str(m.planning[p].incorrect)), _cell(m, lambda: fmt_pct(m.planning[p].incorrect_pct)),
                  _cell(m, lambda: str(m.planning[p].missing))]
        body.append(r)
    out.append(align(head, body))

    out.append("\nExecution success (successes/attempts)")
    out.append(align(["Agent"] + [p.value for p in REPORT_PHASES], [
        [m.agent] + [_cell(m, lambda: m.execution[p].render()) for p in REPORT_PHASES] for m in rows]))

    out.append("\nBug detection (SP: prompt delivered, UP: prompt not delivered)")
    out.append(align(["Agent", "SP tests", "TP", "FP", "FN", "UP tests", "UP FP"], [
        [m.agent] + ([str(m.sp_tests), m.confusion.tp, m.confusion.fp, m.confusion.fn, str(m.up_tests),
                      m.confusion.excluded_fps] if m.confusion else ["?"] * 6) for m in rows]))

    c = s.total.confusion
    out.append("\nAggregate bug detection")
    out.append(align(["Metric", "Value"], [
        ["PSR", fmt_pct(c.psr) if c else "?"],
        ["Bugs triggered", c.bugs_triggered if c else "?"],
        ["Precision", fmt_metric(c.precision) if c else "?"],
        ["Recall", fmt_metric(c.recall) if c else "?"],
        ["F1 Score", fmt_metric(c.f1) if c else "?"],
    ]))

    h = s.hallucinations
    out.append("\nHallucinations by category")
    out.append(align(["Category", "Count"], [[k, v] for k, v in h["by_category"].items()] + [["Total", h["total"]]]))

    if s.total.cost is not None:
        out.append("\nAverage per test: runtime, tokens, cost")
        out.append(align(["Agent", "Runtime (s)", "Input tokens", "Output tokens", "Cost"], [
            [m.agent, round_half_up(m.cost.averaged()["runtime"], 1), fmt_tokens(m.cost.averaged()["input_tokens"]),
             fmt_tokens(m.cost.averaged()["output_tokens"]), round_half_up(m.cost.averaged()["cost"], 2)]
            for m in rows if m.cost]))

    out.append(f"\nOutcomes: {', '.join(f'{k}={v}' for k, v in s.outcomes.items()) or 'none'}; "
               f"environment failures: {s.environment_failures} with {s.bugs_on_environment_failures} bug reports")
    return "\n".join(out) + "\n"
