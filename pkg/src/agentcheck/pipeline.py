"""Four-phase test run: generation, setup, execution, validation.

Each phase talks to its specialists through the :class:`~agentcheck.llm.Gateway`
and acts only through the specialist's own tool registry.  The test
specification produced by one phase is exactly the one consumed by the next,
and an abort stops the run where it happened.

Specialists answer in JSON.  The shapes are:

* TestArchitect: a revision delta (``subject_prompt``, ``add_setup``, ``add_oracles`` ...).
* TestAnalyst: a revision delta, or ``{}`` for "no change".
* InfrastructureManager: tool calls, then ``{"realized": {step_id: [call_id]}, "revision": delta?}``.
* Engineer: tool calls; its text is kept as commentary.
* Investigator: tool calls, then ``{"findings": [{"id", "summary", "probe_call_ids"}]}``.
* Judge, turn 1: ``{"questions": [{"id", "criterion", "text"}]}``.
* Judge, turn 2: ``{"answers": [...], "oracle_results": {...}, "bugs": [...]}``.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional

from .llm import (
    Author, CompletionRequest, CompletionResponse, Gateway, ImageRef, Message, Provider, TokenLedger,
    ToolHallucinationError,
)
from .roles import BugCriterion, Phase, SpecialistRole
from .screen import ScreenCapture, ScreenSession, Trigger, VirtualTerminal, save_captures
from .spec_model import (
    AgentSpecification, CheckKind, FeatureDescription, IncoherentRevision, SpecDelta, TestSpecification,
    canonical_json, coherence_check, new_specification, revise_specification,
)
from .testenv import EnvDiff, Environment, EnvSnapshot, FaultSpec, diff
from .tools import (
    AgentAdapter, Registry, ToolCall, ToolResult, ToolStatus, UiContext, build_registry, dispatch, retry_loop,
)

log = logging.getLogger(__name__)

Role = SpecialistRole
INSUFFICIENT = "insufficient evidence"


class PhaseStatus(str, Enum):
    COMPLETED = "Completed"
    ABORTED_ENV_FAILURE = "AbortedEnvFailure"
    ABORTED_FATAL = "AbortedFatal"


class Outcome(str, Enum):
    PASS = "Pass"
    BUGS = "Bugs"
    ENVIRONMENT_FAILURE = "EnvironmentFailure"


class PhaseAbort(Exception):
    def __init__(self, status: PhaseStatus, reason: str) -> None:
        super().__init__(reason)
        self.status = status
        self.reason = reason


CRITERION_GUIDE = {
    BugCriterion.DEVIATION_FROM_EXPECTED: "Did the agent behave unreasonably differently from what the oracles expect?",
    BugCriterion.MISREPORTING: "Does what the agent reported match what actually happened in the environment?",
    BugCriterion.COMPLETION_IMPACT: "Was the requested task actually completed, judged by the environment state?",
    BugCriterion.QUALITY_IMPACT: "Is the produced output of acceptable quality (no placeholders, errors or junk)?",
    BugCriterion.UNREASONABLE_INTERVENTION: "Did the agent demand user intervention a reasonable agent would not need?",
}

DEFAULT_TEMPLATES = {
    Role.TEST_ARCHITECT: "You design one end-to-end test for the feature: setup steps, a subject prompt and oracles.",
    Role.TEST_ANALYST: "You review the draft test against your guidelines and return a revision delta or {}.",
    Role.INFRASTRUCTURE_MANAGER: "You realize every setup step with the environment tools, then report which calls did it.",
    Role.ENGINEER: "You launch the subject agent, deliver the prompt with verified typing and watch it finish. "
                   "Never perform the task yourself.",
    Role.INVESTIGATOR: "You probe the environment for the status changes the oracles care about and organize findings.",
    Role.JUDGE: "You judge the evidence: first ask questions per bug criterion, then answer them and decide.",
}

ANALYST_GUIDELINES = (
    "every entity the prompt relies on is created by a setup step",
    "oracles are checkable and hold for every valid way the agent may complete the task",
    "setup steps use only the available environment APIs",
)


# -- records -------------------------------------------------------------

@dataclass(frozen=True)
class EvidenceBundle:
    engineer_commentary: tuple[str, ...] = ()
    captures: tuple[ScreenCapture, ...] = ()
    env_diff: EnvDiff = EnvDiff()
    investigator_findings: tuple[dict, ...] = ()
    prompt_delivered: bool = False
    prompt_evidence: Optional[int] = None  # capture seq showing the verified prompt
    completion: Optional[str] = None  # how the watch ended: marker | quiescent | timeout | closed

    def __post_init__(self) -> None:
        if self.prompt_delivered and self.prompt_evidence is None:
            raise ValueError("prompt_delivered needs a capture evidencing the prompt")

    @property
    def unsuccessful_prompt(self) -> bool:
        return not self.prompt_delivered

    @property
    def empty(self) -> bool:
        return not (self.engineer_commentary or self.captures or not self.env_diff.empty
                    or self.investigator_findings)

    def capture(self, seq: int) -> Optional[ScreenCapture]:
        for c in self.captures:
            if c.seq == seq:
                return c
        return None

    def to_dict(self) -> dict:
        return {
            "engineer_commentary": list(self.engineer_commentary),
            "captures": [c.to_dict() for c in self.captures],
            "env_diff": self.env_diff.to_dict(),
            "investigator_findings": list(self.investigator_findings),
            "prompt_delivered": self.prompt_delivered,
            "prompt_evidence": self.prompt_evidence,
            "completion": self.completion,
        }


@dataclass(frozen=True)
class BugReport:
    id: str
    criterion: BugCriterion
    description: str
    evidence_refs: tuple[str, ...]
    question_ids: tuple[str, ...] = ()
    evidence: tuple[dict, ...] = ()  # resolved content behind each ref
    invalid_for_psr: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "criterion", BugCriterion(self.criterion))
        if not self.evidence_refs:
            raise ValueError(f"bug {self.id} has no evidence")

    def to_dict(self) -> dict:
        return {
            "id": self.id, "criterion": self.criterion.value, "description": self.description,
            "evidence_refs": list(self.evidence_refs), "question_ids": list(self.question_ids),
            "evidence": list(self.evidence), "invalid_for_psr": self.invalid_for_psr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> BugReport:
        return cls(d["id"], BugCriterion(d["criterion"]), d["description"], tuple(d["evidence_refs"]),
                   tuple(d.get("question_ids", ())), tuple(d.get("evidence", ())), d.get("invalid_for_psr", False))


@dataclass(frozen=True)
class Verdict:
    outcome: Outcome
    bugs: tuple[BugReport, ...] = ()
    oracle_results: dict = field(default_factory=dict)  # oracle id -> pass | fail | unknown
    reason: Optional[str] = None
    invalid_for_psr: bool = False
    questions: tuple[dict, ...] = ()
    answers: tuple[dict, ...] = ()
    discarded: tuple[dict, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        if self.outcome is Outcome.ENVIRONMENT_FAILURE and self.bugs:
            raise ValueError("an environment failure never carries bug reports")
        if (self.outcome is Outcome.BUGS) != bool(self.bugs):
            raise ValueError("outcome Bugs iff at least one bug report")

    @classmethod
    def environment_failure(cls, reason: str) -> Verdict:
        return cls(Outcome.ENVIRONMENT_FAILURE, reason=reason)

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "bugs": [b.to_dict() for b in self.bugs],
            "oracle_results": dict(sorted(self.oracle_results.items())),
            "reason": self.reason,
            "invalid_for_psr": self.invalid_for_psr,
            "questions": list(self.questions),
            "answers": list(self.answers),
            "discarded": list(self.discarded),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Verdict:
        return cls(
            Outcome(d["outcome"]), tuple(BugReport.from_dict(b) for b in d.get("bugs", ())),
            dict(d.get("oracle_results", {})), d.get("reason"), d.get("invalid_for_psr", False),
            tuple(d.get("questions", ())), tuple(d.get("answers", ())), tuple(d.get("discarded", ())),
        )


@dataclass
class PhaseRecord:
    phase: Phase
    status: PhaseStatus
    spec_in: str
    spec_out: str
    transcript: list[dict] = field(default_factory=list)
    reason: Optional[str] = None

    def to_dict(self) -> dict:
        return {"phase": self.phase.value, "status": self.status.value, "spec_in": self.spec_in,
                "spec_out": self.spec_out, "reason": self.reason,
                "transcript": f"transcripts/{self.phase.value.lower()}.json"}


@dataclass(frozen=True)
class SetupReport:
    calls: tuple[dict, ...] = ()
    realized: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"calls": list(self.calls), "realized": self.realized}


@dataclass
class RunConfig:
    provider: Provider
    adapter_factory: Callable[[ScreenSession, Environment, AgentSpecification], AgentAdapter]
    max_retries: int = 3
    templates: dict = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))
    faults: tuple[FaultSpec, ...] = ()
    analyst_rounds: int = 3
    setup_turns: int = 20
    engineer_turns: int = 30
    investigator_turns: int = 10
    watch_timeout: float = 300.0
    quiescence: float = 10.0
    screen_size: tuple[int, int] = (40, 120)
    sleep: Callable[[float], None] = lambda s: None  # provider backoff; real runs pass time.sleep


@dataclass
class RunRecord:
    feature: FeatureDescription
    agent: AgentSpecification
    spec: TestSpecification
    phases: list[PhaseRecord] = field(default_factory=list)
    verdict: Optional[Verdict] = None
    ledger: TokenLedger = field(default_factory=TokenLedger)
    evidence: Optional[EvidenceBundle] = None
    setup: Optional[SetupReport] = None
    events: list[dict] = field(default_factory=list)  # faults, attempts, hallucinated tool names
    plan: list[dict] = field(default_factory=list)
    runtime_seconds: float = 0.0

    @property
    def aborted(self) -> bool:
        return any(p.status is not PhaseStatus.COMPLETED for p in self.phases)

    @property
    def attempts(self) -> list[dict]:
        return [e for e in self.events if e.get("event") == "attempt"]

    def summary(self) -> dict:
        return {
            "feature": self.feature.to_dict(),
            "agent": self.agent.to_dict(),
            "phases": [p.to_dict() for p in self.phases],
            "outcome": self.verdict.outcome.value if self.verdict else None,
            "bug_count": len(self.verdict.bugs) if self.verdict else 0,
            "prompt_delivered": self.evidence.prompt_delivered if self.evidence else False,
            "events": self.events,
            "setup": self.setup.to_dict() if self.setup else None,
        }

    def save(self, directory: Path | str) -> Path:
        """Write the run as a directory.  Everything except timing.json is deterministic."""
        d = Path(directory)
        (d / "specs").mkdir(parents=True, exist_ok=True)
        (d / "transcripts").mkdir(exist_ok=True)
        for snap in self.spec.snapshots:
            (d / "specs" / f"{snap.snapshot_id}.json").write_text(canonical_json(snap.to_dict()))
        (d / "specs" / "history.json").write_text(canonical_json([r.to_dict() for r in self.spec.revisions]))
        for p in self.phases:
            (d / "transcripts" / f"{p.phase.value.lower()}.json").write_text(canonical_json(p.transcript))
        save_captures(list(self.evidence.captures) if self.evidence else [], d / "captures")
        if self.evidence:
            ev = self.evidence.to_dict()
            (d / "evidence.json").write_text(canonical_json(ev))
        (d / "verdict.json").write_text(canonical_json(self.verdict.to_dict() if self.verdict else None))
        (d / "ledger.json").write_text(canonical_json(self.ledger.to_dict(include_wall_clock=False)))
        (d / "timing.json").write_text(canonical_json({
            "runtime_seconds": self.runtime_seconds,
            "wall_clock": {p.value: s for p, s in self.ledger.wall_clock.items()},
        }))
        (d / "run.json").write_text(canonical_json(self.summary()))
        (d / "plan.json").write_text(canonical_json(self.plan))
        return d


# -- helpers -------------------------------------------------------------

def parse_json_reply(content: str) -> Any:
    """Decode a specialist's JSON answer, tolerating a surrounding code fence."""
    text = content.strip()
    m = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    if m:
        text = m.group(1).strip()
    if not text:
        return {}
    return json.loads(text)


class _Run:
    """Mutable per-run state shared by the phase functions."""

    def __init__(self, record: RunRecord, env: Environment, gateway: Gateway, config: RunConfig) -> None:
        self.record = record
        self.env = env
        self.gateway = gateway
        self.config = config
        self.transcript: list[dict] = []
        self.latest: Optional[TestSpecification] = None  # newest spec, kept even if the phase aborts

    def revise(self, spec: TestSpecification, role: Role, delta: SpecDelta) -> TestSpecification:
        spec = revise_specification(spec, role, delta, timestamp=self.stamp())
        self.latest = spec
        return spec

    def stamp(self) -> str:
        return self.env.now().isoformat(timespec="minutes")

    def ask(self, role: Role, messages: list[Message], registry: Optional[Registry] = None) -> CompletionResponse:
        req = CompletionRequest(
            role, self.config.templates.get(role, DEFAULT_TEMPLATES[role]), tuple(messages),
            tuple(registry.signatures) if registry else (),
        )
        try:
            resp = self.gateway.complete(req)
        except ToolHallucinationError as e:
            # Recorded, then dispatched anyway so the specialist sees UnknownTool.
            self.record.events.append({"event": "hallucinated_tool", "role": role.value, "tool": e.name})
            resp = e.response
        self.transcript.append({
            "kind": "completion", "role": role.value, "content": resp.content,
            "tool_calls": [c.to_dict() for c in resp.tool_calls], "usage": resp.usage.to_dict(),
        })
        return resp

    def tool_result(self, role: Role, call: ToolCall, result: ToolResult) -> None:
        self.transcript.append({"kind": "tool_result", "role": role.value, "tool": call.tool,
                                "args": call.args, **result.to_dict()})


def _user(payload: Any) -> Message:
    return Message(Author.USER, payload if isinstance(payload, str) else canonical_json(payload))


def _assistant(resp: CompletionResponse) -> Message:
    return Message(Author.ASSISTANT, canonical_json({
        "content": resp.content, "tool_calls": [c.to_dict() for c in resp.tool_calls]}))


def _observation(call: ToolCall, result: ToolResult) -> Message:
    return Message(Author.TOOL_RESULT, canonical_json({
        "call_id": call.call_id, "tool": call.tool, "status": result.status.value,
        "observation": result.observation}))


def _delta(obj: Any) -> SpecDelta:
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    return SpecDelta.from_dict(obj)


# -- phase 1 -------------------------------------------------------------

def phase1_generate(run: _Run, feature: FeatureDescription, agent: AgentSpecification,
                    spec: TestSpecification) -> TestSpecification:
    env_facts = run.env.describe()
    arch = run.ask(Role.TEST_ARCHITECT, [_user({
        "feature": feature.to_dict(), "agent": agent.to_dict(), "environment": env_facts,
        "setup_apis": ["send_email", "exec_command"],
        "task": "Draft setup steps, the subject prompt and oracles as one revision delta.",
    })])
    try:
        spec = run.revise(spec, Role.TEST_ARCHITECT, _delta(parse_json_reply(arch.content)))
    except (ValueError, KeyError) as e:
        raise PhaseAbort(PhaseStatus.ABORTED_FATAL, f"GenerationIncoherent: architect draft unusable ({e})")

    history: list[Message] = []
    for rnd in range(run.config.analyst_rounds):
        violations = coherence_check(spec)
        if rnd > 0 and not violations:
            break
        history.append(_user({
            "round": rnd + 1, "feature": feature.to_dict(), "draft": spec.active.to_dict(),
            "coherence_violations": [v.to_dict() for v in violations],
            "guidelines": list(ANALYST_GUIDELINES),
        }))
        resp = run.ask(Role.TEST_ANALYST, history)
        history.append(_assistant(resp))
        try:
            spec = run.revise(spec, Role.TEST_ANALYST, _delta(parse_json_reply(resp.content)))
        except (IncoherentRevision, ValueError, KeyError) as e:
            run.transcript.append({"kind": "rejected_revision", "role": Role.TEST_ANALYST.value, "detail": str(e)})
    remaining = coherence_check(spec)
    if remaining:
        raise PhaseAbort(PhaseStatus.ABORTED_FATAL,
                         "GenerationIncoherent: " + "; ".join(v.detail for v in remaining))
    if not spec.subject_prompt.strip():
        raise PhaseAbort(PhaseStatus.ABORTED_FATAL, "GenerationIncoherent: no subject prompt")
    return spec


# -- phase 2 -------------------------------------------------------------

def phase2_setup(run: _Run, spec: TestSpecification) -> tuple[TestSpecification, SetupReport]:
    steps = spec.setup_steps
    if not steps:
        return spec, SetupReport()
    registry = build_registry(Role.INFRASTRUCTURE_MANAGER, env=run.env)
    calls: list[dict] = []
    ok_calls: set[str] = set()
    history = [_user({
        "setup_steps": [s.to_dict() for s in steps], "subject_prompt": spec.subject_prompt,
        "oracles": [o.to_dict() for o in spec.oracles], "environment": run.env.describe(),
        "task": "Realize every step with tool calls, then answer with realized step ids and call ids.",
    })]
    for _ in range(run.config.setup_turns):
        resp = run.ask(Role.INFRASTRUCTURE_MANAGER, history, registry)
        history.append(_assistant(resp))
        if not resp.tool_calls:
            break
        for call in resp.tool_calls:
            attempts: list[dict] = []
            result = retry_loop(registry, call, run.config.max_retries, attempt_log=attempts)
            for a in attempts:
                run.record.events.append({"event": "attempt", "phase": Phase.SETUP.value, **a})
            run.tool_result(Role.INFRASTRUCTURE_MANAGER, call, result)
            calls.append({"call_id": call.call_id, "tool": call.tool, "args": call.args,
                          "status": result.status.value, "attempts": result.attempts,
                          "error_kind": result.error_kind, "observation": result.observation})
            if result.error_kind == "RetriesExhausted":
                fault = result.payload.get("fault") or "unknown"
                raise PhaseAbort(PhaseStatus.ABORTED_ENV_FAILURE, fault)
            if result.ok:
                ok_calls.add(call.call_id)
            history.append(_observation(call, result))
    else:
        raise PhaseAbort(PhaseStatus.ABORTED_FATAL, "SetupIncomplete: turn budget exhausted")

    try:
        final = parse_json_reply(resp.content)
    except ValueError as e:
        raise PhaseAbort(PhaseStatus.ABORTED_FATAL, f"SetupIncomplete: unreadable report ({e})")
    realized = {k: list(v) for k, v in (final.get("realized") or {}).items()}
    if final.get("revision"):
        try:
            spec = run.revise(spec, Role.INFRASTRUCTURE_MANAGER, _delta(final["revision"]))
        except (IncoherentRevision, ValueError, KeyError) as e:
            raise PhaseAbort(PhaseStatus.ABORTED_FATAL, f"SetupIncomplete: revision refused ({e})")
    missing = [s.id for s in spec.setup_steps if not set(realized.get(s.id, ())) & ok_calls]
    report = SetupReport(tuple(calls), realized)
    run.record.setup = report
    if missing:
        raise PhaseAbort(PhaseStatus.ABORTED_FATAL, f"SetupIncomplete: steps {missing} not realized")
    return spec, report


# -- phase 3 -------------------------------------------------------------

def phase3_execute(run: _Run, spec: TestSpecification, agent: AgentSpecification, ctx: UiContext,
                   baseline: EnvSnapshot) -> EvidenceBundle:
    registry = build_registry(Role.ENGINEER, ui=ctx, platform=agent.platform)
    commentary: list[str] = []
    history = [_user({
        "agent": agent.to_dict(), "subject_prompt": spec.subject_prompt,
        "task": "Open the subject agent, deliver the prompt verbatim with type_verified, press Enter, "
                "then wait_for_completion.  Report what you see; never do the task yourself.",
    })]
    for _ in range(run.config.engineer_turns):
        resp = run.ask(Role.ENGINEER, history, registry)
        history.append(_assistant(resp))
        if resp.content.strip():
            commentary.append(resp.content.strip())
        if not resp.tool_calls:
            break
        for call in resp.tool_calls:
            if ctx.session.closed or ctx.screen.closed:
                result = ToolResult(call.call_id, ToolStatus.FATAL, "ScreenUnavailable", error_kind="ScreenUnavailable")
            else:
                result = dispatch(registry, call)
            run.tool_result(Role.ENGINEER, call, result)
            history.append(_observation(call, result))
            if call.tool == "wait_for_completion" and ctx.session.recorder.last_seq:
                history.append(Message(Author.USER, ImageRef(ctx.session.recorder.last_seq)))
    else:
        commentary.append("[turn budget exhausted]")

    if not ctx.screen.closed:
        ctx.session.recorder.capture(ctx.screen.frame(), Trigger.PHASE_BOUNDARY)
    captures = tuple(ctx.session.recorder.captures)
    typed = [t for t in ctx.typed if t["text"] == spec.subject_prompt]
    evidence_seq = None
    for t in typed:
        if any(c.seq > t["seq"] and c.trigger is Trigger.CHANGE for c in captures):
            evidence_seq = t["seq"]
            break
    completion = ctx.watches[-1]["stopped_by"] if ctx.watches else None
    if any(w["stopped_by"] == "timeout" for w in ctx.watches):
        commentary.append("[timeout] subject agent did not finish within the watch window")
        completion = "timeout"
    return EvidenceBundle(
        tuple(commentary), captures, diff(baseline, run.env.snapshot()), (),
        evidence_seq is not None, evidence_seq, completion,
    )


# -- phase 4 -------------------------------------------------------------

def investigator_needed(spec: TestSpecification, bundle: EvidenceBundle) -> bool:
    return any(o.check_kind is CheckKind.ENV_PROBE for o in spec.oracles) or not bundle.env_diff.empty


def investigate(run: _Run, spec: TestSpecification, bundle: EvidenceBundle,
                baseline: EnvSnapshot) -> tuple[dict, ...]:
    registry = build_registry(Role.INVESTIGATOR, env=run.env, baseline=lambda: baseline)
    results: dict[str, tuple[ToolCall, ToolResult]] = {}
    history = [_user({
        "oracles": [o.to_dict() for o in spec.oracles], "subject_prompt": spec.subject_prompt,
        "env_diff": bundle.env_diff.by_domain(),
        "task": "Probe for the status changes the oracles care about; answer with organized findings.",
    })]
    resp = None
    for _ in range(run.config.investigator_turns):
        resp = run.ask(Role.INVESTIGATOR, history, registry)
        history.append(_assistant(resp))
        if not resp.tool_calls:
            break
        for call in resp.tool_calls:
            result = dispatch(registry, call)
            run.tool_result(Role.INVESTIGATOR, call, result)
            results[call.call_id] = (call, result)
            history.append(_observation(call, result))
    try:
        raw = parse_json_reply(resp.content).get("findings", []) if resp else []
    except (ValueError, AttributeError):
        raw = []
    findings = []
    for f in raw:
        refs = [c for c in f.get("probe_call_ids", []) if c in results and results[c][1].ok]
        findings.append({
            "id": str(f.get("id", f"F{len(findings) + 1}")),
            "summary": f.get("summary", ""),
            "probe_call_ids": refs,
            "observations": [{"call_id": c, "tool": results[c][0].tool, "args": results[c][0].args,
                              "payload": results[c][1].payload} for c in refs],
            "grounded": bool(refs),
        })
    return tuple(findings)


@dataclass(frozen=True)
class MetaCot:
    questions: tuple[dict, ...]
    answers: tuple[dict, ...]
    decision: dict


def judge_context(spec: TestSpecification, bundle: EvidenceBundle) -> dict:
    return {
        "subject_prompt": spec.subject_prompt,
        "oracles": [o.to_dict() for o in spec.oracles],
        "criteria": {c.value: q for c, q in CRITERION_GUIDE.items()},
        "evidence": {
            "commentary": [{"ref": f"commentary:{i}", "text": t} for i, t in enumerate(bundle.engineer_commentary)],
            "captures": [{"ref": f"capture:{c.seq}", "t": c.timestamp, "screen": c.frame.text}
                         for c in bundle.captures],
            "env_diff": bundle.env_diff.to_dict(),
            "findings": [{"ref": f"finding:{f['id']}", "summary": f["summary"], "observations": f["observations"]}
                         for f in bundle.investigator_findings],
            "prompt_delivered": bundle.prompt_delivered,
        },
    }


def meta_cot(run: _Run, context: dict) -> MetaCot:
    """Two Judge turns: questions over the evidence, then answers and a decision."""
    history = [_user({**context, "task": "Ask chain-of-thought questions, at least one per criterion."})]
    resp = run.ask(Role.JUDGE, history)
    history.append(_assistant(resp))
    try:
        asked = parse_json_reply(resp.content).get("questions", [])
    except (ValueError, AttributeError):
        asked = []
    questions, ids = [], set()
    for i, q in enumerate(asked):
        try:
            crit = BugCriterion(q.get("criterion"))
        except ValueError:
            continue
        qid = str(q.get("id") or f"q{i + 1}")
        if qid in ids:
            continue
        ids.add(qid)
        questions.append({"id": qid, "criterion": crit.value, "text": q.get("text", "")})
    covered = {q["criterion"] for q in questions}
    for c in BugCriterion:
        if c.value not in covered:
            questions.append({"id": f"auto-{c.value}", "criterion": c.value, "text": CRITERION_GUIDE[c]})

    history.append(_user({"questions": questions,
                          "task": "Answer each question citing evidence refs, then give oracle results and bugs."}))
    resp = run.ask(Role.JUDGE, history)
    try:
        decision = parse_json_reply(resp.content)
        if not isinstance(decision, dict):
            decision = {}
    except ValueError:
        decision = {}
    given = {str(a.get("question_id")): a for a in decision.get("answers", []) if isinstance(a, dict)}
    answers = []
    for q in questions:
        a = given.get(q["id"])
        if a and str(a.get("answer", "")).strip():
            answers.append({"question_id": q["id"], "answer": a["answer"],
                            "evidence_refs": list(a.get("evidence_refs", [])), "answered": True})
        else:
            answers.append({"question_id": q["id"], "answer": INSUFFICIENT, "evidence_refs": [], "answered": False})
    return MetaCot(tuple(questions), tuple(answers), decision)


def resolve_ref(ref: str, bundle: EvidenceBundle) -> Optional[dict]:
    """Content behind one evidence ref, or None if it points at nothing."""
    kind, _, arg = str(ref).partition(":")
    if kind == "capture" and arg.isdigit():
        c = bundle.capture(int(arg))
        return None if c is None else {"ref": ref, "kind": "capture", "content": c.frame.text}
    if kind == "finding":
        for f in bundle.investigator_findings:
            if f["id"] == arg:
                return {"ref": ref, "kind": "finding",
                        "content": canonical_json({"summary": f["summary"], "observations": f["observations"]})}
        return None
    if kind == "diff" and arg:
        # An empty restriction is evidence of absence.
        return {"ref": ref, "kind": "diff", "content": bundle.env_diff.restrict(arg).to_dict()}
    if kind == "commentary" and arg.isdigit():
        i = int(arg)
        if i < len(bundle.engineer_commentary):
            return {"ref": ref, "kind": "commentary", "content": bundle.engineer_commentary[i]}
    return None


def decide(spec: TestSpecification, bundle: EvidenceBundle, cot: MetaCot) -> Verdict:
    answered = {a["question_id"] for a in cot.answers if a["answered"]}
    bugs, discarded = [], []
    for i, b in enumerate(cot.decision.get("bugs", []) or []):
        why = None
        try:
            crit = BugCriterion(b.get("criterion"))
        except ValueError:
            crit, why = None, f"unknown criterion {b.get('criterion')!r}"
        qids = [q for q in b.get("question_ids", []) if q in answered]
        resolved = [r for r in (resolve_ref(x, bundle) for x in b.get("evidence_refs", [])) if r is not None]
        if why is None and not qids:
            why = "references no answered question"
        if why is None and not resolved:
            why = "no resolvable evidence"
        if why:
            discarded.append({**b, "reason": why})
            continue
        bugs.append(BugReport(
            f"B{len(bugs) + 1}", crit, str(b.get("description", "")), tuple(r["ref"] for r in resolved),
            tuple(qids), tuple(resolved), not bundle.prompt_delivered,
        ))
    given = cot.decision.get("oracle_results", {}) or {}
    results = {}
    for o in spec.oracles:
        v = str(given.get(o.id, "unknown")).lower()
        results[o.id] = v if v in ("pass", "fail", "unknown") else "unknown"
    return Verdict(
        Outcome.BUGS if bugs else Outcome.PASS, tuple(bugs), results, None, not bundle.prompt_delivered,
        cot.questions, cot.answers, tuple(discarded),
    )


def phase4_validate(run: _Run, spec: TestSpecification, bundle: EvidenceBundle,
                    baseline: EnvSnapshot) -> tuple[Verdict, EvidenceBundle]:
    if investigator_needed(spec, bundle):
        bundle = replace(bundle, investigator_findings=investigate(run, spec, bundle, baseline))
    cot = meta_cot(run, judge_context(spec, bundle))
    return decide(spec, bundle, cot), bundle


# -- plan document (for step discretization) ----------------------------

def build_plan(record: RunRecord) -> list[dict]:
    """Mechanical plan elements from the tool calls each phase made."""
    plan: list[dict] = []
    phase_of = {Phase.SETUP: "Setup", Phase.EXECUTION: "Execution", Phase.VALIDATION: "Validation"}
    for p in record.phases:
        if p.phase not in phase_of:
            continue
        for ev in p.transcript:
            if ev.get("kind") != "tool_result" or ev.get("status") != ToolStatus.OK.value:
                continue
            el = _plan_element(ev["tool"], ev.get("args", {}))
            if el is None:
                continue
            for e in el:
                e.update({"id": f"{p.phase.value.lower()}-{len(plan) + 1}", "phase": phase_of[p.phase],
                          "source": ev["call_id"]})
                plan.append(e)
    return plan


def _plan_element(tool: str, args: dict) -> Optional[list[dict]]:
    if tool == "exec_command":
        return [{"kind": "TerminalCommand", "command": args["cmdline"]}]
    if tool == "send_email":
        return [{"kind": "EmailCreation", "attachments": len(args.get("attachments") or ()),
                 "text": f"email to {args['to']}: {args['subject']}"}]
    if tool == "probe":
        out = []
        if args.get("domain") == "Email":
            out.append({"kind": "Navigation", "transitions": 1, "text": "open mailbox view"})
        out.append({"kind": "DataExtraction", "items": [f"{args['domain']}:{args['selector']}"]})
        return out
    if tool == "launch_agent":
        return [{"kind": "TerminalCommand", "command": args["command"]}]
    if tool in ("navigate", "click_text", "type_verified", "press_key"):
        return [{"kind": "Navigation", "transitions": 1, "text": f"{tool} {json.dumps(args, sort_keys=True)}"}]
    return None


# -- top level -----------------------------------------------------------

def run_test(feature: FeatureDescription, agent: AgentSpecification, env: Environment, config: RunConfig,
             *, clock: Callable[[], float] = time.monotonic) -> RunRecord:
    t0 = clock()
    rows, cols = config.screen_size
    screen = VirtualTerminal(rows, cols)
    session = ScreenSession(screen)
    ledger = TokenLedger()
    gateway = Gateway(config.provider, ledger, sleep=config.sleep,
                      known_images=lambda: {c.seq for c in session.recorder.captures})
    spec = new_specification(feature, agent, timestamp=env.now().isoformat(timespec="minutes"))
    record = RunRecord(feature, agent, spec, ledger=ledger)
    run = _Run(record, env, gateway, config)
    for f in config.faults:
        env.inject_fault(f)
        record.events.append({"event": "fault_injected", **f.to_dict()})

    state: dict[str, Any] = {}

    def body(phase: Phase, spec: TestSpecification) -> TestSpecification:
        if phase is Phase.GENERATION:
            return phase1_generate(run, feature, agent, spec)
        if phase is Phase.SETUP:
            spec, _ = phase2_setup(run, spec)
            return spec
        if phase is Phase.EXECUTION:
            state["baseline"] = env.snapshot()
            adapter = config.adapter_factory(session, env, agent)
            ctx = UiContext(screen, session, adapter, config.watch_timeout, config.quiescence)
            record.evidence = phase3_execute(run, spec, agent, ctx, state["baseline"])
            return spec
        verdict, bundle = phase4_validate(run, spec, record.evidence, state["baseline"])
        record.evidence, record.verdict = bundle, verdict
        return spec

    current = spec
    for phase in (Phase.GENERATION, Phase.SETUP, Phase.EXECUTION, Phase.VALIDATION):
        run.transcript = []
        run.latest = current
        spec_in = current.active.snapshot_id
        status, reason = PhaseStatus.COMPLETED, None
        with gateway.in_phase(phase):
            try:
                current = body(phase, current)
            except PhaseAbort as e:
                status, reason = e.status, e.reason
            except Exception as e:  # framework fault: keep the record up to here
                log.exception("phase %s failed", phase.value)
                status, reason = PhaseStatus.ABORTED_FATAL, f"{type(e).__name__}: {e}"
        # Revisions made before an abort are kept in the record.
        current = record.spec = current if status is PhaseStatus.COMPLETED else run.latest
        record.phases.append(PhaseRecord(phase, status, spec_in, current.active.snapshot_id, run.transcript, reason))
        if status is PhaseStatus.ABORTED_ENV_FAILURE:
            record.verdict = Verdict.environment_failure(reason)
            break
        if status is PhaseStatus.ABORTED_FATAL:
            break
    session.close()
    record.plan = build_plan(record)
    record.runtime_seconds = clock() - t0
    return record
