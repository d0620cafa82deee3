"""Synthetic run summaries and annotations that reproduce the reference counts."""

from __future__ import annotations

import json
from pathlib import Path

from agentcheck.llm import TokenLedger, TokenUsage
from agentcheck.roles import Phase, SpecialistRole
from agentcheck.metrics import RunSummary

from reference_counts import SPECOPS

PHASES = ("Setup", "Execution", "Validation")


def _spread(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def build(agents: dict = SPECOPS, *, annotate=lambda agent, i: True) -> tuple[list[RunSummary], list[dict]]:
    """One RunSummary per test plus JSONL-style annotation dicts.

    Step counts are spread over each agent's tests as Navigation elements;
    the first ``steps - val_ok`` validation steps fail; missing steps and bug
    labels are attached to the agent's first test.
    """
    runs, ann = [], []
    for agent, row in agents.items():
        n = row["tests"]
        per_phase = [_spread(total, n) for total in row["steps"]]
        val_failures = row["steps"][2] - row["val_ok"]
        for i in range(n):
            tid = f"{agent}-{i:02d}"
            plan = []
            for p, counts in zip(PHASES, per_phase):
                if counts[i]:
                    plan.append({"id": f"{p.lower()}-1", "phase": p, "kind": "Navigation", "transitions": counts[i]})
            ledger = TokenLedger()
            ledger.record(SpecialistRole.ENGINEER, Phase.EXECUTION, TokenUsage(1000, 100))
            runs.append(RunSummary(tid, agent, "Pass", 0, True, plan, ledger, 1.0))
            if not annotate(agent, i):
                continue
            ann.append({"type": "test", "test": tid, "prompt_successful": True})
            for p, counts in zip(PHASES, per_phase):
                for k in range(1, counts[i] + 1):
                    ok = True
                    if p == "Validation" and val_failures > 0:
                        ok, val_failures = False, val_failures - 1
                    ann.append({"type": "step", "test": tid, "step_id": f"{p.lower()}-1.{k}",
                                "planned_correct": True, "executed_ok": ok})
            if i == 0:
                for p, m in zip(PHASES, row["missing"]):
                    for k in range(m):
                        ann.append({"type": "step", "test": tid, "step_id": f"missing-{p}-{k}", "missing": True,
                                    "phase": p})
                tp, fp, fn = row["bugs"]
                for label, count in (("TP", tp), ("FP", fp), ("FN", fn)):
                    for k in range(count):
                        ann.append({"type": "bug", "test": tid, "report_id": f"{label}-{k}", "label": label})
    return runs, ann


def write_run_dirs(runs: list[RunSummary], root: Path) -> list[Path]:
    """Minimal run directories carrying just what the report reads."""
    out = []
    for r in runs:
        d = root / r.test_id
        d.mkdir(parents=True)
        (d / "run.json").write_text(json.dumps({
            "feature": {"id": r.test_id, "domain": "Other", "text": "x"},
            "agent": {"name": r.agent, "platform": "Cli", "launch": ["x"]},
            "outcome": r.outcome, "bug_count": r.bug_count, "prompt_delivered": r.prompt_delivered,
        }))
        (d / "plan.json").write_text(json.dumps(r.plan))
        (d / "ledger.json").write_text(json.dumps(r.ledger.to_dict(include_wall_clock=False)))
        (d / "timing.json").write_text(json.dumps({"runtime_seconds": r.runtime_seconds}))
        out.append(d)
    return out
