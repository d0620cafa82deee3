"""Golden end-to-end scenarios: feature, mock subject agent and scripted specialists.

Transcripts are built here in code so they can be regenerated; the committed
fixture files carry the same entries with prompt digests pinned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional

from .llm import Provider, ScriptedProvider
from .pipeline import RunConfig, RunRecord, run_test
from .roles import SpecialistRole as R
from .spec_model import AgentSpecification, Domain, FeatureDescription, Platform
from .subjects import AgentKind, BehaviorScript, BugBehavior, MockAgentAdapter
from .testenv import HOME, Environment, FaultKind, FaultSpec


def entry(role: R, turn: int, content: Any = "", calls: Iterable[dict] = (), *, usage: tuple[int, int] = (0, 0)) -> dict:
    text = content if isinstance(content, str) else json.dumps(content, sort_keys=True)
    return {"role": role.value, "turn": turn, "content": text, "tool_calls": list(calls),
            "usage": {"input_tokens": usage[0], "output_tokens": usage[1]}}


def call(tool: str, call_id: str, **args: Any) -> dict:
    return {"tool": tool, "args": args, "call_id": call_id}


@dataclass(frozen=True)
class Scenario:
    name: str
    feature: FeatureDescription
    agent: AgentSpecification
    agent_kind: AgentKind
    script: BehaviorScript
    transcript: tuple[dict, ...]
    cwd: str = HOME
    faults: tuple[FaultSpec, ...] = ()
    notes: str = ""

    def adapter_factory(self):
        def make(session, env, agent):
            return MockAgentAdapter(self.agent_kind, self.script, session, env,
                                    entry_points=agent.launch, cwd=self.cwd)
        return make

    def config(self, provider: Optional[Provider] = None, **kw: Any) -> RunConfig:
        kw.setdefault("faults", self.faults)
        return RunConfig(provider or ScriptedProvider(self.transcript), self.adapter_factory(), **kw)

    def run(self, *, seed: int = 0, root: Optional[Path] = None, provider: Optional[Provider] = None,
            **kw: Any) -> RunRecord:
        env = Environment(root, seed=seed)
        return run_test(self.feature, self.agent, env, self.config(provider, **kw))

    def with_faults(self, *faults: FaultSpec, name: Optional[str] = None) -> Scenario:
        name = name or self.name
        return replace(self, faults=tuple(faults), name=name, feature=replace(self.feature, id=name))

    def with_bugs(self, *bugs: BugBehavior) -> Scenario:
        return replace(self, script=self.script.with_bugs(bugs))


# -- shared scripted specialists ----------------------------------------

def _engineer_cli(prompt: str, launch: str, placeholder: str = "[type here]") -> list[dict]:
    E = R.ENGINEER
    return [
        entry(E, 0, "Starting the subject agent from its launch instruction.",
              [call("launch_agent", "eng-1", command=launch)], usage=(1500, 40)),
        entry(E, 1, "Typing the test prompt.", [call("type_verified", "eng-2", text=prompt)], usage=(1700, 50)),
        entry(E, 2, "Typing was rejected because nothing had focus; selecting the input line.",
              [call("click_text", "eng-3", target=placeholder)], usage=(1900, 40)),
        entry(E, 3, "", [call("type_verified", "eng-4", text=prompt)], usage=(2100, 50)),
        entry(E, 4, "Prompt verified on screen; submitting it.", [call("press_key", "eng-5", key="Enter")], usage=(2300, 30)),
        entry(E, 5, "", [call("wait_for_completion", "eng-6")], usage=(2500, 30)),
        entry(E, 6, "The agent stopped working; its final screen is recorded. Handing over to validation.",
              (), usage=(3200, 60)),
    ]


def _engineer_web(prompt: str, url: str, placeholder: str) -> list[dict]:
    E = R.ENGINEER
    return [
        entry(E, 0, "Opening the mail application.", [call("navigate", "eng-1", target=url)], usage=(1500, 40)),
        entry(E, 1, "Selecting the assistant input.", [call("click_text", "eng-2", target=placeholder)], usage=(1800, 40)),
        entry(E, 2, "", [call("type_verified", "eng-3", text=prompt)], usage=(2000, 50)),
        entry(E, 3, "Prompt verified on screen; submitting it.", [call("press_key", "eng-4", key="Enter")], usage=(2200, 30)),
        entry(E, 4, "", [call("wait_for_completion", "eng-5")], usage=(2400, 30)),
        entry(E, 5, "The assistant finished; its final screen is recorded. Handing over to validation.",
              (), usage=(3100, 60)),
    ]


def _judge_questions(qs: list[tuple[str, str, str]]) -> dict:
    return {"questions": [{"id": i, "criterion": c, "text": t} for i, c, t in qs]}


# -- backup (command-line agent) -----------------------------------------

BACKUP_PROMPT = "Back up the projects folder in the current directory to projects_backup"


def backup_scenario(*, buggy: bool = True, folder: str = "projects", suffix: str = "") -> Scenario:
    name = f"backup{suffix}" if buggy else f"backup-nominal{suffix}"
    prompt = BACKUP_PROMPT.replace("projects", folder)
    src, dst = f"work/{folder}", f"work/{folder}_backup"
    feature = FeatureDescription(
        f"{name}", Domain.FILESYSTEM,
        "The interpreter can carry out file operations such as backing up a folder when asked in plain language.",
    )
    agent = AgentSpecification(
        "mock-interpreter", Platform.CLI, ("interpreter",),
        "Terminal assistant. Start it with `interpreter` from ~/work, click the input line, type, press Enter.",
    )
    script = BehaviorScript.from_dict({
        "triggers": [{"pattern": r"back ?up", "actions": [
            {"say": "I'll copy the folder for you."},
            {"run": f"cp -r ./{folder} ./{folder}_backup"},
            {"say": "Backup complete."},
        ]}],
        "bugs": ["WrongPathBackup"] if buggy else [],
    })
    A, N, IM, I, J = R.TEST_ARCHITECT, R.TEST_ANALYST, R.INFRASTRUCTURE_MANAGER, R.INVESTIGATOR, R.JUDGE
    draft = {
        "description": "initial draft",
        "subject_prompt": prompt,
        "add_setup": [{"id": "S1", "intent": f"create ~/{src} holding a small code project", "target": "FileSystem",
                       "entities": [f"fs:{src}"], "tool": "exec_command"}],
        "prompt_requires": [f"fs:{src}"],
        "prompt_introduces": [f"fs:{dst}"],
        "add_oracles": [
            {"id": "O1", "description": f"~/{dst} exists and holds a copy of every file in ~/{src}",
             "check_kind": "EnvProbe", "probe": {"domain": "FileSystem", "selector": dst},
             "entities": [f"fs:{dst}"], "generalizability_note": "any copy method is acceptable"},
            {"id": "O2", "description": f"~/{src} is left unchanged", "check_kind": "EnvProbe",
             "probe": {"domain": "FileSystem", "selector": src}, "entities": [f"fs:{src}"]},
            {"id": "O3", "description": "the agent's final message matches what happened", "check_kind": "ScreenEvidence"},
        ],
    }
    setup_cmd = (f"mkdir -p {src}/app && echo 'print(\"hello\")' > {src}/app/main.py "
                 f"&& echo '# notes' > {src}/README.md")
    if buggy:
        answers = {
            "answers": [
                {"question_id": "q1", "answer": f"No. Nothing under {dst} was added; the probe returned no entities.",
                 "evidence_refs": [f"diff:fs:{dst}", "finding:F1"]},
                {"question_id": "q2", "answer": "The agent printed a not-found error and said it could not finish.",
                 "evidence_refs": ["commentary:4"]},
            ],
            "oracle_results": {"O1": "fail", "O2": "pass", "O3": "pass"},
            "bugs": [{"criterion": "CompletionImpact",
                      "description": f"No backup was created: the copy read from ~/{folder} instead of ./{folder} "
                                     "and failed with a not-found error.",
                      "evidence_refs": [f"diff:fs:{dst}", "finding:F1"], "question_ids": ["q1"]}],
        }
        f1 = f"Probe of {dst} is empty: no backup exists."
    else:
        answers = {
            "answers": [
                {"question_id": "q1", "answer": f"Yes. {dst} was added with the same files as {src}.",
                 "evidence_refs": [f"diff:fs:{dst}", "finding:F1"]},
                {"question_id": "q2", "answer": "The agent reported success and the backup exists.",
                 "evidence_refs": ["finding:F1"]},
            ],
            "oracle_results": {"O1": "pass", "O2": "pass", "O3": "pass"},
            "bugs": [],
        }
        f1 = f"{dst} exists with the same files as {src}."
    transcript = [
        entry(A, 0, draft, (), usage=(2400, 620)),
        entry(N, 0, {}, (), usage=(2900, 20)),
        entry(IM, 0, "Creating the project folder.", [call("exec_command", "im-1", cmdline=setup_cmd)], usage=(1800, 160)),
        entry(IM, 1, {"realized": {"S1": ["im-1"]}}, (), usage=(2000, 40)),
        *_engineer_cli(prompt, "interpreter"),
        entry(I, 0, "", [call("probe", "inv-1", domain="FileSystem", selector=dst),
                         call("probe", "inv-2", domain="FileSystem", selector=src),
                         call("env_diff", "inv-3")], usage=(2600, 90)),
        entry(I, 1, {"findings": [
            {"id": "F1", "summary": f1, "probe_call_ids": ["inv-1", "inv-3"]},
            {"id": "F2", "summary": f"{src} still holds its files.", "probe_call_ids": ["inv-2"]},
        ]}, usage=(3300, 120)),
        entry(J, 0, _judge_questions([
            ("q1", "CompletionImpact", f"Does ~/{dst} exist after the run, with the project files?"),
            ("q2", "Misreporting", "Does the agent's final message agree with the environment?"),
        ]), usage=(5200, 210)),
        entry(J, 1, answers, usage=(6900, 520)),
    ]
    return Scenario(name, feature, agent, AgentKind.MOCK_CLI, script, tuple(transcript), cwd=f"{HOME}/work")


# -- email reply (web agent) --------------------------------------------

REPLY_PROMPT = "Reply to David's email about the Q3 projections and tell him I will send the numbers by Friday"
MAIL_URL = "https://mail.example.test"


def reply_scenario(*, buggy: bool = True, suffix: str = "") -> Scenario:
    name = f"reply-david{suffix}" if buggy else f"reply-david-nominal{suffix}"
    feature = FeatureDescription(
        name, Domain.EMAIL, "The mail assistant drafts and sends replies to messages in the user's inbox.",
    )
    agent = AgentSpecification(
        "mock-mail-assistant", Platform.WEB_APP, (MAIL_URL,),
        "Web mail client with an assistant panel at the bottom of the page.",
    )
    script = BehaviorScript.from_dict({
        "triggers": [{"pattern": r"\breply\b", "actions": [
            {"read_email": "Q3 projections"},
            {"reply_email": {"thread": "Q3 projections",
                             "body": "Hi David,\n\nThanks for your note. I will send the Q3 numbers by Friday.\n\n"
                                     "Best regards,\n{signature}"}},
            {"say": "I replied to David."},
        ]}],
        "bugs": ["PlaceholderSignoff"] if buggy else [],
    })
    A, N, IM, I, J = R.TEST_ARCHITECT, R.TEST_ANALYST, R.INFRASTRUCTURE_MANAGER, R.INVESTIGATOR, R.JUDGE
    thread = "mail:thread:Q3 projections"
    data = "fs:Documents/q3_projections.csv"
    draft = {
        "description": "initial draft",
        "subject_prompt": REPLY_PROMPT,
        "add_setup": [{"id": "S1", "intent": "David Peterson emails John asking for the Q3 projections",
                       "target": "Email", "entities": [thread], "tool": "send_email"}],
        "prompt_requires": [thread],
        "prompt_introduces": ["mail:reply:Q3 projections"],
        "add_oracles": [
            {"id": "O1", "description": "a reply to David exists in the Q3 projections thread",
             "check_kind": "EnvProbe", "probe": {"domain": "Email", "selector": "thread:Q3 projections"},
             "entities": ["mail:reply:Q3 projections"], "generalizability_note": "wording may vary"},
            {"id": "O2", "description": "the reply is signed with the user's real name and has no placeholders",
             "check_kind": "EnvProbe", "probe": {"domain": "Email", "selector": "sent"},
             "entities": ["mail:reply:Q3 projections"]},
        ],
    }
    reflection = {
        "description": "the reply promises numbers, so the projection data must exist in the environment",
        "add_setup": [{"id": "S2", "intent": "create Q3 projection data in ~/Documents", "target": "FileSystem",
                       "entities": [data], "tool": "exec_command"}],
        "prompt_requires": [thread, data],
    }
    david = ("Hi John,\n\nCould you send me the Q3 projections before the planning meeting?\n\n"
             "Thanks,\nDavid")
    if buggy:
        answers = {
            "answers": [
                {"question_id": "q1", "answer": "It ends with the placeholder '[your name]' instead of John.",
                 "evidence_refs": ["finding:F1"]},
                {"question_id": "q2", "answer": "Yes, one reply addressed to David is in the sent folder.",
                 "evidence_refs": ["finding:F1"]},
            ],
            "oracle_results": {"O1": "pass", "O2": "fail"},
            "bugs": [{"criterion": "QualityImpact",
                      "description": "The reply was sent signed with the placeholder '[your name]'.",
                      "evidence_refs": ["finding:F1"], "question_ids": ["q1"]}],
        }
        f1 = "The sent folder holds one reply to David in the Q3 thread; it is signed '[your name]'."
    else:
        answers = {
            "answers": [
                {"question_id": "q1", "answer": "It is signed John.", "evidence_refs": ["finding:F1"]},
                {"question_id": "q2", "answer": "Yes, one reply to David was sent.", "evidence_refs": ["finding:F1"]},
            ],
            "oracle_results": {"O1": "pass", "O2": "pass"},
            "bugs": [],
        }
        f1 = "The sent folder holds one reply to David in the Q3 thread, signed John."
    transcript = [
        entry(A, 0, draft, (), usage=(2600, 700)),
        entry(N, 0, reflection, (), usage=(3100, 260)),
        entry(IM, 0, "Sending David's request and creating the data file.", [
            call("send_email", "im-1", to="john@example.com", subject="Q3 projections", body=david,
                 sender_name="David Peterson"),
            call("exec_command", "im-2", cmdline="mkdir -p Documents && echo 'quarter,revenue' > "
                 "Documents/q3_projections.csv && echo 'Q3,1200000' >> Documents/q3_projections.csv"),
        ], usage=(2100, 300)),
        entry(IM, 1, {"realized": {"S1": ["im-1"], "S2": ["im-2"]}}, (), usage=(2500, 40)),
        *_engineer_web(REPLY_PROMPT, MAIL_URL, "[ask the assistant]"),
        entry(I, 0, "", [call("probe", "inv-1", domain="Email", selector="thread:Q3 projections"),
                         call("probe", "inv-2", domain="Email", selector="sent")], usage=(2700, 80)),
        entry(I, 1, {"findings": [{"id": "F1", "summary": f1, "probe_call_ids": ["inv-1", "inv-2"]}]}, (), usage=(3600, 110)),
        entry(J, 0, _judge_questions([
            ("q1", "QualityImpact", "How is the reply to David signed off?"),
            ("q2", "CompletionImpact", "Was a reply to David actually sent?"),
        ]), usage=(5400, 200)),
        entry(J, 1, answers, usage=(7100, 480)),
    ]
    return Scenario(name, feature, agent, AgentKind.MOCK_WEB_FORM, script, tuple(transcript))


# -- question answering with no setup, and an agent that never finishes --

def hr_scenario(*, idle: bool = False, suffix: str = "") -> Scenario:
    name = ("hr-idle" if idle else "hr-vacation") + suffix
    prompt = "How many vacation days do new employees get per year?"
    feature = FeatureDescription(name, Domain.HR_QA, "The HR assistant answers policy questions from the handbook.")
    agent = AgentSpecification("mock-hr-assistant", Platform.CLI, ("hr-assistant",), "Terminal HR helper.")
    actions = [{"sleep": 10000}, {"say": "New employees get 20 vacation days per year."}] if idle else \
        [{"say": "New employees get 20 vacation days per year."}]
    script = BehaviorScript.from_dict({"triggers": [{"pattern": "vacation", "actions": actions}], "bugs": []})
    A, N, J = R.TEST_ARCHITECT, R.TEST_ANALYST, R.JUDGE
    draft = {
        "description": "initial draft",
        "subject_prompt": prompt,
        "add_oracles": [{"id": "O1", "description": "the answer states 20 vacation days",
                         "check_kind": "ScreenEvidence"}],
    }
    if idle:
        answers = {"answers": [{"question_id": "q1", "answer": "No answer appeared before the watch timed out.",
                                "evidence_refs": ["commentary:5"]}],
                   "oracle_results": {}, "bugs": []}
    else:
        answers = {"answers": [{"question_id": "q1", "answer": "Yes, the screen shows 20 vacation days.",
                                "evidence_refs": ["commentary:4"]}],
                   "oracle_results": {"O1": "pass"}, "bugs": []}
    transcript = [
        entry(A, 0, draft, (), usage=(1900, 300)),
        entry(N, 0, {}, (), usage=(2100, 20)),
        *_engineer_cli(prompt, "hr-assistant"),
        entry(J, 0, _judge_questions([("q1", "DeviationFromExpected", "Did the agent answer with the policy value?")]),
              usage=(3000, 120)),
        entry(J, 1, answers, usage=(3600, 200)),
    ]
    return Scenario(name, feature, agent, AgentKind.MOCK_CLI, script, tuple(transcript))


def golden_scenarios() -> dict[str, Scenario]:
    items = [backup_scenario(), backup_scenario(buggy=False), reply_scenario(), reply_scenario(buggy=False),
             hr_scenario(), hr_scenario(idle=True)]
    return {s.name: s for s in items}


# Fault kinds that can hit each scenario's setup calls.
FAULT_TARGETS = {
    "backup": (FaultKind.STORAGE_FULL, FaultKind.API_TIMEOUT),
    "reply-david": (FaultKind.NETWORK_DOWN, FaultKind.API_TIMEOUT, FaultKind.STORAGE_FULL),
}


def fault_scenarios(counts: Iterable[Optional[int]] = (None, 3, 4, 10)) -> list[Scenario]:
    """Setup faults that outlast three attempts: 5 scenario/fault pairs x 4 counts = 20 runs."""
    base = {"backup": backup_scenario(), "reply-david": reply_scenario()}
    out = []
    for key, kinds in FAULT_TARGETS.items():
        for kind in kinds:
            for n in counts:
                tag = "inf" if n is None else str(n)
                out.append(base[key].with_faults(FaultSpec(kind, n), name=f"{key}-{kind.value}-{tag}"))
    return out


def fixture_suite(size: int = 99) -> list[Scenario]:
    """A deterministic mix of backup, reply and HR scenarios with distinct feature ids."""
    out: list[Scenario] = []
    i = 0
    while len(out) < size:
        tag = f"-{i:02d}"
        kind = i % 3
        if kind == 0:
            out.append(backup_scenario(buggy=(i // 3) % 2 == 0, folder=f"proj{i:02d}", suffix=tag))
        elif kind == 1:
            out.append(reply_scenario(buggy=(i // 3) % 3 == 0, suffix=tag))
        else:
            out.append(hr_scenario(idle=(i // 3) % 4 == 0, suffix=tag))
        i += 1
    return out
