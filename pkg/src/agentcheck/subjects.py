"""Scriptable stand-in subject agents with switchable bugs.

A mock agent owns the virtual screen once launched.  It reads prompts only
from its on-screen input line and acts on the environment only through the
jailed shell and the ordinary mail client, the way a real assistant would.
"""

from __future__ import annotations

import json
import re
import textwrap
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from .roles import BugCriterion
from .screen import InputField, ScreenSession, VirtualTerminal
from .testenv import HOME, Environment, RetryableEnvError

BUSY = "[working]"
READY = "[ready]"
PLACEHOLDER_NAME = "[your name]"
NOT_UNDERSTOOD = "I don't understand that request."
ACTION_DELAY = 2.0
MUTATING_ACTIONS = frozenset({"run", "reply_email"})


class SpawnError(RuntimeError):
    pass


class LaunchError(ValueError):
    pass


class AgentKind(str, Enum):
    MOCK_CLI = "MockCli"
    MOCK_WEB_FORM = "MockWebForm"


class BugBehavior(str, Enum):
    WRONG_PATH_BACKUP = "WrongPathBackup"
    PLACEHOLDER_SIGNOFF = "PlaceholderSignoff"
    MISREPORT_SUCCESS = "MisreportSuccess"
    SILENT_PARTIAL = "SilentPartial"


# Which Judge criteria each injected behaviour should trip.
BUG_CRITERIA: dict[BugBehavior, tuple[BugCriterion, ...]] = {
    BugBehavior.WRONG_PATH_BACKUP: (BugCriterion.COMPLETION_IMPACT,),
    BugBehavior.PLACEHOLDER_SIGNOFF: (BugCriterion.QUALITY_IMPACT,),
    BugBehavior.MISREPORT_SUCCESS: (BugCriterion.MISREPORTING, BugCriterion.COMPLETION_IMPACT),
    BugBehavior.SILENT_PARTIAL: (BugCriterion.COMPLETION_IMPACT,),
}


@dataclass(frozen=True)
class ScriptTrigger:
    pattern: str
    actions: tuple[dict, ...]

    def matches(self, prompt: str) -> bool:
        return re.search(self.pattern, prompt, re.IGNORECASE) is not None


@dataclass(frozen=True)
class BehaviorScript:
    """Prompt triggers plus active bugs.  The first matching trigger wins."""

    triggers: tuple[ScriptTrigger, ...] = ()
    bugs: frozenset[BugBehavior] = frozenset()

    def match(self, prompt: str) -> Optional[ScriptTrigger]:
        for t in self.triggers:
            if t.matches(prompt):
                return t
        return None

    def with_bugs(self, bugs: Iterable[BugBehavior | str]) -> BehaviorScript:
        return BehaviorScript(self.triggers, frozenset(BugBehavior(b) for b in bugs))

    def to_dict(self) -> dict:
        return {
            "triggers": [{"pattern": t.pattern, "actions": list(t.actions)} for t in self.triggers],
            "bugs": sorted(b.value for b in self.bugs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> BehaviorScript:
        triggers = tuple(ScriptTrigger(t["pattern"], tuple(t.get("actions") or ())) for t in d.get("triggers", ()))
        for t in triggers:
            re.compile(t.pattern)
            for a in t.actions:
                if len(a) != 1 or next(iter(a)) not in {"say", "run", "reply_email", "read_email", "sleep"}:
                    raise ValueError(f"bad action {a!r}")
        return cls(triggers, frozenset(BugBehavior(b) for b in d.get("bugs", ())))

    @classmethod
    def from_file(cls, path: Path | str) -> BehaviorScript:
        return cls.from_dict(json.loads(Path(path).read_text()))


def apply_bugs(actions: Iterable[dict], bugs: frozenset[BugBehavior]) -> list[dict]:
    """The action list the agent will really perform given its active bugs."""
    out = [dict(a) for a in actions]
    if BugBehavior.WRONG_PATH_BACKUP in bugs:
        out = [{"run": a["run"].replace("./", "~/")} if "run" in a else a for a in out]
    if BugBehavior.MISREPORT_SUCCESS in bugs:
        out = [a for a in out if not (set(a) & MUTATING_ACTIONS)]
    elif BugBehavior.SILENT_PARTIAL in bugs:
        n = sum(1 for a in out if set(a) & MUTATING_ACTIONS)
        keep, kept = n // 2, 0
        trimmed = []
        for a in out:
            if set(a) & MUTATING_ACTIONS:
                if kept >= keep:
                    continue
                kept += 1
            trimmed.append(a)
        out = trimmed
    return out


class MockAgent:
    """Common machinery: log region, status line, input field, action queue."""

    kind: AgentKind
    title: str = ""
    prompt_label: str = "> "
    input_placeholder: str = "[type here]"
    log_top: int = 2
    log_bottom: int = 35
    status_row: int = 37
    input_row: int = 38

    def __init__(self, script: BehaviorScript, session: ScreenSession, env: Environment, cwd: str) -> None:
        self.script = script
        self.session = session
        self.screen: VirtualTerminal = session.screen
        self.env = env
        self.cwd = cwd
        self.prompts: list[str] = []
        self.performed: list[dict] = []
        self.lines: list[str] = []
        self.busy = False
        self.alive = True

    # -- rendering -------------------------------------------------------

    def render(self) -> None:
        s = self.screen
        s.clear()
        s.write(0, 0, self.title)
        s.write(1, 0, "-" * s.cols)
        self.render_body()
        self._render_log()
        self._render_status()
        s.write(self.input_row, 0, self.prompt_label)
        col = len(self.prompt_label)
        s.add_field(InputField("prompt", self.input_row, col, s.cols - col, 1000,
                               self.input_placeholder, on_submit=self._on_submit))

    def render_body(self) -> None:
        pass

    def _render_log(self) -> None:
        height = self.log_bottom - self.log_top + 1
        for r in range(self.log_top, self.log_bottom + 1):
            self.screen.clear_row(r)
        for i, line in enumerate(self.lines[-height:]):
            self.screen.write(self.log_top + i, 0, line)

    def _render_status(self) -> None:
        self.screen.clear_row(self.status_row)
        self.screen.write(self.status_row, 0, BUSY if self.busy else READY)

    def say(self, text: str) -> None:
        for para in str(text).split("\n"):
            self.lines.extend(textwrap.wrap(para, self.screen.cols - 2) or [""])
        self._render_log()

    # -- prompt handling -------------------------------------------------

    def _on_submit(self, value: str) -> None:
        if not value.strip() or self.busy:
            return
        self.prompts.append(value)
        self.say(f"> {value}")
        trigger = self.script.match(value)
        if trigger is None:
            self.say(NOT_UNDERSTOOD)
            return
        self.busy = True
        self._render_status()
        self._queue(apply_bugs(trigger.actions, self.script.bugs))

    def _queue(self, actions: list[dict]) -> None:
        if not actions:
            self.session.schedule(ACTION_DELAY, self._finish)
            return
        head, rest = actions[0], actions[1:]
        delay = float(head["sleep"]) if "sleep" in head else ACTION_DELAY

        def step() -> None:
            if not self.alive:
                return
            ok = self._perform(head)
            if ok:
                self._queue(rest)
            else:
                self.say("I could not complete the task.")
                self._finish()

        self.session.schedule(delay, step)

    def _finish(self) -> None:
        self.busy = False
        self._render_status()

    def _perform(self, action: dict) -> bool:
        (name, arg), = action.items()
        self.performed.append(dict(action))
        if name == "say":
            self.say(arg)
            return True
        if name == "sleep":
            return True
        if name == "run":
            return self._run(arg)
        if name == "reply_email":
            return self._reply(arg)
        if name == "read_email":
            return self._read(arg)
        raise ValueError(f"unknown action {name!r}")

    def _run(self, cmdline: str) -> bool:
        self.say(f"$ {cmdline}")
        try:
            r = self.env.exec_command(cmdline, self.cwd)
        except RetryableEnvError as e:
            self.say(f"Error: {e}")
            return False
        if r.stdout.strip():
            self.say(r.stdout.rstrip("\n"))
        if r.exit_code != 0:
            self.say(r.stderr.rstrip("\n"))
            if "No such file" in r.stderr:
                self.say("Error: path not found")
            return False
        return True

    def _latest(self, thread: str):
        msgs = [m for m in self.env.mail.thread(thread) if m in self.env.mail.inbox]
        return msgs[-1] if msgs else None

    def _read(self, thread: str) -> bool:
        m = self._latest(thread)
        if m is None:
            self.say(f"Error: no email matching {thread!r} was found")
            return False
        self.say(f"From: {m.sender}\nSubject: {m.subject}\n{m.body}")
        return True

    def _reply(self, arg: dict) -> bool:
        m = self._latest(arg["thread"])
        if m is None:
            self.say(f"Error: no email matching {arg['thread']!r} was found")
            return False
        sig = PLACEHOLDER_NAME if BugBehavior.PLACEHOLDER_SIGNOFF in self.script.bugs else self.env.mail.owner_name
        body = arg["body"].replace("{signature}", sig)
        sent = self.env.reply_email(m.message_id, body)
        self.say(f"Reply sent to {sent.to}:\n{body}")
        self.render_body()
        return True

    def close(self) -> None:
        self.alive = False


class MockCli(MockAgent):
    kind = AgentKind.MOCK_CLI
    title = "mock-interpreter  (type a request and press Enter)"


class MockWebForm(MockAgent):
    kind = AgentKind.MOCK_WEB_FORM
    title = "Mail"
    prompt_label = "Ask: "
    input_placeholder = "[ask the assistant]"
    log_top = 16

    def render_body(self) -> None:
        s = self.screen
        s.clear_row(0)
        s.write(0, 0, f"Mail  |  {self.env.mail.owner}")
        for r in range(2, 15):
            s.clear_row(r)
        s.write(2, 0, "Inbox")
        for i, m in enumerate(self.env.mail.inbox[-10:]):
            s.write(3 + i, 2, f"{m.sender[:38]:<40}{m.subject[:50]:<52}{m.timestamp}")
        s.write(14, 0, "Assistant")


_KINDS = {AgentKind.MOCK_CLI: MockCli, AgentKind.MOCK_WEB_FORM: MockWebForm}


def spawn(kind: AgentKind | str, script: BehaviorScript, session: ScreenSession, env: Environment,
          *, cwd: str = HOME) -> MockAgent:
    if session.closed or session.screen.closed:
        raise SpawnError("screen session is not available")
    agent = _KINDS[AgentKind(kind)](script, session, env, cwd)
    agent.render()
    session.screen.commit()
    return agent


def drive(handle: MockAgent, prompt: str) -> None:
    """Type ``prompt`` where the user would and press Enter.

    Nothing is consumed unless the input line already has focus.
    """
    if not handle.alive:
        raise SpawnError("agent is not running")
    s = handle.screen
    s.send_keys(prompt)
    s.commit()
    s.press_key("Enter")
    s.commit()
    handle.session.run_until_idle()


class MockAgentAdapter:
    """Connects the Engineer's launch/navigate tools to a mock agent."""

    completion_marker: Optional[str] = None
    busy_indicator: Optional[str] = BUSY

    def __init__(self, kind: AgentKind | str, script: BehaviorScript, session: ScreenSession, env: Environment,
                 *, entry_points: Iterable[str] = (), cwd: str = HOME) -> None:
        self.kind = AgentKind(kind)
        self.script = script
        self.session = session
        self.env = env
        self.entry_points = tuple(entry_points)
        self.cwd = cwd
        self.handle: Optional[MockAgent] = None
        screen = session.screen
        if self.kind is AgentKind.MOCK_CLI:
            screen.write(0, 0, f"user@sandbox:{cwd.replace(HOME, '~')}$")
        else:
            screen.write(0, 0, "about:blank")
        screen.commit()

    def _start(self, via: str, value: str) -> str:
        if self.entry_points and value.strip() not in self.entry_points:
            raise LaunchError(f"{via} {value!r} does not start the agent; known: {list(self.entry_points)}")
        if self.handle is not None:
            return "agent already running"
        self.handle = spawn(self.kind, self.script, self.session, self.env, cwd=self.cwd)
        return f"{self.kind.value} started"

    def launch(self, command: str) -> str:
        if self.kind is not AgentKind.MOCK_CLI:
            raise LaunchError("this agent is a web application; use navigate")
        return self._start("command", command)

    def navigate(self, target: str) -> str:
        if self.kind is not AgentKind.MOCK_WEB_FORM:
            raise LaunchError("this agent is a command-line program; use launch_agent")
        return self._start("target", target)
