"""Tool registry and invocation protocol for specialists.

Every specialist sees exactly one :class:`Registry`.  A call outside it comes
back as ``FatalError(UnknownTool)``; nothing is executed.  Handlers raise
:class:`ToolRetryable` / :class:`ToolFatal` (or environment exceptions, which
are mapped here) and otherwise return ``(observation, payload)``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Optional, Protocol, TextIO

from .roles import SpecialistRole
from .screen import ScreenSession, VirtualTerminal
from .spec_model import Platform, ProbeQuery, Target
from .testenv import Environment, EnvSnapshot, JailViolation, PrivilegeDenied, RetryableEnvError, diff
from .ui import ClickStatus, PositionHint, click_text, press_key, type_verified, watch_changes

log = logging.getLogger(__name__)

OBSERVATION_LIMIT = 4000
DEFAULT_MAX_RETRIES = 3


class ToolStatus(str, Enum):
    OK = "Ok"
    RETRYABLE = "RetryableError"
    FATAL = "FatalError"


class ToolRetryable(Exception):
    def __init__(self, feedback: str, payload: Optional[dict] = None) -> None:
        super().__init__(feedback)
        self.payload = payload or {}


class ToolFatal(Exception):
    def __init__(self, kind: str, message: str, payload: Optional[dict] = None) -> None:
        super().__init__(message)
        self.kind = kind
        self.payload = payload or {}


@dataclass(frozen=True)
class Param:
    name: str
    type: str = "string"  # string | integer | boolean | list | object
    required: bool = True
    description: str = ""


_PY_TYPES = {"string": str, "integer": int, "boolean": bool, "list": (list, tuple), "object": dict}


@dataclass(frozen=True)
class ToolSignature:
    name: str
    params: tuple[Param, ...] = ()
    description: str = ""

    def validate(self, args: dict) -> Optional[str]:
        known = {p.name: p for p in self.params}
        unknown = sorted(set(args) - set(known))
        if unknown:
            return f"unknown argument(s) {unknown}"
        for p in self.params:
            if p.name not in args or args[p.name] is None:
                if p.required:
                    return f"missing required argument {p.name!r}"
                continue
            want = _PY_TYPES.get(p.type)
            v = args[p.name]
            if want is not None and (not isinstance(v, want) or (p.type == "integer" and isinstance(v, bool))):
                return f"argument {p.name!r} should be {p.type}"
        return None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "params": [{"name": p.name, "type": p.type, "required": p.required} for p in self.params],
        }


@dataclass(frozen=True)
class ToolCall:
    tool: str
    args: dict = field(default_factory=dict)
    call_id: str = ""

    def to_dict(self) -> dict:
        return {"tool": self.tool, "args": self.args, "call_id": self.call_id}

    @classmethod
    def from_dict(cls, d: dict) -> ToolCall:
        return cls(d["tool"], dict(d.get("args") or {}), d.get("call_id", ""))


@dataclass(frozen=True)
class ToolResult:
    call_id: str
    status: ToolStatus
    observation: str
    payload: dict = field(default_factory=dict)
    error_kind: Optional[str] = None
    attempts: int = 1

    @property
    def ok(self) -> bool:
        return self.status is ToolStatus.OK

    def to_dict(self) -> dict:
        return {
            "call_id": self.call_id,
            "status": self.status.value,
            "observation": self.observation,
            "payload": self.payload,
            "error_kind": self.error_kind,
            "attempts": self.attempts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ToolResult:
        return cls(
            d["call_id"], ToolStatus(d["status"]), d.get("observation", ""), d.get("payload") or {},
            d.get("error_kind"), d.get("attempts", 1),
        )


def cap_observation(text: str, limit: int = OBSERVATION_LIMIT) -> str:
    if len(text) <= limit:
        return text
    marker = f"\n...[truncated {len(text) - limit} chars]"
    return text[:limit] + marker


Handler = Callable[..., tuple[str, dict]]


@dataclass(frozen=True)
class Tool:
    signature: ToolSignature
    handler: Handler


class Registry:
    """Immutable mapping of tool names to handlers for one role."""

    def __init__(self, role: SpecialistRole, tools: Iterable[Tool] = ()) -> None:
        self.role = SpecialistRole(role)
        self._tools: dict[str, Tool] = {}
        for t in tools:
            if t.signature.name in self._tools:
                raise ValueError(f"duplicate tool {t.signature.name!r}")
            self._tools[t.signature.name] = t

    @property
    def names(self) -> frozenset[str]:
        return frozenset(self._tools)

    @property
    def signatures(self) -> list[ToolSignature]:
        return [t.signature for t in self._tools.values()]

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def get(self, name: str) -> Optional[Tool]:
        return self._tools.get(name)


def dispatch(registry: Registry, call: ToolCall) -> ToolResult:
    """Run one call.  Exactly one result comes back, never an exception."""
    tool = registry.get(call.tool)
    if tool is None:
        return ToolResult(
            call.call_id, ToolStatus.FATAL,
            f"UnknownTool: {call.tool!r} is not available to {registry.role.value}",
            error_kind="UnknownTool",
        )
    problem = tool.signature.validate(call.args)
    if problem:
        return ToolResult(call.call_id, ToolStatus.FATAL, f"BadArgs: {problem}", error_kind="BadArgs")
    try:
        observation, payload = tool.handler(**call.args)
    except ToolRetryable as e:
        return ToolResult(call.call_id, ToolStatus.RETRYABLE, cap_observation(str(e)), e.payload, "Retryable")
    except RetryableEnvError as e:
        return ToolResult(
            call.call_id, ToolStatus.RETRYABLE, cap_observation(f"{e} (fault: {e.fault.value})"),
            {"fault": e.fault.value}, e.fault.value,
        )
    except ToolFatal as e:
        return ToolResult(call.call_id, ToolStatus.FATAL, cap_observation(f"{e.kind}: {e}"), e.payload, e.kind)
    except JailViolation as e:
        return ToolResult(call.call_id, ToolStatus.FATAL, f"JailViolation: {e}", error_kind="JailViolation")
    except PrivilegeDenied as e:
        return ToolResult(call.call_id, ToolStatus.FATAL, f"PrivilegeDenied: {e}", error_kind="PrivilegeDenied")
    except (ValueError, TypeError, KeyError) as e:
        return ToolResult(call.call_id, ToolStatus.FATAL, f"BadArgs: {e}", error_kind="BadArgs")
    return ToolResult(call.call_id, ToolStatus.OK, cap_observation(observation), payload)


def retry_loop(
    registry: Registry,
    call: ToolCall,
    max_retries: int = DEFAULT_MAX_RETRIES,
    *,
    attempt_log: Optional[list] = None,
    sleep: Callable[[float], None] = lambda s: None,
    backoff: float = 0.0,
) -> ToolResult:
    """Dispatch, re-dispatching on RetryableError for at most ``max_retries`` attempts.

    ``max_retries`` counts attempts in total.  Running out promotes the last
    RetryableError to ``FatalError(RetriesExhausted)``.
    """
    if max_retries < 1:
        raise ValueError("max_retries must be >= 1")
    result = None
    for attempt in range(1, max_retries + 1):
        result = dispatch(registry, call)
        if attempt_log is not None:
            attempt_log.append({
                "call_id": call.call_id, "tool": call.tool, "attempt": attempt, "status": result.status.value,
                "error_kind": result.error_kind,
            })
        if result.status is not ToolStatus.RETRYABLE:
            return ToolResult(result.call_id, result.status, result.observation, result.payload,
                              result.error_kind, attempt)
        if attempt < max_retries and backoff:
            sleep(backoff * 2 ** (attempt - 1))
    payload = dict(result.payload)
    payload.setdefault("fault", result.error_kind)
    return ToolResult(
        call.call_id, ToolStatus.FATAL,
        f"RetriesExhausted after {max_retries} attempts: {result.observation}",
        payload, "RetriesExhausted", max_retries,
    )


# -- catalog -------------------------------------------------------------

S = ToolSignature
CATALOG: dict[str, ToolSignature] = {
    s.name: s
    for s in [
        S("send_email", (Param("to"), Param("subject"), Param("body"),
                         Param("attachments", "list", False), Param("sender_name", "string", False)),
          "Deliver one fresh email from the fixed test domain into the target inbox."),
        S("exec_command", (Param("cmdline"), Param("cwd", "string", False)),
          "Run a shell command as the unprivileged user inside /home/user."),
        S("probe", (Param("domain"), Param("selector")),
          "Read-only lookup of files (glob under /home/user), mail (inbox, sent, thread:<subject>, "
          "search:<text>) or records (key glob)."),
        S("env_diff", (Param("selector", "string", False),),
          "Entities added, removed or modified since the subject agent was started."),
        S("launch_agent", (Param("command"),), "Start the subject agent from its launch instruction."),
        S("navigate", (Param("target"),), "Open a URL or application view in the browser."),
        S("click_text", (Param("target"), Param("relation", "string", False), Param("anchor", "string", False),
                         Param("ordinal", "integer", False)),
          "Click on-screen text; pass relation/anchor or relation=Nth with ordinal when the text repeats."),
        S("type_verified", (Param("text"),), "Type into the focused field and verify the text appeared."),
        S("press_key", (Param("key"),), "Press Enter, Backspace or Escape."),
        S("read_screen", (), "Return the current screen as text."),
        S("wait_for_completion", (Param("timeout", "integer", False),),
          "Watch the subject agent until it finishes, goes quiet or times out; captures every change."),
    ]
}

ENV_MUTATION_TOOLS = frozenset({"send_email", "exec_command"})
ENV_READ_TOOLS = frozenset({"probe", "env_diff"})
UI_TOOLS = frozenset({"click_text", "type_verified", "press_key", "read_screen", "wait_for_completion"})
LAUNCH_TOOLS = frozenset({"launch_agent", "navigate"})


def role_tool_names(role: SpecialistRole, platform: Platform = Platform.CLI) -> frozenset[str]:
    role = SpecialistRole(role)
    if role is SpecialistRole.ENGINEER:
        launch = "launch_agent" if Platform(platform) in (Platform.CLI, Platform.DESKTOP) else "navigate"
        return UI_TOOLS | {launch}
    if role is SpecialistRole.INFRASTRUCTURE_MANAGER:
        return ENV_MUTATION_TOOLS | {"probe"}
    if role is SpecialistRole.INVESTIGATOR:
        return ENV_READ_TOOLS
    return frozenset()


# -- bindings ------------------------------------------------------------

class AgentAdapter(Protocol):
    """What the Engineer's launch tools talk to."""

    completion_marker: Optional[str]
    busy_indicator: Optional[str]

    def launch(self, command: str) -> str: ...
    def navigate(self, target: str) -> str: ...


@dataclass
class UiContext:
    screen: VirtualTerminal
    session: ScreenSession
    adapter: AgentAdapter
    timeout: float = 300.0
    quiescence: float = 10.0
    typed: list[dict] = field(default_factory=list)  # verified typing events, in order
    watches: list[dict] = field(default_factory=list)


def _env_handlers(env: Environment, baseline: Optional[Callable[[], EnvSnapshot]]) -> dict[str, Handler]:
    def send_email(to, subject, body, attachments=(), sender_name=None):
        r = env.send_email(to, subject, body, attachments or (), sender_name=sender_name)
        return f"sent; message_id={r.message_id}", {"message_id": r.message_id}

    def exec_command(cmdline, cwd="/home/user"):
        r = env.exec_command(cmdline, cwd)
        if r.fault:
            raise ToolRetryable(f"command failed due to {r.fault}: {r.stderr.strip()}",
                                {"fault": r.fault, **r.to_dict()})
        text = f"exit={r.exit_code}\nstdout:\n{r.stdout}\nstderr:\n{r.stderr}"
        return text, r.to_dict()

    def probe(domain, selector):
        st = env.probe(ProbeQuery(Target(domain), selector))
        if st.empty:
            return f"EmptyStatus: nothing matches {domain}:{selector}", st.to_dict()
        return json.dumps(list(st.entities), indent=1, sort_keys=True), st.to_dict()

    def env_diff(selector=None):
        if baseline is None:
            raise ToolFatal("NoBaseline", "no baseline snapshot recorded")
        d = diff(baseline(), env.snapshot())
        if selector:
            d = d.restrict(selector)
        return json.dumps(d.to_dict(), sort_keys=True), d.to_dict()

    return {"send_email": send_email, "exec_command": exec_command, "probe": probe, "env_diff": env_diff}


def _ui_handlers(ctx: UiContext) -> dict[str, Handler]:
    def launch_agent(command):
        return ctx.adapter.launch(command), {}

    def navigate(target):
        return ctx.adapter.navigate(target), {}

    def click(target, relation=None, anchor=None, ordinal=None):
        hint = PositionHint(relation, anchor, ordinal) if relation else None
        r = click_text(ctx.screen, target, hint)
        if r.status is ClickStatus.AMBIGUOUS:
            raise ToolRetryable(f"Ambiguous: {r.count} matches for {target!r}; add a position hint",
                                {"count": r.count})
        if r.status is ClickStatus.NOT_FOUND:
            raise ToolRetryable(f"NotFound: {target!r} is not on screen", {})
        return f"clicked {target!r} at row {r.span.row} col {r.span.col_start}", {"span_id": r.span_id}

    def type_text(text):
        r = type_verified(ctx.screen, text)
        if not r.ok:
            raise ToolRetryable(f"{r.status.value}: {r.feedback}", {"status": r.status.value})
        ctx.typed.append({"text": text, "seq": ctx.session.recorder.last_seq, "location": r.location})
        return f"verified: text visible at row {r.location[0]} col {r.location[1]}", {"location": list(r.location)}

    def key(key):
        press_key(ctx.screen, key)
        return f"pressed {key}", {"seq": ctx.session.recorder.last_seq}

    def read_screen():
        return ctx.screen.frame().text, {}

    def wait(timeout=None):
        w = watch_changes(
            ctx.screen, ctx.session, timeout=float(timeout or ctx.timeout), quiescence=ctx.quiescence,
            marker=ctx.adapter.completion_marker, busy=ctx.adapter.busy_indicator,
        )
        info = {"stopped_by": w.stopped_by, "truncated": w.truncated, "captures": [c.seq for c in w.captures],
                "elapsed": w.elapsed}
        ctx.watches.append(info)
        return f"{w.stopped_by} after {w.elapsed:.0f}s, {len(w.captures)} screen changes\n{ctx.screen.frame().text}", info

    return {
        "launch_agent": launch_agent, "navigate": navigate, "click_text": click, "type_verified": type_text,
        "press_key": key, "read_screen": read_screen, "wait_for_completion": wait,
    }


def build_registry(
    role: SpecialistRole,
    *,
    env: Optional[Environment] = None,
    ui: Optional[UiContext] = None,
    platform: Platform = Platform.CLI,
    baseline: Optional[Callable[[], EnvSnapshot]] = None,
) -> Registry:
    names = role_tool_names(role, platform)
    handlers: dict[str, Handler] = {}
    if names & (ENV_MUTATION_TOOLS | ENV_READ_TOOLS):
        if env is None:
            raise ValueError(f"{SpecialistRole(role).value} tools need an environment")
        handlers.update(_env_handlers(env, baseline))
    if names & (UI_TOOLS | LAUNCH_TOOLS):
        if ui is None:
            raise ValueError("Engineer tools need a UI context")
        handlers.update(_ui_handlers(ui))
    return Registry(role, [Tool(CATALOG[n], handlers[n]) for n in sorted(names)])


# -- newline-delimited JSON wire ----------------------------------------

def serve_ndjson(registry: Registry, stream_in: TextIO, stream_out: TextIO) -> int:
    """Answer one ToolResult line per ToolCall line until EOF.  Returns calls served."""
    served = 0
    for line in stream_in:
        if not line.strip():
            continue
        try:
            call = ToolCall.from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError) as e:
            result = ToolResult("", ToolStatus.FATAL, f"BadRequest: {e}", error_kind="BadRequest")
        else:
            result = dispatch(registry, call)
        stream_out.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
        stream_out.flush()
        served += 1
    return served
