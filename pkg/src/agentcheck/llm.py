"""Completion gateway: one interface over scripted and HTTP model providers.

The gateway attributes every response to a ``(role, phase)`` pair in a
:class:`TokenLedger`, retries provider timeouts with exponential backoff, and
rejects tool calls naming anything outside the request's tool list.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional, Protocol, Union

from .roles import Phase, SpecialistRole
from .tools import ToolCall, ToolSignature

PROVIDER_ATTEMPTS = 3
PROVIDER_BACKOFF = 1.0


class ProviderTimeout(Exception):
    """The provider did not answer in time; retryable."""


class ToolHallucinationError(Exception):
    def __init__(self, name: str, response: Optional[CompletionResponse] = None) -> None:
        super().__init__(f"model called unregistered tool {name!r}")
        self.name = name
        self.response = response  # the full response, already recorded in the ledger


class TranscriptExhausted(LookupError):
    pass


class DigestMismatch(AssertionError):
    pass


class InvalidPricing(ValueError):
    pass


class UnresolvedImageRef(ValueError):
    pass


class Author(str, Enum):
    USER = "User"
    ASSISTANT = "Assistant"
    TOOL_RESULT = "ToolResult"


@dataclass(frozen=True)
class ImageRef:
    """Points at a recorded screen capture by sequence number."""

    capture_seq: int


@dataclass(frozen=True)
class Message:
    author: Author
    content: Union[str, ImageRef]

    def to_dict(self) -> dict:
        c = {"image": self.content.capture_seq} if isinstance(self.content, ImageRef) else self.content
        return {"author": Author(self.author).value, "content": c}


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be >= 0")

    def __add__(self, other: TokenUsage) -> TokenUsage:
        return TokenUsage(self.input_tokens + other.input_tokens, self.output_tokens + other.output_tokens)

    def to_dict(self) -> dict:
        return {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> TokenUsage:
        return cls(int(d.get("input_tokens", 0)), int(d.get("output_tokens", 0)))


@dataclass(frozen=True)
class CompletionRequest:
    role: SpecialistRole
    system_prompt: str
    messages: tuple[Message, ...]
    available_tools: tuple[ToolSignature, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", SpecialistRole(self.role))
        if not self.messages:
            raise ValueError("a completion request needs at least one message")

    @property
    def tool_names(self) -> frozenset[str]:
        return frozenset(t.name for t in self.available_tools)

    def to_dict(self) -> dict:
        return {
            "role": self.role.value,
            "system_prompt": self.system_prompt,
            "messages": [m.to_dict() for m in self.messages],
            "tools": sorted(self.tool_names),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class CompletionResponse:
    content: str
    tool_calls: tuple[ToolCall, ...] = ()
    usage: TokenUsage = TokenUsage()

    def to_dict(self) -> dict:
        return {
            "content": self.content,
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "usage": self.usage.to_dict(),
        }


class Provider(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


# -- scripted replay -----------------------------------------------------

@dataclass(frozen=True)
class TranscriptEntry:
    role: SpecialistRole
    turn: int
    content: str
    tool_calls: tuple[dict, ...] = ()
    usage: TokenUsage = TokenUsage()
    expected_digest: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "role": SpecialistRole(self.role).value,
            "turn": self.turn,
            "content": self.content,
            "tool_calls": list(self.tool_calls),
            "usage": self.usage.to_dict(),
        }
        if self.expected_digest:
            d["expected_digest"] = self.expected_digest
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TranscriptEntry:
        return cls(
            SpecialistRole(d["role"]), int(d["turn"]), d.get("content", ""),
            tuple(d.get("tool_calls") or ()), TokenUsage.from_dict(d.get("usage") or {}),
            d.get("expected_digest"),
        )


class ScriptedProvider:
    """Replays canned responses keyed by ``(role, per-role turn)``.

    When an entry carries ``expected_digest`` and the incoming request hashes
    differently, :class:`DigestMismatch` is raised instead of answering.
    """

    def __init__(self, entries: Iterable[TranscriptEntry | dict]) -> None:
        self._entries: dict[tuple[SpecialistRole, int], TranscriptEntry] = {}
        for e in entries:
            e = e if isinstance(e, TranscriptEntry) else TranscriptEntry.from_dict(e)
            key = (e.role, e.turn)
            if key in self._entries:
                raise ValueError(f"duplicate transcript entry {e.role.value} turn {e.turn}")
            self._entries[key] = e
        self._turns: dict[SpecialistRole, int] = defaultdict(int)
        self.served: list[tuple[SpecialistRole, int, str]] = []

    @classmethod
    def from_file(cls, path: Path | str) -> ScriptedProvider:
        return cls(json.loads(Path(path).read_text()))

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        turn = self._turns[request.role]
        entry = self._entries.get((request.role, turn))
        if entry is None:
            raise TranscriptExhausted(f"no transcript entry for {request.role.value} turn {turn}")
        got = request.digest()
        if entry.expected_digest and entry.expected_digest != got:
            raise DigestMismatch(
                f"{request.role.value} turn {turn}: prompt digest {got[:12]} != expected {entry.expected_digest[:12]}"
            )
        self._turns[request.role] = turn + 1
        self.served.append((request.role, turn, got))
        calls = tuple(
            ToolCall(c["tool"], dict(c.get("args") or {}), c.get("call_id") or f"{request.role.value}-{turn}-{i}")
            for i, c in enumerate(entry.tool_calls)
        )
        return CompletionResponse(entry.content, calls, entry.usage)

    def pinned_entries(self) -> list[dict]:
        """All entries, with ``expected_digest`` filled in for every turn served so far."""
        seen = {(r, t): d for r, t, d in self.served}
        out = []
        for key in sorted(self._entries, key=lambda k: (k[0].value, k[1])):
            e = self._entries[key]
            d = e.to_dict()
            if key in seen:
                d["expected_digest"] = seen[key]
            out.append(d)
        return out


# -- live HTTP adapter ---------------------------------------------------

_PARAM_JSON_TYPES = {"string": "string", "integer": "integer", "boolean": "boolean", "list": "array", "object": "object"}


class HttpProvider:
    """Generic chat-completions adapter (``POST {base_url}/chat/completions``)."""

    def __init__(self, base_url: str, model: str, api_key: Optional[str] = None, *,
                 timeout: float = 120.0, client: Any = None) -> None:
        import httpx

        self._httpx = httpx
        self.base_url = base_url.rstrip("/")
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.Client(timeout=timeout, headers=headers)

    def _body(self, request: CompletionRequest) -> dict:
        msgs: list[dict] = [{"role": "system", "content": request.system_prompt}]
        wire_role = {Author.USER: "user", Author.ASSISTANT: "assistant", Author.TOOL_RESULT: "user"}
        for m in request.messages:
            if isinstance(m.content, ImageRef):
                text = f"[screen capture #{m.content.capture_seq}]"
            else:
                text = m.content
            msgs.append({"role": wire_role[Author(m.author)], "content": text})
        body: dict = {"model": self.model, "messages": msgs}
        if request.available_tools:
            body["tools"] = [
                {"type": "function", "function": {
                    "name": s.name, "description": s.description,
                    "parameters": {
                        "type": "object",
                        "properties": {p.name: {"type": _PARAM_JSON_TYPES.get(p.type, "string")} for p in s.params},
                        "required": [p.name for p in s.params if p.required],
                    },
                }}
                for s in request.available_tools
            ]
        return body

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        try:
            r = self.client.post(f"{self.base_url}/chat/completions", json=self._body(request))
        except self._httpx.TimeoutException as e:
            raise ProviderTimeout(str(e)) from e
        if r.status_code in (408, 504):
            raise ProviderTimeout(f"HTTP {r.status_code}")
        r.raise_for_status()
        data = r.json()
        msg = data["choices"][0]["message"]
        calls = []
        for i, c in enumerate(msg.get("tool_calls") or ()):
            fn = c.get("function", {})
            args = fn.get("arguments") or "{}"
            calls.append(ToolCall(fn["name"], json.loads(args) if isinstance(args, str) else dict(args),
                                  c.get("id") or f"call-{i}"))
        u = data.get("usage") or {}
        usage = TokenUsage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
        return CompletionResponse(msg.get("content") or "", tuple(calls), usage)


# -- accounting ----------------------------------------------------------

class TokenLedger:
    """Token usage per (role, phase) plus wall-clock seconds per phase."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.entries: list[tuple[SpecialistRole, Phase, TokenUsage]] = []
        self.wall_clock: dict[Phase, float] = {}

    def record(self, role: SpecialistRole, phase: Phase, usage: TokenUsage) -> None:
        with self._lock:
            self.entries.append((SpecialistRole(role), Phase(phase), usage))

    def add_wall_clock(self, phase: Phase, seconds: float) -> None:
        with self._lock:
            p = Phase(phase)
            self.wall_clock[p] = self.wall_clock.get(p, 0.0) + seconds

    def _group(self, idx: int) -> dict:
        out: dict = {}
        for e in self.entries:
            out[e[idx]] = out.get(e[idx], TokenUsage()) + e[2]
        return out

    def by_role(self) -> dict[SpecialistRole, TokenUsage]:
        return self._group(0)

    def by_phase(self) -> dict[Phase, TokenUsage]:
        return self._group(1)

    def total(self) -> TokenUsage:
        t = TokenUsage()
        for e in self.entries:
            t = t + e[2]
        return t

    def to_dict(self, *, include_wall_clock: bool = True) -> dict:
        d = {
            "entries": [{"role": r.value, "phase": p.value, **u.to_dict()} for r, p, u in self.entries],
            "by_role": {r.value: u.to_dict() for r, u in sorted(self.by_role().items(), key=lambda x: x[0].value)},
            "by_phase": {p.value: u.to_dict() for p, u in sorted(self.by_phase().items(), key=lambda x: x[0].value)},
            "total": self.total().to_dict(),
        }
        if include_wall_clock:
            d["wall_clock"] = {p.value: s for p, s in self.wall_clock.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TokenLedger:
        led = cls()
        for e in d.get("entries", ()):
            led.record(SpecialistRole(e["role"]), Phase(e["phase"]), TokenUsage.from_dict(e))
        for p, s in (d.get("wall_clock") or {}).items():
            led.add_wall_clock(Phase(p), s)
        return led


@dataclass(frozen=True)
class PricingTable:
    input_per_million: float
    output_per_million: float

    def __post_init__(self) -> None:
        if self.input_per_million < 0 or self.output_per_million < 0:
            raise InvalidPricing("prices must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> PricingTable:
        return cls(float(d["input_per_million"]), float(d["output_per_million"]))

    @classmethod
    def from_file(cls, path: Path | str) -> PricingTable:
        return cls.from_dict(json.loads(Path(path).read_text()))


def usage_cost(usage: TokenUsage, pricing: PricingTable) -> float:
    return usage.input_tokens / 1e6 * pricing.input_per_million + usage.output_tokens / 1e6 * pricing.output_per_million


def cost_estimate(ledger: TokenLedger, pricing: PricingTable) -> float:
    """Currency cost of everything in ``ledger``, summed over roles."""
    if pricing.input_per_million < 0 or pricing.output_per_million < 0:
        raise InvalidPricing("prices must be non-negative")
    return sum(usage_cost(u, pricing) for u in ledger.by_role().values())


# -- gateway -------------------------------------------------------------

@dataclass
class GatewayLogEntry:
    role: SpecialistRole
    phase: Phase
    turn: int
    request: dict
    response: dict

    def to_dict(self) -> dict:
        return {"role": self.role.value, "phase": self.phase.value, "turn": self.turn,
                "request": self.request, "response": self.response}


class Gateway:
    def __init__(
        self,
        provider: Provider,
        ledger: Optional[TokenLedger] = None,
        *,
        attempts: int = PROVIDER_ATTEMPTS,
        backoff: float = PROVIDER_BACKOFF,
        sleep: Callable[[float], None] = time.sleep,
        known_images: Optional[Callable[[], set[int]]] = None,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.provider = provider
        self.ledger = ledger or TokenLedger()
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self.known_images = known_images
        self.clock = clock
        self.phase: Optional[Phase] = None
        self.log: list[GatewayLogEntry] = []
        self._turns: dict[SpecialistRole, int] = defaultdict(int)

    @contextmanager
    def in_phase(self, phase: Phase) -> Iterator[None]:
        prev, self.phase = self.phase, Phase(phase)
        t0 = self.clock()
        try:
            yield
        finally:
            self.ledger.add_wall_clock(phase, self.clock() - t0)
            self.phase = prev

    def _check_images(self, request: CompletionRequest) -> None:
        refs = [m.content.capture_seq for m in request.messages if isinstance(m.content, ImageRef)]
        if not refs:
            return
        known = self.known_images() if self.known_images else set()
        missing = [r for r in refs if r not in known]
        if missing:
            raise UnresolvedImageRef(f"image refs {missing} do not name captured frames")

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        if self.phase is None:
            raise RuntimeError("gateway used outside a phase")
        self._check_images(request)
        for attempt in range(1, self.attempts + 1):
            try:
                response = self.provider.complete(request)
                break
            except ProviderTimeout:
                if attempt == self.attempts:
                    raise
                self.sleep(self.backoff * 2 ** (attempt - 1))
        self.ledger.record(request.role, self.phase, response.usage)
        turn = self._turns[request.role]
        self._turns[request.role] = turn + 1
        self.log.append(GatewayLogEntry(request.role, self.phase, turn, request.to_dict(), response.to_dict()))
        allowed = request.tool_names
        for call in response.tool_calls:
            if call.tool not in allowed:
                raise ToolHallucinationError(call.tool, response)
        return response
