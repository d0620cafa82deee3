"""Interaction primitives with built-in verification.

``type_verified`` compares frames before and after typing, ``click_text``
refuses to guess between identical labels, and ``watch_changes`` turns a
session into an ordered list of distinct screen states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .screen import Frame, ScreenCapture, ScreenSession, TextSpan, VirtualTerminal

FOCUS_FEEDBACK = "select input field first: no input field has focus"


class TypeStatus(str, Enum):
    OK = "Ok"
    NEEDS_FOCUS = "NeedsFocus"
    VERIFICATION_FAILED = "VerificationFailed"


@dataclass(frozen=True)
class TypeResult:
    status: TypeStatus
    feedback: str = ""
    location: Optional[tuple[int, int]] = None  # (row, col) of the verified text

    @property
    def ok(self) -> bool:
        return self.status is TypeStatus.OK


def inserted_at(pre: Frame, post: Frame, text: str) -> Optional[tuple[int, int]]:
    """First (row, col) where ``text`` is visible in ``post`` but was not in ``pre``."""
    if not text:
        return None
    for r, (a, b) in enumerate(zip(pre.rows, post.rows)):
        if a == b:
            continue
        start = 0
        while True:
            c = b.find(text, start)
            if c < 0:
                break
            if a[c:c + len(text)] != text:
                return r, c
            start = c + 1
    return None


def type_verified(screen: VirtualTerminal, text: str) -> TypeResult:
    """Type ``text`` and confirm it appeared on screen as new content."""
    if not text:
        raise ValueError("text must be non-empty")
    pre = screen.frame()
    screen.send_keys(text)
    screen.commit()
    post = screen.frame()
    if post == pre:
        if screen.focus is None:
            return TypeResult(TypeStatus.NEEDS_FOCUS, FOCUS_FEEDBACK)
        return TypeResult(TypeStatus.VERIFICATION_FAILED, "typed text did not appear on screen")
    loc = inserted_at(pre, post, text)
    if loc is None:
        return TypeResult(
            TypeStatus.VERIFICATION_FAILED,
            "screen changed but the typed text is not fully visible (field may truncate input)",
        )
    return TypeResult(TypeStatus.OK, "", loc)


def press_key(screen: VirtualTerminal, key: str) -> Frame:
    screen.press_key(key)
    screen.commit()
    return screen.frame()


class Relation(str, Enum):
    ABOVE = "Above"
    BELOW = "Below"
    LEFT_OF = "LeftOf"
    RIGHT_OF = "RightOf"
    NTH = "Nth"


@dataclass(frozen=True)
class PositionHint:
    relation: Relation
    anchor: Optional[str] = None
    ordinal: Optional[int] = None  # 1-based, row-major

    def __post_init__(self) -> None:
        object.__setattr__(self, "relation", Relation(self.relation))
        if self.relation is Relation.NTH:
            if self.ordinal is None or self.ordinal < 1:
                raise ValueError("Nth hint needs an ordinal >= 1")
        elif not self.anchor:
            raise ValueError(f"{self.relation.value} hint needs an anchor text")

    @classmethod
    def nth(cls, k: int) -> PositionHint:
        return cls(Relation.NTH, ordinal=k)


class ClickStatus(str, Enum):
    OK = "Ok"
    AMBIGUOUS = "Ambiguous"
    NOT_FOUND = "NotFound"


@dataclass(frozen=True)
class ClickResult:
    status: ClickStatus
    span: Optional[TextSpan] = None
    count: int = 0

    @property
    def span_id(self) -> Optional[str]:
        return self.span.span_id if self.span else None


def _directional(matches: list[TextSpan], anchor: TextSpan, rel: Relation) -> list[TextSpan]:
    if rel is Relation.ABOVE:
        cands = [m for m in matches if m.row < anchor.row]
        key = lambda m: (anchor.row - m.row, abs(m.col_start - anchor.col_start))
    elif rel is Relation.BELOW:
        cands = [m for m in matches if m.row > anchor.row]
        key = lambda m: (m.row - anchor.row, abs(m.col_start - anchor.col_start))
    elif rel is Relation.LEFT_OF:
        cands = [m for m in matches if m.row == anchor.row and m.col_end <= anchor.col_start]
        key = lambda m: (anchor.col_start - m.col_end,)
    else:
        cands = [m for m in matches if m.row == anchor.row and m.col_start >= anchor.col_end]
        key = lambda m: (m.col_start - anchor.col_end,)
    if not cands:
        return []
    best = min(key(m) for m in cands)
    return [m for m in cands if key(m) == best]


def resolve_target(frame: Frame, target: str, hint: Optional[PositionHint] = None) -> ClickResult:
    """Pure resolution of ``target`` on ``frame``; no input is delivered."""
    if not target:
        raise ValueError("target must be non-empty")
    matches = frame.find(target)
    if not matches:
        return ClickResult(ClickStatus.NOT_FOUND)
    if hint is None:
        if len(matches) > 1:
            return ClickResult(ClickStatus.AMBIGUOUS, count=len(matches))
        return ClickResult(ClickStatus.OK, matches[0], 1)
    if hint.relation is Relation.NTH:
        if hint.ordinal > len(matches):
            return ClickResult(ClickStatus.NOT_FOUND, count=len(matches))
        return ClickResult(ClickStatus.OK, matches[hint.ordinal - 1], len(matches))
    anchors = frame.find(hint.anchor)
    if not anchors:
        return ClickResult(ClickStatus.NOT_FOUND)
    if len(anchors) > 1:
        return ClickResult(ClickStatus.AMBIGUOUS, count=len(anchors))
    a = anchors[0]
    # A match overlapping the anchor text is never its own neighbour.
    others = [m for m in matches if m.row != a.row or m.col_end <= a.col_start or m.col_start >= a.col_end]
    chosen = _directional(others, a, hint.relation)
    if not chosen:
        return ClickResult(ClickStatus.NOT_FOUND)
    if len(chosen) > 1:
        return ClickResult(ClickStatus.AMBIGUOUS, count=len(chosen))
    return ClickResult(ClickStatus.OK, chosen[0], len(matches))


def click_text(screen: VirtualTerminal, target: str, hint: Optional[PositionHint] = None) -> ClickResult:
    """Click the unique on-screen occurrence of ``target`` (after applying ``hint``)."""
    result = resolve_target(screen.frame(), target, hint)
    if result.status is ClickStatus.OK:
        screen.click(result.span.row, result.span.col_start)
        screen.commit()
    return result


@dataclass
class WatchResult:
    captures: list[ScreenCapture] = field(default_factory=list)
    stopped_by: str = "quiescent"  # quiescent | marker | timeout | closed
    truncated: bool = False
    elapsed: float = 0.0


def watch_changes(
    screen: VirtualTerminal,
    session: ScreenSession,
    *,
    timeout: float = 300.0,
    quiescence: float = 10.0,
    marker: Optional[str] = None,
    busy: Optional[str] = None,
    step: float = 1.0,
) -> WatchResult:
    """Let the session run, collecting one Change capture per distinct frame.

    Stops on the completion ``marker``, after ``quiescence`` seconds without a
    change (only while no ``busy`` indicator is visible), on ``timeout``, or
    when the session closes (result flagged truncated).
    """
    if session.closed:
        raise ValueError("session is closed")
    start_seq = session.recorder.last_seq
    start = session.now
    last_change = session.now
    seen = start_seq
    result = WatchResult()
    while True:
        if session.closed:
            result.stopped_by, result.truncated = "closed", True
            break
        if session.now - start >= timeout:
            result.stopped_by = "timeout"
            break
        session.advance(step)
        if session.closed:
            result.stopped_by, result.truncated = "closed", True
            break
        if session.recorder.last_seq != seen:
            seen = session.recorder.last_seq
            last_change = session.now
        frame = screen.frame()
        if marker and marker in frame:
            result.stopped_by = "marker"
            break
        if session.now - last_change >= quiescence and not (busy and busy in frame):
            result.stopped_by = "quiescent"
            break
    result.captures = [c for c in session.recorder.since(start_seq) if c.trigger.value == "Change"]
    result.elapsed = session.now - start
    return result
