"""Virtual terminal screen, virtual-time sessions and change-triggered capture.

The terminal is a rows x cols character grid.  Applications draw on it, own
input fields, and register clickable regions.  Nothing reads the grid except
through :meth:`VirtualTerminal.frame`, which returns an immutable copy.
"""

from __future__ import annotations

import heapq
import itertools
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Protocol

DEFAULT_ROWS = 40
DEFAULT_COLS = 120


class ScreenError(RuntimeError):
    pass


@dataclass(frozen=True)
class TextSpan:
    text: str
    row: int
    col_start: int
    col_end: int  # exclusive
    span_id: str


@dataclass(frozen=True)
class Frame:
    rows: tuple[str, ...]

    @classmethod
    def blank(cls, rows: int = DEFAULT_ROWS, cols: int = DEFAULT_COLS) -> Frame:
        return cls(tuple(" " * cols for _ in range(rows)))

    @property
    def text(self) -> str:
        return "\n".join(r.rstrip() for r in self.rows).rstrip("\n")

    def __contains__(self, needle: str) -> bool:
        return any(needle in r for r in self.rows)

    def spans(self) -> list[TextSpan]:
        """Text-span index: runs of text separated by two or more blanks."""
        out = []
        for r, line in enumerate(self.rows):
            for m in re.finditer(r"\S+(?: \S+)*", line):
                out.append(TextSpan(m.group(), r, m.start(), m.end(), f"{r}:{m.start()}"))
        return out

    def find(self, target: str) -> list[TextSpan]:
        """Non-overlapping occurrences of ``target`` in row-major order."""
        out = []
        if not target:
            return out
        for r, line in enumerate(self.rows):
            start = 0
            while True:
                i = line.find(target, start)
                if i < 0:
                    break
                out.append(TextSpan(target, r, i, i + len(target), f"{r}:{i}"))
                start = i + len(target)
        return out


@dataclass
class InputField:
    id: str
    row: int
    col: int
    width: int
    max_len: int
    placeholder: str = ""
    value: str = ""
    on_submit: Optional[Callable[[str], None]] = None


@dataclass
class _Region:
    row: int
    col_start: int
    col_end: int
    callback: Callable[[], None]


class Trigger(str, Enum):
    CHANGE = "Change"
    PHASE_BOUNDARY = "PhaseBoundary"
    MANUAL = "Manual"


@dataclass(frozen=True)
class ScreenCapture:
    seq: int
    timestamp: float  # virtual seconds since the session started
    frame: Frame
    trigger: Trigger

    def to_dict(self, path: Optional[str] = None) -> dict:
        return {"seq": self.seq, "timestamp": self.timestamp, "trigger": self.trigger.value, "path": path}


class CaptureLog:
    """Records a capture whenever a committed frame differs from the previous one."""

    def __init__(self, time_source: Callable[[], float] = lambda: 0.0) -> None:
        self.captures: list[ScreenCapture] = []
        self._last: Optional[Frame] = None
        self._seq = itertools.count(1)
        self._time = time_source

    def baseline(self, frame: Frame) -> None:
        self._last = frame

    def observe(self, frame: Frame) -> Optional[ScreenCapture]:
        if self._last is not None and frame == self._last:
            return None
        first = self._last is None
        self._last = frame
        if first:
            return None
        return self._record(frame, Trigger.CHANGE)

    def capture(self, frame: Frame, trigger: Trigger) -> ScreenCapture:
        return self._record(frame, trigger)

    def _record(self, frame: Frame, trigger: Trigger) -> ScreenCapture:
        cap = ScreenCapture(next(self._seq), self._time(), frame, trigger)
        self.captures.append(cap)
        return cap

    def since(self, seq: int) -> list[ScreenCapture]:
        return [c for c in self.captures if c.seq > seq]

    @property
    def last_seq(self) -> int:
        return self.captures[-1].seq if self.captures else 0

    def get(self, seq: int) -> Optional[ScreenCapture]:
        for c in self.captures:
            if c.seq == seq:
                return c
        return None


class VirtualTerminal:
    backend = "VirtualTerminal"

    def __init__(self, rows: int = DEFAULT_ROWS, cols: int = DEFAULT_COLS) -> None:
        self.rows, self.cols = rows, cols
        self._grid = [[" "] * cols for _ in range(rows)]
        self.fields: dict[str, InputField] = {}
        self.focus: Optional[str] = None
        self._regions: list[_Region] = []
        self.closed = False
        self.recorder: Optional[CaptureLog] = None

    def _check(self) -> None:
        if self.closed:
            raise ScreenError("screen backend is not available")

    # -- drawing (application side) --------------------------------------

    def write(self, row: int, col: int, text: str) -> None:
        self._check()
        if not 0 <= row < self.rows:
            return
        for i, ch in enumerate(text):
            c = col + i
            if 0 <= c < self.cols:
                self._grid[row][c] = ch if ch.isprintable() else " "

    def clear_row(self, row: int) -> None:
        self._check()
        if 0 <= row < self.rows:
            self._grid[row] = [" "] * self.cols

    def clear(self) -> None:
        self._check()
        self._grid = [[" "] * self.cols for _ in range(self.rows)]
        self.fields.clear()
        self._regions.clear()
        self.focus = None

    def load(self, frame: Frame) -> None:
        """Replace the grid wholesale (used by replay-style applications)."""
        self._check()
        self._grid = [list(r.ljust(self.cols)[: self.cols]) for r in frame.rows[: self.rows]]
        while len(self._grid) < self.rows:
            self._grid.append([" "] * self.cols)

    def add_field(self, f: InputField) -> None:
        self._check()
        self.fields[f.id] = f
        self._render_field(f)

    def add_region(self, row: int, col_start: int, col_end: int, callback: Callable[[], None]) -> None:
        self._regions.append(_Region(row, col_start, col_end, callback))

    def clear_regions(self) -> None:
        self._regions.clear()

    def _render_field(self, f: InputField) -> None:
        if not f.value and self.focus != f.id:
            shown = f.placeholder
        else:
            shown = f.value[-f.width:]
        self.write(f.row, f.col, shown.ljust(f.width)[: f.width])

    # -- input (user side) -----------------------------------------------

    def frame(self) -> Frame:
        self._check()
        return Frame(tuple("".join(r) for r in self._grid))

    def send_keys(self, text: str) -> None:
        """Type characters into the focused field; dropped when nothing has focus."""
        self._check()
        f = self.fields.get(self.focus) if self.focus else None
        if f is None:
            return
        room = f.max_len - len(f.value)
        f.value += text[: max(room, 0)]
        self._render_field(f)

    def press_key(self, key: str) -> None:
        self._check()
        f = self.fields.get(self.focus) if self.focus else None
        if key == "Enter":
            if f is None:
                return
            value, f.value = f.value, ""
            self._render_field(f)
            if f.on_submit:
                f.on_submit(value)
        elif key == "Backspace":
            if f is not None and f.value:
                f.value = f.value[:-1]
                self._render_field(f)
        elif key == "Escape":
            self.blur()
        else:
            raise ValueError(f"unsupported key {key!r}")

    def click(self, row: int, col: int) -> None:
        self._check()
        for f in self.fields.values():
            if f.row == row and f.col <= col < f.col + f.width:
                self.set_focus(f.id)
                return
        self.blur()
        for r in list(self._regions):
            if r.row == row and r.col_start <= col < r.col_end:
                r.callback()
                return

    def set_focus(self, field_id: str) -> None:
        old = self.fields.get(self.focus) if self.focus else None
        self.focus = field_id
        if old is not None:
            self._render_field(old)
        self._render_field(self.fields[field_id])

    def blur(self) -> None:
        old = self.fields.get(self.focus) if self.focus else None
        self.focus = None
        if old is not None:
            self._render_field(old)

    def commit(self) -> Optional[ScreenCapture]:
        """Publish the current frame to the attached recorder."""
        if self.recorder is None or self.closed:
            return None
        return self.recorder.observe(self.frame())

    def close(self) -> None:
        self.closed = True


class ExternalDisplayAdapter(Protocol):
    """Integration point for real displays: capture plus OCR-like span extraction.

    Verification certainty is only guaranteed on :class:`VirtualTerminal`; an
    adapter defines its own accuracy.
    """

    backend: str

    def frame(self) -> Frame: ...
    def send_keys(self, text: str) -> None: ...
    def press_key(self, key: str) -> None: ...
    def click(self, row: int, col: int) -> None: ...
    def commit(self): ...


@dataclass(order=True)
class _Event:
    at: float
    order: int
    action: Callable[[], None] = field(compare=False)


class ScreenSession:
    """Virtual-time driver for whatever application owns the screen.

    Applications schedule work with :meth:`schedule`; :meth:`advance` runs the
    due events in time order and commits the screen after each one.
    """

    def __init__(self, screen: VirtualTerminal) -> None:
        self.screen = screen
        self.now = 0.0
        self._queue: list[_Event] = []
        self._order = itertools.count()
        self.closed = False
        self.recorder = CaptureLog(lambda: self.now)
        screen.recorder = self.recorder
        self.recorder.baseline(screen.frame())

    def schedule(self, delay: float, action: Callable[[], None]) -> None:
        heapq.heappush(self._queue, _Event(self.now + max(delay, 0.0), next(self._order), action))

    @property
    def pending(self) -> int:
        return len(self._queue)

    def advance(self, seconds: float) -> None:
        end = self.now + seconds
        while self._queue and self._queue[0].at <= end and not self.closed:
            ev = heapq.heappop(self._queue)
            self.now = max(self.now, ev.at)
            ev.action()
            self.screen.commit()
        if not self.closed:
            self.now = end

    def run_until_idle(self, limit: float = 3600.0) -> None:
        start = self.now
        while self._queue and self.now - start < limit and not self.closed:
            self.advance(self._queue[0].at - self.now)

    def close(self) -> None:
        self.closed = True


def save_captures(captures: list[ScreenCapture], directory: Path | str) -> Path:
    """Write numbered plain-text frame dumps plus ``index.json``."""
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    index = []
    for c in captures:
        rel = f"frames/{c.seq:05d}.txt"
        (d / rel).write_text("\n".join(c.frame.rows) + "\n")
        index.append(c.to_dict(rel))
    (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return d / "index.json"


def load_captures(directory: Path | str) -> list[ScreenCapture]:
    d = Path(directory)
    out = []
    for entry in json.loads((d / "index.json").read_text()):
        rows = (d / entry["path"]).read_text().split("\n")[:-1]
        out.append(ScreenCapture(entry["seq"], entry["timestamp"], Frame(tuple(rows)), Trigger(entry["trigger"])))
    return out
