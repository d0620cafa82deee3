"""Injectable environment faults and the clock the environment runs on."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from enum import Enum
from typing import Optional


class FaultKind(str, Enum):
    NETWORK_DOWN = "NetworkDown"
    STORAGE_FULL = "StorageFull"
    API_TIMEOUT = "ApiTimeout"


# Operation families each fault is allowed to touch.
FAULT_SCOPE = {
    FaultKind.NETWORK_DOWN: frozenset({"send_email"}),
    FaultKind.API_TIMEOUT: frozenset({"send_email", "exec_command"}),
    FaultKind.STORAGE_FULL: frozenset({"fs_write"}),
}


class RetryableEnvError(Exception):
    """An API call failed because of a (possibly transient) environment fault."""

    def __init__(self, fault: FaultKind, message: str = "") -> None:
        self.fault = FaultKind(fault)
        super().__init__(message or f"{self.fault.value}: operation failed, retry later")


@dataclass
class FaultSpec:
    kind: FaultKind
    # Number of matching operations affected; None keeps the fault active until cleared.
    count: Optional[int] = None

    def __post_init__(self) -> None:
        self.kind = FaultKind(self.kind)
        if self.count is not None and self.count < 1:
            raise ValueError("fault count must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "count": self.count}

    @classmethod
    def from_dict(cls, d: dict) -> FaultSpec:
        return cls(FaultKind(d["kind"]), d.get("count"))


class FaultSet:
    def __init__(self) -> None:
        self._active: list[FaultSpec] = []

    def add(self, spec: FaultSpec) -> None:
        self._active.append(FaultSpec(spec.kind, spec.count))

    def clear(self) -> None:
        self._active.clear()

    @property
    def active(self) -> tuple[FaultSpec, ...]:
        return tuple(self._active)

    def peek(self, operation: str) -> Optional[FaultKind]:
        for f in self._active:
            if operation in FAULT_SCOPE[f.kind]:
                return f.kind
        return None

    def trigger(self, operation: str) -> Optional[FaultKind]:
        """Consume one trigger of the first fault covering ``operation``."""
        for f in self._active:
            if operation in FAULT_SCOPE[f.kind]:
                if f.count is not None:
                    f.count -= 1
                    if f.count == 0:
                        self._active.remove(f)
                return f.kind
        return None


class LogicalClock:
    """Deterministic clock; every store-assigned timestamp comes from here."""

    def __init__(self, start: datetime = datetime(2025, 5, 12, 17, 10), step: timedelta = timedelta(minutes=1)):
        self._now = start
        self.step = step

    def now(self) -> datetime:
        return self._now

    def advance(self, seconds: float) -> None:
        self._now += timedelta(seconds=seconds)

    def stamp(self) -> datetime:
        t = self._now
        self._now += self.step
        return t
