"""Virtual user environment: jailed home directory, mailbox and a record store."""

from __future__ import annotations

import fnmatch
import hashlib
import json
import os
import posixpath
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Optional

from ..spec_model import ProbeQuery, Target
from .faults import FaultKind, FaultSet, FaultSpec, LogicalClock, RetryableEnvError
from .mail import FOLDERS, EmailStore, Receipt
from .sandbox import DEFAULT_QUOTA, HOME, CmdResult, Sandbox


@dataclass(frozen=True)
class EnvStatus:
    query: ProbeQuery
    entities: tuple[dict, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.entities

    def to_dict(self) -> dict:
        return {"query": self.query.to_dict(), "entities": list(self.entities), "empty": self.empty}


@dataclass(frozen=True)
class EnvSnapshot:
    """Content hashes of every entity, keyed ``fs:…``, ``mail:…`` or ``rec:…``."""

    entries: tuple[tuple[str, str], ...]

    def as_dict(self) -> dict[str, str]:
        return dict(self.entries)


@dataclass(frozen=True)
class EnvDiff:
    added: tuple[str, ...] = ()
    removed: tuple[str, ...] = ()
    modified: tuple[str, ...] = ()

    @property
    def empty(self) -> bool:
        return not (self.added or self.removed or self.modified)

    def restrict(self, prefix: str) -> EnvDiff:
        """Entries equal to ``prefix`` or under it (``prefix`` may be a glob)."""
        def keep(key: str) -> bool:
            k = key.rstrip("/@")
            return fnmatch.fnmatchcase(k, prefix) or k.startswith(prefix.rstrip("/") + "/")

        return EnvDiff(
            tuple(k for k in self.added if keep(k)),
            tuple(k for k in self.removed if keep(k)),
            tuple(k for k in self.modified if keep(k)),
        )

    def by_domain(self) -> dict[str, dict[str, list[str]]]:
        out: dict[str, dict[str, list[str]]] = {}
        for name in ("added", "removed", "modified"):
            for key in getattr(self, name):
                dom = key.split(":", 1)[0]
                out.setdefault(dom, {"added": [], "removed": [], "modified": []})[name].append(key)
        return out

    def to_dict(self) -> dict:
        return {"added": list(self.added), "removed": list(self.removed), "modified": list(self.modified)}

    @classmethod
    def from_dict(cls, d: dict) -> EnvDiff:
        return cls(tuple(d.get("added", ())), tuple(d.get("removed", ())), tuple(d.get("modified", ())))


def diff(a: EnvSnapshot, b: EnvSnapshot) -> EnvDiff:
    da, db = a.as_dict(), b.as_dict()
    return EnvDiff(
        tuple(sorted(k for k in db if k not in da)),
        tuple(sorted(k for k in da if k not in db)),
        tuple(sorted(k for k in da if k in db and da[k] != db[k])),
    )


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _text_preview(p: Path, limit: int = 2000) -> str:
    try:
        return p.read_text()[:limit]
    except (UnicodeDecodeError, OSError):
        return ""


class Environment:
    """One test run's environment.  All public operations are serialized."""

    def __init__(
        self,
        root: Optional[Path | str] = None,
        *,
        seed: int = 0,
        quota: int = DEFAULT_QUOTA,
        clock: Optional[LogicalClock] = None,
        owner: str = "john@example.com",
        owner_name: str = "John",
    ) -> None:
        if root is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="agentcheck-home-")
            root = self._tmp.name
        self.clock = clock or LogicalClock()
        self.faults = FaultSet()
        self.log: list[dict] = []
        self.sandbox = Sandbox(root, quota, self.faults, on_fault=self._fault_hit)
        self.mail = EmailStore(owner=owner, owner_name=owner_name, clock=self.clock, seed=seed)
        self.records: dict[str, Any] = {}
        self._lock = threading.RLock()

    @property
    def root(self) -> Path:
        return self.sandbox.root

    def _fault_hit(self, kind: FaultKind, operation: str) -> None:
        self.log.append({"event": "fault_triggered", "fault": kind.value, "operation": operation})

    def _gate(self, operation: str) -> None:
        kind = self.faults.trigger(operation)
        if kind is not None:
            self._fault_hit(kind, operation)
            raise RetryableEnvError(kind, f"{kind.value}: {operation} could not complete")

    # -- setup APIs ------------------------------------------------------

    def inject_fault(self, fault: FaultSpec) -> None:
        with self._lock:
            self.faults.add(fault)
            self.log.append({"event": "fault_injected", **fault.to_dict()})

    def send_email(self, to: str, subject: str, body: str, attachments=(), **extra: Any) -> Receipt:
        with self._lock:
            if not to or not str(to).strip():
                raise ValueError("recipient is required")
            self._gate("send_email")
            receipt = self.mail.send_email(to, subject, body, attachments, **extra)
            self.log.append({"event": "send_email", "message_id": receipt.message_id})
            return receipt

    def exec_command(self, cmdline: str, cwd: str = HOME) -> CmdResult:
        with self._lock:
            self._gate("exec_command")
            result = self.sandbox.exec_command(cmdline, cwd)
            self.log.append({"event": "exec_command", "cmdline": cmdline, "exit_code": result.exit_code})
            return result

    # -- client side (what the subject agent does, as the user) ---------

    def reply_email(self, message_id: str, body: str):
        with self._lock:
            msg = self.mail.reply(message_id, body)
            self.log.append({"event": "client_reply", "message_id": msg.message_id, "in_reply_to": message_id})
            return msg

    # -- read side -------------------------------------------------------

    def probe(self, query: ProbeQuery) -> EnvStatus:
        """Read-only lookup.  Unknown or non-matching selectors yield an empty status."""
        with self._lock:
            if query.domain is Target.FILESYSTEM:
                return EnvStatus(query, tuple(self._probe_fs(query.selector)))
            if query.domain is Target.EMAIL:
                return EnvStatus(query, tuple(m.to_dict() for m in self._probe_mail(query.selector)))
            matches = sorted(k for k in self.records if fnmatch.fnmatchcase(k, query.selector))
            return EnvStatus(query, tuple({"key": k, "value": self.records[k]} for k in matches))

    def _probe_fs(self, selector: str) -> list[dict]:
        raw = selector.strip() or "."
        if raw == "~" or raw.startswith("~/"):
            raw = HOME + raw[1:]
        if not raw.startswith("/"):
            raw = HOME + "/" + raw
        # Raises JailViolation for selectors pointing outside the home directory.
        sel = self.sandbox.relpath(self.sandbox.virtual(posixpath.normpath(raw)))
        out = []
        for rel, p in self._walk():
            if not sel or fnmatch.fnmatchcase(rel, sel) or rel.startswith(sel + "/"):
                if p.is_symlink():
                    out.append({"path": rel, "kind": "symlink", "target": os.readlink(p)})
                elif p.is_dir():
                    out.append({"path": rel, "kind": "dir"})
                else:
                    out.append({
                        "path": rel, "kind": "file", "size": p.stat().st_size,
                        "sha256": _sha(p.read_bytes()), "content": _text_preview(p),
                    })
        return out

    def _probe_mail(self, selector: str):
        kind, _, arg = selector.partition(":")
        if kind in FOLDERS and not arg:
            return self.mail.folder(kind)
        if kind == "thread" and arg:
            return self.mail.thread(arg)
        if kind == "search" and arg:
            return self.mail.search(arg)
        return []

    def _walk(self):
        root = self.sandbox.root
        for dirpath, dirs, files in os.walk(root):
            dirs.sort()
            for name in sorted(dirs + files):
                p = Path(dirpath) / name
                yield p.relative_to(root).as_posix(), p

    def snapshot(self) -> EnvSnapshot:
        with self._lock:
            entries: dict[str, str] = {}
            for rel, p in self._walk():
                if p.is_symlink():
                    entries[f"fs:{rel}@"] = _sha(os.readlink(p).encode())
                elif p.is_dir():
                    entries[f"fs:{rel}/"] = "dir"
                else:
                    entries[f"fs:{rel}"] = _sha(p.read_bytes())
            for folder in FOLDERS:
                for m in self.mail.folder(folder):
                    blob = json.dumps(m.to_dict(), sort_keys=True).encode()
                    entries[f"mail:{folder}/{m.message_id}"] = _sha(blob)
            for k, v in self.records.items():
                entries[f"rec:{k}"] = _sha(json.dumps(v, sort_keys=True).encode())
            return EnvSnapshot(tuple(sorted(entries.items())))

    def describe(self) -> dict:
        """Static facts specialists are told about the environment."""
        return {
            "home": HOME,
            "privileges": "non-root user, no sudo",
            "email_api": "send_email(to, subject, body, attachments, sender_name) delivers a fresh message "
                         f"from @{self.mail.fixed_sender_domain} into {self.mail.owner}'s inbox; "
                         "the store assigns the timestamp",
            "mailbox_owner": f"{self.mail.owner_name} <{self.mail.owner}>",
            "now": self.clock.now().isoformat(timespec="minutes"),
        }

    def now(self) -> datetime:
        return self.clock.now()
