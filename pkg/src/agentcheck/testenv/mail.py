"""In-memory mailbox with a deliberately minimal setup API.

The only way test infrastructure can put mail into the box is
:meth:`EmailStore.send_email`: a fresh message, from the fixed sender domain,
with a store-assigned timestamp.  Subject agents act through the ordinary
client methods (:meth:`reply`, :meth:`compose`) the way a user would.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .faults import LogicalClock

FIXED_SENDER_DOMAIN = "aibrilliance.online"
FOLDERS = ("inbox", "sent")


@dataclass(frozen=True)
class Attachment:
    name: str
    content: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "content": self.content}


@dataclass(frozen=True)
class EmailMessage:
    message_id: str
    sender: str
    to: str
    subject: str
    body: str
    timestamp: str
    attachments: tuple[Attachment, ...] = ()
    in_reply_to: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "message_id": self.message_id,
            "from": self.sender,
            "to": self.to,
            "subject": self.subject,
            "body": self.body,
            "timestamp": self.timestamp,
            "attachments": [a.to_dict() for a in self.attachments],
            "in_reply_to": self.in_reply_to,
        }


@dataclass(frozen=True)
class Receipt:
    message_id: str


def _slug(name: str) -> str:
    s = re.sub(r"[^a-z0-9]+", ".", name.lower()).strip(".")
    return s or "sender"


def base_subject(subject: str) -> str:
    s = subject.strip()
    while re.match(r"(?i)^(re|fwd?):\s*", s):
        s = re.sub(r"(?i)^(re|fwd?):\s*", "", s, count=1)
    return s


@dataclass
class EmailStore:
    owner: str = "john@example.com"
    owner_name: str = "John"
    fixed_sender_domain: str = FIXED_SENDER_DOMAIN
    clock: LogicalClock = field(default_factory=LogicalClock)
    seed: int = 0
    inbox: list[EmailMessage] = field(default_factory=list)
    sent: list[EmailMessage] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._rng = random.Random(self.seed)

    def _new_id(self) -> str:
        return "msg-%08x" % self._rng.getrandbits(32)

    def send_email(
        self,
        to: str,
        subject: str,
        body: str,
        attachments: Iterable[Any] = (),
        sender_name: Optional[str] = None,
        **ignored: Any,
    ) -> Receipt:
        """Deliver a fresh message to the inbox.

        Any caller-supplied sender address or timestamp in ``ignored`` has no
        effect: the domain is fixed and the store stamps the time.
        """
        if not to or not str(to).strip():
            raise ValueError("recipient is required")
        display = sender_name or "Notifications"
        sender = f"{display} <{_slug(display)}@{self.fixed_sender_domain}>"
        atts = tuple(a if isinstance(a, Attachment) else Attachment(**a) for a in attachments)
        msg = EmailMessage(
            self._new_id(), sender, str(to), subject, body,
            self.clock.stamp().isoformat(timespec="minutes"), atts,
        )
        self.inbox.append(msg)
        return Receipt(msg.message_id)

    # -- client side (what a user or subject agent can do) --------------

    def find(self, message_id: str) -> Optional[EmailMessage]:
        for m in self.inbox + self.sent:
            if m.message_id == message_id:
                return m
        return None

    def reply(self, message_id: str, body: str) -> EmailMessage:
        orig = self.find(message_id)
        if orig is None:
            raise KeyError(message_id)
        msg = EmailMessage(
            self._new_id(), f"{self.owner_name} <{self.owner}>", orig.sender,
            "Re: " + base_subject(orig.subject), body,
            self.clock.stamp().isoformat(timespec="minutes"), (), orig.message_id,
        )
        self.sent.append(msg)
        return msg

    def compose(self, to: str, subject: str, body: str) -> EmailMessage:
        msg = EmailMessage(
            self._new_id(), f"{self.owner_name} <{self.owner}>", to, subject, body,
            self.clock.stamp().isoformat(timespec="minutes"),
        )
        self.sent.append(msg)
        return msg

    # -- queries ---------------------------------------------------------

    def folder(self, name: str) -> list[EmailMessage]:
        if name == "inbox":
            return list(self.inbox)
        if name == "sent":
            return list(self.sent)
        raise KeyError(name)

    def thread(self, subject: str) -> list[EmailMessage]:
        want = base_subject(subject).lower()
        return [m for m in self.inbox + self.sent if base_subject(m.subject).lower() == want]

    def search(self, text: str) -> list[EmailMessage]:
        t = text.lower()
        return [
            m for m in self.inbox + self.sent
            if t in m.subject.lower() or t in m.body.lower() or t in m.sender.lower()
        ]
