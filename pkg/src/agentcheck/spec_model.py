"""Bundled test specification: setup steps, subject prompt and oracles.

A :class:`TestSpecification` is an immutable value holding every snapshot it
has ever had plus the revision log that produced them.  Revising returns a new
value; older snapshots are never touched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable, Optional

from .roles import SPEC_AUTHORS, SpecialistRole


class InvalidFeature(ValueError):
    pass


class RoleViolation(PermissionError):
    pass


class IncoherentRevision(ValueError):
    pass


class Domain(str, Enum):
    EMAIL = "Email"
    FILESYSTEM = "FileSystem"
    HR_QA = "HrQa"
    OTHER = "Other"


class Platform(str, Enum):
    CLI = "Cli"
    WEB_APP = "WebApp"
    BROWSER_EXTENSION = "BrowserExtension"
    DESKTOP = "Desktop"


class Target(str, Enum):
    """Environment domain a setup step or probe addresses."""

    EMAIL = "Email"
    FILESYSTEM = "FileSystem"
    OTHER = "Other"


class CheckKind(str, Enum):
    ENV_PROBE = "EnvProbe"
    SCREEN_EVIDENCE = "ScreenEvidence"
    AGENT_SELF_REPORT = "AgentSelfReport"


# Tools an Infrastructure Manager can realize setup steps with.
DEFAULT_SETUP_TOOLS = frozenset({"send_email", "exec_command"})


@dataclass(frozen=True)
class FeatureDescription:
    id: str
    domain: Domain
    text: str

    def __post_init__(self) -> None:
        if not self.id or not self.id.strip():
            raise InvalidFeature("feature id must be non-empty")
        if not self.text or not self.text.strip():
            raise InvalidFeature(f"feature {self.id!r} has empty text")
        object.__setattr__(self, "domain", Domain(self.domain))

    def to_dict(self) -> dict:
        return {"id": self.id, "domain": self.domain.value, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> FeatureDescription:
        return cls(id=d.get("id", ""), domain=Domain(d.get("domain", "Other")), text=d.get("text", ""))


@dataclass(frozen=True)
class AgentSpecification:
    name: str
    platform: Platform
    launch: tuple[str, ...]
    docs: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "platform", Platform(self.platform))
        object.__setattr__(self, "launch", tuple(self.launch))
        if not self.launch:
            raise ValueError(f"agent {self.name!r} has no launch instructions")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "platform": self.platform.value,
            "launch": list(self.launch),
            "docs": self.docs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> AgentSpecification:
        return cls(d["name"], Platform(d["platform"]), tuple(d["launch"]), d.get("docs", ""))


@dataclass(frozen=True)
class ProbeQuery:
    domain: Target
    selector: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "domain", Target(self.domain))

    def to_dict(self) -> dict:
        return {"domain": self.domain.value, "selector": self.selector}

    @classmethod
    def from_dict(cls, d: dict) -> ProbeQuery:
        return cls(Target(d["domain"]), d["selector"])


@dataclass(frozen=True)
class SetupStep:
    """Abstract setup intent.

    ``entities`` are the declared keys this step brings into existence; they are
    what oracles and the prompt's data requirements are matched against.
    """

    id: str
    intent: str
    target: Target
    entities: tuple[str, ...] = ()
    tool: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "target", Target(self.target))
        object.__setattr__(self, "entities", tuple(self.entities))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "intent": self.intent,
            "target": self.target.value,
            "entities": list(self.entities),
            "tool": self.tool,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SetupStep:
        return cls(
            d["id"], d["intent"], Target(d.get("target", "Other")),
            tuple(d.get("entities", ())), d.get("tool"),
        )


@dataclass(frozen=True)
class Oracle:
    id: str
    description: str
    check_kind: CheckKind
    probe: Optional[ProbeQuery] = None
    entities: tuple[str, ...] = ()
    generalizability_note: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "check_kind", CheckKind(self.check_kind))
        object.__setattr__(self, "entities", tuple(self.entities))
        if self.check_kind is CheckKind.ENV_PROBE and (
            self.probe is None or not self.probe.selector.strip()
        ):
            raise ValueError(f"EnvProbe oracle {self.id!r} must name a probe target")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "description": self.description,
            "check_kind": self.check_kind.value,
            "probe": self.probe.to_dict() if self.probe else None,
            "entities": list(self.entities),
            "generalizability_note": self.generalizability_note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Oracle:
        probe = d.get("probe")
        return cls(
            d["id"], d["description"], CheckKind(d["check_kind"]),
            ProbeQuery.from_dict(probe) if probe else None,
            tuple(d.get("entities", ())), d.get("generalizability_note", ""),
        )


@dataclass(frozen=True)
class SpecSnapshot:
    snapshot_id: str
    feature_id: str
    agent_name: str
    setup_steps: tuple[SetupStep, ...] = ()
    subject_prompt: str = ""
    # Entity keys the prompt needs to exist before the subject agent runs.
    prompt_requires: tuple[str, ...] = ()
    # Entity keys the subject agent is expected to produce.
    prompt_introduces: tuple[str, ...] = ()
    oracles: tuple[Oracle, ...] = ()

    def setup_entities(self) -> set[str]:
        return {e for step in self.setup_steps for e in step.entities}

    def to_dict(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "feature_id": self.feature_id,
            "agent_name": self.agent_name,
            "setup_steps": [s.to_dict() for s in self.setup_steps],
            "subject_prompt": self.subject_prompt,
            "prompt_requires": list(self.prompt_requires),
            "prompt_introduces": list(self.prompt_introduces),
            "oracles": [o.to_dict() for o in self.oracles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SpecSnapshot:
        return cls(
            snapshot_id=d["snapshot_id"],
            feature_id=d["feature_id"],
            agent_name=d.get("agent_name", ""),
            setup_steps=tuple(SetupStep.from_dict(s) for s in d.get("setup_steps", ())),
            subject_prompt=d.get("subject_prompt", ""),
            prompt_requires=tuple(d.get("prompt_requires", ())),
            prompt_introduces=tuple(d.get("prompt_introduces", ())),
            oracles=tuple(Oracle.from_dict(o) for o in d.get("oracles", ())),
        )


@dataclass(frozen=True)
class Revision:
    index: int
    author_role: Optional[SpecialistRole]
    timestamp: str
    description: str
    before_id: Optional[str]
    after_id: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "author_role": self.author_role.value if self.author_role else None,
            "timestamp": self.timestamp,
            "description": self.description,
            "before_id": self.before_id,
            "after_id": self.after_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Revision:
        role = d.get("author_role")
        return cls(
            d["index"], SpecialistRole(role) if role else None, d["timestamp"],
            d["description"], d.get("before_id"), d["after_id"],
        )


@dataclass(frozen=True)
class SpecDelta:
    """A requested change to the active snapshot.

    ``None`` for a scalar field means "leave as is".  Oracle updates are
    expressed as remove + add under the same id.
    """

    description: str = ""
    subject_prompt: Optional[str] = None
    add_setup: tuple[SetupStep, ...] = ()
    remove_setup: tuple[str, ...] = ()
    add_oracles: tuple[Oracle, ...] = ()
    remove_oracles: tuple[str, ...] = ()
    prompt_requires: Optional[tuple[str, ...]] = None
    prompt_introduces: Optional[tuple[str, ...]] = None

    def is_empty(self) -> bool:
        return (
            self.subject_prompt is None
            and not self.add_setup
            and not self.remove_setup
            and not self.add_oracles
            and not self.remove_oracles
            and self.prompt_requires is None
            and self.prompt_introduces is None
        )

    def touched(self) -> set[str]:
        """Ids and entity keys this delta adds, removes or re-declares."""
        out = set(self.remove_setup) | set(self.remove_oracles)
        out |= {s.id for s in self.add_setup} | {o.id for o in self.add_oracles}
        for s in self.add_setup:
            out |= set(s.entities)
        out |= set(self.prompt_requires or ()) | set(self.prompt_introduces or ())
        return out

    @classmethod
    def from_dict(cls, d: dict) -> SpecDelta:
        def opt_tuple(key: str) -> Optional[tuple[str, ...]]:
            v = d.get(key)
            return None if v is None else tuple(v)

        return cls(
            description=d.get("description", ""),
            subject_prompt=d.get("subject_prompt"),
            add_setup=tuple(SetupStep.from_dict(s) for s in d.get("add_setup", ())),
            remove_setup=tuple(d.get("remove_setup", ())),
            add_oracles=tuple(Oracle.from_dict(o) for o in d.get("add_oracles", ())),
            remove_oracles=tuple(d.get("remove_oracles", ())),
            prompt_requires=opt_tuple("prompt_requires"),
            prompt_introduces=opt_tuple("prompt_introduces"),
        )


@dataclass(frozen=True)
class CoherenceViolation:
    kind: str  # missing-data | unknown-entity | duplicate-oracle-id | unsupported-tool
    subject: str
    detail: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "subject": self.subject, "detail": self.detail}


@dataclass(frozen=True)
class TestSpecification:
    __test__ = False  # keep pytest from collecting this as a test class

    snapshots: tuple[SpecSnapshot, ...]
    revisions: tuple[Revision, ...] = field(default=())

    @property
    def active(self) -> SpecSnapshot:
        return self.snapshots[-1]

    def snapshot(self, snapshot_id: str) -> SpecSnapshot:
        for s in self.snapshots:
            if s.snapshot_id == snapshot_id:
                return s
        raise KeyError(snapshot_id)

    @property
    def feature_id(self) -> str:
        return self.active.feature_id

    @property
    def setup_steps(self) -> tuple[SetupStep, ...]:
        return self.active.setup_steps

    @property
    def subject_prompt(self) -> str:
        return self.active.subject_prompt

    @property
    def oracles(self) -> tuple[Oracle, ...]:
        return self.active.oracles

    def to_dict(self) -> dict:
        return {
            "active": self.active.snapshot_id,
            "snapshots": [s.to_dict() for s in self.snapshots],
            "revisions": [r.to_dict() for r in self.revisions],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> TestSpecification:
        return cls(
            tuple(SpecSnapshot.from_dict(s) for s in d["snapshots"]),
            tuple(Revision.from_dict(r) for r in d["revisions"]),
        )


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def new_specification(
    feature: FeatureDescription,
    agent: AgentSpecification,
    *,
    timestamp: Optional[str] = None,
) -> TestSpecification:
    """Empty shell for ``feature``; revision 0 records its creation."""
    if not isinstance(feature, FeatureDescription):
        raise InvalidFeature("expected a FeatureDescription")
    shell = SpecSnapshot("s0", feature.id, agent.name)
    rev = Revision(0, None, timestamp or _now(), f"created for feature {feature.id}", None, "s0")
    return TestSpecification((shell,), (rev,))


def _apply(snap: SpecSnapshot, delta: SpecDelta, new_id: str) -> SpecSnapshot:
    setup_ids = {s.id for s in snap.setup_steps}
    missing = [i for i in delta.remove_setup if i not in setup_ids]
    if missing:
        raise IncoherentRevision(f"cannot remove unknown setup steps {missing}")
    oracle_ids = {o.id for o in snap.oracles}
    missing = [i for i in delta.remove_oracles if i not in oracle_ids]
    if missing:
        raise IncoherentRevision(f"cannot remove unknown oracles {missing}")

    setup = tuple(s for s in snap.setup_steps if s.id not in delta.remove_setup) + tuple(delta.add_setup)
    # Removing the first oracle with each id keeps order of the remaining ones.
    to_remove = list(delta.remove_oracles)
    kept = []
    for o in snap.oracles:
        if o.id in to_remove:
            to_remove.remove(o.id)
            continue
        kept.append(o)
    return replace(
        snap,
        snapshot_id=new_id,
        setup_steps=setup,
        subject_prompt=snap.subject_prompt if delta.subject_prompt is None else delta.subject_prompt,
        prompt_requires=snap.prompt_requires if delta.prompt_requires is None else tuple(delta.prompt_requires),
        prompt_introduces=(
            snap.prompt_introduces if delta.prompt_introduces is None else tuple(delta.prompt_introduces)
        ),
        oracles=tuple(kept) + tuple(delta.add_oracles),
    )


def revise_specification(
    spec: TestSpecification,
    author_role: SpecialistRole,
    delta: SpecDelta,
    *,
    timestamp: Optional[str] = None,
) -> TestSpecification:
    """Append a new snapshot produced by ``delta``.

    Only the generation and setup specialists may revise.  An empty delta is a
    no-op.  A revision that leaves an oracle pointing at an entity nobody
    creates (and that was not already dangling) is refused.
    """
    role = SpecialistRole(author_role)
    if role not in SPEC_AUTHORS:
        raise RoleViolation(f"{role.value} may not revise the test specification")
    if delta.is_empty():
        return spec
    if not delta.description.strip():
        raise ValueError("a non-empty revision needs a description")

    before = spec.active
    after = _apply(before, delta, f"s{len(spec.snapshots)}")
    old = {v for v in coherence_check_snapshot(before) if v.kind == "unknown-entity"}
    new = [v for v in coherence_check_snapshot(after) if v.kind == "unknown-entity" and v not in old]
    if new:
        raise IncoherentRevision("; ".join(v.detail for v in new))

    rev = Revision(
        len(spec.revisions), role, timestamp or _now(), delta.description,
        before.snapshot_id, after.snapshot_id,
    )
    return TestSpecification(spec.snapshots + (after,), spec.revisions + (rev,))


def coherence_check_snapshot(
    snap: SpecSnapshot, setup_tools: Optional[Iterable[str]] = None
) -> list[CoherenceViolation]:
    tools = DEFAULT_SETUP_TOOLS if setup_tools is None else frozenset(setup_tools)
    created = snap.setup_entities()
    known = created | set(snap.prompt_introduces)
    out: list[CoherenceViolation] = []

    for key in snap.prompt_requires:
        if key not in created:
            out.append(CoherenceViolation(
                "missing-data", key, f"prompt relies on {key!r} but no setup step creates it"))
    for o in snap.oracles:
        for key in o.entities:
            if key not in known:
                out.append(CoherenceViolation(
                    "unknown-entity", o.id, f"oracle {o.id} references {key!r} which nothing introduces"))
    ids = [o.id for o in snap.oracles]
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if ids[i] == ids[j]:
                out.append(CoherenceViolation(
                    "duplicate-oracle-id", ids[i], f"oracles #{i} and #{j} share id {ids[i]!r}"))
    for s in snap.setup_steps:
        if s.tool is not None and s.tool not in tools:
            out.append(CoherenceViolation(
                "unsupported-tool", s.id, f"setup step {s.id} needs unavailable tool {s.tool!r}"))
    return out


def coherence_check(
    spec: TestSpecification, setup_tools: Optional[Iterable[str]] = None
) -> list[CoherenceViolation]:
    """Diagnostics for the active snapshot.  Empty list means coherent."""
    return coherence_check_snapshot(spec.active, setup_tools)
