from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from agentcheck.roles import SPEC_AUTHORS, SpecialistRole
from agentcheck.spec_model import (
    AgentSpecification, CheckKind, FeatureDescription, IncoherentRevision, InvalidFeature, Oracle, ProbeQuery,
    RoleViolation, SetupStep, SpecDelta, TestSpecification, canonical_json, coherence_check, new_specification,
    revise_specification,
)

FEATURE = FeatureDescription("reply-1", "Email", "The assistant replies to emails on the user's behalf.")
AGENT = AgentSpecification("mock-mail", "WebApp", ("https://mail.example.test",))
TS = "2025-05-12T17:10"


def draft_delta() -> SpecDelta:
    return SpecDelta.from_dict({
        "description": "draft",
        "subject_prompt": "Reply to David",
        "add_setup": [{"id": "S1", "intent": "email from David", "target": "Email", "entities": ["mail:david"],
                       "tool": "send_email"}],
        "prompt_requires": ["mail:david"],
        "prompt_introduces": ["mail:reply"],
        "add_oracles": [{"id": "O1", "description": "a reply exists", "check_kind": "EnvProbe",
                         "probe": {"domain": "Email", "selector": "sent"}, "entities": ["mail:reply"]}],
    })


def test_new_specification_is_empty_shell_with_revision_zero():
    spec = new_specification(FEATURE, AGENT, timestamp=TS)
    assert spec.active.snapshot_id == "s0" and spec.active.feature_id == "reply-1"
    assert [r.index for r in spec.revisions] == [0] and spec.revisions[0].author_role is None


def test_empty_feature_text_rejected():
    with pytest.raises(InvalidFeature):
        FeatureDescription("x", "Email", "   ")


def test_architect_draft_is_coherent():
    spec = revise_specification(new_specification(FEATURE, AGENT, timestamp=TS), SpecialistRole.TEST_ARCHITECT,
                                draft_delta(), timestamp=TS)
    assert coherence_check(spec) == []
    assert spec.revisions[-1].before_id == "s0" and spec.revisions[-1].after_id == "s1"


def test_prompt_without_setup_is_missing_data():
    spec = new_specification(FEATURE, AGENT, timestamp=TS)
    spec = revise_specification(spec, SpecialistRole.TEST_ARCHITECT, SpecDelta(
        "prompt only", subject_prompt="Reply to David", prompt_requires=("mail:david",)), timestamp=TS)
    assert [v.kind for v in coherence_check(spec)] == ["missing-data"]


def test_unsupported_setup_tool_is_flagged():
    spec = new_specification(FEATURE, AGENT, timestamp=TS)
    spec = revise_specification(spec, SpecialistRole.TEST_ARCHITECT, SpecDelta(
        "calendar", add_setup=(SetupStep("S1", "calendar invite", "Other", ("rec:x",), "create_event"),)),
        timestamp=TS)
    assert [v.kind for v in coherence_check(spec)] == ["unsupported-tool"]
    assert coherence_check(spec, setup_tools={"create_event"}) == []


def test_oracle_on_unknown_entity_is_refused():
    spec = new_specification(FEATURE, AGENT, timestamp=TS)
    bad = SpecDelta("bad", add_oracles=(Oracle("O9", "x", "ScreenEvidence", entities=("fs:nowhere",)),))
    with pytest.raises(IncoherentRevision):
        revise_specification(spec, SpecialistRole.TEST_ARCHITECT, bad, timestamp=TS)


def test_env_probe_oracle_needs_target():
    with pytest.raises(ValueError):
        Oracle("O1", "x", CheckKind.ENV_PROBE)
    with pytest.raises(ValueError):
        Oracle("O1", "x", CheckKind.ENV_PROBE, ProbeQuery("FileSystem", " "))


def test_empty_delta_is_noop_but_still_role_gated():
    spec = new_specification(FEATURE, AGENT, timestamp=TS)
    assert revise_specification(spec, SpecialistRole.TEST_ANALYST, SpecDelta(), timestamp=TS) is spec
    with pytest.raises(RoleViolation):
        revise_specification(spec, SpecialistRole.JUDGE, SpecDelta(), timestamp=TS)


def test_json_round_trip():
    spec = revise_specification(new_specification(FEATURE, AGENT, timestamp=TS), SpecialistRole.TEST_ARCHITECT,
                                draft_delta(), timestamp=TS)
    again = TestSpecification.from_dict(spec.to_dict())
    assert again == spec and again.to_json() == spec.to_json()


# -- properties ----------------------------------------------------------

ENTITY = st.sampled_from(["fs:a", "fs:b", "mail:x", "mail:y", "rec:k"])
STEP = st.builds(lambda i, e: SetupStep(f"S{i}", "intent", "Other", tuple(e), "exec_command"),
                 st.integers(0, 4), st.lists(ENTITY, max_size=2))
ORACLE = st.builds(lambda i, e: Oracle(f"O{i}", "check", "ScreenEvidence", entities=tuple(e)),
                   st.integers(0, 4), st.lists(ENTITY, max_size=2))
DELTA = st.builds(
    lambda d, p, add, ora, req, intro: SpecDelta(d, p, tuple(add), (), tuple(ora), (), req, intro),
    st.sampled_from(["d", "change"]), st.one_of(st.none(), st.text(max_size=8)),
    st.lists(STEP, max_size=2), st.lists(ORACLE, max_size=2),
    st.one_of(st.none(), st.lists(ENTITY, max_size=2).map(tuple)),
    st.one_of(st.none(), st.lists(ENTITY, max_size=2).map(tuple)),
)
AUTHOR = st.sampled_from(sorted(SPEC_AUTHORS, key=lambda r: r.value))
NON_AUTHOR = st.sampled_from([SpecialistRole.ENGINEER, SpecialistRole.INVESTIGATOR, SpecialistRole.JUDGE])


@given(st.lists(st.tuples(AUTHOR, DELTA), max_size=8))
def test_history_is_append_only(steps):
    spec = new_specification(FEATURE, AGENT, timestamp=TS)
    for role, delta in steps:
        before = [canonical_json(s.to_dict()) for s in spec.snapshots]
        before_revs = [r.to_dict() for r in spec.revisions]
        try:
            spec = revise_specification(spec, role, delta, timestamp=TS)
        except IncoherentRevision:
            continue
        assert [canonical_json(s.to_dict()) for s in spec.snapshots[:len(before)]] == before
        assert [r.to_dict() for r in spec.revisions[:len(before_revs)]] == before_revs
        assert [r.index for r in spec.revisions] == list(range(len(spec.revisions)))


@given(NON_AUTHOR, DELTA)
def test_role_gate(role, delta):
    spec = new_specification(FEATURE, AGENT, timestamp=TS)
    with pytest.raises(RoleViolation):
        revise_specification(spec, role, delta, timestamp=TS)


@given(st.lists(st.tuples(AUTHOR, DELTA), max_size=6))
def test_coherence_check_is_idempotent(steps):
    spec = new_specification(FEATURE, AGENT, timestamp=TS)
    for role, delta in steps:
        try:
            spec = revise_specification(spec, role, delta, timestamp=TS)
        except IncoherentRevision:
            pass
    frozen = spec.to_json()
    assert coherence_check(spec) == coherence_check(spec)
    assert spec.to_json() == frozen


@given(st.lists(st.tuples(AUTHOR, DELTA), min_size=1, max_size=6))
def test_revision_never_masks_unrelated_violations(steps):
    spec = new_specification(FEATURE, AGENT, timestamp=TS)
    for role, delta in steps:
        old = coherence_check(spec)
        try:
            new_spec = revise_specification(spec, role, delta, timestamp=TS)
        except IncoherentRevision:
            continue
        new = coherence_check(new_spec)
        touched = delta.touched()
        # Replacing a list field touches the entries it replaces as well.
        if delta.prompt_requires is not None:
            touched |= set(spec.active.prompt_requires)
        if delta.prompt_introduces is not None:
            touched |= set(spec.active.prompt_introduces)
        # Every new violation concerns something the delta touched.
        for v in new:
            if v not in old:
                assert v.subject in touched or any(t in v.detail for t in touched)
        # A pre-existing violation disappears only if the delta touched it.
        for v in old:
            if v not in new:
                assert v.subject in touched or any(t in v.detail for t in touched)
        spec = new_spec
