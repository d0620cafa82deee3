from __future__ import annotations

import io
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from agentcheck.roles import SpecialistRole
from agentcheck.screen import InputField, ScreenSession, VirtualTerminal
from agentcheck.spec_model import Platform
from agentcheck.testenv import Environment, FaultKind, FaultSpec
from agentcheck.tools import (
    CATALOG, ENV_MUTATION_TOOLS, OBSERVATION_LIMIT, Param, Registry, Tool, ToolCall, ToolResult, ToolRetryable,
    ToolSignature, ToolStatus, UiContext, build_registry, cap_observation, dispatch, retry_loop, role_tool_names,
    serve_ndjson,
)


class StubAdapter:
    completion_marker = None
    busy_indicator = None

    def launch(self, command):
        return f"launched {command}"

    def navigate(self, target):
        return f"opened {target}"


def registries(tmp_path, platform=Platform.CLI):
    env = Environment(tmp_path / "home")
    screen = VirtualTerminal(8, 40)
    ui = UiContext(screen, ScreenSession(screen), StubAdapter())
    base = env.snapshot()
    return {role: build_registry(role, env=env, ui=ui, platform=platform, baseline=lambda: base)
            for role in SpecialistRole}, env, ui


def minimal_args(name: str) -> dict:
    values = {"string": "x", "integer": 1, "boolean": True, "list": [], "object": {}}
    return {p.name: values[p.type] for p in CATALOG[name].params if p.required}


@pytest.mark.parametrize("platform", list(Platform))
def test_role_tool_matrix(tmp_path, platform):
    regs, _, _ = registries(tmp_path, platform)
    for role, reg in regs.items():
        assert reg.names == role_tool_names(role, platform)
        for name in CATALOG:
            result = dispatch(reg, ToolCall(name, minimal_args(name), "c"))
            if name in reg:
                assert result.error_kind != "UnknownTool"
            else:
                assert result.status is ToolStatus.FATAL and result.error_kind == "UnknownTool"


def test_registry_partition():
    for platform in Platform:
        eng = role_tool_names(SpecialistRole.ENGINEER, platform)
        assert not eng & ENV_MUTATION_TOOLS
        assert role_tool_names(SpecialistRole.INVESTIGATOR, platform) == {"probe", "env_diff"}
        assert not role_tool_names(SpecialistRole.JUDGE, platform)
        assert not role_tool_names(SpecialistRole.TEST_ARCHITECT, platform)


def test_bad_args(tmp_path):
    regs, _, _ = registries(tmp_path)
    im = regs[SpecialistRole.INFRASTRUCTURE_MANAGER]
    assert dispatch(im, ToolCall("exec_command", {}, "a")).error_kind == "BadArgs"
    assert dispatch(im, ToolCall("exec_command", {"cmdline": 3}, "a")).error_kind == "BadArgs"
    assert dispatch(im, ToolCall("exec_command", {"cmdline": "ls", "extra": 1}, "a")).error_kind == "BadArgs"
    assert dispatch(im, ToolCall("probe", {"domain": "Nowhere", "selector": "x"}, "a")).error_kind == "BadArgs"


def test_jail_and_privilege_are_fatal(tmp_path):
    regs, _, _ = registries(tmp_path)
    im = regs[SpecialistRole.INFRASTRUCTURE_MANAGER]
    assert dispatch(im, ToolCall("exec_command", {"cmdline": "cat /etc/passwd"})).error_kind == "JailViolation"
    assert dispatch(im, ToolCall("exec_command", {"cmdline": "sudo ls"})).error_kind == "PrivilegeDenied"


def test_env_diff_scoped_to_baseline(tmp_path):
    regs, env, _ = registries(tmp_path)
    env.exec_command("mkdir -p work && echo hi > work/a")
    inv = regs[SpecialistRole.INVESTIGATOR]
    whole = dispatch(inv, ToolCall("env_diff", {}, "d"))
    assert "fs:work/a" in whole.payload["added"]
    scoped = dispatch(inv, ToolCall("env_diff", {"selector": "fs:backup"}, "d"))
    assert scoped.ok and not scoped.payload["added"]


def test_ui_tools_verify(tmp_path):
    regs, _, ui = registries(tmp_path)
    ui.screen.write(0, 0, "To:")
    ui.screen.add_field(InputField("to", 0, 4, 20, 40, placeholder="recipient"))
    eng = regs[SpecialistRole.ENGINEER]
    blind = dispatch(eng, ToolCall("type_verified", {"text": "john"}, "t"))
    assert blind.status is ToolStatus.RETRYABLE and "select input field first" in blind.observation
    assert dispatch(eng, ToolCall("click_text", {"target": "recipient"}, "c")).ok
    assert dispatch(eng, ToolCall("type_verified", {"text": "john"}, "t")).ok
    assert [e["text"] for e in ui.typed] == ["john"]
    assert dispatch(eng, ToolCall("click_text", {"target": "absent"}, "c")).status is ToolStatus.RETRYABLE


def test_cap_observation():
    short = "x" * OBSERVATION_LIMIT
    assert cap_observation(short) == short
    long = "y" * (OBSERVATION_LIMIT + 50)
    capped = cap_observation(long)
    assert capped.startswith("y" * OBSERVATION_LIMIT) and capped.endswith("[truncated 50 chars]")


def flaky_registry(failures: int) -> tuple[Registry, list]:
    calls = []

    def handler():
        calls.append(1)
        if len(calls) <= failures:
            raise ToolRetryable("try again")
        return "done", {}

    return Registry(SpecialistRole.ENGINEER, [Tool(ToolSignature("flaky"), handler)]), calls


@given(st.integers(0, 6), st.integers(1, 5))
def test_retry_bound(failures, max_retries):
    reg, calls = flaky_registry(failures)
    attempts = []
    result = retry_loop(reg, ToolCall("flaky", {}, "r"), max_retries, attempt_log=attempts)
    assert len(calls) == len(attempts) == result.attempts <= max_retries
    if failures < max_retries:
        assert result.ok and result.attempts == failures + 1
    else:
        assert result.error_kind == "RetriesExhausted" and result.attempts == max_retries


def test_retry_backoff_uses_injected_sleep():
    reg, _ = flaky_registry(5)
    slept = []
    retry_loop(reg, ToolCall("flaky", {}, "r"), 3, sleep=slept.append, backoff=1.0)
    assert slept == [1.0, 2.0]
    with pytest.raises(ValueError):
        retry_loop(reg, ToolCall("flaky", {}, "r"), 0)


def test_env_fault_is_retryable_then_exhausted(tmp_path):
    regs, env, _ = registries(tmp_path)
    env.inject_fault(FaultSpec(FaultKind.NETWORK_DOWN))
    result = retry_loop(regs[SpecialistRole.INFRASTRUCTURE_MANAGER],
                        ToolCall("send_email", {"to": "a@b.c", "subject": "s", "body": "b"}, "e"), 3)
    assert result.error_kind == "RetriesExhausted" and result.payload["fault"] == "NetworkDown"


def test_duplicate_tool_rejected():
    t = Tool(ToolSignature("x"), lambda: ("", {}))
    with pytest.raises(ValueError):
        Registry(SpecialistRole.JUDGE, [t, t])


def test_signature_type_checks():
    sig = ToolSignature("t", (Param("n", "integer"), Param("flag", "boolean", False)))
    assert sig.validate({"n": 1}) is None
    assert sig.validate({"n": True}) is not None
    assert sig.validate({"n": 1, "flag": "yes"}) is not None


@given(st.lists(st.sampled_from(["probe", "env_diff", "exec_command", "nope"]), max_size=8))
def test_ndjson_round_trip(tmp_path_factory, names):
    regs, _, _ = registries(tmp_path_factory.mktemp("nd"))
    inv = regs[SpecialistRole.INVESTIGATOR]
    calls = [ToolCall(n, {"domain": "FileSystem", "selector": "*"} if n == "probe" else {}, f"id-{i}")
             for i, n in enumerate(names)]
    src = io.StringIO("".join(json.dumps(c.to_dict()) + "\n" for c in calls) + "not json\n")
    out = io.StringIO()
    assert serve_ndjson(inv, src, out) == len(calls) + 1
    results = [ToolResult.from_dict(json.loads(line)) for line in out.getvalue().splitlines()]
    assert [r.call_id for r in results[:-1]] == [c.call_id for c in calls]
    assert results[-1].error_kind == "BadRequest"
    for c, r in zip(calls, results):
        assert ToolResult.from_dict(r.to_dict()) == r
        assert (r.error_kind == "UnknownTool") == (c.tool not in inv)
