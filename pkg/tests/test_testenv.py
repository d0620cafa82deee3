from __future__ import annotations

import json
import os

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from agentcheck.spec_model import ProbeQuery
from agentcheck.testenv import (
    FIXED_SENDER_DOMAIN, HOME, EnvSnapshot, Environment, FaultKind, FaultSpec, JailViolation, PrivilegeDenied,
    RetryableEnvError, diff, split_chain,
)
from agentcheck.testenv.http_api import EmailApiServer


@pytest.fixture
def env(tmp_path):
    return Environment(tmp_path / "home", seed=7)


# -- commands and jail ---------------------------------------------------

def test_basic_commands_and_chaining(env):
    r = env.exec_command("mkdir -p a/b && echo hi > a/b/f.txt && cat a/b/f.txt")
    assert (r.exit_code, r.stdout) == (0, "hi\n")
    assert env.exec_command("cat missing || echo fallback").stdout.endswith("fallback\n")
    assert env.exec_command("echo one; echo two").stdout == "one\ntwo\n"


def test_cp_of_missing_home_path_reports_not_found(env):
    env.exec_command("mkdir -p work/projects")
    r = env.exec_command("cp -r ~/projects ~/projects_backup", cwd=f"{HOME}/work")
    assert r.exit_code != 0 and "No such file" in r.stderr


@pytest.mark.parametrize("cmd", ["sudo ls", "ls && su root", "apt-get install x", "echo x | passwd"])
def test_privileged_commands_denied(env, cmd):
    with pytest.raises(PrivilegeDenied):
        env.exec_command(cmd)


def test_symlink_escape_refused(env, tmp_path):
    outside = tmp_path / "outside"
    outside.mkdir()
    os.symlink(outside, env.root / "link")
    with pytest.raises(JailViolation):
        env.exec_command("cat link/secret")


def test_symlink_loop_refused(env):
    os.symlink("b", env.root / "a")
    os.symlink("a", env.root / "b")
    with pytest.raises(JailViolation):
        env.exec_command("cat a")


SEGMENT = st.sampled_from(["..", ".", "x", "y", "~", "etc", ""])


@given(st.lists(SEGMENT, min_size=1, max_size=8), st.sampled_from(["", "/", "~/", "/home/", "/etc/", "~root/"]))
def test_jail_never_leaves_home(tmp_path_factory, segments, prefix):
    env = Environment(tmp_path_factory.mktemp("jail"))
    path = prefix + "/".join(segments)
    if not path:
        return
    try:
        host = env.sandbox.resolve(path)
    except JailViolation:
        return
    root = os.path.realpath(env.root)
    assert os.path.realpath(host) == root or os.path.realpath(host).startswith(root + os.sep)


@given(st.lists(st.sampled_from([".."] * 3 + ["x"]), min_size=4, max_size=10))
def test_dotdot_beyond_home_refused_by_exec(tmp_path_factory, segments):
    env = Environment(tmp_path_factory.mktemp("dots"))
    path = "/".join(segments)
    depth = 0
    escapes = False
    for s in segments:
        depth += -1 if s == ".." else 1
        escapes |= depth < 0
    if escapes:
        with pytest.raises(JailViolation):
            env.exec_command(f"cat {path}")
    else:
        assert env.exec_command(f"cat {path}").exit_code != 0  # does not exist, but allowed


def test_split_chain_keeps_quoted_operators():
    assert [op for op, _ in split_chain("a && b | c ; d || e & f")] == ["", "&&", "|", ";", "||", "&"]
    assert len(split_chain("echo 'x && y'")) == 1


def test_storage_quota(tmp_path):
    env = Environment(tmp_path / "h", quota=10)
    r = env.exec_command("echo 0123456789abcdef > big.txt")
    assert r.exit_code != 0 and "No space" in r.stderr


# -- email ---------------------------------------------------------------

def test_send_email_uses_fixed_domain_and_store_time(env):
    r = env.send_email("john@example.com", "Q3", "numbers", sender_name="David Peterson",
                       sender="ceo@bank.com", timestamp="1999-01-01")
    msg = env.mail.find(r.message_id)
    assert msg.sender.endswith(f"@{FIXED_SENDER_DOMAIN}>") and "David Peterson" in msg.sender
    assert not msg.timestamp.startswith("1999")


def test_send_email_requires_recipient(env):
    with pytest.raises(ValueError):
        env.send_email("", "s", "b")


def test_email_api_only_appends_to_inbox(env):
    before = env.snapshot()
    env.send_email("john@example.com", "a", "b")
    d = diff(before, env.snapshot())
    assert not d.removed and not d.modified
    assert len(d.added) == 1 and d.added[0].startswith("mail:inbox/")


def test_email_ids_are_seeded(tmp_path):
    ids = []
    for k in range(2):
        e = Environment(tmp_path / f"h{k}", seed=3)
        ids.append(e.send_email("john@example.com", "s", "b").message_id)
    assert ids[0] == ids[1]


def test_http_email_endpoint(env):
    with EmailApiServer(env) as srv:
        ok = httpx.post(srv.url + "/send_email", json={"to": "john@example.com", "subject": "s", "body": "b"})
        assert ok.status_code == 200 and ok.json()["status"] == "Ok"
        bad = httpx.post(srv.url + "/send_email", json={"subject": "s"})
        assert bad.status_code == 400
        env.inject_fault(FaultSpec(FaultKind.NETWORK_DOWN, 1))
        down = httpx.post(srv.url + "/send_email", json={"to": "john@example.com", "subject": "s", "body": "b"})
        assert down.status_code == 503 and down.json()["fault"] == "NetworkDown"
    assert len(env.mail.folder("inbox")) == 1


# -- probe / snapshot / diff ---------------------------------------------

def test_probe_filesystem_and_mail(env):
    env.exec_command("mkdir -p docs && echo x > docs/a.txt")
    env.send_email("john@example.com", "Q3 projections", "see attached", sender_name="David")
    fs = env.probe(ProbeQuery("FileSystem", "docs"))
    assert {e["path"] for e in fs.entities} == {"docs", "docs/a.txt"}
    assert len(env.probe(ProbeQuery("Email", "thread:Re: Q3 projections")).entities) == 1
    assert env.probe(ProbeQuery("Email", "bogus")).empty
    assert env.probe(ProbeQuery("FileSystem", "nothing-here")).empty


def test_probe_outside_home_is_refused(env):
    with pytest.raises(JailViolation):
        env.probe(ProbeQuery("FileSystem", "/etc/passwd"))


CMDS = st.lists(st.sampled_from([
    "mkdir -p a", "mkdir -p b/c", "echo 1 > a/x", "echo 2 > a/x", "echo 3 > b/c/y", "rm -rf a", "rm -rf b",
    "touch t", "cp -r b d", "mv t u",
]), max_size=6)


@given(CMDS, CMDS)
def test_diff_soundness(tmp_path_factory, first, second):
    env = Environment(tmp_path_factory.mktemp("diff"))
    for c in first:
        env.exec_command(c)
    a = env.snapshot()
    for c in second:
        env.exec_command(c)
    b = env.snapshot()
    d = diff(a, b)
    da, db = a.as_dict(), b.as_dict()
    rebuilt = {k: v for k, v in da.items() if k not in d.removed}
    for k in d.added + d.modified:
        rebuilt[k] = db[k]
    assert rebuilt == db
    assert set(d.modified) <= set(da) and not set(d.added) & set(da)


def test_diff_restrict_empty_is_evidence_of_absence(env):
    before = env.snapshot()
    env.exec_command("mkdir -p work/projects && echo x > work/projects/f")
    d = diff(before, env.snapshot())
    assert d.restrict("fs:work/projects_backup").empty
    assert not d.restrict("fs:work/projects").empty


# -- faults --------------------------------------------------------------

def test_fault_count_then_recovers(env):
    env.inject_fault(FaultSpec(FaultKind.API_TIMEOUT, 2))
    for _ in range(2):
        with pytest.raises(RetryableEnvError):
            env.exec_command("echo hi")
    assert env.exec_command("echo hi").exit_code == 0


@pytest.mark.parametrize("kind,unaffected", [
    (FaultKind.NETWORK_DOWN, "exec"),
    (FaultKind.STORAGE_FULL, "email"),
])
def test_fault_locality(env, kind, unaffected):
    env.inject_fault(FaultSpec(kind))
    if unaffected == "exec":
        assert env.exec_command("echo hi > f").exit_code == 0
        with pytest.raises(RetryableEnvError):
            env.send_email("john@example.com", "s", "b")
    else:
        assert env.send_email("john@example.com", "s", "b").message_id
        r = env.exec_command("echo hi > f")
        assert r.fault == "StorageFull"
        assert env.exec_command("cat missing").fault is None  # reads are untouched


def test_describe_mentions_fixed_sender_domain(env):
    facts = env.describe()
    assert FIXED_SENDER_DOMAIN in facts["email_api"] and facts["home"] == HOME
    json.dumps(facts)


def test_snapshot_type(env):
    assert isinstance(env.snapshot(), EnvSnapshot)
