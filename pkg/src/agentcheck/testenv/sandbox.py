"""Filesystem jail rooted at a host directory that plays the role of /home/user.

Commands are interpreted in-process by a small POSIX-ish shell so that every
path argument goes through the jail resolver; nothing is handed to a real
shell.  Each ``exec_command`` call is its own session (``cd`` does not persist).
"""

from __future__ import annotations

import fnmatch
import os
import posixpath
import re
import shlex
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .faults import FaultKind, FaultSet

HOME = "/home/user"
DEFAULT_QUOTA = 64 * 1024 * 1024
MAX_SYMLINK_HOPS = 40

CHAIN_OPERATORS = ("&&", "||", ";", "|", "&")
PRIVILEGED = frozenset({"sudo", "su", "doas", "chown", "chroot", "mount", "umount", "apt", "apt-get", "passwd"})


class JailViolation(Exception):
    pass


class PrivilegeDenied(Exception):
    pass


class _CmdError(Exception):
    def __init__(self, message: str, code: int = 1) -> None:
        super().__init__(message)
        self.code = code


class _NoSpace(_CmdError):
    def __init__(self, path: str, fault: Optional[FaultKind] = None) -> None:
        super().__init__(f"{path}: No space left on device")
        self.fault = fault


@dataclass(frozen=True)
class CmdResult:
    exit_code: int
    stdout: str
    stderr: str
    # Name of the environment fault that made the command fail, if any.
    fault: Optional[str] = None

    def to_dict(self) -> dict:
        return {"exit_code": self.exit_code, "stdout": self.stdout, "stderr": self.stderr, "fault": self.fault}


def split_chain(cmdline: str) -> list[tuple[str, list[str]]]:
    """Tokenize and split on chain operators.

    Returns ``[(operator_before, tokens), ...]``; the first operator is ``""``.
    Quoted operators are not split on.
    """
    # Non-posix mode keeps quotes on tokens, so a quoted "&&" never looks bare.
    lex = shlex.shlex(cmdline, posix=False, punctuation_chars=True)
    segments: list[tuple[str, list[str]]] = []
    op, cur = "", []
    for tok in lex:
        if tok in CHAIN_OPERATORS:
            segments.append((op, cur))
            op, cur = tok, []
        elif tok in (">", ">>", "<"):
            cur.append(tok)
        else:
            cur.append(_unquote(tok))
    segments.append((op, cur))
    return [(o, t) for o, t in segments if t]


def _unquote(tok: str) -> str:
    if len(tok) >= 2 and tok[0] == tok[-1] and tok[0] in "'\"":
        body = tok[1:-1]
        return body.replace('\\"', '"') if tok[0] == '"' else body
    return tok


class Sandbox:
    """Jailed home directory with a byte quota."""

    def __init__(self, root: Path | str, quota: int = DEFAULT_QUOTA, faults: Optional[FaultSet] = None,
                 on_fault: Optional[Callable[[FaultKind, str], None]] = None) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._root_real = Path(os.path.realpath(self.root))
        self.quota = quota
        self.faults = faults if faults is not None else FaultSet()
        self._on_fault = on_fault

    # -- path handling -------------------------------------------------

    def virtual(self, path: str, cwd: str = HOME) -> str:
        """Normalize ``path`` to an absolute virtual path inside HOME."""
        if not path:
            raise JailViolation("empty path")
        if path == "~" or path.startswith("~/"):
            path = HOME + path[1:]
        elif path.startswith("~"):
            raise JailViolation(f"{path}: other users' homes are outside the jail")
        if not path.startswith("/"):
            path = posixpath.join(cwd, path)
        norm = posixpath.normpath(path)
        if norm.startswith("//"):
            norm = "/" + norm.lstrip("/")
        if norm != HOME and not norm.startswith(HOME + "/"):
            raise JailViolation(f"{path}: outside {HOME}")
        return norm

    def relpath(self, virtual_path: str) -> str:
        return "" if virtual_path == HOME else virtual_path[len(HOME) + 1:]

    def resolve(self, path: str, cwd: str = HOME) -> Path:
        """Host path for ``path``, following symlinks without leaving the jail."""
        rel = self.relpath(self.virtual(path, cwd))
        parts = [p for p in rel.split("/") if p]
        root = self._root_real
        cur = root
        hops = 0
        while parts:
            p = parts.pop(0)
            if p in ("", "."):
                continue
            if p == "..":
                if cur == root:
                    raise JailViolation(f"{path}: escapes {HOME}")
                cur = cur.parent
                continue
            nxt = cur / p
            if nxt.is_symlink():
                hops += 1
                if hops > MAX_SYMLINK_HOPS:
                    raise JailViolation(f"{path}: too many levels of symbolic links")
                target = os.readlink(nxt)
                if os.path.isabs(target):
                    try:
                        rel_t = Path(target).relative_to(root)
                    except ValueError:
                        raise JailViolation(f"{path}: symlink points outside {HOME}") from None
                    cur = root
                    parts = list(rel_t.parts) + parts
                else:
                    parts = [q for q in target.split("/") if q] + parts
                continue
            cur = nxt
        return cur

    def usage(self) -> int:
        total = 0
        for dirpath, _dirs, files in os.walk(self.root):
            for f in files:
                p = os.path.join(dirpath, f)
                if not os.path.islink(p):
                    total += os.path.getsize(p)
        return total

    # -- guarded writes ------------------------------------------------

    def _check_write(self, target: Path, new_bytes: int, creates: bool, shown: str) -> None:
        if self.faults.peek("fs_write") is not None and (creates or new_bytes > 0):
            kind = self.faults.trigger("fs_write")
            if self._on_fault:
                self._on_fault(kind, "fs_write")
            raise _NoSpace(shown, kind)
        old = target.stat().st_size if target.is_file() else 0
        if self.usage() - old + new_bytes > self.quota:
            raise _NoSpace(shown)

    def write_file(self, path: str, data: str, cwd: str = HOME, append: bool = False) -> None:
        target = self.resolve(path, cwd)
        if target.is_dir():
            raise _CmdError(f"{path}: Is a directory")
        if not target.parent.is_dir():
            raise _CmdError(f"{path}: No such file or directory")
        existing = target.read_text() if (append and target.is_file()) else ""
        content = existing + data
        self._check_write(target, len(content.encode()), not target.exists(), path)
        target.write_text(content)

    # -- command execution ---------------------------------------------

    def exec_command(self, cmdline: str, cwd: str = HOME) -> CmdResult:
        """Run ``cmdline`` inside the jail.

        Raises JailViolation / PrivilegeDenied; ordinary command failures come
        back as a nonzero exit code.
        """
        if not cmdline or not cmdline.strip():
            raise ValueError("empty command line")
        session = _Session(self, self.virtual(cwd))
        return session.run(cmdline)


class _Session:
    def __init__(self, box: Sandbox, cwd: str) -> None:
        self.box = box
        self.cwd = cwd
        self.fault: Optional[str] = None

    def run(self, cmdline: str) -> CmdResult:
        try:
            segments = split_chain(cmdline)
        except ValueError as e:
            return CmdResult(2, "", f"syntax error: {e}\n")
        for _op, tokens in segments:
            if tokens[0] in PRIVILEGED:
                raise PrivilegeDenied(f"{tokens[0]}: privileged operations are not available")

        out_all, err_all = [], []
        status = 0
        pipe_in: Optional[str] = None
        for i, (op, tokens) in enumerate(segments):
            if op == "&&" and status != 0:
                continue
            if op == "||" and status == 0:
                continue
            stdin = pipe_in if op == "|" else None
            piped_out = i + 1 < len(segments) and segments[i + 1][0] == "|"
            status, out, err = self._one(tokens, stdin)
            err_all.append(err)
            if piped_out:
                pipe_in = out
            else:
                out_all.append(out)
                pipe_in = None
        return CmdResult(status, "".join(out_all), "".join(err_all), self.fault)

    def _one(self, tokens: list[str], stdin: Optional[str]) -> tuple[int, str, str]:
        args, redirect, append, infile = [], None, False, None
        it = iter(range(len(tokens)))
        for i in it:
            t = tokens[i]
            if t in (">", ">>", "<") and i + 1 < len(tokens):
                target = tokens[i + 1]
                next(it)
                if t == "<":
                    infile = target
                else:
                    redirect, append = target, t == ">>"
            else:
                args.append(t)
        if not args:
            return 2, "", "syntax error: missing command\n"
        name, argv = args[0], args[1:]
        handler = getattr(self, "_cmd_" + name.replace("-", "_"), None)
        if handler is None:
            return 127, "", f"{name}: command not found\n"
        try:
            if infile is not None:
                src = self.box.resolve(infile, self.cwd)
                if not src.is_file():
                    raise _CmdError(f"{infile}: No such file or directory")
                stdin = src.read_text()
            out = handler(argv, stdin)
            if redirect is not None and redirect != "/dev/null":
                self.box.write_file(redirect, out, self.cwd, append=append)
                out = ""
            elif redirect == "/dev/null":
                out = ""
            return 0, out, ""
        except _NoSpace as e:
            if e.fault is not None:
                self.fault = e.fault.value
            return 1, "", f"{name}: {e}\n"
        except _CmdError as e:
            return e.code, "", f"{name}: {e}\n"

    # -- helpers -------------------------------------------------------

    def _path(self, p: str) -> Path:
        return self.box.resolve(p, self.cwd)

    @staticmethod
    def _flags(argv: list[str]) -> tuple[set[str], list[str]]:
        flags, rest = set(), []
        for a in argv:
            if a.startswith("-") and len(a) > 1 and not rest:
                flags |= set(a[1:])
            else:
                rest.append(a)
        return flags, rest

    # -- commands ------------------------------------------------------

    def _cmd_true(self, argv, stdin):
        return ""

    def _cmd_false(self, argv, stdin):
        raise _CmdError("", 1)

    def _cmd_sleep(self, argv, stdin):
        return ""

    def _cmd_pwd(self, argv, stdin):
        return self.cwd + "\n"

    def _cmd_cd(self, argv, stdin):
        dest = argv[0] if argv else HOME
        virt = self.box.virtual(dest, self.cwd)
        if not self.box.resolve(virt).is_dir():
            raise _CmdError(f"{dest}: No such file or directory")
        self.cwd = virt
        return ""

    def _cmd_echo(self, argv, stdin):
        if argv and argv[0] == "-n":
            return " ".join(argv[1:])
        return " ".join(argv) + "\n"

    def _cmd_printf(self, argv, stdin):
        if not argv:
            return ""
        fmt = argv[0].encode().decode("unicode_escape")
        try:
            return fmt % tuple(argv[1:]) if argv[1:] else fmt
        except TypeError:
            return fmt

    def _cmd_cat(self, argv, stdin):
        if not argv:
            return stdin or ""
        out = []
        for a in argv:
            p = self._path(a)
            if p.is_dir():
                raise _CmdError(f"{a}: Is a directory")
            if not p.is_file():
                raise _CmdError(f"{a}: No such file or directory")
            out.append(p.read_text())
        return "".join(out)

    def _cmd_ls(self, argv, stdin):
        flags, paths = self._flags(argv)
        paths = paths or ["."]
        out = []
        for a in paths:
            p = self._path(a)
            if not p.exists():
                raise _CmdError(f"cannot access '{a}': No such file or directory", 2)
            if p.is_dir():
                names = sorted(n for n in os.listdir(p) if "a" in flags or not n.startswith("."))
                if len(paths) > 1:
                    out.append(f"{a}:")
                out.extend(names)
            else:
                out.append(a)
        return "".join(line + "\n" for line in out)

    def _cmd_mkdir(self, argv, stdin):
        flags, paths = self._flags(argv)
        if not paths:
            raise _CmdError("missing operand")
        for a in paths:
            p = self._path(a)
            if p.exists():
                if "p" in flags and p.is_dir():
                    continue
                raise _CmdError(f"cannot create directory '{a}': File exists")
            if not p.parent.exists() and "p" not in flags:
                raise _CmdError(f"cannot create directory '{a}': No such file or directory")
            # mkdir -p creates every missing ancestor; each must stay in the jail.
            missing = [q for q in [p, *p.parents] if not q.exists()]
            for q in reversed(missing):
                self.box._check_write(q, 0, True, a)
                q.mkdir()
        return ""

    def _cmd_touch(self, argv, stdin):
        if not argv:
            raise _CmdError("missing file operand")
        for a in argv:
            p = self._path(a)
            if p.exists():
                continue
            if not p.parent.is_dir():
                raise _CmdError(f"cannot touch '{a}': No such file or directory")
            self.box._check_write(p, 0, True, a)
            p.touch()
        return ""

    def _cmd_tee(self, argv, stdin):
        flags, paths = self._flags(argv)
        data = stdin or ""
        for a in paths:
            self.box.write_file(a, data, self.cwd, append="a" in flags)
        return data

    def _cmd_rm(self, argv, stdin):
        flags, paths = self._flags(argv)
        for a in paths:
            p = self._path(a)
            if not p.exists() and not p.is_symlink():
                if "f" in flags:
                    continue
                raise _CmdError(f"cannot remove '{a}': No such file or directory")
            if p == self.box._root_real:
                raise _CmdError(f"refusing to remove '{a}'")
            if p.is_dir() and not p.is_symlink():
                if not flags & {"r", "R"}:
                    raise _CmdError(f"cannot remove '{a}': Is a directory")
                shutil.rmtree(p)
            else:
                p.unlink()
        return ""

    def _copy_tree_size(self, src: Path) -> int:
        if src.is_file():
            return src.stat().st_size
        return sum(f.stat().st_size for f in src.rglob("*") if f.is_file() and not f.is_symlink())

    def _cmd_cp(self, argv, stdin):
        flags, paths = self._flags(argv)
        if len(paths) < 2:
            raise _CmdError("missing destination file operand")
        *srcs, dst_arg = paths
        dst = self._path(dst_arg)
        for a in srcs:
            src = self._path(a)
            if not src.exists():
                raise _CmdError(f"cannot stat '{a}': No such file or directory")
            target = dst / src.name if dst.is_dir() else dst
            if not target.parent.is_dir():
                raise _CmdError(f"cannot create '{dst_arg}': No such file or directory")
            if src.is_dir():
                if not flags & {"r", "R", "a"}:
                    raise _CmdError(f"-r not specified; omitting directory '{a}'")
                self.box._check_write(target, self._copy_tree_size(src), True, dst_arg)
                shutil.copytree(src, target, symlinks=True, dirs_exist_ok=True)
            else:
                self.box._check_write(target, src.stat().st_size, not target.exists(), dst_arg)
                shutil.copyfile(src, target)
        return ""

    def _cmd_mv(self, argv, stdin):
        _flags, paths = self._flags(argv)
        if len(paths) != 2:
            raise _CmdError("expected SOURCE DEST")
        src, dst = self._path(paths[0]), self._path(paths[1])
        if not src.exists():
            raise _CmdError(f"cannot stat '{paths[0]}': No such file or directory")
        target = dst / src.name if dst.is_dir() else dst
        if not target.parent.is_dir():
            raise _CmdError(f"cannot move to '{paths[1]}': No such file or directory")
        os.replace(src, target)
        return ""

    def _cmd_wc(self, argv, stdin):
        flags, paths = self._flags(argv)
        text = self._cmd_cat(paths, stdin)
        if "l" in flags:
            return f"{text.count(chr(10))}\n"
        return f"{text.count(chr(10))} {len(text.split())} {len(text.encode())}\n"

    def _cmd_grep(self, argv, stdin):
        flags, rest = self._flags(argv)
        if not rest:
            raise _CmdError("usage: grep PATTERN [FILE...]", 2)
        pat = re.compile(rest[0], re.IGNORECASE if "i" in flags else 0)
        text = self._cmd_cat(rest[1:], stdin)
        hits = [line for line in text.splitlines() if pat.search(line)]
        if not hits:
            raise _CmdError("", 1)
        return "".join(h + "\n" for h in hits)

    def _cmd_find(self, argv, stdin):
        start = argv[0] if argv and not argv[0].startswith("-") else "."
        pattern = None
        if "-name" in argv:
            pattern = argv[argv.index("-name") + 1]
        base = self._path(start)
        if not base.exists():
            raise _CmdError(f"'{start}': No such file or directory")
        out = [start]
        for dirpath, dirs, files in os.walk(base):
            dirs.sort()
            for n in sorted(dirs + files):
                rel = os.path.relpath(os.path.join(dirpath, n), base)
                out.append(posixpath.join(start, rel))
        if pattern is not None:
            out = [o for o in out if fnmatch.fnmatch(posixpath.basename(o), pattern)]
        return "".join(o + "\n" for o in out)
