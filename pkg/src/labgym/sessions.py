"""Terminal session manager: PTY-backed command execution with buffered output.

Each session runs at most one command at a time. Output is read from the PTY
by a dedicated reader thread, split on newlines, timestamped, and kept in a
bounded buffer (newest 10,000 lines). Sessions survive command completion and
are reusable until closed.
"""
import errno
import fcntl
import os
import pty
import secrets
import signal
import struct
import subprocess
import termios
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

import psutil

BUFFER_CAP = 10_000
WAIT_TIMEOUT = 10.0  # run_command(wait_for_completion=True) blocks at most this long
GRACE_PERIOD = 3.0  # seconds between SIGTERM and SIGKILL on graceful kill


class SessionError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class OutputBuffer:
    """Bounded line buffer; trimming drops only the oldest lines."""

    cap: int = BUFFER_CAP
    lines: Deque[Tuple[float, str]] = field(default_factory=deque)
    total_appended: int = 0

    def append(self, text: str, ts: Optional[float] = None) -> None:
        if ts is None:
            ts = time.time()
        if self.lines and ts < self.lines[-1][0]:
            ts = self.lines[-1][0]  # keep timestamps non-decreasing
        self.lines.append((ts, text))
        self.total_appended += 1
        while len(self.lines) > self.cap:
            self.lines.popleft()

    def clear(self) -> None:
        self.lines.clear()

    def snapshot(self) -> List[Tuple[float, str]]:
        return list(self.lines)


@dataclass
class IdleReport:
    idle: bool
    children: List[Dict[str, str]] = field(default_factory=list)


class Session:
    def __init__(self, session_id: str, cwd: str, shell: str = "/bin/bash"):
        self.session_id = session_id
        self.created_at = time.time()
        self.cwd = cwd
        self.shell = shell
        self.buffer = OutputBuffer()
        self.current_command: Optional[str] = None
        self.last_exit_code: Optional[int] = None
        self._proc: Optional[subprocess.Popen] = None
        self._master_fd: Optional[int] = None
        self._reader: Optional[threading.Thread] = None
        self._lock = threading.Lock()

    @property
    def running(self) -> bool:
        proc = self._proc
        return proc is not None and proc.poll() is None

    def start(self, command: str) -> None:
        with self._lock:
            if self.running:
                raise SessionError(
                    "session-busy",
                    f"session {self.session_id} is already running: {self.current_command}",
                )
            master_fd, slave_fd = pty.openpty()
            # wide terminal so programs don't wrap their own output
            fcntl.ioctl(slave_fd, termios.TIOCSWINSZ, struct.pack("HHHH", 50, 500, 0, 0))
            try:
                proc = subprocess.Popen(
                    [self.shell, "-c", command],
                    stdin=slave_fd,
                    stdout=slave_fd,
                    stderr=slave_fd,
                    cwd=self.cwd,
                    start_new_session=True,
                    close_fds=True,
                )
            except OSError as exc:
                os.close(master_fd)
                os.close(slave_fd)
                raise SessionError("spawn-failure", f"cannot spawn command: {exc}") from exc
            os.close(slave_fd)
            self._proc = proc
            self._master_fd = master_fd
            self.current_command = command
            self.last_exit_code = None
            self._reader = threading.Thread(
                target=self._read_output, args=(master_fd, proc), daemon=True
            )
            self._reader.start()

    def _read_output(self, master_fd: int, proc: subprocess.Popen) -> None:
        partial = ""
        try:
            while True:
                try:
                    chunk = os.read(master_fd, 65536)
                except OSError as exc:
                    if exc.errno == errno.EIO:  # PTY slave closed: command done
                        break
                    raise
                if not chunk:
                    break
                partial += chunk.decode("utf-8", errors="replace")
                *complete, partial = partial.replace("\r\n", "\n").split("\n")
                for line in complete:
                    self.buffer.append(line.rstrip("\r"))
        finally:
            if partial:  # flush the held trailing line at command exit
                self.buffer.append(partial.rstrip("\r"))
            proc.wait()
            self.last_exit_code = proc.returncode
            try:
                os.close(master_fd)
            except OSError:
                pass

    def wait(self, timeout: float) -> bool:
        """Wait for command exit; True if it finished within the timeout."""
        proc = self._proc
        if proc is None:
            return True
        try:
            proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            return False
        if self._reader is not None:
            self._reader.join(timeout=2.0)
        return True

    def send_input(self, text: str) -> None:
        if not self.running or self._master_fd is None:
            raise SessionError(
                "session-idle", f"session {self.session_id} is not running a command"
            )
        os.write(self._master_fd, (text + "\n").encode("utf-8"))

    def processes(self) -> List[psutil.Process]:
        proc = self._proc
        if proc is None or proc.poll() is not None:
            return []
        try:
            root = psutil.Process(proc.pid)
            return [root] + root.children(recursive=True)
        except psutil.NoSuchProcess:
            return []

    def idle_report(self) -> IdleReport:
        procs = self.processes()
        if not procs:
            return IdleReport(idle=True)
        children = []
        for p in procs:
            try:
                children.append(
                    {
                        "pid": p.pid,
                        "cmdline": " ".join(p.cmdline()) or p.name(),
                        "cpu_state": p.status(),
                    }
                )
            except psutil.NoSuchProcess:
                continue
        return IdleReport(idle=not children, children=children)

    def kill(self, force: bool = False) -> None:
        """Terminate the session's whole process group; session stays open."""
        proc = self._proc
        if proc is None or proc.poll() is not None:
            return
        pgid = proc.pid  # start_new_session makes the child its own group leader
        if not force:
            self._signal_group(pgid, signal.SIGTERM)
            deadline = time.time() + GRACE_PERIOD
            while time.time() < deadline:
                if proc.poll() is not None and not self.processes():
                    break
                time.sleep(0.05)
        self._signal_group(pgid, signal.SIGKILL)
        for p in self.processes():  # stragglers that escaped the group
            try:
                p.kill()
            except psutil.NoSuchProcess:
                pass
        try:
            proc.wait(timeout=5.0)
        except subprocess.TimeoutExpired:
            pass
        if self._reader is not None:
            self._reader.join(timeout=2.0)

    @staticmethod
    def _signal_group(pgid: int, sig: int) -> None:
        try:
            os.killpg(pgid, sig)
        except (ProcessLookupError, PermissionError):
            pass

    def status(self) -> Dict[str, object]:
        return {
            "session_id": self.session_id,
            "running": self.running,
            "current_command": self.current_command,
            "buffer_lines": len(self.buffer.lines),
            "created_at": self.created_at,
            "exit_code": self.last_exit_code,
        }


def slice_output(
    lines: List[Tuple[float, str]],
    start_lines: Optional[int] = None,
    end_lines: Optional[int] = None,
    since_timestamp: Optional[float] = None,
) -> List[Tuple[float, str]]:
    """Slice an output buffer.

    since_timestamp, when given, overrides the line window and returns lines
    strictly newer than it. Otherwise offsets count from the buffer end:
    start_lines=N alone means the last N lines; with end_lines=M the slice is
    [N, M) from the end (inclusive of N, exclusive of M).
    """
    if since_timestamp is not None:
        return [entry for entry in lines if entry[0] > since_timestamp]
    if start_lines is None:
        return list(lines)
    if start_lines < 1:
        raise SessionError("invalid-window", f"start_lines must be >= 1, got {start_lines}")
    n = len(lines)
    start_idx = max(n - start_lines, 0)
    if end_lines is None:
        return list(lines[start_idx:])
    if end_lines < 1:
        raise SessionError("invalid-window", f"end_lines must be >= 1, got {end_lines}")
    if start_lines <= end_lines:
        raise SessionError(
            "invalid-window",
            f"start_lines ({start_lines}) must exceed end_lines ({end_lines}) "
            "when counted from the buffer end",
        )
    end_idx = max(n - end_lines, 0)
    return list(lines[start_idx:end_idx])


class SessionManager:
    """Session table for one daemon; per-session mutations are serialized."""

    def __init__(self, workspace: str, shell: str = "/bin/bash", max_sessions: int = 128):
        self.workspace = workspace
        self.shell = shell
        self.max_sessions = max_sessions
        self._sessions: Dict[str, Session] = {}
        self._lock = threading.Lock()

    def _get(self, session_id: str) -> Session:
        session = self._sessions.get(session_id)
        if session is None:
            raise SessionError("session-missing", f"no such session: {session_id}")
        return session

    def create(self, session_id: Optional[str] = None) -> Session:
        with self._lock:
            if session_id is None:
                session_id = secrets.token_hex(4)
                while session_id in self._sessions:
                    session_id = secrets.token_hex(4)
            elif session_id in self._sessions:
                raise SessionError("duplicate-id", f"session already exists: {session_id}")
            if len(self._sessions) >= self.max_sessions:
                raise SessionError("too-many-sessions", "session limit reached")
            session = Session(session_id, cwd=self.workspace, shell=self.shell)
            self._sessions[session_id] = session
            return session

    def run_command(
        self,
        command: str,
        session_id: Optional[str] = None,
        wait_for_completion: bool = False,
    ) -> Dict[str, object]:
        if session_id is None or session_id not in self._sessions:
            session = self.create(session_id)
        else:
            session = self._get(session_id)
        session.start(command)
        if not wait_for_completion:
            return {"session_id": session.session_id, "started": True, "status": "running"}
        finished = session.wait(WAIT_TIMEOUT)
        if not finished:
            session.kill(force=True)
            return {
                "session_id": session.session_id,
                "started": True,
                "status": "timeout",
                "output_tail": [t for _, t in session.buffer.snapshot()[-50:]],
            }
        return {
            "session_id": session.session_id,
            "started": True,
            "status": "finished",
            "exit_code": session.last_exit_code,
            "output_tail": [t for _, t in session.buffer.snapshot()[-50:]],
        }

    def send_input(self, session_id: str, text: str) -> None:
        self._get(session_id).send_input(text)

    def get_output(
        self,
        session_id: str,
        start_lines: Optional[int] = None,
        end_lines: Optional[int] = None,
        since_timestamp: Optional[float] = None,
    ) -> Dict[str, object]:
        session = self._get(session_id)
        lines = session.buffer.snapshot()
        warning = None
        if since_timestamp is None and start_lines is not None and start_lines == 1:
            # agents hit this often; treat as "last 1 line" instead of failing
            warning = "start_lines should be >= 2; interpreting 1 as the last line"
        selected = slice_output(lines, start_lines, end_lines, since_timestamp)
        return {
            "session_id": session_id,
            "lines": [text for _, text in selected],
            "newest_timestamp": lines[-1][0] if lines else None,
            "total_lines": len(lines),
            "warning": warning,
        }

    def status(self, session_id: str) -> Dict[str, object]:
        return self._get(session_id).status()

    def idle(self, session_id: str) -> IdleReport:
        return self._get(session_id).idle_report()

    def clear_buffer(self, session_id: str) -> None:
        self._get(session_id).buffer.clear()

    def kill_processes(self, session_id: str, force: bool = False) -> None:
        self._get(session_id).kill(force=force)

    def close(self, session_id: str) -> None:
        session = self._get(session_id)
        session.kill(force=True)
        with self._lock:
            self._sessions.pop(session_id, None)

    def close_all(self) -> int:
        with self._lock:
            ids = list(self._sessions)
        for sid in ids:
            try:
                self.close(sid)
            except SessionError:
                pass
        return len(ids)

    def list_sessions(self, computer_ip: str = "localhost") -> Dict[str, Dict[str, object]]:
        out = {}
        for sid, session in list(self._sessions.items()):
            out[f"{computer_ip}:{sid}"] = {
                "running": session.running,
                "current_command": session.current_command,
                "idle": session.idle_report().idle,
            }
        return out

    def __len__(self) -> int:
        return len(self._sessions)
