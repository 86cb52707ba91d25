"""Per-machine HTTP daemon hosting a session manager.

Exposes one endpoint per command action under /v1/session/, plus a health
endpoint. Bodies are the protocol module's JSON encodings; execution errors
come back as status=error observations over HTTP 200.
"""
import json
import os
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from . import protocol
from .protocol import Action, Family, Observation, ProtocolError, error_observation, ok_observation
from .sessions import SessionError, SessionManager

# endpoint suffix -> canonical action name
ENDPOINT_ACTIONS = {
    "create": "create_session",
    "run": "run_command",
    "input": "input_in_session",
    "output": "get_session_output",
    "status": "session_status",
    "idle": "session_idle",
    "clear": "clear_session_buffer",
    "kill": "kill_session_processes",
    "close": "close_session",
    "close_all": "close_all_sessions",
    "list": "list_sessions",
}


@dataclass
class DaemonConfig:
    workspace: str
    bind: str = "127.0.0.1"
    http_port: int = 8700
    shell: str = "/bin/bash"
    max_sessions: int = 128
    advertised_ip: str = "localhost"

    def __post_init__(self) -> None:
        env_port = os.environ.get("GYM_DAEMON_PORT")
        if env_port:
            self.http_port = int(env_port)
        if self.max_sessions < 1:
            raise ValueError("max_sessions must be >= 1")
        if not os.path.isdir(self.workspace) or not os.access(self.workspace, os.W_OK):
            raise ValueError(f"workspace root is not a writable directory: {self.workspace}")


def handle_action(manager: SessionManager, action: Action, advertised_ip: str = "localhost") -> Observation:
    """Execute one command-family action against the session manager."""
    name = action.name
    if action.family != Family.COMMAND:
        return error_observation(
            name, "unsupported-action", f"daemon does not execute {name!r}"
        )
    violations = protocol.validate(action)
    if violations:
        return error_observation(name, "protocol", "; ".join(violations))
    p = action.params
    try:
        if name == "create_session":
            session = manager.create(p.get("session_id"))
            return ok_observation(
                name,
                f"session {session.session_id} created",
                session_id=session.session_id,
                idle=True,
            )
        if name == "run_command":
            result = manager.run_command(
                p["command"],
                session_id=p.get("session_id"),
                wait_for_completion=p.get("wait_for_completion", False),
            )
            return ok_observation(name, f"command {result['status']}", **result)
        if name == "input_in_session":
            manager.send_input(p["session_id"], p["input_text"])
            return ok_observation(name, "input delivered", session_id=p["session_id"])
        if name == "get_session_output":
            result = manager.get_output(
                p["session_id"],
                start_lines=p.get("start_lines"),
                end_lines=p.get("end_lines"),
                since_timestamp=p.get("since_timestamp"),
            )
            summary = f"{len(result['lines'])} line(s)"
            if result.get("warning"):
                summary += f" ({result['warning']})"
            return ok_observation(name, summary, **result)
        if name == "session_status":
            return ok_observation(name, "status", **manager.status(p["session_id"]))
        if name == "session_idle":
            report = manager.idle(p["session_id"])
            return ok_observation(
                name,
                "idle" if report.idle else f"busy ({len(report.children)} process(es))",
                idle=report.idle,
                children=report.children,
            )
        if name == "clear_session_buffer":
            manager.clear_buffer(p["session_id"])
            return ok_observation(name, "buffer cleared", session_id=p["session_id"])
        if name == "kill_session_processes":
            manager.kill_processes(p["session_id"], force=p.get("force", False))
            return ok_observation(name, "processes killed", session_id=p["session_id"])
        if name == "close_session":
            manager.close(p["session_id"])
            return ok_observation(name, "session closed", session_id=p["session_id"])
        if name == "close_all_sessions":
            count = manager.close_all()
            return ok_observation(name, f"closed {count} session(s)", closed=count)
        if name == "list_sessions":
            sessions = manager.list_sessions(computer_ip=advertised_ip)
            return ok_observation(name, f"{len(sessions)} session(s)", sessions=sessions)
    except SessionError as exc:
        return error_observation(name, exc.kind, str(exc))
    return error_observation(name, "unsupported-action", f"no handler for {name!r}")


class _Handler(BaseHTTPRequestHandler):
    server_version = "labgym-daemon/0.1"
    daemon_ref: "Daemon"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send(self, code: int, body: bytes, content_type: str = "application/json") -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        if self.path == "/v1/health":
            body = json.dumps(
                {"status": "ok", "sessions": len(self.daemon_ref.manager)}
            ).encode()
            self._send(200, body)
        else:
            self._send(404, b'{"error":"not found"}')

    def do_POST(self) -> None:
        parts = self.path.strip("/").split("/")
        if len(parts) != 3 or parts[0] != "v1" or parts[1] != "session":
            self._send(404, b'{"error":"not found"}')
            return
        expected = ENDPOINT_ACTIONS.get(parts[2])
        if expected is None:
            self._send(404, b'{"error":"unknown endpoint"}')
            return
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            msg = protocol.decode(raw)
            if not isinstance(msg, Action):
                raise ProtocolError("expected an action")
            if msg.name != expected:
                obs = error_observation(
                    expected, "protocol", f"endpoint expects {expected!r}, got {msg.name!r}"
                )
            else:
                obs = handle_action(
                    self.daemon_ref.manager, msg, self.daemon_ref.config.advertised_ip
                )
        except ProtocolError as exc:
            obs = error_observation(expected, "protocol", f"malformed request: {exc}")
        self._send(200, protocol.encode(obs))


@dataclass
class Daemon:
    config: DaemonConfig
    manager: SessionManager = field(init=False)
    _server: Optional[ThreadingHTTPServer] = field(default=None, init=False)
    _thread: Optional[threading.Thread] = field(default=None, init=False)

    def __post_init__(self) -> None:
        self.manager = SessionManager(
            workspace=self.config.workspace,
            shell=self.config.shell,
            max_sessions=self.config.max_sessions,
        )

    def start(self) -> None:
        handler = type("BoundHandler", (_Handler,), {"daemon_ref": self})
        try:
            self._server = ThreadingHTTPServer((self.config.bind, self.config.http_port), handler)
        except OSError as exc:
            raise RuntimeError(
                f"cannot bind {self.config.bind}:{self.config.http_port}: {exc}"
            ) from exc
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        assert self._server is not None
        return self._server.server_address[1]

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        self.manager.close_all()

    def serve_forever(self) -> None:
        self.start()
        assert self._thread is not None
        try:
            self._thread.join()
        except KeyboardInterrupt:
            self.stop()


def serve(config: DaemonConfig) -> Daemon:
    daemon = Daemon(config)
    daemon.start()
    return daemon
