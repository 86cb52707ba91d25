"""Action/observation data model shared by the orchestrator and daemons.

Every agent tool call is an Action; every executed Action yields exactly one
Observation. Both are immutable value types with a deterministic UTF-8 JSON
wire encoding.
"""
import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Union


class Family(str, Enum):
    COMMAND = "command"
    FILE = "file"
    WEB_SEARCH = "web_search"
    WEB_BROWSE = "web_browse"
    PARSE = "parse"
    SPECIAL = "special"


class ComputerKind(str, Enum):
    CPU = "cpu"
    LOCALHOST_CPU = "localhost_cpu"
    GPU = "gpu"


# Parameter declaration: name -> (type, required)
_S, _I, _F, _B = str, int, float, bool

ACTION_CATALOG: Dict[str, Dict[str, Any]] = {
    # Command family: session lifecycle and execution
    "create_session": dict(
        family=Family.COMMAND,
        params={"session_id": (_S, False), "use_proxy": (_B, False)},
    ),
    "list_sessions": dict(family=Family.COMMAND, params={}),
    "run_command": dict(
        family=Family.COMMAND,
        params={
            "command": (_S, True),
            "session_id": (_S, False),
            "wait_for_completion": (_B, False),
            "use_proxy": (_B, False),
        },
    ),
    "input_in_session": dict(
        family=Family.COMMAND,
        params={"session_id": (_S, True), "input_text": (_S, True)},
    ),
    "get_session_output": dict(
        family=Family.COMMAND,
        params={
            "session_id": (_S, True),
            "start_lines": (_I, False),
            "end_lines": (_I, False),
            "since_timestamp": (_F, False),
        },
    ),
    "session_status": dict(family=Family.COMMAND, params={"session_id": (_S, True)}),
    "session_idle": dict(family=Family.COMMAND, params={"session_id": (_S, True)}),
    "clear_session_buffer": dict(
        family=Family.COMMAND, params={"session_id": (_S, True)}
    ),
    "close_session": dict(family=Family.COMMAND, params={"session_id": (_S, True)}),
    "close_all_sessions": dict(family=Family.COMMAND, params={}),
    "kill_session_processes": dict(
        family=Family.COMMAND,
        params={"session_id": (_S, True), "force": (_B, False)},
    ),
    # File family: orchestrator-local workspace file access
    "open_file": dict(
        family=Family.FILE,
        params={"path": (_S, True), "line_number": (_I, False), "context_lines": (_I, False)},
    ),
    "goto_line": dict(family=Family.FILE, params={"line_number": (_I, True)}),
    "file_scroll_down": dict(family=Family.FILE, params={}),
    "file_scroll_up": dict(family=Family.FILE, params={}),
    "create_file": dict(
        family=Family.FILE, params={"path": (_S, True), "content": (_S, False)}
    ),
    "file_edit": dict(
        family=Family.FILE,
        params={
            "path": (_S, True),
            "start_line": (_I, True),
            "end_line": (_I, True),
            "content": (_S, True),
        },
    ),
    "search_dir": dict(
        family=Family.FILE, params={"search_term": (_S, True), "dir_path": (_S, False)}
    ),
    "search_file": dict(
        family=Family.FILE, params={"search_term": (_S, True), "file_path": (_S, False)}
    ),
    "find_file": dict(
        family=Family.FILE, params={"file_name": (_S, True), "dir_path": (_S, False)}
    ),
    "list_files": dict(
        family=Family.FILE, params={"path": (_S, False), "show_hidden": (_B, False)}
    ),
    "get_file_info": dict(family=Family.FILE, params={}),
    # Web search
    "search": dict(
        family=Family.WEB_SEARCH, params={"query": (_S, True), "top_k": (_I, False)}
    ),
    # Web browse: cached-page navigation
    "web_page_goto": dict(
        family=Family.WEB_BROWSE, params={"url": (_S, True), "line_number": (_I, False)}
    ),
    "web_page_goto_line": dict(
        family=Family.WEB_BROWSE, params={"line_number": (_I, True)}
    ),
    "web_page_scroll_down": dict(family=Family.WEB_BROWSE, params={}),
    "web_page_scroll_up": dict(family=Family.WEB_BROWSE, params={}),
    "web_page_search": dict(
        family=Family.WEB_BROWSE,
        params={"keyword": (_S, True), "context_lines": (_I, False)},
    ),
    "web_page_search_next": dict(
        family=Family.WEB_BROWSE,
        params={"context_lines": (_I, False), "search_index": (_I, False)},
    ),
    "web_page_get_links": dict(
        family=Family.WEB_BROWSE,
        params={"page_size": (_I, False), "page_number": (_I, False)},
    ),
    # Parse family: document and media extraction
    "parse_pdf": dict(
        family=Family.PARSE, params={"file_path": (_S, True), "save_path": (_S, True)}
    ),
    "parse_docx": dict(
        family=Family.PARSE, params={"file_path": (_S, True), "save_path": (_S, True)}
    ),
    "parse_latex": dict(
        family=Family.PARSE, params={"file_path": (_S, True), "save_path": (_S, True)}
    ),
    "parse_pptx": dict(
        family=Family.PARSE, params={"file_path": (_S, True), "save_path": (_S, True)}
    ),
    "parse_audio": dict(
        family=Family.PARSE,
        params={"file_path": (_S, True), "save_path": (_S, True), "model": (_S, False)},
    ),
    "parse_image": dict(
        family=Family.PARSE,
        params={
            "file_path": (_S, True),
            "save_path": (_S, True),
            "task": (_S, False),
            "model": (_S, False),
        },
    ),
    "parse_video": dict(
        family=Family.PARSE,
        params={
            "file_path": (_S, True),
            "save_path": (_S, True),
            "task": (_S, False),
            "frame_interval": (_I, False),
            "model": (_S, False),
        },
    ),
    # Special actions
    "null": dict(family=Family.SPECIAL, params={}),
    "think": dict(family=Family.SPECIAL, params={"thought": (_S, False)}),
    "eval": dict(family=Family.SPECIAL, params={}),
    "view_hint": dict(family=Family.SPECIAL, params={}),
    "finish": dict(family=Family.SPECIAL, params={}),
    "sleep": dict(family=Family.SPECIAL, params={"seconds": (_F, True)}),
}

ACTION_NAMES = frozenset(ACTION_CATALOG)


class ProtocolError(Exception):
    """Malformed or unencodable protocol message."""


@dataclass(frozen=True)
class ComputerRef:
    ip: str
    http_port: int
    kind: ComputerKind
    use_proxy: bool

    def violations(self) -> List[str]:
        out = []
        if self.kind == ComputerKind.GPU and not self.use_proxy:
            out.append("target.use_proxy: must be true for gpu computers")
        if self.kind in (ComputerKind.CPU, ComputerKind.LOCALHOST_CPU) and self.use_proxy:
            out.append("target.use_proxy: must be false for cpu/localhost_cpu computers")
        return out


@dataclass(frozen=True)
class Action:
    name: str
    params: Dict[str, Any] = field(default_factory=dict)
    target: Optional[ComputerRef] = None

    @property
    def family(self) -> Optional[Family]:
        entry = ACTION_CATALOG.get(self.name)
        return entry["family"] if entry else None


@dataclass(frozen=True)
class Observation:
    for_action: str
    status: str  # "ok" | "error"
    summary: str
    payload: Dict[str, Any] = field(default_factory=dict)
    error_kind: Optional[str] = None
    timestamp: float = field(default_factory=time.time)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def ok_observation(name: str, summary: str, **payload: Any) -> Observation:
    return Observation(for_action=name, status="ok", summary=summary, payload=payload)


def error_observation(name: str, kind: str, summary: str, **payload: Any) -> Observation:
    return Observation(
        for_action=name, status="error", summary=summary, payload=payload, error_kind=kind
    )


def validate(action: Action) -> List[str]:
    """Return the list of invariant violations (empty means valid).

    Never raises: agents feed arbitrary tool calls through here.
    """
    violations: List[str] = []
    entry = ACTION_CATALOG.get(action.name)
    if entry is None:
        return [f"name: unknown action {action.name!r}"]
    declared = entry["params"]
    for key, value in action.params.items():
        if key not in declared:
            violations.append(f"params.{key}: not declared for {action.name}")
            continue
        expected, _ = declared[key]
        # bool is an int subclass; keep the kinds distinct on the wire
        if expected is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                violations.append(f"params.{key}: expected float, got {type(value).__name__}")
        elif expected is int:
            if isinstance(value, bool) or not isinstance(value, int):
                violations.append(f"params.{key}: expected integer, got {type(value).__name__}")
        elif not isinstance(value, expected):
            violations.append(
                f"params.{key}: expected {expected.__name__}, got {type(value).__name__}"
            )
    for key, (_, required) in declared.items():
        if required and key not in action.params:
            violations.append(f"params.{key}: missing required param")
    if action.target is not None:
        violations.extend(action.target.violations())
    return violations


_ACTION_FIELDS = {"family", "name", "params", "target"}
_OBS_FIELDS = {"for_action", "status", "summary", "payload", "error_kind", "timestamp"}
_TARGET_FIELDS = {"ip", "http_port", "kind", "use_proxy"}


def _check_finite(obj: Any, where: str) -> None:
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ProtocolError(f"{where}: non-finite float is not representable")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")


def encode(msg: Union[Action, Observation]) -> bytes:
    """Deterministically encode a message as UTF-8 JSON bytes."""
    if isinstance(msg, Action):
        family = msg.family
        doc: Dict[str, Any] = {
            "family": family.value if family else None,
            "name": msg.name,
            # Optional params encode as absent keys, never sentinel strings.
            "params": {k: v for k, v in msg.params.items() if v is not None},
        }
        if msg.target is not None:
            doc["target"] = {
                "ip": msg.target.ip,
                "http_port": msg.target.http_port,
                "kind": msg.target.kind.value,
                "use_proxy": msg.target.use_proxy,
            }
    elif isinstance(msg, Observation):
        doc = {
            "for_action": msg.for_action,
            "status": msg.status,
            "summary": msg.summary,
            "payload": msg.payload,
            "timestamp": msg.timestamp,
        }
        if msg.error_kind is not None:
            doc["error_kind"] = msg.error_kind
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    _check_finite(doc, "message")
    try:
        return json.dumps(doc, sort_keys=True, allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"unrepresentable value: {exc}") from exc


def _decode_target(doc: Dict[str, Any]) -> ComputerRef:
    unknown = set(doc) - _TARGET_FIELDS
    if unknown:
        raise ProtocolError(f"unknown target fields: {sorted(unknown)}")
    try:
        return ComputerRef(
            ip=doc["ip"],
            http_port=doc["http_port"],
            kind=ComputerKind(doc["kind"]),
            use_proxy=doc["use_proxy"],
        )
    except (KeyError, ValueError) as exc:
        raise ProtocolError(f"bad target: {exc}") from exc


def decode(data: bytes) -> Union[Action, Observation]:
    """Decode wire bytes back into an Action or Observation."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("message must be a JSON object")
    if "name" in doc and "for_action" not in doc:
        unknown = set(doc) - _ACTION_FIELDS
        if unknown:
            raise ProtocolError(f"unknown action fields: {sorted(unknown)}")
        target = _decode_target(doc["target"]) if "target" in doc else None
        return Action(name=doc["name"], params=doc.get("params", {}), target=target)
    if "for_action" in doc:
        unknown = set(doc) - _OBS_FIELDS
        if unknown:
            raise ProtocolError(f"unknown observation fields: {sorted(unknown)}")
        try:
            return Observation(
                for_action=doc["for_action"],
                status=doc["status"],
                summary=doc["summary"],
                payload=doc.get("payload", {}),
                error_kind=doc.get("error_kind"),
                timestamp=doc["timestamp"],
            )
        except KeyError as exc:
            raise ProtocolError(f"missing observation field: {exc}") from exc
    raise ProtocolError("message is neither an action nor an observation")
