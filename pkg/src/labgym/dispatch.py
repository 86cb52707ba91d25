"""Orchestrator-side routing and execution.

Owns the computer pool, decides local vs. remote execution, applies the proxy
policy for gpu machines, and turns every agent tool call into exactly one
Observation -- transport and handler failures included.
"""
import time
from dataclasses import dataclass
from typing import Dict, Optional

import requests
import toml

from . import parse as parsemod
from . import protocol
from .daemon import ENDPOINT_ACTIONS
from .fileops import FileOpError, FileService
from .protocol import (
    Action,
    ComputerKind,
    ComputerRef,
    Family,
    Observation,
    error_observation,
    ok_observation,
)
from .taskrt import TaskError, TaskRuntime
from .web import WebError, WebSession

TRANSPORT_TIMEOUT = 30.0  # independent of the daemon-side 10s command wait

_ACTION_ENDPOINTS = {name: suffix for suffix, name in ENDPOINT_ACTIONS.items()}


class DispatchError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class PoolEntry:
    ref: ComputerRef
    proxy_url: Optional[str] = None


@dataclass
class ComputerPool:
    computers: Dict[str, PoolEntry]  # keyed by ip
    default_target: ComputerRef

    def lookup(self, ip: str) -> PoolEntry:
        entry = self.computers.get(ip)
        if entry is None:
            raise DispatchError("unknown-target", f"no computer with ip {ip} in the pool")
        return entry


def build_pool(entries: list) -> ComputerPool:
    computers: Dict[str, PoolEntry] = {}
    localhost: Optional[ComputerRef] = None
    for item in entries:
        kind = ComputerKind(item["kind"])
        ref = ComputerRef(
            ip=item["ip"],
            http_port=int(item.get("port", 8700)),
            kind=kind,
            use_proxy=kind == ComputerKind.GPU,
        )
        if ref.ip in computers:
            raise DispatchError("invariant-violation", f"duplicate ip in pool: {ref.ip}")
        computers[ref.ip] = PoolEntry(ref=ref, proxy_url=item.get("proxy_url"))
        if kind == ComputerKind.LOCALHOST_CPU:
            if localhost is not None:
                raise DispatchError(
                    "invariant-violation", "pool must have exactly one localhost_cpu computer"
                )
            localhost = ref
    if localhost is None:
        raise DispatchError(
            "invariant-violation", "pool must have exactly one localhost_cpu computer"
        )
    return ComputerPool(computers=computers, default_target=localhost)


def load_pool(config_path: str) -> ComputerPool:
    try:
        cfg = toml.load(config_path)
    except (OSError, toml.TomlDecodeError) as exc:
        raise DispatchError("parse-error", f"cannot parse pool config: {exc}") from exc
    return build_pool(cfg.get("computer", []))


@dataclass(frozen=True)
class RouteDecision:
    locality: str  # "local" | "remote"
    target: Optional[ComputerRef] = None
    via_proxy: bool = False


def route(action: Action, pool: ComputerPool) -> RouteDecision:
    """Pure routing: command actions go to a daemon, everything else is local."""
    if action.family != Family.COMMAND:
        return RouteDecision(locality="local")
    if action.target is not None:
        target = pool.lookup(action.target.ip).ref
    else:
        target = pool.default_target
    return RouteDecision(
        locality="remote", target=target, via_proxy=target.kind == ComputerKind.GPU
    )


class Dispatcher:
    """Executes validated actions; one in-flight action per run."""

    def __init__(
        self,
        pool: ComputerPool,
        files: FileService,
        web: WebSession,
        runtime: Optional[TaskRuntime] = None,
        media_endpoint: Optional[parsemod.MediaEndpoint] = None,
    ):
        self.pool = pool
        self.files = files
        self.web = web
        self.runtime = runtime
        self.media_endpoint = media_endpoint or parsemod.MediaEndpoint()

    def execute(self, action: Action) -> Observation:
        """Every valid Action yields exactly one Observation; nothing raises."""
        name = action.name
        violations = protocol.validate(action)
        if violations:
            return error_observation(name, "protocol", "; ".join(violations))
        try:
            family = action.family
            if family in (Family.WEB_SEARCH, Family.WEB_BROWSE) and not self.web.enabled:
                return error_observation(
                    name, "capability-disabled", "web access is disabled for this task"
                )
            if family == Family.COMMAND:
                return self._execute_remote(action)
            if family == Family.FILE:
                return self._execute_file(action)
            if family in (Family.WEB_SEARCH, Family.WEB_BROWSE):
                return self._execute_web(action)
            if family == Family.PARSE:
                return self._execute_parse(action)
            return self._execute_special(action)
        except DispatchError as exc:
            return error_observation(name, exc.kind, str(exc))
        except Exception as exc:  # totality: never leak an exception to the loop
            return error_observation(name, "internal", f"{type(exc).__name__}: {exc}")

    # -- command family ------------------------------------------------------

    def _execute_remote(self, action: Action) -> Observation:
        decision = route(action, self.pool)
        target = decision.target
        assert target is not None
        entry = self.pool.lookup(target.ip)
        suffix = _ACTION_ENDPOINTS[action.name]
        url = f"http://{target.ip}:{target.http_port}/v1/session/{suffix}"
        proxies = None
        if decision.via_proxy and entry.proxy_url:
            proxies = {"http": entry.proxy_url, "https": entry.proxy_url}
        try:
            resp = requests.post(
                url,
                data=protocol.encode(action),
                headers={"Content-Type": "application/json"},
                timeout=TRANSPORT_TIMEOUT,
                proxies=proxies,
            )
            resp.raise_for_status()
            obs = protocol.decode(resp.content)
        except (requests.RequestException, protocol.ProtocolError) as exc:
            return error_observation(
                action.name, "transport", f"daemon {target.ip}:{target.http_port}: {exc}"
            )
        if not isinstance(obs, Observation):
            return error_observation(action.name, "transport", "daemon returned a non-observation")
        return obs

    # -- file family ----------------------------------------------------------

    def _execute_file(self, action: Action) -> Observation:
        name, p = action.name, action.params
        try:
            if name == "open_file":
                view = self.files.open_file(
                    p["path"], p.get("line_number", 1), p.get("context_lines")
                )
                return ok_observation(name, f"opened {p['path']}", view=view.render())
            if name == "goto_line":
                view = self.files.goto_line(p["line_number"])
                return ok_observation(name, f"at line {view.current_line}", view=view.render())
            if name in ("file_scroll_down", "file_scroll_up"):
                view = self.files.scroll("down" if name.endswith("down") else "up")
                return ok_observation(name, f"at line {view.current_line}", view=view.render())
            if name == "create_file":
                result = self.files.create_file(p["path"], p.get("content", ""))
                verb = "replaced" if result["replaced"] else "created"
                return ok_observation(name, f"{verb} {p['path']}", **result)
            if name == "file_edit":
                result = self.files.edit_file(
                    p["path"], p["start_line"], p["end_line"], p["content"]
                )
                return ok_observation(
                    name,
                    f"edited {p['path']} ({result['old_line_count']} -> "
                    f"{result['new_line_count']} lines)",
                    **result,
                )
            if name == "search_dir":
                result = self.files.search_dir(p["search_term"], p.get("dir_path", self.files.workspace))
                return ok_observation(name, f"{len(result['matches'])} match(es)", **result)
            if name == "search_file":
                result = self.files.search_file(p["search_term"], p.get("file_path"))
                return ok_observation(name, f"{len(result['matches'])} match(es)", **result)
            if name == "find_file":
                result = self.files.find_file(p["file_name"], p.get("dir_path", self.files.workspace))
                return ok_observation(name, f"{len(result['matches'])} file(s)", **result)
            if name == "list_files":
                result = self.files.list_files(p.get("path"), p.get("show_hidden", False))
                return ok_observation(name, f"{len(result['entries'])} entries", **result)
            if name == "get_file_info":
                result = self.files.file_info()
                return ok_observation(name, f"info for {result['path']}", **result)
        except FileOpError as exc:
            return error_observation(name, exc.kind, str(exc))
        return error_observation(name, "internal", f"no file handler for {name}")

    # -- web families ----------------------------------------------------------

    def _execute_web(self, action: Action) -> Observation:
        name, p = action.name, action.params
        try:
            if name == "search":
                results = self.web.search(p["query"], p.get("top_k", 10))
                return ok_observation(
                    name,
                    f"{len(results)} result(s)",
                    results=[
                        {"rank": r.rank, "title": r.title, "url": r.url, "snippet": r.snippet}
                        for r in results
                    ],
                )
            if name == "web_page_goto":
                view = self.web.goto(p["url"], p.get("line_number", 1))
                return ok_observation(name, f"loaded {p['url']}", view=view.render())
            if name == "web_page_goto_line":
                view = self.web.goto_line(p["line_number"])
                return ok_observation(name, f"at line {view.current_line}", view=view.render())
            if name in ("web_page_scroll_down", "web_page_scroll_up"):
                view = self.web.scroll("down" if name.endswith("down") else "up")
                return ok_observation(name, f"at line {view.current_line}", view=view.render())
            if name == "web_page_search":
                result = self.web.page_search(p["keyword"], p.get("context_lines", 5))
                return ok_observation(
                    name,
                    f"match {result['match_index']} of {result['total_matches']}"
                    if result["total_matches"]
                    else "no matches",
                    **result,
                )
            if name == "web_page_search_next":
                result = self.web.search_next(p.get("context_lines", 5), p.get("search_index"))
                return ok_observation(
                    name, f"match {result['match_index']} of {result['total_matches']}", **result
                )
            if name == "web_page_get_links":
                result = self.web.get_links(p.get("page_size", 10), p.get("page_number", 1))
                return ok_observation(
                    name,
                    f"page {result['page_number']} of {result['total_pages']}",
                    **result,
                )
        except WebError as exc:
            return error_observation(name, exc.kind, str(exc))
        return error_observation(name, "internal", f"no web handler for {name}")

    # -- parse family ------------------------------------------------------------

    def _execute_parse(self, action: Action) -> Observation:
        name, p = action.name, action.params
        try:
            if name in ("parse_pdf", "parse_docx", "parse_latex", "parse_pptx"):
                report = parsemod.parse_document(
                    p["file_path"], p["save_path"], kind=name.removeprefix("parse_")
                )
            else:
                report = parsemod.parse_media(
                    p["file_path"],
                    p["save_path"],
                    kind=name.removeprefix("parse_"),
                    task=p.get("task", "Describe this image."),
                    frame_interval=p.get("frame_interval", 30),
                    model=p.get("model"),
                    endpoint=self.media_endpoint,
                )
        except parsemod.ParseError as exc:
            return error_observation(name, exc.kind, str(exc))
        return ok_observation(
            name,
            f"saved {report.bytes_written} bytes to {report.save_path}",
            source_path=report.source_path,
            save_path=report.save_path,
            bytes_written=report.bytes_written,
            extractor=report.extractor,
            elapsed_seconds=report.elapsed_seconds,
        )

    # -- special family ------------------------------------------------------------

    def _execute_special(self, action: Action) -> Observation:
        name, p = action.name, action.params
        if name == "null":
            return ok_observation(name, "No Action")
        if name == "think":
            return ok_observation(name, "thought recorded", thought=p.get("thought", ""))
        if name == "sleep":
            return self._sleep(p["seconds"])
        if self.runtime is None:
            return error_observation(name, "no-task", "no task runtime attached")
        try:
            if name == "view_hint":
                hint = self.runtime.view_hint()
                return ok_observation(
                    name, "hint revealed (score penalty applies)", hint=hint
                )
            if name == "eval":
                result = self.runtime.evaluate()
                return ok_observation(
                    name,
                    f"attempt {result.attempt_index}/{self.runtime.spec.max_evals}: "
                    f"score {result.calibrated_score:.2f}",
                    attempt_index=result.attempt_index,
                    raw_metric=result.raw_metric,
                    calibrated_score=result.calibrated_score,
                    format_ok=result.format_ok,
                    feedback=result.feedback,
                    remaining_attempts=self.runtime.spec.max_evals - self.runtime.ledger.evals_used,
                )
            if name == "finish":
                return ok_observation(name, "finish requested")
        except TaskError as exc:
            return error_observation(name, exc.kind, str(exc))
        return error_observation(name, "internal", f"no special handler for {name}")

    def _sleep(self, seconds: float) -> Observation:
        if seconds <= 0:
            return error_observation("sleep", "exceeds-budget", "sleep duration must be > 0")
        if self.runtime is not None:
            remaining = self.runtime.clock.remaining()
            if seconds > remaining:
                return error_observation(
                    "sleep",
                    "exceeds-budget",
                    f"sleep of {seconds:.0f}s exceeds remaining budget {remaining:.0f}s",
                )
        started = time.time()
        time.sleep(seconds)
        return ok_observation("sleep", f"slept {seconds:.1f}s", elapsed=time.time() - started)
