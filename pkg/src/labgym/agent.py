"""Reference reasoning-loop agent.

The loop is a strict alternation of actions and observations. When the
estimated context size nears the model limit, the earlier half of the turns
is replaced by a single structured state-snapshot summary. The model backend
is pluggable; a scripted backend replays a fixed action file for
deterministic integration tests.
"""
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import requests

from . import protocol
from .dispatch import Dispatcher
from .protocol import Action, Observation
from .taskrt import TaskRuntime

SUMMARY_SECTIONS = (
    "state_of_the_art",
    "hypotheses",
    "key_knowledge",
    "reflection",
    "file_and_browser_state",
    "recent_sessions",
    "recent_actions",
    "experiment_history",
)

SUMMARIZE_TRIGGER = 0.85  # fraction of max_context_tokens
CHARS_PER_TOKEN = 4
BACKEND_RETRIES = 3


class BackendError(Exception):
    pass


@dataclass
class StateSnapshotSummary:
    sections: Dict[str, str] = field(default_factory=dict)

    def complete(self) -> bool:
        return all(key in self.sections for key in SUMMARY_SECTIONS)

    def fill_missing(self) -> None:
        for key in SUMMARY_SECTIONS:
            self.sections.setdefault(key, "")

    def render(self) -> str:
        parts = ["<state_snapshot>"]
        for key in SUMMARY_SECTIONS:
            parts.append(f"  <{key}>\n{self.sections.get(key, '')}\n  </{key}>")
        parts.append("</state_snapshot>")
        return "\n".join(parts)


@dataclass
class Turn:
    action: Action
    observation: Observation


@dataclass
class AgentContext:
    system_prompt: str
    max_context_tokens: int
    turns: List[Turn] = field(default_factory=list)
    summaries: List[StateSnapshotSummary] = field(default_factory=list)
    token_estimate: int = 0

    def _estimate(self) -> int:
        chars = len(self.system_prompt)
        for summary in self.summaries:
            chars += len(summary.render())
        for turn in self.turns:
            chars += len(protocol.encode(turn.action)) + len(protocol.encode(turn.observation))
        return chars // CHARS_PER_TOKEN

    def append(self, turn: Turn) -> None:
        self.turns.append(turn)
        self.token_estimate = self._estimate()

    def needs_summarization(self) -> bool:
        return self.token_estimate >= int(self.max_context_tokens * SUMMARIZE_TRIGGER)


class Backend:
    """Model backend contract: pick the next action, summarize history."""

    def next_action(self, ctx: AgentContext, observation: Observation) -> Action:
        raise NotImplementedError

    def summarize(self, ctx: AgentContext, turns: List[Turn]) -> StateSnapshotSummary:
        """Default deterministic digest; live backends override with a model call."""
        actions = [t.action.name for t in turns]
        sessions: Dict[str, Dict[str, object]] = {}
        files: List[str] = []
        evals: List[str] = []
        for turn in turns:
            payload = turn.observation.payload
            if turn.action.name in ("create_session", "run_command") and "session_id" in payload:
                sessions[str(payload["session_id"])] = {
                    "last_command": turn.action.params.get("command"),
                    "idle": payload.get("status") != "running",
                }
            if turn.action.name in ("create_file", "file_edit", "open_file"):
                path = turn.action.params.get("path")
                if path:
                    files.append(f"{turn.action.name}: {path}")
            if turn.action.name == "eval":
                evals.append(
                    f"attempt {payload.get('attempt_index')}: score "
                    f"{payload.get('calibrated_score')}"
                )
        recent = "\n".join(
            f"- {t.action.name}: {t.observation.summary}" for t in turns[-5:]
        )
        session_lines = "\n".join(
            f"- [{sid}] Last command: {info['last_command']}, Idle: {info['idle']}"
            for sid, info in sessions.items()
        )
        return StateSnapshotSummary(
            sections={
                "state_of_the_art": "",
                "hypotheses": "",
                "key_knowledge": f"- {len(turns)} earlier turn(s) condensed; actions seen: "
                + ", ".join(sorted(set(actions))),
                "reflection": "",
                "file_and_browser_state": "\n".join(f"- {line}" for line in files),
                "recent_sessions": session_lines,
                "recent_actions": recent,
                "experiment_history": "\n".join(f"- {line}" for line in evals),
            }
        )


class ScriptedBackend(Backend):
    """Replays a fixed action sequence; pads with finish when exhausted."""

    def __init__(self, actions: List[Action]):
        self.actions = list(actions)
        self._pos = 0

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        actions = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                msg = protocol.decode(line.encode("utf-8"))
                if not isinstance(msg, Action):
                    raise BackendError(f"script line is not an action: {line}")
                actions.append(msg)
        return cls(actions)

    def next_action(self, ctx: AgentContext, observation: Observation) -> Action:
        if self._pos >= len(self.actions):
            return Action(name="finish")
        action = self.actions[self._pos]
        self._pos += 1
        return action


class HttpBackend(Backend):
    """Chat-style HTTP endpoint: messages + tool schema in, one tool call out.

    Response JSON is either {"tool": name, "params": {...}} or {"text": ...};
    plain text is wrapped as a think action.
    """

    def __init__(self, endpoint: Optional[str] = None, api_key: Optional[str] = None,
                 timeout: float = 120.0):
        self.endpoint = endpoint or os.environ.get("GYM_MODEL_ENDPOINT")
        self.api_key = api_key or os.environ.get("GYM_MODEL_KEY")
        self.timeout = timeout
        if not self.endpoint:
            raise BackendError("no model endpoint configured (GYM_MODEL_ENDPOINT)")

    def _messages(self, ctx: AgentContext, observation: Observation) -> List[Dict[str, str]]:
        messages = [{"role": "system", "content": ctx.system_prompt}]
        for summary in ctx.summaries:
            messages.append({"role": "assistant", "content": summary.render()})
        for turn in ctx.turns:
            messages.append(
                {"role": "assistant", "content": protocol.encode(turn.action).decode()}
            )
            messages.append(
                {"role": "user", "content": protocol.encode(turn.observation).decode()}
            )
        messages.append({"role": "user", "content": protocol.encode(observation).decode()})
        return messages

    def _call(self, body: Dict[str, object]) -> Dict[str, object]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def next_action(self, ctx: AgentContext, observation: Observation) -> Action:
        tools = sorted(protocol.ACTION_NAMES)
        try:
            reply = self._call(
                {"messages": self._messages(ctx, observation), "tools": tools}
            )
        except (requests.RequestException, ValueError) as exc:
            raise BackendError(f"backend call failed: {exc}") from exc
        if "tool" in reply:
            return Action(name=reply["tool"], params=reply.get("params", {}))
        if "text" in reply:
            return Action(name="think", params={"thought": str(reply["text"])})
        raise BackendError(f"backend returned neither tool nor text: {reply}")

    def summarize(self, ctx: AgentContext, turns: List[Turn]) -> StateSnapshotSummary:
        history = "\n".join(
            protocol.encode(t.action).decode() + "\n" + protocol.encode(t.observation).decode()
            for t in turns
        )
        try:
            reply = self._call({"summarize": history})
        except (requests.RequestException, ValueError) as exc:
            raise BackendError(f"summarizer call failed: {exc}") from exc
        sections = reply.get("sections")
        if not isinstance(sections, dict):
            raise BackendError("summarizer response missing sections")
        return StateSnapshotSummary(sections={k: str(v) for k, v in sections.items()})


def step(ctx: AgentContext, observation: Observation, backend: Backend) -> Action:
    """Ask the backend for one valid action; invalid output retries up to 3
    times and then degrades to a null action with an error note."""
    unreachable = None
    for _ in range(BACKEND_RETRIES):
        try:
            action = backend.next_action(ctx, observation)
        except BackendError as exc:
            unreachable = str(exc)
            continue
        unreachable = None
        if not protocol.validate(action):
            return action
    if unreachable is not None:
        raise BackendError(
            f"backend unreachable after {BACKEND_RETRIES} attempts: {unreachable}"
        )
    return Action(name="null", params={})


def summarize(ctx: AgentContext, backend: Backend) -> bool:
    """Replace the earlier half of the turns with one summary block.

    Returns True when a summarization happened. Backend failures leave the
    context unchanged; the loop retries on a later turn.
    """
    if not ctx.needs_summarization() or len(ctx.turns) < 2:
        return False
    half = len(ctx.turns) // 2
    earlier, later = ctx.turns[:half], ctx.turns[half:]
    try:
        summary = backend.summarize(ctx, earlier)
        if not summary.complete():
            summary = backend.summarize(ctx, earlier)  # one regeneration attempt
    except BackendError:
        return False
    summary.fill_missing()  # accept with empty sections after the retry
    ctx.summaries.append(summary)
    ctx.turns = later
    ctx.token_estimate = ctx._estimate()
    return True


DEFAULT_SYSTEM_PROMPT = (
    "You are an autonomous research agent. Use the provided tools to explore "
    "the workspace, run experiments, evaluate your outputs, and call finish "
    "when done."
)


def run_loop(
    runtime: TaskRuntime,
    dispatcher: Dispatcher,
    backend: Backend,
    transcript_path: str,
    max_context_tokens: int = 200_000,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
    save_snapshot: Optional[Callable[[], str]] = None,
    operator_messages: Optional[List[str]] = None,
    max_turns: int = 10_000,
) -> Dict[str, object]:
    """Drive the agent until it calls finish or the budget runs out."""
    ctx = AgentContext(system_prompt=system_prompt, max_context_tokens=max_context_tokens)
    pending_operator = list(operator_messages or [])
    summarizations = 0
    observation = protocol.ok_observation(
        "null",
        "task loaded",
        task_description=runtime.spec.description,
        remaining_seconds=runtime.budget_tick(),
        max_evals=runtime.spec.max_evals,
    )
    os.makedirs(os.path.dirname(transcript_path) or ".", exist_ok=True)
    with open(transcript_path, "w", encoding="utf-8") as transcript:

        def record(kind: str, body: Dict[str, object]) -> None:
            transcript.write(json.dumps({"kind": kind, "ts": time.time(), **body}) + "\n")
            transcript.flush()

        record("task", {"task_id": runtime.spec.task_id})
        for _ in range(max_turns):
            if runtime.force_finish_if_exhausted(save_snapshot):
                record("force_finish", {"report": runtime.final_report})
                break
            if pending_operator:
                note = pending_operator.pop(0)
                payload = dict(observation.payload)
                payload["real_user"] = f"<real_user>{note}</real_user>"
                observation = Observation(
                    for_action=observation.for_action,
                    status=observation.status,
                    summary=observation.summary,
                    payload=payload,
                    error_kind=observation.error_kind,
                )
            action = step(ctx, observation, backend)
            if action.name == "finish":
                report = runtime.finish(save_snapshot)
                obs = protocol.ok_observation("finish", "task finished", **report)
                ctx.append(Turn(action=action, observation=obs))
                record("turn", {
                    "action": json.loads(protocol.encode(action)),
                    "observation": json.loads(protocol.encode(obs)),
                })
                break
            obs = dispatcher.execute(action)
            ctx.append(Turn(action=action, observation=obs))
            record("turn", {
                "action": json.loads(protocol.encode(action)),
                "observation": json.loads(protocol.encode(obs)),
            })
            if summarize(ctx, backend):
                summarizations += 1
                record("summary", {"snapshot": ctx.summaries[-1].render()})
            observation = obs
        else:
            runtime.finish(save_snapshot)
            record("turn_limit", {"report": runtime.final_report})
        if not runtime.finished:
            runtime.finish(save_snapshot)
            record("budget_finish", {"report": runtime.final_report})
        ledger = runtime.ledger
        record(
            "ledger",
            {
                "evals_used": ledger.evals_used,
                "hint_viewed": ledger.hint_viewed,
                "best_score": ledger.best_score,
                "final_score": ledger.final_score,
            },
        )
    return {
        "turns": len(ctx.turns),
        "summaries": len(ctx.summaries),
        "summarizations": summarizations,
        "final_report": runtime.final_report,
        "transcript_path": transcript_path,
    }
