import json
import math
import os

import pytest

from conftest import make_task_package
from labgym import protocol
from labgym.agent import (
    SUMMARY_SECTIONS,
    AgentContext,
    Backend,
    BackendError,
    HttpBackend,
    ScriptedBackend,
    StateSnapshotSummary,
    Turn,
    run_loop,
    step,
    summarize,
)
from labgym.dispatch import Dispatcher
from labgym.fileops import FileService
from labgym.protocol import Action, Observation, ok_observation
from labgym.taskrt import TaskRuntime, load_task
from labgym.web import FixtureSearchBackend, WebSession


def make_turn(i, pad=0):
    action = Action(name="think", params={"thought": f"t{i}" + "x" * pad})
    obs = ok_observation("think", f"thought {i}")
    return Turn(action=action, observation=obs)


def build_run(tmp_path, local_pool, **task_kwargs):
    pkg = make_task_package(tmp_path, **task_kwargs)
    ws = str(tmp_path / "ws")
    spec = load_task(str(pkg), ws)
    runtime = TaskRuntime(spec, ws)
    dispatcher = Dispatcher(
        pool=local_pool,
        files=FileService(ws),
        web=WebSession(backend=FixtureSearchBackend({}), enabled=spec.web_enabled),
        runtime=runtime,
    )
    return runtime, dispatcher, ws


class TestStateSnapshot:
    def test_render_contains_all_sections_in_order(self):
        summary = StateSnapshotSummary(sections={k: f"v-{k}" for k in SUMMARY_SECTIONS})
        text = summary.render()
        assert text.startswith("<state_snapshot>")
        assert text.endswith("</state_snapshot>")
        positions = [text.index(f"<{k}>") for k in SUMMARY_SECTIONS]
        assert positions == sorted(positions)
        assert len(SUMMARY_SECTIONS) == 8

    def test_complete_and_fill(self):
        summary = StateSnapshotSummary(sections={"hypotheses": "h"})
        assert not summary.complete()
        summary.fill_missing()
        assert summary.complete()
        assert summary.sections["hypotheses"] == "h"


class TestContext:
    def test_token_estimate_quarter_of_chars(self):
        ctx = AgentContext(system_prompt="p" * 400, max_context_tokens=1000)
        assert ctx._estimate() == 100
        turn = make_turn(1)
        ctx.append(turn)
        expected = (
            400
            + len(protocol.encode(turn.action))
            + len(protocol.encode(turn.observation))
        ) // 4
        assert ctx.token_estimate == expected

    def test_trigger_at_85_percent(self):
        ctx = AgentContext(system_prompt="", max_context_tokens=100)
        ctx.token_estimate = 84
        assert not ctx.needs_summarization()
        ctx.token_estimate = 85
        assert ctx.needs_summarization()


class TestSummarize:
    def test_replaces_earlier_half(self):
        ctx = AgentContext(system_prompt="", max_context_tokens=10)
        for i in range(9):
            ctx.append(make_turn(i, pad=100))
        assert ctx.needs_summarization()
        assert summarize(ctx, Backend()) is True
        # 9 turns: floor(9/2)=4 summarized, ceil(9/2)=5 retained
        assert len(ctx.turns) == 5
        assert len(ctx.summaries) == 1
        assert ctx.turns[0].action.params["thought"].startswith("t4")
        assert ctx.summaries[0].complete()

    def test_noop_below_threshold(self):
        ctx = AgentContext(system_prompt="", max_context_tokens=10_000_000)
        for i in range(10):
            ctx.append(make_turn(i))
        assert summarize(ctx, Backend()) is False
        assert len(ctx.turns) == 10

    def test_backend_failure_leaves_context(self):
        class Failing(Backend):
            def summarize(self, ctx, turns):
                raise BackendError("down")

        ctx = AgentContext(system_prompt="", max_context_tokens=10)
        for i in range(6):
            ctx.append(make_turn(i, pad=100))
        assert summarize(ctx, Failing()) is False
        assert len(ctx.turns) == 6
        assert ctx.summaries == []

    def test_incomplete_summary_regenerated_then_filled(self):
        calls = []

        class Sloppy(Backend):
            def summarize(self, ctx, turns):
                calls.append(1)
                return StateSnapshotSummary(sections={"hypotheses": "only this"})

        ctx = AgentContext(system_prompt="", max_context_tokens=10)
        for i in range(6):
            ctx.append(make_turn(i, pad=100))
        assert summarize(ctx, Sloppy()) is True
        assert len(calls) == 2
        assert ctx.summaries[0].complete()

    def test_default_digest_mentions_actions(self):
        turns = [make_turn(i) for i in range(4)]
        summary = Backend().summarize(None, turns)
        assert "think" in summary.sections["key_knowledge"]
        assert summary.complete() or set(summary.sections) == set(SUMMARY_SECTIONS)


class TestStep:
    def test_invalid_actions_degrade_to_null(self):
        class Babbling(Backend):
            def next_action(self, ctx, observation):
                return Action(name="not_a_real_tool")

        ctx = AgentContext(system_prompt="", max_context_tokens=100)
        action = step(ctx, ok_observation("null", ""), Babbling())
        assert action.name == "null"

    def test_recovers_on_retry(self):
        replies = [Action(name="nope"), Action(name="think", params={"thought": "ok"})]

        class Flaky(Backend):
            def next_action(self, ctx, observation):
                return replies.pop(0)

        action = step(AgentContext("", 100), ok_observation("null", ""), Flaky())
        assert action.name == "think"

    def test_unreachable_backend_raises(self):
        class Down(Backend):
            def next_action(self, ctx, observation):
                raise BackendError("connection refused")

        with pytest.raises(BackendError):
            step(AgentContext("", 100), ok_observation("null", ""), Down())

    def test_scripted_pads_with_finish(self):
        backend = ScriptedBackend([Action(name="think", params={"thought": "a"})])
        obs = ok_observation("null", "")
        assert backend.next_action(None, obs).name == "think"
        assert backend.next_action(None, obs).name == "finish"
        assert backend.next_action(None, obs).name == "finish"

    def test_scripted_from_file(self, tmp_path):
        path = tmp_path / "script.jsonl"
        lines = [
            protocol.encode(Action(name="think", params={"thought": "x"})).decode(),
            "",
            protocol.encode(Action(name="null")).decode(),
        ]
        path.write_text("\n".join(lines) + "\n")
        backend = ScriptedBackend.from_file(str(path))
        assert [a.name for a in backend.actions] == ["think", "null"]


class TestHttpBackend:
    def test_requires_endpoint(self, monkeypatch):
        monkeypatch.delenv("GYM_MODEL_ENDPOINT", raising=False)
        with pytest.raises(BackendError):
            HttpBackend()

    def test_tool_reply_becomes_action(self, stub_model_endpoint):
        url, handler = stub_model_endpoint
        handler.replies.append({"tool": "open_file", "params": {"path": "/w/f.txt"}})
        backend = HttpBackend(endpoint=url)
        action = backend.next_action(
            AgentContext("sys", 1000), ok_observation("null", "")
        )
        assert action == Action(name="open_file", params={"path": "/w/f.txt"})
        assert handler.calls[0]["messages"][0]["role"] == "system"

    def test_text_reply_becomes_think(self, stub_model_endpoint):
        url, handler = stub_model_endpoint
        handler.replies.append({"text": "just pondering"})
        backend = HttpBackend(endpoint=url)
        action = backend.next_action(AgentContext("s", 1000), ok_observation("null", ""))
        assert action.name == "think"
        assert action.params["thought"] == "just pondering"

    def test_summarize_reads_sections(self, stub_model_endpoint):
        url, handler = stub_model_endpoint
        handler.replies.append({"sections": {k: "v" for k in SUMMARY_SECTIONS}})
        backend = HttpBackend(endpoint=url)
        summary = backend.summarize(AgentContext("s", 1000), [make_turn(0)])
        assert summary.complete()


class TestRunLoop:
    def test_scripted_end_to_end(self, tmp_path, local_pool):
        runtime, dispatcher, ws = build_run(tmp_path, local_pool)
        actions = [
            Action(name="think", params={"thought": "plan"}),
            Action(
                name="create_file",
                params={"path": f"{ws}/data/outputs/result.txt", "content": "0.8\n"},
            ),
            Action(name="eval"),
            Action(name="finish"),
        ]
        transcript = str(tmp_path / "run" / "transcript.jsonl")
        result = run_loop(
            runtime, dispatcher, ScriptedBackend(actions), transcript_path=transcript
        )
        report = result["final_report"]
        assert report["final_score"] == pytest.approx(80.0, abs=1e-9)
        assert report["evals_used"] == 1
        assert runtime.finished
        kinds = [json.loads(l)["kind"] for l in open(transcript)]
        assert kinds[0] == "task"
        assert kinds[-1] == "ledger"
        assert kinds.count("turn") == 4

    def test_alternation_in_transcript(self, tmp_path, local_pool):
        runtime, dispatcher, ws = build_run(tmp_path, local_pool)
        actions = [Action(name="think", params={"thought": f"s{i}"}) for i in range(5)]
        transcript = str(tmp_path / "t.jsonl")
        run_loop(runtime, dispatcher, ScriptedBackend(actions), transcript_path=transcript)
        turns = [json.loads(l) for l in open(transcript) if json.loads(l)["kind"] == "turn"]
        for rec in turns:
            assert rec["action"]["name"]
            assert rec["observation"]["for_action"] == rec["action"]["name"]

    def test_operator_interjection_reaches_backend(self, tmp_path, local_pool):
        runtime, dispatcher, ws = build_run(tmp_path, local_pool)
        seen = []

        class Watching(Backend):
            def next_action(self, ctx, observation):
                seen.append(observation)
                return Action(name="finish")

        run_loop(
            runtime,
            dispatcher,
            Watching(),
            transcript_path=str(tmp_path / "t.jsonl"),
            operator_messages=["switch to the smaller model"],
        )
        assert seen[0].payload["real_user"] == (
            "<real_user>switch to the smaller model</real_user>"
        )

    def test_budget_exhaustion_forces_finish(self, tmp_path, local_pool):
        runtime, dispatcher, ws = build_run(tmp_path, local_pool)
        runtime.clock = type(runtime.clock)(1.0, remaining=0.0)
        actions = [Action(name="think", params={"thought": "never runs"})]
        result = run_loop(
            runtime, dispatcher, ScriptedBackend(actions),
            transcript_path=str(tmp_path / "t.jsonl"),
        )
        assert runtime.finished
        assert result["final_report"] is not None

    def test_summarization_during_loop(self, tmp_path, local_pool):
        runtime, dispatcher, ws = build_run(tmp_path, local_pool)
        actions = [
            Action(name="think", params={"thought": f"step {i} " + "y" * 200})
            for i in range(60)
        ]
        result = run_loop(
            runtime,
            dispatcher,
            ScriptedBackend(actions),
            transcript_path=str(tmp_path / "t.jsonl"),
            max_context_tokens=2000,
        )
        assert result["summarizations"] >= 1
        assert result["final_report"] is not None
        records = [json.loads(l) for l in open(str(tmp_path / "t.jsonl"))]
        snapshots = [r for r in records if r["kind"] == "summary"]
        assert snapshots
        for rec in snapshots:
            for key in SUMMARY_SECTIONS:
                assert f"<{key}>" in rec["snapshot"]

    def test_turn_limit_still_finishes(self, tmp_path, local_pool):
        runtime, dispatcher, ws = build_run(tmp_path, local_pool)
        backend = ScriptedBackend(
            [Action(name="think", params={"thought": "again"})] * 50
        )
        backend.actions = backend.actions * 100  # never reaches finish naturally
        run_loop(
            runtime,
            dispatcher,
            backend,
            transcript_path=str(tmp_path / "t.jsonl"),
            max_turns=7,
        )
        assert runtime.finished
