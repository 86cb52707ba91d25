import concurrent.futures
import json
import time

import pytest
import requests

from labgym import protocol
from labgym.daemon import ENDPOINT_ACTIONS, DaemonConfig, handle_action
from labgym.protocol import Action
from labgym.sessions import SessionManager


def post(daemon, suffix, action):
    url = f"http://127.0.0.1:{daemon.port}/v1/session/{suffix}"
    resp = requests.post(url, data=protocol.encode(action), timeout=30)
    assert resp.status_code == 200
    obs = protocol.decode(resp.content)
    assert isinstance(obs, protocol.Observation)
    return obs


class TestConfig:
    def test_rejects_missing_workspace(self, tmp_path):
        with pytest.raises(ValueError):
            DaemonConfig(workspace=str(tmp_path / "nope"))

    def test_port_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GYM_DAEMON_PORT", "9123")
        config = DaemonConfig(workspace=str(tmp_path), http_port=8700)
        assert config.http_port == 9123


class TestHealth:
    def test_health_reports_session_count(self, daemon):
        url = f"http://127.0.0.1:{daemon.port}/v1/health"
        doc = requests.get(url, timeout=10).json()
        assert doc == {"status": "ok", "sessions": 0}
        daemon.manager.create()
        doc = requests.get(url, timeout=10).json()
        assert doc["sessions"] == 1

    def test_unknown_path_404(self, daemon):
        url = f"http://127.0.0.1:{daemon.port}/v1/nothing"
        assert requests.get(url, timeout=10).status_code == 404


class TestEndpoints:
    def test_every_command_action_has_an_endpoint(self):
        assert sorted(ENDPOINT_ACTIONS.values()) == sorted(
            name
            for name, entry in protocol.ACTION_CATALOG.items()
            if entry["family"] == protocol.Family.COMMAND
        )

    def test_run_and_output_roundtrip(self, daemon):
        obs = post(
            daemon,
            "run",
            Action(name="run_command", params={"command": "echo over-http", "wait_for_completion": True}),
        )
        assert obs.ok
        sid = obs.payload["session_id"]
        out = post(daemon, "output", Action(name="get_session_output", params={"session_id": sid}))
        assert "over-http" in out.payload["lines"]

    def test_garbage_bytes_yield_protocol_error(self, daemon):
        url = f"http://127.0.0.1:{daemon.port}/v1/session/run"
        resp = requests.post(url, data=b"\x00\xffgarbage", timeout=10)
        assert resp.status_code == 200
        obs = protocol.decode(resp.content)
        assert obs.status == "error"
        assert obs.error_kind == "protocol"

    def test_mismatched_action_name(self, daemon):
        obs = post(daemon, "run", Action(name="close_all_sessions"))
        assert obs.status == "error"
        assert obs.error_kind == "protocol"

    def test_unknown_endpoint_404(self, daemon):
        url = f"http://127.0.0.1:{daemon.port}/v1/session/frobnicate"
        assert requests.post(url, data=b"{}", timeout=10).status_code == 404

    def test_missing_session_error_observation(self, daemon):
        obs = post(
            daemon,
            "status",
            Action(name="session_status", params={"session_id": "deadbeef"}),
        )
        assert obs.status == "error"
        assert obs.error_kind == "session-missing"

    def test_list_uses_advertised_ip(self, daemon):
        daemon.manager.create("feedc0de")
        obs = post(daemon, "list", Action(name="list_sessions"))
        assert obs.ok
        assert "localhost:feedc0de" in obs.payload["sessions"]

    def test_concurrent_polls_during_running_command(self, daemon):
        obs = post(
            daemon,
            "run",
            Action(
                name="run_command",
                params={"command": "for i in 1 2 3 4 5; do echo tick-$i; sleep 0.3; done"},
            ),
        )
        sid = obs.payload["session_id"]

        def poll(_):
            return post(
                daemon,
                "output",
                Action(name="get_session_output", params={"session_id": sid}),
            )

        with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(poll, range(16)))
        assert all(r.ok for r in results)
        deadline = time.time() + 10
        while time.time() < deadline:
            out = poll(None)
            if "tick-5" in out.payload["lines"]:
                break
            time.sleep(0.1)
        assert "tick-5" in out.payload["lines"]


class TestHandleAction:
    def test_rejects_non_command_family(self, workspace):
        manager = SessionManager(workspace)
        obs = handle_action(manager, Action(name="open_file", params={"path": "/tmp/x"}))
        assert obs.status == "error"
        assert obs.error_kind == "unsupported-action"

    def test_rejects_invalid_params(self, workspace):
        manager = SessionManager(workspace)
        obs = handle_action(manager, Action(name="run_command", params={}))
        assert obs.status == "error"
        assert obs.error_kind == "protocol"

    def test_close_all_counts(self, workspace):
        manager = SessionManager(workspace)
        manager.create()
        manager.create()
        obs = handle_action(manager, Action(name="close_all_sessions"))
        assert obs.ok and obs.payload["closed"] == 2
