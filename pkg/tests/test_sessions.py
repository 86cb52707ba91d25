import random
import time

import pytest

from labgym.sessions import (
    BUFFER_CAP,
    OutputBuffer,
    SessionError,
    SessionManager,
    slice_output,
)


def wait_until(predicate, timeout=10.0, interval=0.05):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


@pytest.fixture
def manager(workspace):
    mgr = SessionManager(workspace)
    yield mgr
    mgr.close_all()


def oracle_slice(lines, start_lines=None, end_lines=None, since_timestamp=None):
    """Independent reference: model the buffer as a plain list."""
    if since_timestamp is not None:
        return [e for e in lines if e[0] > since_timestamp]
    if start_lines is None:
        return list(lines)
    n = len(lines)
    picked = []
    for offset in range(start_lines, end_lines if end_lines is not None else 0, -1):
        idx = n - offset
        if 0 <= idx < n:
            picked.append(lines[idx])
    return picked


class TestSliceOracle:
    def make_lines(self, n):
        return [(1000.0 + i * 0.25, f"line-{i}") for i in range(n)]

    def test_exhaustive_small_buffers(self):
        for n in range(0, 30):
            lines = self.make_lines(n)
            for start in range(1, 35):
                assert slice_output(lines, start_lines=start) == oracle_slice(
                    lines, start_lines=start
                )
                for end in range(1, start):
                    got = slice_output(lines, start_lines=start, end_lines=end)
                    want = oracle_slice(lines, start_lines=start, end_lines=end)
                    assert got == want, (n, start, end)

    def test_since_timestamp_is_strict(self):
        lines = self.make_lines(10)
        exact = lines[4][0]
        got = slice_output(lines, since_timestamp=exact)
        assert got == lines[5:]

    def test_since_timestamp_overrides_windows(self):
        lines = self.make_lines(10)
        got = slice_output(lines, start_lines=3, end_lines=1, since_timestamp=0.0)
        assert got == lines

    def test_random_since_timestamps(self):
        rng = random.Random(7)
        lines = self.make_lines(200)
        for _ in range(500):
            ts = rng.uniform(999.0, 1060.0)
            assert slice_output(lines, since_timestamp=ts) == oracle_slice(
                lines, since_timestamp=ts
            )

    def test_invalid_windows_rejected(self):
        lines = self.make_lines(5)
        with pytest.raises(SessionError):
            slice_output(lines, start_lines=0)
        with pytest.raises(SessionError):
            slice_output(lines, start_lines=3, end_lines=3)
        with pytest.raises(SessionError):
            slice_output(lines, start_lines=2, end_lines=5)
        with pytest.raises(SessionError):
            slice_output(lines, start_lines=5, end_lines=0)


class TestOutputBuffer:
    def test_cap_keeps_newest(self):
        buf = OutputBuffer()
        for i in range(BUFFER_CAP + 500):
            buf.append(f"n{i}", ts=float(i))
        assert len(buf.lines) == BUFFER_CAP
        assert buf.lines[0][1] == "n500"
        assert buf.lines[-1][1] == f"n{BUFFER_CAP + 499}"

    def test_timestamps_non_decreasing(self):
        buf = OutputBuffer()
        buf.append("a", ts=10.0)
        buf.append("b", ts=5.0)
        assert buf.lines[1][0] == 10.0


class TestSessionLifecycle:
    def test_echo_waits_and_captures(self, manager):
        result = manager.run_command("echo hello-world", wait_for_completion=True)
        assert result["status"] == "finished"
        assert result["exit_code"] == 0
        assert "hello-world" in result["output_tail"]

    def test_session_id_is_8_hex(self, manager):
        session = manager.create()
        assert len(session.session_id) == 8
        int(session.session_id, 16)

    def test_wait_timeout_kills(self, manager):
        started = time.time()
        result = manager.run_command("sleep 60", wait_for_completion=True)
        elapsed = time.time() - started
        assert result["status"] == "timeout"
        assert 9.0 <= elapsed < 20.0
        sid = result["session_id"]
        assert wait_until(lambda: not manager._get(sid).running)

    def test_background_command_keeps_session_reusable(self, manager):
        result = manager.run_command("echo bg-line")
        sid = result["session_id"]
        assert wait_until(lambda: not manager._get(sid).running)
        out = manager.get_output(sid)
        assert "bg-line" in out["lines"]
        again = manager.run_command("echo second", session_id=sid, wait_for_completion=True)
        assert again["session_id"] == sid
        assert "second" in again["output_tail"]

    def test_single_flight_per_session(self, manager):
        result = manager.run_command("sleep 5")
        sid = result["session_id"]
        with pytest.raises(SessionError) as exc:
            manager._get(sid).start("echo nope")
        assert exc.value.kind == "session-busy"
        manager.kill_processes(sid, force=True)

    def test_send_input_drives_repl(self, manager):
        result = manager.run_command("python3 -u -i -c 'pass' 2>/dev/null")
        sid = result["session_id"]
        assert wait_until(lambda: manager._get(sid).running, timeout=5.0)
        time.sleep(1.0)
        manager.send_input(sid, "print(21 * 2)")
        assert wait_until(
            lambda: any("42" in line for line in manager.get_output(sid)["lines"])
        )
        manager.send_input(sid, "exit()")
        assert wait_until(lambda: not manager._get(sid).running)

    def test_send_input_requires_running_command(self, manager):
        session = manager.create()
        with pytest.raises(SessionError) as exc:
            manager.send_input(session.session_id, "hello")
        assert exc.value.kind == "session-idle"

    def test_clear_buffer(self, manager):
        result = manager.run_command("echo will-vanish", wait_for_completion=True)
        sid = result["session_id"]
        manager.clear_buffer(sid)
        assert manager.get_output(sid)["lines"] == []

    def test_get_output_start_lines_one_warns(self, manager):
        result = manager.run_command("printf 'a\\nb\\nc\\n'", wait_for_completion=True)
        out = manager.get_output(result["session_id"], start_lines=1)
        assert out["warning"] is not None
        assert out["lines"] == ["c"]

    def test_graceful_kill_terminates_group(self, manager):
        result = manager.run_command("sleep 300 & sleep 300 & wait")
        sid = result["session_id"]
        assert wait_until(lambda: len(manager._get(sid).processes()) >= 3, timeout=5.0)
        manager.kill_processes(sid)
        assert wait_until(lambda: manager.idle(sid).idle)
        # killing leaves the session open for reuse
        again = manager.run_command("echo alive", session_id=sid, wait_for_completion=True)
        assert "alive" in again["output_tail"]

    def test_force_kill_signal_ignoring_child(self, manager):
        script = "trap '' TERM; echo trapped; sleep 300"
        result = manager.run_command(script)
        sid = result["session_id"]
        assert wait_until(
            lambda: any("trapped" in l for l in manager.get_output(sid)["lines"]),
            timeout=5.0,
        )
        started = time.time()
        manager.kill_processes(sid)
        assert wait_until(lambda: manager.idle(sid).idle, timeout=10.0)
        assert time.time() - started < 15.0

    def test_close_removes_session(self, manager):
        session = manager.create()
        manager.close(session.session_id)
        with pytest.raises(SessionError) as exc:
            manager.status(session.session_id)
        assert exc.value.kind == "session-missing"

    def test_close_all(self, manager):
        for _ in range(3):
            manager.create()
        assert manager.close_all() == 3
        assert len(manager) == 0

    def test_list_key_format(self, manager):
        session = manager.create()
        listing = manager.list_sessions(computer_ip="10.1.2.3")
        assert f"10.1.2.3:{session.session_id}" in listing

    def test_duplicate_explicit_id_rejected(self, manager):
        manager.create("abcd1234")
        with pytest.raises(SessionError) as exc:
            manager.create("abcd1234")
        assert exc.value.kind == "duplicate-id"

    def test_missing_session_errors(self, manager):
        with pytest.raises(SessionError):
            manager.get_output("deadbeef")

    def test_idle_report_lists_children(self, manager):
        result = manager.run_command("sleep 10")
        sid = result["session_id"]
        assert wait_until(lambda: not manager.idle(sid).idle, timeout=5.0)
        report = manager.idle(sid)
        assert report.children
        manager.kill_processes(sid, force=True)

    def test_buffer_cap_live(self, manager):
        result = manager.run_command(
            f"seq 1 {BUFFER_CAP + 200}", wait_for_completion=True
        )
        sid = result["session_id"]
        out = manager.get_output(sid)
        assert out["total_lines"] == BUFFER_CAP
        assert out["lines"][-1] == str(BUFFER_CAP + 200)
        assert out["lines"][0] == "201"

    def test_since_timestamp_live(self, manager):
        result = manager.run_command("echo first", wait_for_completion=True)
        sid = result["session_id"]
        marker = manager.get_output(sid)["newest_timestamp"]
        time.sleep(0.05)
        manager.run_command("echo later", session_id=sid, wait_for_completion=True)
        out = manager.get_output(sid, since_timestamp=marker)
        assert "later" in out["lines"]
        assert "first" not in out["lines"]
