import json
import os
import re
import textwrap
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from labgym.daemon import Daemon, DaemonConfig
from labgym.dispatch import build_pool
from labgym.protocol import ComputerKind, ComputerRef


# one "[PASS]/[FAIL] <criterion>" line per acceptance criterion, printed in
# the terminal summary so pytest's capture cannot swallow it
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.ensure_newline()
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def workspace(tmp_path):
    ws = tmp_path / "workspace"
    ws.mkdir()
    return str(ws)


@pytest.fixture
def daemon(workspace):
    config = DaemonConfig(workspace=workspace, bind="127.0.0.1", http_port=0)
    service = Daemon(config)
    service.start()
    yield service
    service.stop()


@pytest.fixture
def local_pool(daemon):
    return build_pool(
        [{"ip": "127.0.0.1", "port": daemon.port, "kind": "localhost_cpu"}]
    )


EVAL_SCRIPT = textwrap.dedent(
    """\
    import os, sys

    outputs = sys.argv[1]
    result_path = os.path.join(outputs, "data", "outputs", "result.txt")
    with open(result_path) as fh:
        raw = float(fh.read().strip())
    print(f"scored submission from {result_path}")
    print(f"RAW_METRIC={raw}")
    """
)


def make_task_package(
    root,
    task_id="toy-task",
    baseline=0.0,
    reference=0.8,
    max_evals=4,
    total_seconds=3600.0,
    hint="Write the best raw metric you can into result.txt.",
    web=False,
    hint_penalty=0.8,
    final_eval_counts=False,
    eval_script=EVAL_SCRIPT,
):
    """Build a minimal task package; the eval script reads a float from
    data/outputs/result.txt and reports it as the raw metric."""
    pkg = root / "task-package"
    (pkg / "workspace" / "data").mkdir(parents=True)
    (pkg / "workspace" / "task").mkdir()
    (pkg / "evaluation").mkdir()
    (pkg / "workspace" / "data" / "input.txt").write_text("starter data\n")
    (pkg / "workspace" / "task" / "README.md").write_text("solve the task\n")
    (pkg / "description.md").write_text(
        "## Motivation\ntoy\n## Task\nwrite a float to data/outputs/result.txt\n"
        "## Data\ndata/input.txt\n## Constraints\nnone\n## Evaluation\nraw metric\n"
        "## Scripts\nnone\n## Environment\nlocal\n"
    )
    (pkg / "evaluation" / "score.py").write_text(eval_script)
    if hint is not None:
        (pkg / "hint.md").write_text(hint)
    (pkg / "task.toml").write_text(
        textwrap.dedent(
            f"""\
            [task]
            id = "{task_id}"

            [eval]
            script = "evaluation/score.py"
            baseline_raw = {baseline}
            reference_raw = {reference}
            max_evals = {max_evals}
            eval_timeout = 30.0
            higher_is_better = true
            final_eval_counts = {str(final_eval_counts).lower()}
            hint_penalty = {hint_penalty}

            [capabilities]
            web = {str(web).lower()}

            [budget]
            total_seconds = {total_seconds}
            gpu = "none"

            [outputs]
            required = ["data/outputs/result.txt"]
            format_notes = "a single float"
            """
        )
    )
    return pkg


@pytest.fixture
def task_package(tmp_path):
    return make_task_package(tmp_path)


class _StubMediaHandler(BaseHTTPRequestHandler):
    reply_prefix = "STUB:"

    def log_message(self, fmt, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length).decode("utf-8", errors="replace")
        match = re.search(r'name="task"\r\n\r\n(.*?)\r\n', body, re.DOTALL)
        task = match.group(1) if match else ""
        reply = (self.reply_prefix + task).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(reply)))
        self.end_headers()
        self.wfile.write(reply)


@pytest.fixture
def stub_media_endpoint():
    """HTTP stub echoing the task string; deterministic across calls."""
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubMediaHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/"
    server.shutdown()
    server.server_close()


class _StubModelHandler(BaseHTTPRequestHandler):
    replies = []
    calls = []

    def log_message(self, fmt, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        type(self).calls.append(body)
        reply = self.replies.pop(0) if self.replies else {"tool": "finish", "params": {}}
        data = json.dumps(reply).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def stub_model_endpoint():
    handler = type("Handler", (_StubModelHandler,), {"replies": [], "calls": []})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/", handler
    server.shutdown()
    server.server_close()


def pool_of(*kinds):
    """Quick in-memory pool: kinds like ('localhost_cpu', 'cpu', 'gpu')."""
    entries = []
    for i, kind in enumerate(kinds):
        entries.append({"ip": f"10.0.0.{i + 1}", "port": 8700 + i, "kind": kind})
    return build_pool(entries)


def gpu_ref(ip="10.0.0.3", port=8702):
    return ComputerRef(ip=ip, http_port=port, kind=ComputerKind.GPU, use_proxy=True)
