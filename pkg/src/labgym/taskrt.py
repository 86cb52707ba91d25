"""Task lifecycle: package loading, hints, gated external evaluation, budget.

A task package is a directory with task.toml, description.md, a workspace/
template, optional hint.md, and an evaluation/ directory whose contents are
never copied into the agent-visible workspace. Evaluation scripts run in an
isolated scratch directory against a read-only copy of the declared outputs
and report their raw metric as a final "RAW_METRIC=<float>" output line.
"""
import os
import re
import shutil
import stat
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import toml

RAW_METRIC_RE = re.compile(r"^RAW_METRIC=([-+0-9.eE]+)\s*$", re.MULTILINE)
DEFAULT_HINT_PENALTY = 0.8


class TaskError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class TaskSpec:
    task_id: str
    package_path: str
    description: str
    hint: Optional[str]
    eval_script: str
    baseline_raw: float
    reference_raw: float
    max_evals: int
    eval_timeout: float
    higher_is_better: bool
    final_eval_counts: bool
    hint_penalty: float
    web_enabled: bool
    total_seconds: float
    gpu_grant: str
    required_outputs: List[str]
    format_notes: str

    def validate(self) -> None:
        if self.baseline_raw == self.reference_raw:
            raise TaskError("degenerate-anchors", "baseline and reference raw metrics are equal")
        if self.max_evals < 1:
            raise TaskError("layout-invalid", "max_evals must be >= 1")
        if self.total_seconds <= 0:
            raise TaskError("layout-invalid", "total_seconds must be > 0")


@dataclass
class EvalResult:
    attempt_index: int
    raw_metric: Optional[float]
    calibrated_score: float
    format_ok: bool
    feedback: str
    timestamp: float = field(default_factory=time.time)
    counted: bool = True


@dataclass
class RunLedger:
    evals_used: int = 0
    hint_viewed: bool = False
    best_score: float = 0.0
    final_score: float = 0.0
    started_at: float = field(default_factory=time.time)
    ended_at: Optional[float] = None
    history: List[EvalResult] = field(default_factory=list)

    def record(self, result: EvalResult) -> None:
        self.history.append(result)
        if result.calibrated_score > self.best_score:
            self.best_score = result.calibrated_score


class RunClock:
    """Wall-clock budget; save/restore gaps are excluded by construction
    because a restored clock restarts from the saved remaining budget."""

    def __init__(self, total_seconds: float, remaining: Optional[float] = None):
        self.total_seconds = total_seconds
        self._budget_at_start = total_seconds if remaining is None else remaining
        self._started = time.monotonic()

    def remaining(self) -> float:
        return max(0.0, self._budget_at_start - (time.monotonic() - self._started))

    def exhausted(self) -> bool:
        return self.remaining() <= 0.0


def load_task(package_path: str, workspace_dir: str) -> TaskSpec:
    """Validate the package layout and populate a fresh workspace from it."""
    package_path = os.path.realpath(package_path)
    config_path = os.path.join(package_path, "task.toml")
    description_path = os.path.join(package_path, "description.md")
    template_dir = os.path.join(package_path, "workspace")
    for required, kind in ((config_path, "task.toml"), (description_path, "description.md")):
        if not os.path.isfile(required):
            raise TaskError("layout-invalid", f"task package missing {kind}")
    if not os.path.isdir(template_dir):
        raise TaskError("layout-invalid", "task package missing workspace/ template")
    try:
        cfg = toml.load(config_path)
    except toml.TomlDecodeError as exc:
        raise TaskError("layout-invalid", f"bad task.toml: {exc}") from exc

    task_cfg = cfg.get("task", {})
    eval_cfg = cfg.get("eval", {})
    caps = cfg.get("capabilities", {})
    budget = cfg.get("budget", {})
    outputs = cfg.get("outputs", {})

    script_rel = eval_cfg.get("script", "evaluation/score.py")
    script_path = os.path.join(package_path, script_rel)
    if not os.path.isfile(script_path):
        raise TaskError("layout-invalid", f"evaluation script missing: {script_rel}")

    hint_path = os.path.join(package_path, "hint.md")
    hint = None
    if os.path.isfile(hint_path):
        with open(hint_path, "r", encoding="utf-8") as fh:
            hint = fh.read()
    with open(description_path, "r", encoding="utf-8") as fh:
        description = fh.read()

    spec = TaskSpec(
        task_id=task_cfg.get("id", os.path.basename(package_path)),
        package_path=package_path,
        description=description,
        hint=hint,
        eval_script=script_path,
        baseline_raw=float(eval_cfg.get("baseline_raw", 0.0)),
        reference_raw=float(eval_cfg.get("reference_raw", 1.0)),
        max_evals=int(eval_cfg.get("max_evals", 4)),
        eval_timeout=float(eval_cfg.get("eval_timeout", 300.0)),
        higher_is_better=bool(eval_cfg.get("higher_is_better", True)),
        final_eval_counts=bool(eval_cfg.get("final_eval_counts", False)),
        hint_penalty=float(eval_cfg.get("hint_penalty", DEFAULT_HINT_PENALTY)),
        web_enabled=bool(caps.get("web", False)),
        total_seconds=float(budget.get("total_seconds", 3600.0)),
        gpu_grant=str(budget.get("gpu", "none")),
        required_outputs=list(outputs.get("required", [])),
        format_notes=str(outputs.get("format_notes", "")),
    )
    spec.validate()

    # fresh workspace from the template; evaluation/ never enters it
    os.makedirs(workspace_dir, exist_ok=True)
    for entry in os.listdir(workspace_dir):
        full = os.path.join(workspace_dir, entry)
        shutil.rmtree(full) if os.path.isdir(full) else os.remove(full)
    try:
        shutil.copytree(template_dir, workspace_dir, dirs_exist_ok=True)
    except OSError as exc:
        raise TaskError("copy-failure", f"cannot populate workspace: {exc}") from exc
    os.makedirs(os.path.join(workspace_dir, "data", "outputs"), exist_ok=True)
    return spec


def calibrate_score(
    raw: float,
    baseline_raw: float,
    reference_raw: float,
    hint_viewed: bool = False,
    hint_penalty: float = DEFAULT_HINT_PENALTY,
    higher_is_better: bool = True,
) -> float:
    """Linear map sending the baseline to 0 and the reference to 80,
    clamped to [0, 100]. The hint penalty multiplies before clamping."""
    if baseline_raw == reference_raw:
        raise TaskError("degenerate-anchors", "baseline and reference raw metrics are equal")
    if not higher_is_better:
        raw, baseline_raw, reference_raw = -raw, -baseline_raw, -reference_raw
    score = 80.0 * (raw - baseline_raw) / (reference_raw - baseline_raw)
    if hint_viewed:
        score *= hint_penalty
    return min(100.0, max(0.0, score))


class TaskRuntime:
    """One task run: workspace, ledger, clock, and the evaluation gate."""

    def __init__(
        self,
        spec: TaskSpec,
        workspace_dir: str,
        ledger: Optional[RunLedger] = None,
        clock: Optional[RunClock] = None,
    ):
        self.spec = spec
        self.workspace_dir = os.path.realpath(workspace_dir)
        self.ledger = ledger or RunLedger()
        self.clock = clock or RunClock(spec.total_seconds)
        self.finished = False
        self._force_finished = False
        self.final_report: Optional[Dict[str, object]] = None

    def view_hint(self) -> str:
        if self.spec.hint is None:
            raise TaskError("no-hint", "this task has no hint")
        self.ledger.hint_viewed = True  # idempotent; penalty applies once
        return self.spec.hint

    def budget_tick(self) -> float:
        return self.clock.remaining()

    def _check_format(self) -> Optional[str]:
        missing = [
            rel
            for rel in self.spec.required_outputs
            if not os.path.exists(os.path.join(self.workspace_dir, rel))
        ]
        if missing:
            return "missing required output file(s): " + ", ".join(missing)
        return None

    def _run_eval_script(self) -> EvalResult:
        """Execute the external script in a scratch directory outside the
        workspace, against a read-only copy of the declared outputs."""
        attempt = self.ledger.evals_used
        format_error = self._check_format()
        if format_error:
            return EvalResult(
                attempt_index=attempt,
                raw_metric=None,
                calibrated_score=0.0,
                format_ok=False,
                feedback=format_error,
            )
        scratch = tempfile.mkdtemp(prefix="gym-eval-")
        try:
            outputs_copy = os.path.join(scratch, "outputs")
            os.makedirs(outputs_copy)
            for rel in self.spec.required_outputs:
                src = os.path.join(self.workspace_dir, rel)
                dst = os.path.join(outputs_copy, rel)
                os.makedirs(os.path.dirname(dst), exist_ok=True)
                if os.path.isdir(src):
                    shutil.copytree(src, dst)
                else:
                    shutil.copyfile(src, dst)
            for root, _, names in os.walk(outputs_copy):
                for name in names:
                    path = os.path.join(root, name)
                    os.chmod(path, os.stat(path).st_mode & ~(stat.S_IWUSR | stat.S_IWGRP | stat.S_IWOTH))
            cmd = (
                [sys.executable, self.spec.eval_script, outputs_copy]
                if self.spec.eval_script.endswith(".py")
                else [self.spec.eval_script, outputs_copy]
            )
            env = dict(os.environ, GYM_EVAL_OUTPUTS=outputs_copy)
            try:
                proc = subprocess.run(
                    cmd,
                    cwd=scratch,
                    env=env,
                    capture_output=True,
                    text=True,
                    timeout=self.spec.eval_timeout,
                )
            except subprocess.TimeoutExpired:
                return EvalResult(
                    attempt_index=attempt,
                    raw_metric=None,
                    calibrated_score=0.0,
                    format_ok=True,
                    feedback=f"evaluation timed out after {self.spec.eval_timeout:.0f}s",
                )
            match = None
            for match in RAW_METRIC_RE.finditer(proc.stdout):
                pass  # keep the last sentinel line
            if proc.returncode != 0 or match is None:
                stderr_tail = proc.stderr.strip().splitlines()[-10:]
                reason = (
                    f"evaluation script exited with {proc.returncode}"
                    if proc.returncode != 0
                    else "evaluation script produced no RAW_METRIC line"
                )
                return EvalResult(
                    attempt_index=attempt,
                    raw_metric=None,
                    calibrated_score=0.0,
                    format_ok=True,
                    feedback=reason + ("\n" + "\n".join(stderr_tail) if stderr_tail else ""),
                )
            raw = float(match.group(1))
            score = calibrate_score(
                raw,
                self.spec.baseline_raw,
                self.spec.reference_raw,
                hint_viewed=self.ledger.hint_viewed,
                hint_penalty=self.spec.hint_penalty,
                higher_is_better=self.spec.higher_is_better,
            )
            feedback_lines = [
                line for line in proc.stdout.splitlines() if not RAW_METRIC_RE.match(line)
            ]
            return EvalResult(
                attempt_index=attempt,
                raw_metric=raw,
                calibrated_score=score,
                format_ok=True,
                feedback="\n".join(feedback_lines[-20:]),
            )
        finally:
            shutil.rmtree(scratch, ignore_errors=True)

    def evaluate(self) -> EvalResult:
        if self.ledger.evals_used >= self.spec.max_evals:
            raise TaskError(
                "eval-budget-exhausted",
                f"all {self.spec.max_evals} evaluation attempts are used",
            )
        self.ledger.evals_used += 1
        result = self._run_eval_script()
        result.attempt_index = self.ledger.evals_used
        self.ledger.record(result)
        return result

    def finish(
        self, save_snapshot: Optional[Callable[[], str]] = None
    ) -> Dict[str, object]:
        """Run the final evaluation, optionally snapshot, close the ledger."""
        if self.finished:
            return self.final_report or {}
        self.finished = True
        if self.spec.final_eval_counts and self.ledger.evals_used < self.spec.max_evals:
            self.ledger.evals_used += 1
        final_result = self._run_eval_script()
        final_result.counted = self.spec.final_eval_counts
        self.ledger.record(final_result)
        self.ledger.final_score = final_result.calibrated_score
        self.ledger.ended_at = time.time()
        snapshot_id = None
        snapshot_error = None
        if save_snapshot is not None:
            try:
                snapshot_id = save_snapshot()
            except Exception as exc:  # errors fold into the report
                snapshot_error = str(exc)
        self.final_report = {
            "task_id": self.spec.task_id,
            "final_score": self.ledger.final_score,
            "best_score": self.ledger.best_score,
            "evals_used": self.ledger.evals_used,
            "hint_viewed": self.ledger.hint_viewed,
            "snapshot_id": snapshot_id,
            "snapshot_error": snapshot_error,
            "remaining_seconds": self.clock.remaining(),
        }
        return self.final_report

    def force_finish_if_exhausted(
        self, save_snapshot: Optional[Callable[[], str]] = None
    ) -> bool:
        """Invoke finish exactly once when the time budget hits zero."""
        if self._force_finished or not self.clock.exhausted():
            return False
        self._force_finished = True
        self.finish(save_snapshot)
        return True
