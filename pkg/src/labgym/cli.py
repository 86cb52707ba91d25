"""Command-line entry points: daemon, run, eval, report, snapshot."""
import csv
import json
import os
import sys

import click

from .agent import HttpBackend, ScriptedBackend, run_loop
from .daemon import Daemon, DaemonConfig
from .dispatch import Dispatcher, load_pool
from .fileops import FileService
from .snapshots import RunState, SnapshotStore
from .taskrt import RunLedger, TaskRuntime, load_task
from .web import WebSession


@click.group()
def main() -> None:
    """Agent research environment."""


@main.command()
@click.option("--workspace", required=True, type=click.Path(file_okay=False))
@click.option("--port", default=8700, show_default=True)
@click.option("--bind", default="0.0.0.0", show_default=True)
@click.option("--advertised-ip", default="localhost", show_default=True)
def daemon(workspace: str, port: int, bind: str, advertised_ip: str) -> None:
    """Serve the per-machine execution daemon."""
    os.makedirs(workspace, exist_ok=True)
    config = DaemonConfig(
        workspace=workspace, bind=bind, http_port=port, advertised_ip=advertised_ip
    )
    service = Daemon(config)
    click.echo(f"daemon listening on {bind}:{config.http_port}, workspace {workspace}")
    service.serve_forever()


def _save_ledger(run_dir: str, runtime: TaskRuntime, task_package: str) -> None:
    ledger = runtime.ledger
    doc = {
        "task_package": task_package,
        "workspace": runtime.workspace_dir,
        "evals_used": ledger.evals_used,
        "hint_viewed": ledger.hint_viewed,
        "best_score": ledger.best_score,
        "final_score": ledger.final_score,
        "remaining_seconds": runtime.clock.remaining(),
        "history": [
            {
                "attempt_index": r.attempt_index,
                "raw_metric": r.raw_metric,
                "calibrated_score": r.calibrated_score,
                "format_ok": r.format_ok,
                "feedback": r.feedback,
                "timestamp": r.timestamp,
                "counted": r.counted,
            }
            for r in ledger.history
        ],
    }
    with open(os.path.join(run_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def _load_runtime(run_dir: str) -> tuple:
    path = os.path.join(run_dir, "run.json")
    if not os.path.isfile(path):
        raise click.ClickException(f"no run.json in {run_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    # Re-read the task spec via a scratch workspace; the run's own workspace
    # stays untouched.
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        spec = load_task(doc["task_package"], tmp)
    ledger = RunLedger(
        evals_used=doc["evals_used"],
        hint_viewed=doc["hint_viewed"],
        best_score=doc["best_score"],
        final_score=doc["final_score"],
    )
    from .taskrt import RunClock

    runtime = TaskRuntime(
        spec,
        doc["workspace"],
        ledger=ledger,
        clock=RunClock(spec.total_seconds, remaining=doc["remaining_seconds"]),
    )
    return runtime, doc


@main.command()
@click.option("--task", "task_package", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--pool", "pool_config", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--agent", "agent_spec", required=True,
              help="Model endpoint URL or scripted:<actions.jsonl>")
@click.option("--run-dir", default="./run", show_default=True, type=click.Path(file_okay=False))
@click.option("--max-context", default=200_000, show_default=True)
@click.option("--interject", multiple=True, help="Operator note injected into the next observation")
def run(task_package, pool_config, agent_spec, run_dir, max_context, interject) -> None:
    """Load a task, drive the agent loop, and persist the transcript."""
    os.makedirs(run_dir, exist_ok=True)
    workspace = os.path.join(run_dir, "workspace")
    spec = load_task(task_package, workspace)
    runtime = TaskRuntime(spec, workspace)
    pool = load_pool(pool_config)
    dispatcher = Dispatcher(
        pool=pool,
        files=FileService(workspace),
        web=WebSession(enabled=spec.web_enabled),
        runtime=runtime,
    )
    if agent_spec.startswith("scripted:"):
        backend = ScriptedBackend.from_file(agent_spec[len("scripted:"):])
    else:
        backend = HttpBackend(endpoint=agent_spec)
    store = SnapshotStore(os.path.join(run_dir, "store"))

    def save_snapshot() -> str:
        state = RunState(
            workspace_dir=workspace,
            context_blob=json.dumps({"turns": len(runtime.ledger.history)}).encode(),
            remaining_budget=runtime.clock.remaining(),
            task_ref=spec.task_id,
        )
        return store.save(state)

    result = run_loop(
        runtime,
        dispatcher,
        backend,
        transcript_path=os.path.join(run_dir, "transcript.jsonl"),
        max_context_tokens=max_context,
        save_snapshot=save_snapshot,
        operator_messages=list(interject),
    )
    _save_ledger(run_dir, runtime, os.path.realpath(task_package))
    report = result["final_report"] or {}
    click.echo(
        f"final score {report.get('final_score', 0.0):.2f}, "
        f"best score {report.get('best_score', 0.0):.2f}, "
        f"evals used {report.get('evals_used', 0)}"
    )


@main.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
def eval_cmd(run_dir: str) -> None:
    """Run one gated evaluation attempt against an existing run."""
    runtime, doc = _load_runtime(run_dir)
    from .taskrt import TaskError

    try:
        result = runtime.evaluate()
    except TaskError as exc:
        raise click.ClickException(f"{exc.kind}: {exc}")
    _save_ledger(run_dir, runtime, doc["task_package"])
    click.echo(
        f"attempt {result.attempt_index}: score {result.calibrated_score:.2f} "
        f"(raw={result.raw_metric}, format_ok={result.format_ok})"
    )
    if result.feedback:
        click.echo(result.feedback)


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False),
              help="Report output directory (defaults to <run>/report)")
def report(run_dir: str, out_dir: str) -> None:
    """Write the evaluation report: scores CSV plus a progression figure."""
    path = os.path.join(run_dir, "run.json")
    if not os.path.isfile(path):
        raise click.ClickException(f"no run.json in {run_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    out_dir = out_dir or os.path.join(run_dir, "report")
    os.makedirs(out_dir, exist_ok=True)

    csv_path = os.path.join(out_dir, "evals.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["attempt_index", "raw_metric", "calibrated_score", "format_ok", "counted", "timestamp"]
        )
        for row in doc["history"]:
            writer.writerow(
                [
                    row["attempt_index"],
                    row["raw_metric"],
                    row["calibrated_score"],
                    row["format_ok"],
                    row["counted"],
                    row["timestamp"],
                ]
            )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    history = doc["history"]
    if history:
        xs = list(range(1, len(history) + 1))
        scores = [row["calibrated_score"] for row in history]
        ax.plot(xs, scores, marker="o", label="calibrated score")
        best = []
        top = 0.0
        for score in scores:
            top = max(top, score)
            best.append(top)
        ax.plot(xs, best, linestyle="--", label="best so far")
        ax.set_xticks(xs)
    ax.set_xlabel("evaluation attempt")
    ax.set_ylabel("score")
    ax.set_ylim(0, 105)
    ax.set_title(f"Run scores (final {doc['final_score']:.1f}, best {doc['best_score']:.1f})")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig_path = os.path.join(out_dir, "score_progress.png")
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    click.echo(f"wrote {csv_path}")
    click.echo(f"wrote {fig_path}")


@main.group()
def snapshot() -> None:
    """Save, restore, and list run-state snapshots."""


@snapshot.command("save")
@click.option("--store", "store_dir", required=True, type=click.Path(file_okay=False))
@click.option("--workspace", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--budget", type=float, required=True, help="Remaining budget seconds")
@click.option("--context-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--task-ref", default="")
@click.option("--parent", default=None)
def snapshot_save(store_dir, workspace, budget, context_file, task_ref, parent) -> None:
    store = SnapshotStore(store_dir)
    context = b""
    if context_file:
        with open(context_file, "rb") as fh:
            context = fh.read()
    state = RunState(
        workspace_dir=workspace,
        context_blob=context,
        remaining_budget=budget,
        task_ref=task_ref,
        parent_id=parent,
    )
    click.echo(store.save(state))


@snapshot.command("restore")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--id", "snapshot_id", required=True)
@click.option("--workspace", required=True, type=click.Path(file_okay=False))
def snapshot_restore(store_dir, snapshot_id, workspace) -> None:
    store = SnapshotStore(store_dir)
    state = store.restore(snapshot_id, workspace)
    click.echo(
        f"restored {snapshot_id} into {workspace} "
        f"({state.remaining_budget:.0f}s budget remaining)"
    )


@snapshot.command("list")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--tree/--flat", default=True, show_default=True)
def snapshot_list(store_dir, tree) -> None:
    store = SnapshotStore(store_dir)
    if tree:
        rendered = store.render_tree()
        click.echo(rendered if rendered else "(empty)")
    else:
        for snap in store.list_snapshots():
            click.echo(json.dumps(snap))


if __name__ == "__main__":
    sys.exit(main())
