"""Self-hostable agent research environment."""

from .protocol import Action, ComputerKind, ComputerRef, Observation, decode, encode, validate
from .sessions import SessionManager
from .daemon import Daemon, DaemonConfig, serve
from .dispatch import ComputerPool, Dispatcher, RouteDecision, load_pool, route
from .fileops import FileService
from .web import WebSession
from .snapshots import RunState, SnapshotStore
from .taskrt import RunLedger, TaskRuntime, TaskSpec, calibrate_score, load_task
from .agent import AgentContext, Backend, HttpBackend, ScriptedBackend, run_loop

__all__ = [
    "Action",
    "AgentContext",
    "Backend",
    "ComputerKind",
    "ComputerPool",
    "ComputerRef",
    "Daemon",
    "DaemonConfig",
    "Dispatcher",
    "FileService",
    "HttpBackend",
    "Observation",
    "RouteDecision",
    "RunLedger",
    "RunState",
    "ScriptedBackend",
    "SessionManager",
    "SnapshotStore",
    "TaskRuntime",
    "TaskSpec",
    "WebSession",
    "calibrate_score",
    "decode",
    "encode",
    "load_pool",
    "load_task",
    "route",
    "run_loop",
    "serve",
    "validate",
]

__version__ = "0.1.0"
