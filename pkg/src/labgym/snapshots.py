"""Run-state snapshots: content-addressed capture and branching restore.

Store layout: store/manifests/<id>.manifest (JSON file list + metadata) and
store/blobs/<sha256>. Blobs are shared across snapshots, so repeated saves of
large unchanged files cost nothing. Snapshots are immutable and append-only.
"""
import hashlib
import json
import os
import secrets
import shutil
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional


class SnapshotError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class RunState:
    """Everything a snapshot captures about a run."""

    workspace_dir: str
    context_blob: bytes
    remaining_budget: float
    task_ref: str = ""
    parent_id: Optional[str] = None
    session_summaries: List[Dict[str, object]] = field(default_factory=list)


def _hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _hash_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class SnapshotStore:
    def __init__(self, root: str):
        self.root = root
        self.manifest_dir = os.path.join(root, "manifests")
        self.blob_dir = os.path.join(root, "blobs")
        os.makedirs(self.manifest_dir, exist_ok=True)
        os.makedirs(self.blob_dir, exist_ok=True)

    def _blob_path(self, digest: str) -> str:
        return os.path.join(self.blob_dir, digest)

    def _store_blob(self, source_path: str, digest: str) -> None:
        dest = self._blob_path(digest)
        if os.path.exists(dest):
            return
        tmp = dest + f".tmp.{secrets.token_hex(4)}"
        shutil.copyfile(source_path, tmp)
        os.replace(tmp, dest)

    def _store_blob_bytes(self, data: bytes) -> str:
        digest = _hash_bytes(data)
        dest = self._blob_path(digest)
        if not os.path.exists(dest):
            tmp = dest + f".tmp.{secrets.token_hex(4)}"
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, dest)
        return digest

    def save(self, state: RunState, quiescent: bool = True) -> str:
        """Persist a snapshot of the run state; returns the new snapshot id."""
        if not quiescent:
            raise SnapshotError(
                "not-quiescent", "cannot snapshot while a session is running a command"
            )
        if state.remaining_budget < 0:
            raise SnapshotError("storage-failure", "remaining budget must be >= 0")
        snapshot_id = f"s-{secrets.token_hex(6)}"
        files = []
        workspace = os.path.realpath(state.workspace_dir)
        for root, dirs, names in os.walk(workspace):
            dirs.sort()
            for name in sorted(names):
                full = os.path.join(root, name)
                if os.path.islink(full):
                    continue
                rel = os.path.relpath(full, workspace)
                digest = _hash_file(full)
                try:
                    self._store_blob(full, digest)
                except OSError as exc:
                    raise SnapshotError("storage-failure", f"cannot store {rel}: {exc}") from exc
                files.append(
                    {
                        "path": rel,
                        "hash": digest,
                        "size": os.path.getsize(full),
                        "mode": os.stat(full).st_mode & 0o777,
                    }
                )
        context_digest = self._store_blob_bytes(state.context_blob)
        manifest = {
            "snapshot_id": snapshot_id,
            "parent_id": state.parent_id,
            "created_at": time.time(),
            "task_ref": state.task_ref,
            "remaining_budget": state.remaining_budget,
            "context_hash": context_digest,
            "session_summaries": state.session_summaries,
            "files": files,
        }
        path = os.path.join(self.manifest_dir, f"{snapshot_id}.manifest")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1)
        os.replace(tmp, path)
        return snapshot_id

    def _load_manifest(self, snapshot_id: str) -> Dict[str, object]:
        path = os.path.join(self.manifest_dir, f"{snapshot_id}.manifest")
        if not os.path.isfile(path):
            raise SnapshotError("missing-snapshot", f"no such snapshot: {snapshot_id}")
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def _read_blob(self, digest: str) -> bytes:
        path = self._blob_path(digest)
        if not os.path.isfile(path):
            raise SnapshotError("checksum-mismatch", f"missing blob {digest}")
        with open(path, "rb") as fh:
            data = fh.read()
        if _hash_bytes(data) != digest:
            raise SnapshotError("checksum-mismatch", f"blob {digest} content does not match its hash")
        return data

    def restore(self, snapshot_id: str, target_workspace: str) -> RunState:
        """Materialize a snapshot's workspace into target_workspace.

        The returned state records snapshot_id as parent so future saves
        branch from here. Sessions are not resurrected.
        """
        manifest = self._load_manifest(snapshot_id)
        os.makedirs(target_workspace, exist_ok=True)
        for entry in os.listdir(target_workspace):
            full = os.path.join(target_workspace, entry)
            if os.path.isdir(full) and not os.path.islink(full):
                shutil.rmtree(full)
            else:
                os.remove(full)
        for entry in manifest["files"]:
            data = self._read_blob(entry["hash"])
            dest = os.path.join(target_workspace, entry["path"])
            os.makedirs(os.path.dirname(dest), exist_ok=True)
            with open(dest, "wb") as fh:
                fh.write(data)
            os.chmod(dest, entry["mode"])
        context_blob = self._read_blob(manifest["context_hash"])
        return RunState(
            workspace_dir=target_workspace,
            context_blob=context_blob,
            remaining_budget=manifest["remaining_budget"],
            task_ref=manifest["task_ref"],
            parent_id=snapshot_id,
            session_summaries=list(manifest["session_summaries"]),
        )

    def list_snapshots(self) -> List[Dict[str, object]]:
        out = []
        for name in sorted(os.listdir(self.manifest_dir)):
            if not name.endswith(".manifest"):
                continue
            manifest = self._load_manifest(name[: -len(".manifest")])
            out.append(
                {
                    "snapshot_id": manifest["snapshot_id"],
                    "parent_id": manifest["parent_id"],
                    "created_at": manifest["created_at"],
                    "task_ref": manifest["task_ref"],
                    "remaining_budget": manifest["remaining_budget"],
                    "file_count": len(manifest["files"]),
                }
            )
        out.sort(key=lambda m: m["created_at"])
        return out

    def render_tree(self) -> str:
        """Text rendering of the snapshot forest, branches grouped."""
        snaps = self.list_snapshots()
        children: Dict[Optional[str], List[Dict[str, object]]] = {}
        ids = {s["snapshot_id"] for s in snaps}
        for snap in snaps:
            parent = snap["parent_id"] if snap["parent_id"] in ids else None
            children.setdefault(parent, []).append(snap)
        lines: List[str] = []

        def walk(parent: Optional[str], depth: int) -> None:
            for snap in children.get(parent, []):
                stamp = time.strftime("%Y-%m-%d %H:%M:%S", time.localtime(snap["created_at"]))
                lines.append(
                    "  " * depth
                    + f"- {snap['snapshot_id']} ({stamp}, {snap['file_count']} files, "
                    + f"{snap['remaining_budget']:.0f}s left)"
                )
                walk(snap["snapshot_id"], depth + 1)

        walk(None, 0)
        return "\n".join(lines)
