"""Orchestrator-local file viewing, editing, creation and search.

All operations are confined to the configured workspace root. A single
cursor tracks the currently open file; scrolling and file metadata act on it.
"""
import fnmatch
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

WINDOW = 100  # lines shown around the cursor
MATCH_CAP = 200  # search results before truncation


class FileOpError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _is_binary(path: str) -> bool:
    with open(path, "rb") as fh:
        return b"\x00" in fh.read(8192)


def _read_lines(path: str) -> Tuple[List[str], str, bool]:
    """Return (lines, dominant ending, had trailing newline).

    A trailing newline does not count as an extra line.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    text = data.decode("utf-8", errors="replace")
    crlf = text.count("\r\n")
    lf = text.count("\n") - crlf
    ending = "\r\n" if crlf > lf else "\n"
    normalized = text.replace("\r\n", "\n")
    trailing = normalized.endswith("\n")
    if trailing:
        normalized = normalized[:-1]
    return (normalized.split("\n") if normalized else [""], ending, trailing)


@dataclass
class FileCursor:
    path: str
    current_line: int = 1
    mtime: float = 0.0


@dataclass
class FileView:
    path: str
    current_line: int
    total_lines: int
    lines: List[str]  # already prefixed with 1-indexed line numbers
    at_start: bool
    at_end: bool

    def render(self) -> str:
        header = f"[File: {self.path} ({self.total_lines} lines), line {self.current_line}]"
        body = "\n".join(self.lines)
        notes = []
        if self.at_start:
            notes.append("(beginning of file)")
        if self.at_end:
            notes.append("(end of file)")
        return "\n".join([header, body] + notes)


class FileService:
    def __init__(self, workspace: str):
        self.workspace = os.path.realpath(workspace)
        self.cursor: Optional[FileCursor] = None

    def _check_inside(self, path: str) -> str:
        if not os.path.isabs(path):
            raise FileOpError("not-absolute", f"relative paths are not supported: {path}")
        real = os.path.realpath(path)
        if real != self.workspace and not real.startswith(self.workspace + os.sep):
            raise FileOpError(
                "outside-workspace", f"path is outside the workspace root: {path}"
            )
        return real

    def _render(self, path: str, center: int, context: int = WINDOW) -> FileView:
        lines, _, _ = _read_lines(path)
        total = len(lines)
        center = max(1, min(center, total))
        half = context // 2
        start = max(1, center - half)
        end = min(total, start + context - 1)
        start = max(1, min(start, end - context + 1)) if end - start + 1 < context else start
        numbered = [f"{i}|{lines[i - 1]}" for i in range(start, end + 1)]
        return FileView(
            path=path,
            current_line=center,
            total_lines=total,
            lines=numbered,
            at_start=start == 1,
            at_end=end == total,
        )

    def open_file(
        self, path: str, line_number: int = 1, context_lines: Optional[int] = None
    ) -> FileView:
        real = self._check_inside(path)
        if not os.path.isfile(real):
            raise FileOpError("not-found", f"no such file: {path}")
        if _is_binary(real):
            raise FileOpError("binary-file", f"refusing to open binary file: {path}")
        view = self._render(real, line_number, context_lines or WINDOW)
        self.cursor = FileCursor(path=real, current_line=view.current_line, mtime=os.path.getmtime(real))
        return view

    def _require_cursor(self) -> FileCursor:
        if self.cursor is None:
            raise FileOpError("no-open-file", "no file is currently open")
        return self.cursor

    def goto_line(self, line_number: int) -> FileView:
        cursor = self._require_cursor()
        lines, _, _ = _read_lines(cursor.path)
        if line_number < 1 or line_number > len(lines):
            raise FileOpError(
                "line-out-of-range",
                f"line {line_number} out of range 1..{len(lines)}",
            )
        cursor.current_line = line_number
        return self._render(cursor.path, line_number)

    def scroll(self, direction: str) -> FileView:
        cursor = self._require_cursor()
        lines, _, _ = _read_lines(cursor.path)
        delta = WINDOW if direction == "down" else -WINDOW
        cursor.current_line = max(1, min(cursor.current_line + delta, len(lines)))
        return self._render(cursor.path, cursor.current_line)

    def create_file(self, path: str, content: str = "") -> Dict[str, object]:
        real = self._check_inside(path)
        parent = os.path.dirname(real)
        if not os.path.isdir(parent):
            raise FileOpError("parent-missing", f"parent directory does not exist: {parent}")
        existed = os.path.exists(real)
        try:
            with open(real, "w", encoding="utf-8") as fh:
                fh.write(content)
        except PermissionError as exc:
            raise FileOpError("permission", str(exc)) from exc
        return {"path": real, "replaced": existed, "bytes": len(content.encode("utf-8"))}

    def edit_file(
        self, path: str, start_line: int, end_line: int, content: str
    ) -> Dict[str, object]:
        """Replace the inclusive [start_line, end_line] range with content."""
        real = self._check_inside(path)
        if not os.path.isfile(real):
            raise FileOpError("not-found", f"no such file: {path}")
        lines, ending, trailing = _read_lines(real)
        total = len(lines)
        if not (1 <= start_line <= end_line <= total):
            raise FileOpError(
                "range-invalid",
                f"edit range [{start_line},{end_line}] invalid for {total}-line file",
            )
        replacement = content.split("\n") if content else []
        if content.endswith("\n"):
            replacement = replacement[:-1]
        new_lines = lines[: start_line - 1] + replacement + lines[end_line:]
        with open(real, "w", encoding="utf-8", newline="") as fh:
            fh.write(ending.join(new_lines) + (ending if trailing else ""))
        if self.cursor is not None and self.cursor.path == real:
            self.cursor = None  # line numbering changed; stale cursor must not survive
        lo = max(0, start_line - 3)
        hi = min(len(new_lines), start_line - 1 + len(replacement) + 2)
        excerpt = [f"{i + 1}|{new_lines[i]}" for i in range(lo, hi)]
        return {
            "path": real,
            "old_line_count": total,
            "new_line_count": len(new_lines),
            "excerpt": excerpt,
        }

    def search_dir(self, search_term: str, dir_path: str) -> Dict[str, object]:
        real = self._check_inside(dir_path)
        if not os.path.isdir(real):
            raise FileOpError("dir-missing", f"no such directory: {dir_path}")
        matches: List[Dict[str, object]] = []
        truncated = False
        for root, dirs, names in os.walk(real):
            dirs.sort()
            for name in sorted(names):
                fpath = os.path.join(root, name)
                try:
                    if _is_binary(fpath):
                        continue
                    lines, _, _ = _read_lines(fpath)
                except OSError:
                    continue
                for i, line in enumerate(lines, 1):
                    if search_term in line:
                        matches.append({"path": fpath, "line": i, "text": line})
                        if len(matches) >= MATCH_CAP:
                            truncated = True
                            break
                if truncated:
                    break
            if truncated:
                break
        return {"matches": matches, "truncated": truncated}

    def search_file(self, search_term: str, file_path: Optional[str] = None) -> Dict[str, object]:
        if file_path is None:
            file_path = self._require_cursor().path
        real = self._check_inside(file_path)
        if not os.path.isfile(real):
            raise FileOpError("not-found", f"no such file: {file_path}")
        lines, _, _ = _read_lines(real)
        matches = [
            {"path": real, "line": i, "text": line}
            for i, line in enumerate(lines, 1)
            if search_term in line
        ]
        truncated = len(matches) > MATCH_CAP
        return {"matches": matches[:MATCH_CAP], "truncated": truncated}

    def find_file(self, file_name: str, dir_path: str) -> Dict[str, object]:
        real = self._check_inside(dir_path)
        if not os.path.isdir(real):
            raise FileOpError("dir-missing", f"no such directory: {dir_path}")
        found: List[str] = []
        truncated = False
        for root, dirs, names in os.walk(real):
            dirs.sort()
            for name in sorted(names):
                if fnmatch.fnmatch(name, file_name):
                    found.append(os.path.join(root, name))
                    if len(found) >= MATCH_CAP:
                        truncated = True
                        break
            if truncated:
                break
        return {"matches": found, "truncated": truncated}

    def list_files(self, path: Optional[str] = None, show_hidden: bool = False) -> Dict[str, object]:
        real = self._check_inside(path or self.workspace)
        if not os.path.isdir(real):
            raise FileOpError("path-missing", f"no such directory: {path}")
        entries = []
        for name in sorted(os.listdir(real)):
            if not show_hidden and name.startswith("."):
                continue
            full = os.path.join(real, name)
            entries.append(name + "/" if os.path.isdir(full) else name)
        return {"path": real, "entries": entries}

    def file_info(self) -> Dict[str, object]:
        cursor = self._require_cursor()
        lines, _, _ = _read_lines(cursor.path)
        return {
            "path": cursor.path,
            "size_bytes": os.path.getsize(cursor.path),
            "line_count": len(lines),
            "current_line": cursor.current_line,
        }
