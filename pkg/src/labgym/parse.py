"""Extraction of text from documents and media into saved text files.

Document formats (pdf, docx, latex, pptx) are parsed structurally in-process.
Audio/image/video understanding delegates to a configured HTTP model endpoint
(multipart: media bytes + task string -> plain text); tests use a stub.
"""
import base64
import os
import re
import time
import zlib
import zipfile
from dataclasses import dataclass
from typing import List, Optional
from xml.etree import ElementTree

import requests

ENDPOINT_TIMEOUT = 60.0


class ParseError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True)
class ExtractionReport:
    source_path: str
    save_path: str
    bytes_written: int
    extractor: str
    elapsed_seconds: float


# --- PDF -------------------------------------------------------------------
# Minimal extractor for digitally-born PDFs: decompresses Flate content
# streams and reads the text-showing operators (Tj, TJ, '). Scanned PDFs
# have no text operators and are rejected.

_PDF_STREAM_RE = re.compile(rb"<<(.*?)>>\s*stream\r?\n(.*?)\r?\n?endstream", re.DOTALL)
_PDF_TEXT_OP_RE = re.compile(rb"\((?:\\.|[^\\()])*\)\s*(?:Tj|')|\[(?:[^\[\]]*)\]\s*TJ")
_PDF_STRING_RE = re.compile(rb"\((?:\\.|[^\\()])*\)")

_PDF_ESCAPES = {
    b"n": b"\n", b"r": b"\r", b"t": b"\t", b"b": b"\b", b"f": b"\f",
    b"(": b"(", b")": b")", b"\\": b"\\",
}


def _pdf_unescape(raw: bytes) -> bytes:
    out = bytearray()
    i = 0
    while i < len(raw):
        ch = raw[i : i + 1]
        if ch == b"\\" and i + 1 < len(raw):
            nxt = raw[i + 1 : i + 2]
            if nxt in _PDF_ESCAPES:
                out += _PDF_ESCAPES[nxt]
                i += 2
                continue
            if nxt.isdigit():  # octal escape, up to 3 digits
                j = i + 1
                while j < min(i + 4, len(raw)) and raw[j : j + 1].isdigit():
                    j += 1
                out.append(int(raw[i + 1 : j], 8) & 0xFF)
                i = j
                continue
            i += 2
            continue
        out += ch
        i += 1
    return bytes(out)


def _pdf_decode_stream(meta: bytes, stream: bytes) -> Optional[bytes]:
    if b"ASCII85Decode" in meta:
        # PDF ASCII85 has no leading <~ frame, only the ~> terminator
        compact = re.sub(rb"\s+", b"", stream)
        if compact.endswith(b"~>"):
            compact = compact[:-2]
        try:
            stream = base64.a85decode(compact)
        except ValueError:
            return None
    if b"FlateDecode" in meta:
        try:
            stream = zlib.decompress(stream)
        except zlib.error:
            return None
    return stream


def _extract_pdf_text(data: bytes) -> str:
    if not data.startswith(b"%PDF"):
        raise ParseError("corrupt-source", "not a PDF file (missing %PDF header)")
    chunks: List[str] = []
    for match in _PDF_STREAM_RE.finditer(data):
        decoded = _pdf_decode_stream(match.group(1), match.group(2))
        if decoded is None:
            continue
        stream = decoded
        if b"BT" not in stream:
            continue
        parts: List[bytes] = []
        for op in _PDF_TEXT_OP_RE.finditer(stream):
            for s in _PDF_STRING_RE.finditer(op.group(0)):
                parts.append(_pdf_unescape(s.group(0)[1:-1]))
        if parts:
            chunks.append(b" ".join(parts).decode("latin-1", errors="replace"))
    if not chunks:
        raise ParseError("corrupt-source", "no extractable text in PDF (scanned or empty)")
    return "\n".join(chunks) + "\n"


# --- DOCX / PPTX -----------------------------------------------------------

def _xml_texts(data: bytes, text_tag: str, para_tag: Optional[str]) -> List[str]:
    root = ElementTree.fromstring(data)

    def local(tag: str) -> str:
        return tag.rsplit("}", 1)[-1]

    paragraphs: List[str] = []
    if para_tag:
        for node in root.iter():
            if local(node.tag) != para_tag:
                continue
            text = "".join(
                t.text or "" for t in node.iter() if local(t.tag) == text_tag
            )
            if text.strip():
                paragraphs.append(text)
    else:
        for node in root.iter():
            if local(node.tag) == text_tag and node.text and node.text.strip():
                paragraphs.append(node.text)
    return paragraphs


def _extract_docx_text(path: str) -> str:
    try:
        with zipfile.ZipFile(path) as zf:
            data = zf.read("word/document.xml")
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ParseError("corrupt-source", f"not a valid docx file: {exc}") from exc
    try:
        paragraphs = _xml_texts(data, "t", "p")
    except ElementTree.ParseError as exc:
        raise ParseError("corrupt-source", f"malformed docx XML: {exc}") from exc
    return "\n".join(paragraphs) + "\n"


def _extract_pptx_text(path: str) -> str:
    try:
        with zipfile.ZipFile(path) as zf:
            slide_names = sorted(
                (n for n in zf.namelist() if re.fullmatch(r"ppt/slides/slide\d+\.xml", n)),
                key=lambda n: int(re.search(r"(\d+)", n).group(1)),
            )
            if not slide_names:
                raise ParseError("corrupt-source", "pptx contains no slides")
            out: List[str] = []
            for i, name in enumerate(slide_names, 1):
                texts = _xml_texts(zf.read(name), "t", None)
                out.append(f"[slide {i}]")
                out.extend(texts)
            return "\n".join(out) + "\n"
    except zipfile.BadZipFile as exc:
        raise ParseError("corrupt-source", f"not a valid pptx file: {exc}") from exc
    except ElementTree.ParseError as exc:
        raise ParseError("corrupt-source", f"malformed pptx XML: {exc}") from exc


# --- LaTeX -----------------------------------------------------------------

_LATEX_KEEP_ARG = (
    "section", "subsection", "subsubsection", "chapter", "paragraph",
    "title", "author", "textbf", "textit", "emph", "texttt", "caption",
)


def _extract_latex_text(data: str) -> str:
    text = re.sub(r"(?<!\\)%.*", "", data)  # comments
    text = re.sub(r"\\begin\{[^}]*\}|\\end\{[^}]*\}", "", text)
    keep = "|".join(_LATEX_KEEP_ARG)
    for _ in range(3):  # nested textual macros
        text = re.sub(r"\\(?:" + keep + r")\*?\{([^{}]*)\}", r"\1", text)
    text = re.sub(r"\$[^$]*\$", "", text)  # inline math
    text = re.sub(r"\\[a-zA-Z@]+(\[[^\]]*\])?(\{[^{}]*\})?", "", text)  # other macros
    text = text.replace("{", "").replace("}", "")
    lines = [" ".join(l.split()) for l in text.split("\n")]
    out = "\n".join(l for l in lines if l)
    return out + "\n"


# --- Public API -------------------------------------------------------------

_DOC_KINDS = {"pdf", "docx", "latex", "pptx"}
_MEDIA_KINDS = {"audio", "image", "video"}


def parse_document(file_path: str, save_path: str, kind: str) -> ExtractionReport:
    if kind not in _DOC_KINDS:
        raise ParseError("unsupported-kind", f"unsupported document kind: {kind}")
    if not os.path.isfile(file_path):
        raise ParseError("corrupt-source", f"no such file: {file_path}")
    started = time.time()
    if kind == "pdf":
        with open(file_path, "rb") as fh:
            text = _extract_pdf_text(fh.read())
    elif kind == "docx":
        text = _extract_docx_text(file_path)
    elif kind == "pptx":
        text = _extract_pptx_text(file_path)
    else:
        with open(file_path, "r", encoding="utf-8", errors="replace") as fh:
            text = _extract_latex_text(fh.read())
    return _save(text, file_path, save_path, f"doc-{kind}", started)


class MediaEndpoint:
    """HTTP model endpoint: POST multipart {media, task, kind} -> plain text."""

    def __init__(self, endpoint: Optional[str] = None, model: Optional[str] = None):
        self.endpoint = endpoint or os.environ.get("GYM_PARSE_ENDPOINT")
        self.model = model or os.environ.get("GYM_PARSE_MODEL")

    def understand(self, media: bytes, task: str, kind: str, model: Optional[str] = None) -> str:
        if not self.endpoint:
            raise ParseError(
                "endpoint-unconfigured", "no media endpoint configured (GYM_PARSE_ENDPOINT)"
            )
        try:
            resp = requests.post(
                self.endpoint,
                files={"media": ("media", media)},
                data={"task": task, "kind": kind, "model": model or self.model or ""},
                timeout=ENDPOINT_TIMEOUT,
            )
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise ParseError("endpoint-failure", f"media endpoint failed: {exc}") from exc
        return resp.text


def select_frame_indices(frame_count: int, interval: int) -> List[int]:
    """Frames 0, k, 2k, ... below frame_count."""
    if interval < 1:
        raise ParseError("unsupported-kind", f"frame_interval must be >= 1, got {interval}")
    return list(range(0, frame_count, interval))


def parse_media(
    file_path: str,
    save_path: str,
    kind: str,
    task: str = "Describe this image.",
    frame_interval: int = 30,
    model: Optional[str] = None,
    endpoint: Optional[MediaEndpoint] = None,
) -> ExtractionReport:
    if kind not in _MEDIA_KINDS:
        raise ParseError("unsupported-kind", f"unsupported media kind: {kind}")
    if not os.path.isfile(file_path):
        raise ParseError("corrupt-source", f"no such file: {file_path}")
    endpoint = endpoint or MediaEndpoint()
    started = time.time()
    if kind == "video":
        text = _parse_video(file_path, task, frame_interval, model, endpoint)
    else:
        with open(file_path, "rb") as fh:
            media = fh.read()
        text = endpoint.understand(media, task, kind, model)
    if not text.endswith("\n"):
        text += "\n"
    return _save(text, file_path, save_path, f"media-{kind}", started)


def _parse_video(
    file_path: str, task: str, frame_interval: int, model: Optional[str],
    endpoint: MediaEndpoint,
) -> str:
    import cv2  # deferred: heavy import, only needed for video

    cap = cv2.VideoCapture(file_path)
    if not cap.isOpened():
        raise ParseError("corrupt-source", f"cannot decode video: {file_path}")
    frames = []
    index = 0
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        if index % frame_interval == 0:
            frames.append((index, frame))
        index += 1
    cap.release()
    if not frames:
        raise ParseError("corrupt-source", f"video has no frames: {file_path}")
    sections = []
    for idx, frame in frames:
        ok, png = cv2.imencode(".png", frame)
        if not ok:
            raise ParseError("corrupt-source", f"cannot encode frame {idx}")
        description = endpoint.understand(png.tobytes(), task, "image", model)
        sections.append(f"[frame {idx}]\n{description.strip()}")
    return "\n".join(sections)


def _save(
    text: str, source: str, save_path: str, extractor: str, started: float
) -> ExtractionReport:
    data = text.encode("utf-8")
    if not data:
        raise ParseError("corrupt-source", f"extraction produced no text from {source}")
    try:
        with open(save_path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise ParseError("write-failure", f"cannot write {save_path}: {exc}") from exc
    return ExtractionReport(
        source_path=source,
        save_path=save_path,
        bytes_written=len(data),
        extractor=extractor,
        elapsed_seconds=time.time() - started,
    )
