"""Web search and cached-page browsing.

One page is cached at a time; navigation, windowed viewing, in-page keyword
search with wrap-around traversal, and paginated link extraction all act on
that cache. The search backend is pluggable so tests run offline.
"""
import os
from dataclasses import dataclass, field
from html.parser import HTMLParser
from typing import Dict, List, Optional, Tuple

import requests

PAGE_WINDOW = 100  # lines per page view
MAX_RESULTS = 100  # hard cap on search results
FETCH_BODY_CAP = 10 * 1024 * 1024
FETCH_TIMEOUT = 20.0
MAX_REDIRECTS = 5

_BLOCK_TAGS = {
    "p", "div", "br", "li", "ul", "ol", "table", "tr", "td", "th",
    "h1", "h2", "h3", "h4", "h5", "h6", "section", "article", "header",
    "footer", "nav", "blockquote", "pre", "hr", "main", "aside", "figure",
}
_SKIP_TAGS = {"script", "style", "noscript", "template"}


class WebError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _TextExtractor(HTMLParser):
    """Deterministic HTML-to-text: block elements break lines, anchors render
    as "text (url)", scripts and styles are dropped."""

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.parts: List[str] = []
        self.links: List[Tuple[str, str]] = []
        self._skip_depth = 0
        self._anchor_href: Optional[str] = None
        self._anchor_text: List[str] = []

    def handle_starttag(self, tag, attrs):
        if tag in _SKIP_TAGS:
            self._skip_depth += 1
            return
        if tag == "a":
            href = dict(attrs).get("href")
            self._anchor_href = href
            self._anchor_text = []
        elif tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag in _SKIP_TAGS:
            self._skip_depth = max(0, self._skip_depth - 1)
            return
        if tag == "a":
            text = "".join(self._anchor_text).strip()
            if self._anchor_href:
                self.links.append((text, self._anchor_href))
                self.parts.append(f"{text} ({self._anchor_href})" if text else f"({self._anchor_href})")
            else:
                self.parts.append(text)
            self._anchor_href = None
            self._anchor_text = []
        elif tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_data(self, data):
        if self._skip_depth:
            return
        if self._anchor_href is not None:
            self._anchor_text.append(data)
        else:
            self.parts.append(data)


def html_to_text(html: str) -> Tuple[List[str], List[Tuple[str, str]]]:
    """Convert HTML to numbered-text lines plus the in-order link list."""
    parser = _TextExtractor()
    parser.feed(html)
    parser.close()
    raw = "".join(parser.parts)
    lines = []
    for line in raw.split("\n"):
        stripped = " ".join(line.split())
        if stripped:
            lines.append(stripped)
    return (lines or [""], parser.links)


@dataclass(frozen=True)
class SearchResult:
    rank: int
    title: str
    url: str
    snippet: str


class SearchBackend:
    def search(self, query: str, top_k: int) -> List[SearchResult]:
        raise NotImplementedError


class FixtureSearchBackend(SearchBackend):
    """Deterministic offline backend: fixed results keyed by query."""

    def __init__(self, results: Dict[str, List[Tuple[str, str, str]]]):
        self._results = results

    def search(self, query: str, top_k: int) -> List[SearchResult]:
        hits = self._results.get(query, [])
        return [
            SearchResult(rank=i + 1, title=t, url=u, snippet=s)
            for i, (t, u, s) in enumerate(hits[:top_k])
        ]


class HttpSearchBackend(SearchBackend):
    """Meta-search adapter: GET endpoint?q=...&n=..., JSON list of
    {title, url, snippet}. Endpoint and key come from config or env."""

    def __init__(self, endpoint: Optional[str] = None, api_key: Optional[str] = None):
        self.endpoint = endpoint or os.environ.get("GYM_SEARCH_ENDPOINT")
        self.api_key = api_key or os.environ.get("GYM_SEARCH_KEY")

    def search(self, query: str, top_k: int) -> List[SearchResult]:
        if not self.endpoint:
            raise WebError("backend-failure", "no search endpoint configured (GYM_SEARCH_ENDPOINT)")
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = requests.get(
                self.endpoint, params={"q": query, "n": top_k},
                headers=headers, timeout=FETCH_TIMEOUT,
            )
            resp.raise_for_status()
            items = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise WebError("backend-failure", f"search backend failed: {exc}") from exc
        return [
            SearchResult(
                rank=i + 1,
                title=item.get("title", ""),
                url=item.get("url", ""),
                snippet=item.get("snippet", ""),
            )
            for i, item in enumerate(items[:top_k])
        ]


@dataclass
class PageCache:
    url: str
    lines: List[str]
    links: List[Tuple[str, str]]
    current_line: int = 1
    keyword: Optional[str] = None
    match_list: List[int] = field(default_factory=list)  # 1-indexed line numbers
    match_pos: int = 0  # 0-indexed into match_list


@dataclass
class PageView:
    url: str
    current_line: int
    total_lines: int
    lines: List[str]
    notice: Optional[str] = None

    def render(self) -> str:
        header = f"[Page: {self.url} ({self.total_lines} lines), line {self.current_line}]"
        out = [header] + self.lines
        if self.notice:
            out.append(self.notice)
        return "\n".join(out)


def fetch_url(url: str) -> str:
    session = requests.Session()
    session.max_redirects = MAX_REDIRECTS
    try:
        resp = session.get(url, timeout=FETCH_TIMEOUT, stream=True)
        resp.raise_for_status()
        ctype = resp.headers.get("Content-Type", "text/html")
        if not any(t in ctype for t in ("text/", "html", "xml", "json")):
            raise WebError("non-text-content", f"unsupported content type: {ctype}")
        body = resp.raw.read(FETCH_BODY_CAP + 1, decode_content=True)
        if len(body) > FETCH_BODY_CAP:
            body = body[:FETCH_BODY_CAP]
        return body.decode(resp.encoding or "utf-8", errors="replace")
    except requests.RequestException as exc:
        raise WebError("fetch-failure", f"cannot fetch {url}: {exc}") from exc


class WebSession:
    """Holds the search backend and the single cached page for one run."""

    def __init__(self, backend: Optional[SearchBackend] = None, enabled: bool = True):
        self.backend = backend or HttpSearchBackend()
        self.enabled = enabled
        self.page: Optional[PageCache] = None

    def _check_enabled(self) -> None:
        if not self.enabled:
            raise WebError("capability-disabled", "web access is disabled for this task")

    def search(self, query: str, top_k: int = 10) -> List[SearchResult]:
        self._check_enabled()
        top_k = min(max(top_k, 1), MAX_RESULTS)
        return self.backend.search(query, top_k)[:top_k]

    def goto(self, url: str, line_number: int = 1) -> PageView:
        self._check_enabled()
        if "://" not in url:
            raise WebError("fetch-failure", f"malformed url: {url}")
        html = fetch_url(url)
        return self.load_page(url, html, line_number)

    def load_page(self, url: str, html: str, line_number: int = 1) -> PageView:
        """Cache pre-fetched HTML; used by goto and by offline tests."""
        lines, links = html_to_text(html)
        self.page = PageCache(url=url, lines=lines, links=links)
        return self.goto_line(line_number)

    def _require_page(self) -> PageCache:
        if self.page is None:
            raise WebError("no-page", "no page is cached; navigate first")
        return self.page

    def _view(self, notice: Optional[str] = None) -> PageView:
        page = self._require_page()
        total = len(page.lines)
        start = page.current_line
        end = min(total, start + PAGE_WINDOW - 1)
        shown = [f"{i}|{page.lines[i - 1]}" for i in range(start, end + 1)]
        if end == total and notice is None:
            notice = "(end of page)"
        return PageView(
            url=page.url, current_line=start, total_lines=total, lines=shown, notice=notice
        )

    def goto_line(self, line_number: int) -> PageView:
        page = self._require_page()
        total = len(page.lines)
        notice = None
        if line_number > total:
            line_number = max(1, total - PAGE_WINDOW + 1)
            notice = "(requested line beyond end; showing last window)"
        page.current_line = max(1, line_number)
        return self._view(notice)

    def scroll(self, direction: str) -> PageView:
        page = self._require_page()
        total = len(page.lines)
        notice = None
        if direction == "down":
            nxt = page.current_line + PAGE_WINDOW
            if nxt > total:
                notice = "(already at end of page)"
            else:
                page.current_line = nxt
        else:
            if page.current_line == 1:
                notice = "(already at top of page)"
            page.current_line = max(1, page.current_line - PAGE_WINDOW)
        return self._view(notice)

    def page_search(self, keyword: str, context_lines: int = 5) -> Dict[str, object]:
        page = self._require_page()
        page.keyword = keyword
        page.match_list = [i for i, line in enumerate(page.lines, 1) if keyword in line]
        page.match_pos = 0
        if not page.match_list:
            return {"keyword": keyword, "total_matches": 0, "lines": [], "match_index": 0}
        return self._match_view(context_lines)

    def search_next(
        self, context_lines: int = 5, search_index: Optional[int] = None
    ) -> Dict[str, object]:
        page = self._require_page()
        if not page.match_list:
            raise WebError("no-active-search", "no active keyword search with matches")
        m = len(page.match_list)
        if search_index is not None:
            # 1-indexed; wraps with modulo after decrement
            page.match_pos = (search_index - 1) % m
        else:
            page.match_pos = (page.match_pos + 1) % m
        return self._match_view(context_lines)

    def _match_view(self, context_lines: int) -> Dict[str, object]:
        page = self._require_page()
        line_no = page.match_list[page.match_pos]
        lo = max(1, line_no - context_lines)
        hi = min(len(page.lines), line_no + context_lines)
        shown = [f"{i}|{page.lines[i - 1]}" for i in range(lo, hi + 1)]
        return {
            "keyword": page.keyword,
            "total_matches": len(page.match_list),
            "match_index": page.match_pos + 1,
            "match_line": line_no,
            "lines": shown,
        }

    def get_links(self, page_size: int = 10, page_number: int = 1) -> Dict[str, object]:
        page = self._require_page()
        total = len(page.links)
        total_pages = max(1, -(-total // page_size))
        if page_number < 1 or page_number > total_pages:
            raise WebError(
                "page-out-of-range",
                f"page {page_number} out of range 1..{total_pages}",
            )
        start = (page_number - 1) * page_size
        chunk = page.links[start : start + page_size]
        return {
            "links": [{"text": t, "url": u} for t, u in chunk],
            "page_number": page_number,
            "total_pages": total_pages,
            "total_links": total,
        }
