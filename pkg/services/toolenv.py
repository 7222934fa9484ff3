"""
services/toolenv.py — Tool dei task (search, visit, python, scholar) e corpus web simulato

Modalità mock: corpus JSONL {url, title, body} immutabile per la run.
Modalità live: ricerca verso un endpoint JSON configurato, visit via GET + testo dall'HTML.
python e scholar sono solo stub (output preconfezionati per hash dell'input).
"""
from __future__ import annotations

import hashlib
import html
import json
import logging
import os
import re
from pathlib import Path
from typing import Optional

import httpx
from pydantic import BaseModel, ConfigDict

from services.core import ToolProfile
from services.errors import ToolArgumentError, ToolUnavailable
from services.prompts import memory_tool_schema

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 10
SNIPPET_CHARS = 200

_TERM_RE = re.compile(r"\w+", re.UNICODE)


def normalize_terms(text: str) -> list[str]:
    return [t.casefold() for t in _TERM_RE.findall(text or "")]


# ── CORPUS ──────────────────────────────────────────────────


class Document(BaseModel):
    model_config = ConfigDict(frozen=True)

    url: str
    title: str
    body: str


class SearchHit(BaseModel):
    model_config = ConfigDict(frozen=True)

    url: str
    title: str
    snippet: str


class Corpus:
    def __init__(self, documents: list[Document]):
        self.documents: dict[str, Document] = {d.url: d for d in documents}
        self.index: dict[str, set[str]] = {}
        for doc in self.documents.values():
            for term in set(normalize_terms(doc.title + " " + doc.body)):
                self.index.setdefault(term, set()).add(doc.url)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Corpus":
        docs = []
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    docs.append(Document.model_validate(json.loads(line)))
        logger.info(f"Corpus caricato: {len(docs)} documenti da {path}")
        return cls(docs)

    def search(self, query: str, top_k: int = DEFAULT_TOP_K) -> list[SearchHit]:
        terms = set(normalize_terms(query))
        scores: dict[str, int] = {}
        for term in terms:
            for url in self.index.get(term, ()):
                scores[url] = scores.get(url, 0) + 1
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
        return [SearchHit(url=url, title=self.documents[url].title,
                          snippet=best_snippet(self.documents[url].body, terms))
                for url, _ in ranked]


def best_snippet(body: str, terms: set[str]) -> str:
    """Finestra di 200 caratteri, a partire da un inizio di parola, con più termini distinti."""
    best_start, best_score = 0, -1
    for m in _TERM_RE.finditer(body):
        window = body[m.start():m.start() + SNIPPET_CHARS]
        score = len(terms & set(normalize_terms(window)))
        if score > best_score:
            best_start, best_score = m.start(), score
    return body[best_start:best_start + SNIPPET_CHARS]


def format_results(query: str, hits: list[SearchHit]) -> str:
    if not hits:
        return f"## Results for: {query}\n(no results)"
    lines = [f"## Results for: {query}"]
    for n, h in enumerate(hits, 1):
        lines.append(f"{n}. {h.title}\n   URL: {h.url}\n   {h.snippet}")
    return "\n".join(lines)


# ── LIVE ────────────────────────────────────────────────────


class LiveSearchConfig(BaseModel):
    search_url: str                 # endpoint JSON: POST {"q", "num"} → {"organic": [{link, title, snippet}]}
    api_key_env: Optional[str] = None
    timeout_seconds: float = 30.0


_TAG_RE = re.compile(r"<(script|style)[^>]*>.*?</\1>|<[^>]+>", re.DOTALL | re.IGNORECASE)


def html_to_text(raw: str) -> str:
    text = html.unescape(_TAG_RE.sub(" ", raw))
    return re.sub(r"\s+", " ", text).strip()


class LiveWeb:
    def __init__(self, config: LiveSearchConfig, transport: Optional[httpx.AsyncBaseTransport] = None):
        self.config = config
        self._transport = transport

    async def search(self, query: str, top_k: int) -> list[SearchHit]:
        headers = {}
        if self.config.api_key_env:
            headers["X-API-KEY"] = os.environ.get(self.config.api_key_env, "")
        async with httpx.AsyncClient(timeout=self.config.timeout_seconds, transport=self._transport) as client:
            r = await client.post(self.config.search_url, headers=headers, json={"q": query, "num": top_k})
        r.raise_for_status()
        return [SearchHit(url=o.get("link", ""), title=o.get("title", ""), snippet=o.get("snippet", ""))
                for o in r.json().get("organic", [])[:top_k]]

    async def visit(self, url: str) -> Optional[str]:
        async with httpx.AsyncClient(timeout=self.config.timeout_seconds, transport=self._transport,
                                     follow_redirects=True) as client:
            r = await client.get(url)
        if r.status_code == 404:
            return None
        r.raise_for_status()
        return html_to_text(r.text)


# ── STUBS ───────────────────────────────────────────────────


def stub_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class StubTool:
    """Output preconfezionati indicizzati per sha256 dell'input."""

    def __init__(self, name: str, canned: Optional[dict[str, str]] = None):
        self.name = name
        self.canned = dict(canned or {})

    def add(self, text: str, output: str) -> None:
        self.canned[stub_key(text)] = output

    def __call__(self, text: str) -> str:
        out = self.canned.get(stub_key(text))
        if out is None:
            return f"STUB MISS: no canned {self.name} output for this input (sha256 {stub_key(text)[:12]})"
        return out


def load_stubs(path: str | Path) -> dict[str, StubTool]:
    """File JSON {"python": {"<input>": "<output>"}, "scholar": {...}}; le chiavi sono gli input in chiaro."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    tools = {}
    for name in ("python", "scholar"):
        tool = StubTool(name)
        for text, output in (data.get(name) or {}).items():
            tool.add(text, output)
        tools[name] = tool
    return tools


# ── TOOL ENV ────────────────────────────────────────────────

TOOL_SCHEMAS: dict[str, dict] = {
    "search": {
        "name": "search",
        "description": "Web search. Accepts several queries in one call and returns ranked results (title, URL, snippet) for each.",
        "parameters": {
            "type": "object",
            "properties": {"queries": {"type": "array", "items": {"type": "string"},
                                       "description": "one or more search queries"}},
            "required": ["queries"],
        },
    },
    "visit": {
        "name": "visit",
        "description": "Fetch a web page and return its text content.",
        "parameters": {
            "type": "object",
            "properties": {"url": {"type": "string", "description": "the URL to visit"}},
            "required": ["url"],
        },
    },
    "python": {
        "name": "python",
        "description": "Execute Python code and return its standard output.",
        "parameters": {
            "type": "object",
            "properties": {"code": {"type": "string", "description": "the code to execute"}},
            "required": ["code"],
        },
    },
    "scholar": {
        "name": "scholar",
        "description": "Search Google Scholar and return matching publications.",
        "parameters": {
            "type": "object",
            "properties": {"query": {"type": "string", "description": "the scholarly search query"}},
            "required": ["query"],
        },
    },
}

PROFILE_TOOLS: dict[ToolProfile, tuple[str, ...]] = {
    ToolProfile.WEB: ("search", "visit"),
    ToolProfile.WEB_PYTHON_SCHOLAR: ("search", "visit", "python", "scholar"),
}


def tool_schemas(profile: ToolProfile, with_memory: bool) -> list[dict]:
    schemas = [TOOL_SCHEMAS[name] for name in PROFILE_TOOLS[profile]]
    if with_memory:
        schemas.append(memory_tool_schema())
    return schemas


def _require(arguments: dict, key: str, kind: type):
    value = arguments.get(key)
    if not isinstance(value, kind):
        raise ToolArgumentError(f"argument '{key}' must be a {kind.__name__}")
    return value


class ToolEnv:
    """Tool stateless e condivisibili; la disponibilità segue il tool_profile del task."""

    def __init__(self, corpus: Optional[Corpus] = None, live: Optional[LiveWeb] = None,
                 stubs: Optional[dict[str, StubTool]] = None, top_k: int = DEFAULT_TOP_K):
        self.corpus = corpus or Corpus([])
        self.live = live
        self.stubs = stubs or {"python": StubTool("python"), "scholar": StubTool("scholar")}
        self.top_k = top_k

    def available(self, profile: ToolProfile) -> tuple[str, ...]:
        return PROFILE_TOOLS[profile]

    async def search(self, queries: list[str]) -> list[list[SearchHit]]:
        if not queries or not any(q.strip() for q in queries):
            raise ToolArgumentError("search needs at least one non-empty query")
        results = []
        for q in queries:
            if self.live:
                results.append(await self.live.search(q, self.top_k))
            else:
                results.append(self.corpus.search(q, self.top_k))
        return results

    async def visit(self, url: str) -> Optional[str]:
        if self.live:
            return await self.live.visit(url)
        doc = self.corpus.documents.get(url)
        return doc.body if doc else None

    def python_exec(self, code: str) -> str:
        return self.stubs["python"](code)

    def scholar_search(self, query: str) -> str:
        return self.stubs["scholar"](query)

    async def call(self, profile: ToolProfile, name: str, arguments: dict) -> str:
        if name not in TOOL_SCHEMAS:
            raise ToolUnavailable(name)
        if name not in self.available(profile):
            raise ToolUnavailable(name, profile.value)

        if name == "search":
            queries = arguments.get("queries", arguments.get("query"))
            if isinstance(queries, str):
                queries = [queries]
            if not isinstance(queries, list) or not all(isinstance(q, str) for q in queries):
                raise ToolArgumentError("argument 'queries' must be a list of strings")
            results = await self.search(queries)
            return "\n\n".join(format_results(q, hits) for q, hits in zip(queries, results))
        if name == "visit":
            url = _require(arguments, "url", str)
            body = await self.visit(url)
            if body is None:
                return f"ERROR: page not found: {url}"
            return body
        if name == "python":
            return self.python_exec(_require(arguments, "code", str))
        return self.scholar_search(_require(arguments, "query", str))
