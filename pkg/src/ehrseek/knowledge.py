"""External-knowledge browsing tools over a pluggable backend.

The default backend is a cached on-disk corpus (an ``index.json`` mapping
doc ids to files) so the whole suite runs offline and deterministically.
A live HTTP backend can be wired in explicitly; it is never the default.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

import httpx

from .core import DomainError

PAGE_SIZE = 4_000
SNIPPET_CHARS = 300
MAX_SEARCH_HITS = 10
MAX_FIND_MATCHES = 20
FIND_CONTEXT_CHARS = 120


@dataclass(frozen=True)
class KnowledgeDoc:
    doc_id: str
    title: str
    url: str
    body: str
    fetched_at: str = ""


@dataclass(frozen=True)
class SearchHit:
    doc_id: str
    title: str
    snippet: str
    rank: int


@dataclass(frozen=True)
class FindMatch:
    offset: int
    context: str


class KnowledgeBackend(Protocol):
    def search(self, query: str, k: int) -> list[SearchHit]: ...

    def fetch(self, ref: str) -> KnowledgeDoc: ...


def _terms(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def _snippet(doc: KnowledgeDoc, query_terms: list[str]) -> str:
    """Window around the first occurrence of the best-matching query term."""
    haystack = doc.body
    lowered = haystack.lower()
    for term in query_terms:
        pos = lowered.find(term)
        if pos >= 0:
            start = max(0, pos - 40)
            return haystack[start : start + SNIPPET_CHARS].strip()[:SNIPPET_CHARS]
    return haystack[:SNIPPET_CHARS].strip()


class CachedCorpusBackend:
    """Deterministic search over a local document directory.

    Ranking: count of distinct lowercased query terms appearing anywhere in
    title+body, ties broken by ascending doc_id; zero-score docs never rank.
    """

    def __init__(self, corpus_dir: str | Path):
        self.corpus_dir = Path(corpus_dir)
        index_path = self.corpus_dir / "index.json"
        if not index_path.is_file():
            raise DomainError("backend_unavailable", f"no index.json in {corpus_dir}")
        index = json.loads(index_path.read_text(encoding="utf-8"))
        self._docs: dict[str, KnowledgeDoc] = {}
        self._by_url: dict[str, str] = {}
        for doc_id, meta in index.items():
            body = (self.corpus_dir / meta["file"]).read_text(encoding="utf-8")
            doc = KnowledgeDoc(
                doc_id=doc_id,
                title=meta.get("title", doc_id),
                url=meta.get("url", ""),
                body=body,
                fetched_at=meta.get("fetched_at", ""),
            )
            self._docs[doc_id] = doc
            if doc.url:
                self._by_url[doc.url] = doc_id

    def search(self, query: str, k: int) -> list[SearchHit]:
        query_terms = sorted(set(_terms(query)))
        scored = []
        for doc_id, doc in self._docs.items():
            doc_terms = set(_terms(doc.title + " " + doc.body))
            score = sum(1 for t in query_terms if t in doc_terms)
            if score > 0:
                scored.append((-score, doc_id))
        scored.sort()
        hits = []
        for rank, (_, doc_id) in enumerate(scored[:k], start=1):
            doc = self._docs[doc_id]
            hits.append(
                SearchHit(
                    doc_id=doc_id,
                    title=doc.title,
                    snippet=_snippet(doc, query_terms),
                    rank=rank,
                )
            )
        return hits

    def fetch(self, ref: str) -> KnowledgeDoc:
        if ref in self._docs:
            return self._docs[ref]
        if ref in self._by_url:
            return self._docs[self._by_url[ref]]
        raise DomainError("not_found", f"no document {ref!r} in corpus")


class LiveSearchBackend:
    """Adapter for a remote JSON search API; opt-in only.

    Expects ``GET {base_url}/search?q=...&k=...`` returning
    ``{"hits": [{"doc_id", "title", "url", "snippet"}]}`` and
    ``GET {base_url}/fetch?ref=...`` returning a document object. Requests
    within one episode are serialized and capped.
    """

    def __init__(
        self,
        base_url: str,
        request_cap: int = 50,
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.request_cap = request_cap
        self._requests = 0
        self._lock = threading.Lock()
        self._client = httpx.Client(transport=transport, timeout=30.0)

    def _get(self, path: str, params: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            if self._requests >= self.request_cap:
                raise DomainError("backend_unavailable", "per-episode request cap reached")
            self._requests += 1
            try:
                response = self._client.get(self.base_url + path, params=params)
                response.raise_for_status()
                return response.json()
            except httpx.HTTPError as exc:
                raise DomainError("backend_unavailable", f"live backend failed: {exc}") from exc

    def search(self, query: str, k: int) -> list[SearchHit]:
        payload = self._get("/search", {"q": query, "k": k})
        return [
            SearchHit(
                doc_id=h["doc_id"],
                title=h.get("title", h["doc_id"]),
                snippet=h.get("snippet", "")[:SNIPPET_CHARS],
                rank=rank,
            )
            for rank, h in enumerate(payload.get("hits", [])[:k], start=1)
        ]

    def fetch(self, ref: str) -> KnowledgeDoc:
        payload = self._get("/fetch", {"ref": ref})
        if "body" not in payload:
            raise DomainError("not_found", f"no document {ref!r}")
        return KnowledgeDoc(
            doc_id=payload.get("doc_id", ref),
            title=payload.get("title", ref),
            url=payload.get("url", ""),
            body=payload["body"],
            fetched_at=payload.get("fetched_at", ""),
        )


def search(backend: KnowledgeBackend, query: str, k: int = 5) -> list[SearchHit]:
    if not query.strip():
        raise DomainError("empty_query", "query must be nonempty")
    k = max(1, min(int(k), MAX_SEARCH_HITS))
    return backend.search(query, k)


def open_doc(backend: KnowledgeBackend, ref: str, page: int = 1) -> dict[str, Any]:
    """One page of a document's body, ``PAGE_SIZE`` characters per page."""
    doc = backend.fetch(ref)
    total_pages = max(1, -(-len(doc.body) // PAGE_SIZE))
    page = int(page)
    if page < 1 or page > total_pages:
        raise DomainError("not_found", f"page {page} out of range 1..{total_pages}")
    start = (page - 1) * PAGE_SIZE
    return {
        "doc_id": doc.doc_id,
        "title": doc.title,
        "url": doc.url,
        "page": page,
        "total_pages": total_pages,
        "text": doc.body[start : start + PAGE_SIZE],
    }


def find_in_doc(backend: KnowledgeBackend, ref: str, term: str) -> list[FindMatch]:
    """Case-insensitive exact substring matches with character offsets."""
    if not term:
        raise DomainError("empty_query", "term must be nonempty")
    doc = backend.fetch(ref)
    lowered = doc.body.lower()
    needle = term.lower()
    matches: list[FindMatch] = []
    pos = lowered.find(needle)
    while pos >= 0 and len(matches) < MAX_FIND_MATCHES:
        start = max(0, pos - FIND_CONTEXT_CHARS)
        end = min(len(doc.body), pos + len(term) + FIND_CONTEXT_CHARS)
        matches.append(FindMatch(offset=pos, context=doc.body[start:end]))
        pos = lowered.find(needle, pos + 1)
    return matches
