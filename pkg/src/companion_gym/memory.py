"""Long-term conversation memory: sessions, turn embeddings and the three memory tools."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import numpy as np

from .catalog import NotFound, tokenize
from .errors import BackendError, SchemaError, ToolError

DEFAULT_DIM = 384
DEFAULT_MEM_K = 5
SUMMARY_TOKENS_PER_TURN = 40
# Similarities closer than this are treated as tied and ordered by position.
SIMILARITY_DECIMALS = 12

ROLES = ("user", "assistant")


@dataclass(frozen=True)
class Turn:
    role: str
    content: str

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class Session:
    session_index: int
    date: dt.date
    turns: tuple[Turn, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_index": self.session_index,
            "date": self.date.isoformat(),
            "turns": [t.to_dict() for t in self.turns],
        }

    def render(self) -> str:
        lines = [f"## Session {self.session_index} ({self.date.isoformat()})"]
        lines.extend(f"{t.role}: {t.content}" for t in self.turns)
        return "\n".join(lines)


def parse_session(data: Any, where: str = "history") -> Session:
    if not isinstance(data, dict):
        raise SchemaError(f"{where}: expected an object")
    idx = data.get("session_index")
    if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
        raise SchemaError(f"{where}: expected a non-negative integer", field="session_index")
    try:
        date = dt.date.fromisoformat(str(data.get("date")))
    except ValueError:
        raise SchemaError(f"{where}: expected an ISO-8601 date", field="date") from None
    raw_turns = data.get("turns")
    if not isinstance(raw_turns, list) or not raw_turns:
        raise SchemaError(f"{where}: session {idx} must have a non-empty turns list", field="turns")
    turns = []
    for j, t in enumerate(raw_turns):
        if not isinstance(t, dict) or t.get("role") not in ROLES or not isinstance(t.get("content"), str):
            raise SchemaError(
                f"{where}: session {idx} turn {j} needs role in {ROLES} and string content",
                field="turns",
            )
        turns.append(Turn(t["role"], t["content"]))
    return Session(idx, date, tuple(turns))


class MemoryStore:
    """An ordered, contiguous list of sessions (the haystack)."""

    def __init__(self, sessions: Sequence[Session]):
        ordered = sorted(sessions, key=lambda s: s.session_index)
        indices = [s.session_index for s in ordered]
        if indices != list(range(len(ordered))):
            raise SchemaError(f"session indices must be contiguous from 0, got {indices}", field="session_index")
        self.sessions: tuple[Session, ...] = tuple(ordered)

    @classmethod
    def from_json(cls, history: Any) -> "MemoryStore":
        if not isinstance(history, list):
            raise SchemaError("history must be a list of sessions", field="history")
        return cls([parse_session(s, where=f"history[{i}]") for i, s in enumerate(history)])

    def __len__(self) -> int:
        return len(self.sessions)

    def get(self, session_index: int) -> Session | None:
        if isinstance(session_index, int) and 0 <= session_index < len(self.sessions):
            return self.sessions[session_index]
        return None

    def iter_turns(self) -> Iterable[tuple[int, int, Turn]]:
        for s in self.sessions:
            for t, turn in enumerate(s.turns):
                yield s.session_index, t, turn

    def turn_count(self) -> int:
        return sum(len(s.turns) for s in self.sessions)

    def to_json(self) -> list[dict[str, Any]]:
        return [s.to_dict() for s in self.sessions]


def load_history(path: str | Path) -> MemoryStore:
    """Load a history file: either a bare session list or an instance object with ``history``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if isinstance(data, dict) and "history" in data:
        data = data["history"]
    return MemoryStore.from_json(data)


class Embedder(Protocol):
    name: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic feature-hashing bag of words.

    Bucket 0 is reserved for text without tokens, so no text maps to the
    zero vector. Counts are unsigned, which keeps collisions from cancelling.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.name = f"hashing-bow-{dim}"

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return 1 + int.from_bytes(digest, "little") % (self.dim - 1)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            tokens = tokenize(text)
            if not tokens:
                out[row, 0] = 1.0
                continue
            for token in tokens:
                out[row, self._bucket(token)] += 1.0
            out[row] /= np.linalg.norm(out[row])
        return out


class HttpEmbedder:
    """Remote embedder speaking ``POST /embed {texts} -> {vectors}``."""

    def __init__(self, base_url: str, dim: int = DEFAULT_DIM, name: str | None = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.dim = dim
        self.name = name or f"http:{self.base_url}"
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        try:
            resp = httpx.post(f"{self.base_url}/embed", json={"texts": list(texts)}, timeout=self.timeout)
            resp.raise_for_status()
            vectors = np.asarray(resp.json()["vectors"], dtype=np.float64)
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise BackendError(f"embedder request failed: {exc}") from exc
        if vectors.shape != (len(texts), self.dim):
            raise BackendError(f"embedder returned shape {vectors.shape}, expected {(len(texts), self.dim)}")
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise BackendError("embedder returned a zero vector")
        return vectors / norms


@dataclass
class MemoryIndex:
    vectors: np.ndarray
    positions: list[tuple[int, int]]
    embedder: Embedder = field(repr=False)

    @property
    def embedder_name(self) -> str:
        return self.embedder.name


def build_memory_index(store: MemoryStore, embedder: Embedder | None = None) -> MemoryIndex:
    embedder = embedder or HashingEmbedder()
    positions = [(s, t) for s, t, _ in store.iter_turns()]
    texts = [turn.content for _, _, turn in store.iter_turns()]
    vectors = embedder.embed(texts) if texts else np.zeros((0, embedder.dim))
    vectors.setflags(write=False)
    return MemoryIndex(vectors=vectors, positions=positions, embedder=embedder)


@dataclass(frozen=True)
class MemoryHit:
    session_index: int
    turn_index: int
    similarity: float

    def render(self, store: MemoryStore) -> str:
        session = store.sessions[self.session_index]
        turn = session.turns[self.turn_index]
        return (
            f"[session {self.session_index}, turn {self.turn_index}, {session.date.isoformat()}] "
            f"{turn.role}: {turn.content}"
        )


def mem_search(
    store: MemoryStore, index: MemoryIndex, queries: Sequence[str], k: int = DEFAULT_MEM_K
) -> list[list[MemoryHit]]:
    """Top-k turns by cosine similarity for each query, scored independently."""
    if isinstance(queries, str) or not isinstance(queries, Sequence) or not queries:
        raise ToolError("queries must be a non-empty list of strings")
    if not all(isinstance(q, str) for q in queries):
        raise ToolError("every query must be a string")
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise ToolError("k must be a positive integer")
    if not index.positions:
        return [[] for _ in queries]
    qvecs = index.embedder.embed(list(queries))
    sims = qvecs @ index.vectors.T
    results = []
    for row in sims:
        order = sorted(
            range(len(index.positions)),
            key=lambda i: (-round(float(row[i]), SIMILARITY_DECIMALS), index.positions[i]),
        )[:k]
        results.append([MemoryHit(*index.positions[i], float(row[i])) for i in order])
    return results


def mem_view(store: MemoryStore, session_indices: Sequence[int]) -> list[Session | NotFound]:
    if not session_indices:
        raise ToolError("session_indices must be a non-empty list")
    return [store.get(i) or NotFound(i) for i in session_indices]


@dataclass(frozen=True)
class SessionSummary:
    session_index: int
    date: dt.date
    summary: str

    def render(self) -> str:
        return f"[session {self.session_index}, {self.date.isoformat()}] {self.summary}"


Summarizer = Callable[[Session], str]

_SENTENCE_RE = re.compile(r"^(.*?[.!?])(?=\s|$)", re.DOTALL)


def first_sentence(text: str, max_tokens: int = SUMMARY_TOKENS_PER_TURN) -> str:
    text = text.strip()
    m = _SENTENCE_RE.match(text)
    sentence = m.group(1) if m else text
    words = sentence.split()
    return " ".join(words[:max_tokens])


def extractive_summary(session: Session) -> str:
    return " ".join(first_sentence(t.content) for t in session.turns)


def _as_date(value: dt.date | str) -> dt.date:
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError:
        raise ToolError(f"invalid date {value!r}; expected YYYY-MM-DD") from None


def mem_summarize_by_date(
    store: MemoryStore,
    start: dt.date | str,
    end: dt.date | str,
    summarizer: Summarizer | None = None,
) -> list[SessionSummary]:
    start, end = _as_date(start), _as_date(end)
    if start > end:
        raise ToolError(f"start date {start} is after end date {end}")
    summarizer = summarizer or extractive_summary
    out = []
    for session in store.sessions:
        if start <= session.date <= end:
            try:
                text = summarizer(session)
            except BackendError as exc:
                raise ToolError(f"summarizer failed: {exc}") from exc
            out.append(SessionSummary(session.session_index, session.date, text))
    return out
