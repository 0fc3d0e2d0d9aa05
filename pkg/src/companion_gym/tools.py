"""Tool dispatch for the five retrieval tools plus the web stubs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable

from .catalog import DEFAULT_SEARCH_K, Catalog, NotFound, ProductIndex, product_search, product_view
from .errors import ToolError
from .memory import (
    DEFAULT_MEM_K,
    MemoryIndex,
    MemoryStore,
    Summarizer,
    mem_search,
    mem_summarize_by_date,
    mem_view,
)
from .protocol import ToolCall

MEMORY_TOOLS = ("mem_search", "mem_view", "mem_summarize_by_date")
PRODUCT_TOOLS = ("product_search", "product_view")
WEB_TOOLS = ("web_search", "web_visit")
STAGE_TOOLS: dict[str, tuple[str, ...]] = {
    "1": MEMORY_TOOLS,
    "2": PRODUCT_TOOLS + WEB_TOOLS,
    "one-stage": MEMORY_TOOLS + PRODUCT_TOOLS + WEB_TOOLS,
}

WEB_UNAVAILABLE = "Web access is unavailable in this environment."

TOOL_SCHEMAS: dict[str, dict[str, Any]] = {
    "mem_search": {
        "description": "Retrieve the dialogue turns most similar to each query from the user's conversation history.",
        "parameters": {
            "queries": {"type": "array", "items": {"type": "string"}, "required": True},
            "top_k": {"type": "integer", "default": DEFAULT_MEM_K},
        },
    },
    "mem_view": {
        "description": "Show complete dialogue sessions by session index.",
        "parameters": {"session_indices": {"type": "array", "items": {"type": "integer"}, "required": True}},
    },
    "mem_summarize_by_date": {
        "description": "Summarize every session dated within [start_date, end_date] (YYYY-MM-DD).",
        "parameters": {
            "start_date": {"type": "string", "required": True},
            "end_date": {"type": "string", "required": True},
        },
    },
    "product_search": {
        "description": "Keyword search over the product catalog. Optional filters: shop_id, and price as 'min-max', '<=x' or '>=x'.",
        "parameters": {
            "query": {"type": "string", "required": True},
            "shop_id": {"type": "string"},
            "price": {"type": "string"},
        },
    },
    "product_view": {
        "description": "Show the full attributes and options of products by id.",
        "parameters": {"product_ids": {"type": "array", "items": {"type": "string"}, "required": True}},
    },
    "web_search": {
        "description": "Search the web.",
        "parameters": {"query": {"type": "string", "required": True}},
    },
    "web_visit": {
        "description": "Visit and summarize a web page.",
        "parameters": {"url": {"type": "string", "required": True}},
    },
}


def render_tool_schemas(names: tuple[str, ...]) -> str:
    lines = ["# Available tools"]
    for name in names:
        lines.append(json.dumps({"name": name, **TOOL_SCHEMAS[name]}, ensure_ascii=False))
    return "\n".join(lines)


@dataclass
class ToolInvocation:
    """One executed tool call; ``results`` is the structured form the reward server scores."""

    name: str
    arguments: dict[str, Any]
    results: Any = None
    observation: str = ""
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "arguments": self.arguments,
            "results": self.results,
            "observation": self.observation,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ToolInvocation":
        return cls(
            name=data["name"],
            arguments=data.get("arguments") or {},
            results=data.get("results"),
            observation=data.get("observation", ""),
            error=data.get("error"),
        )


def _list_arg(args: dict[str, Any], key: str, kind: type) -> list:
    value = args.get(key)
    if isinstance(value, kind) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not value:
        raise ToolError(f"argument {key!r} must be a non-empty list")
    if not all(isinstance(v, kind) and not isinstance(v, bool) for v in value):
        raise ToolError(f"argument {key!r} must contain only {kind.__name__} values")
    return value


def _int_arg(args: dict[str, Any], key: str, default: int) -> int:
    value = args.get(key, default)
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ToolError(f"argument {key!r} must be a positive integer")
    return value


@dataclass
class ToolBox:
    """Executes tool calls against one instance's memory and the shared catalog.

    Holds only references to immutable indices, so one ToolBox per episode
    is cheap and many can share the same catalog.
    """

    catalog: Catalog
    product_index: ProductIndex
    store: MemoryStore
    memory_index: MemoryIndex
    available: tuple[str, ...] = MEMORY_TOOLS + PRODUCT_TOOLS + WEB_TOOLS
    summarizer: Summarizer | None = None
    web_backend: Callable[[str, dict[str, Any]], str] | None = None
    search_k: int = DEFAULT_SEARCH_K
    handlers: dict[str, Callable[[dict[str, Any]], tuple[Any, str]]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.handlers = {
            "mem_search": self._mem_search,
            "mem_view": self._mem_view,
            "mem_summarize_by_date": self._mem_summarize,
            "product_search": self._product_search,
            "product_view": self._product_view,
            "web_search": self._web,
            "web_visit": self._web,
        }

    def dispatch(self, call: ToolCall | dict[str, Any]) -> ToolInvocation:
        if isinstance(call, ToolCall):
            name, args = call.name, call.arguments
        else:
            name, args = call["name"], call.get("arguments") or {}
        invocation = ToolInvocation(name=name, arguments=args)
        handler = self.handlers.get(name)
        try:
            if handler is None:
                raise ToolError(f"unknown tool {name!r}")
            if name not in self.available:
                raise ToolError(f"tool {name!r} is not available in this stage")
            if name in WEB_TOOLS:
                invocation.results, invocation.observation = handler({"__tool__": name, **args})
            else:
                invocation.results, invocation.observation = handler(args)
        except ToolError as exc:
            invocation.error = str(exc)
            invocation.observation = f"Error: {exc}"
        return invocation

    def _mem_search(self, args: dict[str, Any]) -> tuple[Any, str]:
        queries = _list_arg(args, "queries", str)
        k = _int_arg(args, "top_k", DEFAULT_MEM_K)
        hits = mem_search(self.store, self.memory_index, queries, k=k)
        results = [
            [{"session_index": h.session_index, "turn_index": h.turn_index, "similarity": round(h.similarity, 6)} for h in row]
            for row in hits
        ]
        blocks = []
        for query, row in zip(queries, hits):
            lines = [f"Query: {query}"] + [h.render(self.store) for h in row]
            if not row:
                lines.append("(no memories)")
            blocks.append("\n".join(lines))
        return results, "\n\n".join(blocks)

    def _mem_view(self, args: dict[str, Any]) -> tuple[Any, str]:
        indices = _list_arg(args, "session_indices", int)
        sessions = mem_view(self.store, indices)
        text = "\n\n".join(
            f"## Session {s.key}: not found" if isinstance(s, NotFound) else s.render() for s in sessions
        )
        return list(indices), text

    def _mem_summarize(self, args: dict[str, Any]) -> tuple[Any, str]:
        if "start_date" not in args or "end_date" not in args:
            raise ToolError("arguments 'start_date' and 'end_date' are required")
        summaries = mem_summarize_by_date(self.store, args["start_date"], args["end_date"], self.summarizer)
        text = "\n".join(s.render() for s in summaries) or "(no sessions in range)"
        return [s.session_index for s in summaries], text

    def _product_search(self, args: dict[str, Any]) -> tuple[Any, str]:
        query = args.get("query")
        if not isinstance(query, str) or not query.strip():
            raise ToolError("argument 'query' must be a non-empty string")
        shop = args.get("shop_id")
        if shop is not None and not isinstance(shop, str):
            raise ToolError("argument 'shop_id' must be a string")
        price = args.get("price")
        if price is not None and not isinstance(price, (str, int, float)):
            raise ToolError("argument 'price' must be a string")
        k = _int_arg(args, "top_k", self.search_k)
        ranked = product_search(self.product_index, query, shop_id=shop, price=None if price is None else str(price), k=k)
        lines = []
        for pid, score in ranked:
            p = self.catalog.get(pid)
            if p is None:
                continue
            lines.append(
                f"{pid} | {p.name} | {p.category} | {p.brand or '-'} | ${p.price} | shop {p.shop_id} | score={score:.6f}"
            )
        return [pid for pid, _ in ranked], "\n".join(lines) or "(no products found)"

    def _product_view(self, args: dict[str, Any]) -> tuple[Any, str]:
        ids = _list_arg(args, "product_ids", str)
        records = product_view(self.catalog, ids)
        text = "\n".join(
            json.dumps({"product_id": r.key, "error": "not found"})
            if isinstance(r, NotFound)
            else json.dumps(r.to_dict(), ensure_ascii=False)
            for r in records
        )
        return list(ids), text

    def _web(self, args: dict[str, Any]) -> tuple[Any, str]:
        name = args.pop("__tool__")
        if self.web_backend is None:
            return None, WEB_UNAVAILABLE
        try:
            return None, self.web_backend(name, args)
        except Exception as exc:  # external backend; any failure becomes an observation
            raise ToolError(f"{name} failed: {exc}") from exc


def render_observation(invocations: list[ToolInvocation]) -> str:
    return "\n".join(
        f'<tool_response name="{inv.name}">\n{inv.observation}\n</tool_response>' for inv in invocations
    )
