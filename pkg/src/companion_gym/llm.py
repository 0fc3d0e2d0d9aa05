"""OpenAI-compatible chat-completions client plus the LLM judge, policy and summarizer built on it.

Configuration comes from the environment:

* ``COMPANION_LLM_BASE_URL``: server root, e.g. ``http://localhost:8000/v1``
* ``COMPANION_LLM_API_KEY``: bearer token (optional)
* ``COMPANION_JUDGE_MODEL`` / ``COMPANION_POLICY_MODEL``: model names
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass
from typing import Any, Sequence

import httpx

from .errors import BackendError, InvalidSignalError
from .memory import Session
from .prompts import render_prompt
from .rewards import GoldAnnotation, JudgeSignals

_JSON_OBJECT_RE = re.compile(r"\{.*\}", re.DOTALL)


@dataclass
class ChatClient:
    base_url: str
    model: str
    api_key: str | None = None
    timeout: float = 60.0
    attempts: int = 3
    backoff: float = 1.0
    temperature: float = 0.0

    @classmethod
    def from_env(cls, model_var: str = "COMPANION_JUDGE_MODEL") -> "ChatClient":
        base = os.environ.get("COMPANION_LLM_BASE_URL")
        model = os.environ.get(model_var)
        if not base or not model:
            raise BackendError(f"set COMPANION_LLM_BASE_URL and {model_var} to use an LLM backend")
        return cls(base_url=base, model=model, api_key=os.environ.get("COMPANION_LLM_API_KEY"))

    def complete(self, messages: Sequence[dict[str, str]], **extra: Any) -> str:
        """One chat completion, retried with exponential backoff on transport or 5xx errors."""
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {"model": self.model, "messages": list(messages), "temperature": self.temperature, **extra}
        url = self.base_url.rstrip("/") + "/chat/completions"
        last: Exception | None = None
        for attempt in range(self.attempts):
            try:
                resp = httpx.post(url, json=payload, headers=headers, timeout=self.timeout)
                if resp.status_code < 500:
                    resp.raise_for_status()
                    return resp.json()["choices"][0]["message"]["content"] or ""
                last = BackendError(f"HTTP {resp.status_code}")
            except httpx.HTTPStatusError as exc:
                raise BackendError(f"chat request rejected: {exc}") from exc
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
            if attempt + 1 < self.attempts:
                time.sleep(self.backoff * 2**attempt)
        raise BackendError(f"chat request failed after {self.attempts} attempts: {last}")


def parse_json_object(text: str) -> dict[str, Any]:
    """First JSON object in a completion, tolerating code fences and chatter around it."""
    m = _JSON_OBJECT_RE.search(text or "")
    if not m:
        raise InvalidSignalError("no JSON object in judge output")
    try:
        obj = json.loads(m.group(0))
    except ValueError as exc:
        raise InvalidSignalError(f"judge output is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise InvalidSignalError("judge output must be a JSON object")
    return obj


def _int_field(obj: dict[str, Any], key: str) -> int:
    value = obj.get(key)
    if isinstance(value, bool):
        return int(value)
    if not isinstance(value, int):
        raise InvalidSignalError(f"judge field {key!r} must be an integer, got {value!r}")
    return value


def _yes(text: str) -> bool:
    word = (text or "").strip().lower().split()
    if not word:
        raise InvalidSignalError("empty yes/no verdict")
    token = word[0].strip(".,!:\"'")
    if token not in ("yes", "no"):
        raise InvalidSignalError(f"expected yes or no, got {token!r}")
    return token == "yes"


def _gold_block(gold: GoldAnnotation) -> str:
    lines = []
    for pid in gold.product_ids:
        lines.append(f"{pid}: " + "; ".join(gold.wanted_features.get(pid, [])))
    return "\n".join(lines)


class LLMJudge:
    """Judge backed by a chat model; every signal is range-checked before use."""

    name = "llm"

    def __init__(self, client: ChatClient, catalog, prompt_dir: str | None = None):
        self.client = client
        self.catalog = catalog
        self.prompt_dir = prompt_dir

    def _ask(self, prompt: str) -> str:
        return self.client.complete([{"role": "user", "content": prompt}])

    def _products_block(self, ids: Sequence[str]) -> str:
        rows = []
        for pid in ids:
            product = self.catalog.get(pid)
            rows.append(json.dumps(product.to_dict() if product else {"product_id": pid, "error": "not found"}))
        return "\n".join(rows)

    def _reference(self, gold: GoldAnnotation) -> str:
        rows = []
        for pid in gold.product_ids:
            product = self.catalog.get(pid)
            name = product.name if product else pid
            rows.append(f"{name}: " + "; ".join(gold.wanted_features.get(pid, [])))
        return "\n".join(rows)

    def stage_signals(
        self, stage: int, answer: str | None, recommendation: list[str] | None, instruction: str, gold: GoldAnnotation
    ) -> JudgeSignals:
        b = gold.task_type
        slots = dict(
            user_query=instruction,
            wanted_features=_gold_block(gold),
            feature_count=gold.feature_count,
            bundle_size=gold.bundle_size,
        )
        if stage == 1:
            obj = parse_json_object(self._ask(render_prompt("judge_stage1_reward", self.prompt_dir, answer=answer or "", **slots)))
            signals = JudgeSignals(1, q=_int_field(obj, "q"), m=_int_field(obj, "m"), c=_int_field(obj, "c") if b else None)
        elif stage == 2:
            rec = recommendation or []
            prompt = render_prompt(
                "judge_stage2_reward", self.prompt_dir, recommended_products=self._products_block(rec), **slots
            )
            obj = parse_json_object(self._ask(prompt))
            signals = JudgeSignals(
                2,
                p=_int_field(obj, "p"),
                q=_int_field(obj, "q"),
                m=_int_field(obj, "m"),
                n=_int_field(obj, "n") if b else None,
                u=_int_field(obj, "u") if b else None,
            )
        else:
            raise InvalidSignalError(f"stage must be 1 or 2, got {stage!r}")
        signals.validate(gold)
        return signals

    def success_checks(self, recommendation: list[str], instruction: str, gold: GoldAnnotation) -> tuple[bool, bool]:
        """Relevance and preference coverage from one yes/no verdict; budget is checked by the caller."""
        products = self._products_block(recommendation)
        if gold.task_type:
            prompt = render_prompt("judge_success_bundle", self.prompt_dir, user_query=instruction,
                                   wanted_features=_gold_block(gold), recommended_products=products)
        else:
            prompt = render_prompt("judge_success_single", self.prompt_dir, user_query=instruction,
                                   wanted_features=_gold_block(gold), recommended_product=products)
        verdict = _yes(self._ask(prompt))
        return verdict, verdict

    def feedback(self, answer: str, instruction: str, gold: GoldAnnotation, level: str) -> str | dict[str, list[str]]:
        if level not in ("low", "high"):
            raise ValueError(f"feedback level must be 'low' or 'high', got {level!r}")
        text = self._ask(render_prompt(f"hint_{level}", self.prompt_dir, reference=self._reference(gold), hypothesis=answer))
        if level == "high":
            obj = parse_json_object(text)
            return {k: [str(x) for x in obj.get(k, [])] for k in ("missing", "wrong")}
        label = text.strip().strip('"').lower().strip(".")
        if label not in ("missing", "wrong", "missing, wrong", "all matched"):
            raise InvalidSignalError(f"unexpected hint label {label!r}")
        return label


class ChatPolicy:
    """Policy callable that forwards the message list to a chat model."""

    def __init__(self, client: ChatClient):
        self.client = client

    def __call__(self, messages: list[dict[str, str]]) -> str:
        return self.client.complete(messages)


class LLMSummarizer:
    def __init__(self, client: ChatClient):
        self.client = client

    def __call__(self, session: Session) -> str:
        prompt = "Summarize this conversation in two sentences, keeping any stated preferences.\n\n" + session.render()
        return self.client.complete([{"role": "user", "content": prompt}]).strip()

