"""Text generators behind the synthesis pipeline.

A backend turns ``(template_id, slots, attempt)`` into raw text. The mock
backend is fully deterministic given its seed; the LLM backend renders the
generation prompts and asks a chat model.
"""

from __future__ import annotations

import json
import random
from typing import Any, Protocol

from ..llm import ChatClient
from ..prompts import render_prompt

TEMPLATES = ("instruction_single", "instruction_bundle", "dialogue")


class GenerationBackend(Protocol):
    def generate(self, template_id: str, slots: dict[str, Any], attempt: int = 0) -> str: ...


def join_names(names: list[str]) -> str:
    if len(names) <= 2:
        return " and ".join(names)
    return ", ".join(names[:-1]) + ", and " + names[-1]


_SINGLE = (
    "Looking for a {c}.",
    "Help me find a {c}.",
    "Find me a {c}.",
    "Searching for a good {c}.",
)

_REASONS = (
    "my current one finally gave out",
    "I am setting up a new apartment",
    "a friend recommended upgrading",
    "I keep borrowing one from my roommate",
    "I start a new routine next month",
)

_ASK = (
    "What about the {n}? Does that matter to you?",
    "How do you feel about the {n}?",
    "Do you have a preference for the {n}?",
)

_WANT = (
    "Yes, I want {v}. The last one I had without it was a letdown.",
    "Definitely {v}. I learned that the hard way.",
    "I would go with {v}, it suited me well before.",
)

_SKIP = (
    "Honestly the {n} does not matter to me.",
    "I have never cared much about the {n}.",
)


class MockBackend:
    """Template-driven stand-in for a generator model.

    ``attempt`` is part of the seed so a retry after a failed validation
    sees different output.
    """

    name = "mock"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _rng(self, template_id: str, slots: dict[str, Any], attempt: int) -> random.Random:
        key = json.dumps(slots, sort_keys=True, default=str)
        return random.Random(f"{self.seed}|{template_id}|{attempt}|{key}")

    def generate(self, template_id: str, slots: dict[str, Any], attempt: int = 0) -> str:
        rng = self._rng(template_id, slots, attempt)
        if template_id == "instruction_single":
            return rng.choice(_SINGLE).format(c=slots["category"])
        if template_id == "instruction_bundle":
            return (
                f"Product bundle includes: {join_names(list(slots['categories']))}. "
                f"Voucher: {slots['voucher']}. Budget: ${slots['budget']}."
            )
        if template_id == "dialogue":
            return json.dumps(self._dialogue(rng, slots["product"], int(slots["n_features"])))
        raise ValueError(f"unknown template {template_id!r}")

    def _dialogue(self, rng: random.Random, product: dict[str, Any], n: int) -> dict[str, Any]:
        features = [f"{k}: {v}" for k, v in product["features"].items()]
        wanted = rng.sample(features, min(n, len(features)))
        rest = [f for f in features if f not in wanted]
        discussed_skip = rng.sample(rest, min(1, len(rest)))
        topics = wanted + discussed_skip
        rng.shuffle(topics)

        category = product["category"]
        turns = [{"role": "user", "content": f"I have been thinking about getting a {category} because {rng.choice(_REASONS)}."}]
        for i, feat in enumerate(topics):
            name, value = (part.strip() for part in feat.split(":", 1))
            ask = rng.choice(_ASK).format(n=name)
            if i == 0:
                ask = "Happy to help you think it through. " + ask
            turns.append({"role": "assistant", "content": ask})
            if feat in wanted:
                turns.append({"role": "user", "content": rng.choice(_WANT).format(v=value)})
            else:
                turns.append({"role": "user", "content": rng.choice(_SKIP).format(n=name)})
        turns.append({"role": "assistant", "content": "Let me recap what you want before you decide."})
        turns.append({"role": "user", "content": "To confirm, I want " + "; ".join(wanted) + ". I will hold off on buying for now."})
        return {"wanted_features": wanted, "does_not_matter_features": rest, "dialogue": turns}


class LLMBackend:
    """Generator backed by a chat model and the shipped generation prompts."""

    name = "llm"

    def __init__(self, client: ChatClient, prompt_dir: str | None = None):
        self.client = client
        self.prompt_dir = prompt_dir

    def generate(self, template_id: str, slots: dict[str, Any], attempt: int = 0) -> str:
        if template_id == "instruction_single":
            prompt = render_prompt("gen_instruction_single", self.prompt_dir, product_name=slots["product_name"])
        elif template_id == "instruction_bundle":
            prompt = render_prompt(
                "gen_instruction_bundle",
                self.prompt_dir,
                product_names="\n".join(slots["product_names"]),
                voucher=slots["voucher"],
                budget=slots["budget"],
            )
        elif template_id == "dialogue":
            product = slots["product"]
            prompt = render_prompt(
                "gen_dialogue",
                self.prompt_dir,
                number_of_features=slots["n_features"],
                product_name=product["name"],
                features="\n".join(f"{k}: {v}" for k, v in product["features"].items()),
            )
        else:
            raise ValueError(f"unknown template {template_id!r}")
        return self.client.complete([{"role": "user", "content": prompt}], seed=attempt)
