"""Scripted policies for smoke tests and adversarial episode checks."""

from __future__ import annotations

from typing import Sequence

from .catalog import Catalog
from .protocol import render_turn
from .synth.instance import BenchmarkInstance

Message = dict[str, str]


def detect_mode(messages: Sequence[Message]) -> str:
    """Stage mode from the tool list advertised in the system prompt."""
    system = messages[0]["content"] if messages and messages[0]["role"] == "system" else ""
    has_mem, has_prod = '"mem_search"' in system, '"product_search"' in system
    if has_mem and has_prod:
        return "one-stage"
    return "1" if has_mem else "2"


def _assistant_turns(messages: Sequence[Message]) -> int:
    return sum(1 for m in messages if m["role"] == "assistant")


class PerfectPolicy:
    """Reads the gold annotation and plays the canonical turns for each stage.

    Stage 1 views the gold sessions and states every wanted feature; stage 2
    views the gold products and recommends them. Only on-gold calls are made,
    so every scored tool call earns full credit.
    """

    def __init__(self, instance: BenchmarkInstance, catalog: Catalog):
        self.instance = instance
        self.catalog = catalog

    def preference_summary(self, inst: BenchmarkInstance) -> str:
        lines = []
        for pid in inst.gold.product_ids:
            product = self.catalog[pid]
            lines.append(f"{product.category}:")
            lines.extend(f"- {f}" for f in inst.gold.wanted_features.get(pid, []))
        return "\n".join(lines)

    def __call__(self, messages: list[Message]) -> str:
        inst = self.instance
        gold = inst.gold
        mem_steps = [{"name": "mem_view", "arguments": {"session_indices": list(gold.gold_session_indices)}}]
        prod_steps = [{"name": "product_view", "arguments": {"product_ids": list(gold.product_ids)}}]
        mode = detect_mode(messages)
        steps = {"1": mem_steps, "2": prod_steps, "one-stage": mem_steps + prod_steps}[mode]
        t = _assistant_turns(messages)
        if t < len(steps):
            return render_turn(think=f"Step {t + 1}.", tool_calls=[steps[t]])
        answer = self.preference_summary(inst)
        if mode != "1":
            answer += "\n@REC::" + ",".join(gold.product_ids) + "@"
        return render_turn(think="Done.", answer=answer)


def empty_policy(messages: list[Message]) -> str:
    return ""


class ScriptedPolicy:
    """Replays a fixed list of outputs, repeating the last one when exhausted."""

    def __init__(self, outputs: Sequence[str]):
        if not outputs:
            raise ValueError("need at least one output")
        self.outputs = list(outputs)

    def __call__(self, messages: list[Message]) -> str:
        t = _assistant_turns(messages)
        return self.outputs[min(t, len(self.outputs) - 1)]
