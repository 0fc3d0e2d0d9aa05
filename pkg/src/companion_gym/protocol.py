"""Agent output grammar: ``<think>``, ``<tool_call>``, ``<answer>`` and ``@REC::...@`` spans.

The grammar is documented in ABNF in ``docs/protocol.abnf``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Sequence

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
TOOL_OPEN, TOOL_CLOSE = "<tool_call>", "</tool_call>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
REC_PREFIX = "@REC::"

_TOOL_BLOCK_RE = re.compile(re.escape(TOOL_OPEN) + r"(.*?)" + re.escape(TOOL_CLOSE), re.DOTALL)
_REC_RE = re.compile(r"@REC::([^@]*)@")


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict[str, Any]
    raw_line: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "arguments": self.arguments}


@dataclass
class AgentTurnParse:
    raw: str = ""
    think: str | None = None
    tool_calls: list[ToolCall] = field(default_factory=list)
    answer: str | None = None
    f_th: bool = False
    f_tc: bool = False
    f_ans: bool = False
    f_rec: bool = False
    recommendation: list[str] | None = None
    # Whether the construct appears at all, well-formed or not.
    has_think: bool = False
    has_tool_call: bool = False

    @property
    def kind(self) -> str:
        if self.tool_calls:
            return "tool"
        if self.answer is not None:
            return "answer"
        return "invalid"


def _single_pair(text: str, open_tag: str, close_tag: str) -> tuple[bool, str | None]:
    if text.count(open_tag) != 1 or text.count(close_tag) != 1:
        return False, None
    start = text.index(open_tag) + len(open_tag)
    end = text.index(close_tag)
    if end < start:
        return False, None
    return True, text[start:end]


def _parse_tool_block(body: str) -> list[ToolCall] | None:
    calls = []
    for line in body.split("\n"):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except (ValueError, RecursionError):
            return None
        if not isinstance(obj, dict):
            return None
        name, arguments = obj.get("name"), obj.get("arguments")
        if not isinstance(name, str) or not isinstance(arguments, dict):
            return None
        calls.append(ToolCall(name=name, arguments=arguments, raw_line=line.strip()))
    return calls or None


def extract_recommendation(answer: str | None) -> list[str] | None:
    """Product ids from the single ``@REC::id1,id2@`` span, or None if absent or ambiguous."""
    if not answer or answer.count(REC_PREFIX) != 1:
        return None
    matches = _REC_RE.findall(answer)
    if len(matches) != 1:
        return None
    ids = [part.strip() for part in matches[0].split(",")]
    if not ids or any(not pid for pid in ids):
        return None
    return ids


def parse_agent_output(text: str | bytes | None) -> AgentTurnParse:
    """Parse one raw policy output. Never raises; malformed input yields false flags."""
    if text is None:
        text = ""
    elif isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    elif not isinstance(text, str):
        text = str(text)

    result = AgentTurnParse(raw=text)

    result.has_think = THINK_OPEN in text or THINK_CLOSE in text
    result.f_th, result.think = _single_pair(text, THINK_OPEN, THINK_CLOSE)

    result.has_tool_call = TOOL_OPEN in text or TOOL_CLOSE in text
    if result.has_tool_call:
        blocks = _TOOL_BLOCK_RE.findall(text)
        n_open, n_close = text.count(TOOL_OPEN), text.count(TOOL_CLOSE)
        if blocks and n_open == n_close == len(blocks):
            calls: list[ToolCall] = []
            for body in blocks:
                parsed = _parse_tool_block(body)
                if parsed is None:
                    calls = []
                    break
                calls.extend(parsed)
            if calls:
                result.f_tc = True
                result.tool_calls = calls

    result.f_ans, answer = _single_pair(text, ANSWER_OPEN, ANSWER_CLOSE)
    if result.f_ans:
        recommendation = extract_recommendation(answer)
        result.f_rec = recommendation is not None
        # A turn cannot both call tools and answer; tool calls win.
        if not result.tool_calls:
            result.answer = answer
            result.recommendation = recommendation
    return result


def render_turn(
    think: str | None = None,
    tool_calls: Sequence[ToolCall | dict[str, Any]] = (),
    answer: str | None = None,
) -> str:
    """Serialize a turn in the canonical template."""
    parts = []
    if think is not None:
        parts.append(f"{THINK_OPEN}{think}{THINK_CLOSE}")
    if tool_calls:
        lines = []
        for call in tool_calls:
            data = call.to_dict() if isinstance(call, ToolCall) else call
            lines.append(json.dumps({"name": data["name"], "arguments": data["arguments"]}, ensure_ascii=False))
        parts.append(TOOL_OPEN + "\n" + "\n".join(lines) + "\n" + TOOL_CLOSE)
    if answer is not None:
        parts.append(f"{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
    return "\n".join(parts)


@dataclass(frozen=True)
class FormatFlags:
    f_ans: bool = False
    f_th: bool = False
    f_tc: bool = False
    f_rec: bool = False


def trajectory_format_flags(parses: Iterable[AgentTurnParse]) -> FormatFlags:
    """Aggregate per-turn flags over a whole trajectory.

    ``f_th`` and ``f_tc`` hold when every turn that contains the construct is
    well-formed and at least one such turn exists. ``f_ans`` and ``f_rec``
    come from the final turn.
    """
    parses = list(parses)
    if not parses:
        return FormatFlags()
    think_turns = [p for p in parses if p.has_think]
    tool_turns = [p for p in parses if p.has_tool_call]
    final = parses[-1]
    return FormatFlags(
        f_ans=final.f_ans,
        f_th=bool(think_turns) and all(p.f_th for p in think_turns),
        f_tc=bool(tool_turns) and all(p.f_tc for p in tool_turns),
        f_rec=final.f_rec,
    )


def format_reward(flags: FormatFlags | AgentTurnParse, stage: int) -> Fraction:
    """(f_ans + f_th + f_tc + [stage 2]·f_rec) / (3 + [stage 2])."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage!r}")
    stage2 = int(stage == 2)
    num = int(flags.f_ans) + int(flags.f_th) + int(flags.f_tc) + stage2 * int(flags.f_rec)
    return Fraction(num, 3 + stage2)
