"""Two-stage episode loop: reset/step against an external policy, user feedback, success and metrics."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Sequence

from .catalog import Catalog, ProductIndex
from .errors import BackendError, SchemaError
from .memory import Embedder, HashingEmbedder, MemoryIndex, MemoryStore, Summarizer, build_memory_index
from .prompts import load_prompt, render_prompt
from .protocol import AgentTurnParse, parse_agent_output
from .rewards import GoldAnnotation, Judge, voucher_adjusted_total
from .synth.instance import BenchmarkInstance
from .tools import STAGE_TOOLS, ToolBox, ToolInvocation, render_observation, render_tool_schemas

log = logging.getLogger(__name__)

DEFAULT_MAX_TURNS = 20
DEFAULT_FEEDBACK_ROUNDS = 2
FORMAT_NUDGE = load_prompt("format_nudge").strip()

Message = dict[str, str]
Policy = Callable[[list[Message]], str]

STAGE_MODES = ("1", "2", "one-stage")
_SYSTEM_PROMPTS = {"1": "stage1_system", "2": "stage2_system", "one-stage": "one_stage_system"}


class HintLevel(str, Enum):
    NONE = "none"
    LOW = "low"
    HIGH = "high"


@dataclass
class EpisodeConfig:
    max_turns: int = DEFAULT_MAX_TURNS
    hint: HintLevel = HintLevel.NONE
    max_feedback_rounds: int = DEFAULT_FEEDBACK_ROUNDS
    prompt_dir: str | None = None


def _stage_label(mode: str) -> int:
    return 1 if mode == "1" else 2


@dataclass
class Trajectory:
    instance_id: str
    mode: str
    instruction: str
    messages: list[Message] = field(default_factory=list)
    parses: list[AgentTurnParse] = field(default_factory=list)
    invocations: list[ToolInvocation] = field(default_factory=list)
    # Assistant-turn number (1-based) that issued each invocation.
    invocation_turns: list[int] = field(default_factory=list)
    final_answer: str | None = None
    recommendation: list[str] | None = None
    terminated_by: str | None = None
    preferences: str | None = None
    feedback: list[dict[str, Any]] = field(default_factory=list)
    error: str | None = None

    @property
    def stage(self) -> int:
        return _stage_label(self.mode)

    @property
    def raw_outputs(self) -> list[str]:
        return [p.raw for p in self.parses]

    @property
    def turn_count(self) -> int:
        return len(self.parses)

    @property
    def aborted(self) -> bool:
        return self.terminated_by == "aborted"

    @property
    def char_count(self) -> int:
        return sum(len(r) for r in self.raw_outputs)

    @property
    def token_count(self) -> int:
        return sum(len(r.split()) for r in self.raw_outputs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "stage": self.stage,
            "mode": self.mode,
            "instruction": self.instruction,
            "turns": [dict(m) for m in self.messages],
            "tool_calls": [
                {**inv.to_dict(), "turn": turn} for inv, turn in zip(self.invocations, self.invocation_turns)
            ],
            "final_answer": self.final_answer,
            "recommendation": self.recommendation,
            "terminated_by": self.terminated_by,
            "preferences": self.preferences,
            "feedback": self.feedback,
            "error": self.error,
            "char_count": self.char_count,
            "token_count": self.token_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Trajectory":
        """Rebuild from the JSONL form; parses are recomputed from the assistant turns."""
        try:
            mode = str(data.get("mode") or data["stage"])
            if mode not in STAGE_MODES:
                raise SchemaError(f"unknown stage {mode!r}", field="stage")
            turns = [{"role": t["role"], "content": t["content"]} for t in data.get("turns", [])]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"invalid trajectory: {exc}") from None
        calls = data.get("tool_calls") or []
        traj = cls(
            instance_id=str(data.get("instance_id", "")),
            mode=mode,
            instruction=data.get("instruction") or "",
            messages=turns,
            parses=[parse_agent_output(t["content"]) for t in turns if t["role"] == "assistant"],
            invocations=[ToolInvocation.from_dict(c) for c in calls],
            invocation_turns=[int(c.get("turn", 0)) for c in calls],
            final_answer=data.get("final_answer"),
            recommendation=data.get("recommendation"),
            terminated_by=data.get("terminated_by"),
            preferences=data.get("preferences"),
            feedback=list(data.get("feedback") or []),
            error=data.get("error"),
        )
        return traj


@dataclass
class EpisodeState:
    instance: BenchmarkInstance
    mode: str
    toolbox: ToolBox
    config: EpisodeConfig
    messages: list[Message]
    t: int = 0
    terminal: bool = False
    trajectory: Trajectory = field(default=None)  # type: ignore[assignment]

    @property
    def stage(self) -> int:
        return _stage_label(self.mode)

    def append(self, role: str, content: str) -> None:
        message = {"role": role, "content": content}
        self.messages.append(message)
        self.trajectory.messages.append(dict(message))


class Environment:
    """Shared read-only resources plus per-instance memory indices.

    Catalog and product index are shared by every episode. Memory indices are
    built once per instance and cached; all of them are immutable afterwards.
    """

    def __init__(
        self,
        catalog: Catalog,
        product_index: ProductIndex,
        embedder: Embedder | None = None,
        summarizer: Summarizer | None = None,
        web_backend: Callable[[str, dict[str, Any]], str] | None = None,
    ):
        self.catalog = catalog
        self.product_index = product_index
        self.embedder = embedder or HashingEmbedder()
        self.summarizer = summarizer
        self.web_backend = web_backend
        self._memory: dict[str, tuple[MemoryStore, MemoryIndex]] = {}
        self._lock = threading.Lock()

    def memory_for(self, instance: BenchmarkInstance) -> tuple[MemoryStore, MemoryIndex]:
        with self._lock:
            cached = self._memory.get(instance.instance_id)
            if cached is None or cached[0] is not instance.history:
                cached = (instance.history, build_memory_index(instance.history, self.embedder))
                self._memory[instance.instance_id] = cached
            return cached

    def toolbox(self, instance: BenchmarkInstance, mode: str) -> ToolBox:
        store, index = self.memory_for(instance)
        return ToolBox(
            catalog=self.catalog,
            product_index=self.product_index,
            store=store,
            memory_index=index,
            available=STAGE_TOOLS[mode],
            summarizer=self.summarizer,
            web_backend=self.web_backend,
        )

    def reset(
        self,
        instance: BenchmarkInstance,
        mode: str | int,
        preferences: str | None = None,
        config: EpisodeConfig | None = None,
    ) -> EpisodeState:
        mode = str(mode)
        if mode not in STAGE_MODES:
            raise ValueError(f"stage must be one of {STAGE_MODES}, got {mode!r}")
        if mode == "2" and preferences is None:
            raise ValueError("stage 2 needs the confirmed preferences from stage 1")
        config = config or EpisodeConfig()
        system = render_prompt(
            _SYSTEM_PROMPTS[mode], config.prompt_dir, available_tools=render_tool_schemas(STAGE_TOOLS[mode])
        )
        user = instance.instruction
        if mode == "2":
            user = f"{instance.instruction}\n\n# Confirmed preferences\n{preferences}"
        state = EpisodeState(
            instance=instance,
            mode=mode,
            toolbox=self.toolbox(instance, mode),
            config=config,
            messages=[],
            trajectory=Trajectory(
                instance_id=instance.instance_id,
                mode=mode,
                instruction=instance.instruction,
                preferences=preferences,
            ),
        )
        state.append("system", system)
        state.append("user", user)
        return state

    def step(self, state: EpisodeState, policy_output: str) -> tuple[EpisodeState, str | None]:
        """Apply one assistant turn; returns the observation appended for the policy, if any."""
        if state.terminal:
            raise RuntimeError("episode is terminal")
        parse = parse_agent_output(policy_output)
        traj = state.trajectory
        state.append("assistant", parse.raw)
        traj.parses.append(parse)
        state.t += 1

        observation: str | None
        if parse.tool_calls:
            invocations = [state.toolbox.dispatch(call) for call in parse.tool_calls]
            traj.invocations.extend(invocations)
            traj.invocation_turns.extend([state.t] * len(invocations))
            observation = render_observation(invocations)
            state.append("user", observation)
        elif parse.answer is not None:
            observation = None
            state.terminal = True
            traj.terminated_by = "answer"
            traj.final_answer = parse.answer
            traj.recommendation = parse.recommendation if state.stage == 2 else None
        else:
            observation = FORMAT_NUDGE
            state.append("user", observation)

        if not state.terminal and state.t >= state.config.max_turns:
            state.terminal = True
            traj.terminated_by = "turn_cap"
        return state, observation

    def give_feedback(self, state: EpisodeState, message: str) -> None:
        """Reopen a stage-1 episode that ended with an answer, with a simulated user reply."""
        if state.t >= state.config.max_turns:
            raise RuntimeError("turn budget exhausted")
        state.terminal = False
        state.trajectory.terminated_by = None
        state.append("user", message)


def feedback_message(feedback: str | dict[str, list[str]]) -> str:
    return feedback if isinstance(feedback, str) else json.dumps(feedback, ensure_ascii=False)


def feedback_is_clean(feedback: str | dict[str, list[str]]) -> bool:
    if isinstance(feedback, str):
        return feedback.strip().lower() == "all matched"
    return not feedback.get("missing") and not feedback.get("wrong")


def user_feedback(
    stage1_answer: str, instance: BenchmarkInstance, level: HintLevel | str, judge: Judge
) -> str | dict[str, list[str]]:
    """Simulated user verdict on stage-1 preferences: a label (low) or offending feature names (high)."""
    level = HintLevel(level)
    if level is HintLevel.NONE:
        raise ValueError("no feedback at hint level 'none'")
    return judge.feedback(stage1_answer, instance.instruction, instance.gold, level.value)


def run_episode(
    env: Environment,
    instance: BenchmarkInstance,
    mode: str | int,
    policy: Policy,
    config: EpisodeConfig | None = None,
    judge: Judge | None = None,
    preferences: str | None = None,
) -> Trajectory:
    config = config or EpisodeConfig()
    state = env.reset(instance, mode, preferences=preferences, config=config)
    rounds = 0
    while not state.terminal:
        try:
            output = policy([dict(m) for m in state.messages])
        except BackendError as exc:
            state.terminal = True
            state.trajectory.terminated_by = "aborted"
            state.trajectory.error = str(exc)
            break
        env.step(state, output)
        traj = state.trajectory
        wants_feedback = (
            state.mode == "1"
            and traj.terminated_by == "answer"
            and config.hint is not HintLevel.NONE
            and judge is not None
            and rounds < config.max_feedback_rounds
            and state.t < config.max_turns
        )
        if wants_feedback:
            try:
                fb = user_feedback(traj.final_answer or "", instance, config.hint, judge)
            except BackendError as exc:
                log.warning("feedback unavailable for %s: %s", instance.instance_id, exc)
                continue
            traj.feedback.append({"round": rounds + 1, "level": config.hint.value, "feedback": fb})
            if feedback_is_clean(fb):
                continue
            rounds += 1
            env.give_feedback(state, feedback_message(fb))
    return state.trajectory


def run_two_stage(
    env: Environment,
    instance: BenchmarkInstance,
    policy: Policy,
    config: EpisodeConfig | None = None,
    judge: Judge | None = None,
) -> tuple[Trajectory, Trajectory]:
    """Stage 1, optional simulated feedback, then stage 2 on the final stage-1 answer verbatim."""
    first = run_episode(env, instance, "1", policy, config, judge)
    second = run_episode(env, instance, "2", policy, config, judge, preferences=first.final_answer or "")
    return first, second


def replay(env: Environment, instance: BenchmarkInstance, trajectory: Trajectory) -> Trajectory:
    """Re-execute a recorded trajectory's assistant turns against this environment.

    Recorded user messages that the environment did not produce itself are
    treated as feedback and re-injected.
    """
    config = EpisodeConfig(max_turns=max(DEFAULT_MAX_TURNS, trajectory.turn_count))
    state = env.reset(instance, trajectory.mode, preferences=trajectory.preferences or "", config=config)
    recorded = trajectory.messages
    first_assistant = next((i for i, m in enumerate(recorded) if m["role"] == "assistant"), len(recorded))
    if first_assistant:
        state.messages[:] = [dict(m) for m in recorded[:first_assistant]]
        state.trajectory.messages[:] = [dict(m) for m in recorded[:first_assistant]]
    i = first_assistant
    while i < len(recorded):
        msg = recorded[i]
        if msg["role"] == "assistant":
            if state.terminal:
                state.terminal = False
                state.trajectory.terminated_by = None
            _, observation = env.step(state, msg["content"])
            i += 1
            if observation is not None and i < len(recorded) and recorded[i]["content"] == observation:
                i += 1
        else:
            if state.terminal:
                state.terminal = False
                state.trajectory.terminated_by = None
            state.append(msg["role"], msg["content"])
            i += 1
    state.trajectory.feedback = list(trajectory.feedback)
    return state.trajectory


def success(trajectory: Trajectory, gold: GoldAnnotation, catalog: Catalog, judge: Judge) -> int:
    """1 iff count, existence, needs, preferences and (for bundles) budget all check out."""
    if trajectory.stage != 2:
        raise ValueError("success is defined for stage-2 trajectories")
    if trajectory.terminated_by is None:
        raise ValueError("trajectory is not terminal")
    rec = trajectory.recommendation
    if not rec or len(rec) != gold.bundle_size or len(set(rec)) != len(rec):
        return 0
    if not all(pid in catalog for pid in rec):
        return 0
    needs, prefs = judge.success_checks(rec, trajectory.instruction, gold)
    if not (needs and prefs):
        return 0
    if gold.task_type == 1:
        total = voucher_adjusted_total((catalog[pid].price for pid in rec), gold.voucher)
        if gold.budget is None or total > gold.budget:
            return 0
    return 1


@dataclass(frozen=True)
class BehavioralMetrics:
    mean_turns: float
    mean_tool_uses: float
    mean_response_chars: float
    mean_response_tokens: float
    count: int

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def behavioral_metrics(trajectories: Sequence[Trajectory]) -> BehavioralMetrics:
    if not trajectories:
        raise ValueError("behavioral metrics need at least one trajectory")
    n = len(trajectories)
    return BehavioralMetrics(
        mean_turns=sum(t.turn_count for t in trajectories) / n,
        mean_tool_uses=sum(len(t.invocations) for t in trajectories) / n,
        mean_response_chars=sum(t.char_count for t in trajectories) / n,
        mean_response_tokens=sum(t.token_count for t in trajectories) / n,
        count=n,
    )


def load_trajectories(lines: Iterable[str]) -> list[Trajectory]:
    return [Trajectory.from_dict(json.loads(line)) for line in lines if line.strip()]


