from __future__ import annotations

import json
import random
from dataclasses import replace
from decimal import Decimal

import pytest

from companion_gym.episode import (
    EpisodeConfig,
    HintLevel,
    Trajectory,
    behavioral_metrics,
    load_trajectories,
    replay,
    run_episode,
    run_two_stage,
    success,
)
from companion_gym.errors import BackendError
from companion_gym.policies import PerfectPolicy, ScriptedPolicy, empty_policy
from companion_gym.protocol import render_turn
from companion_gym.rewards import final_reward

SEARCH = render_turn(think="look", tool_calls=[{"name": "mem_search", "arguments": {"queries": ["mouse"]}}])
ANSWER_NAVY = render_turn(think="ok", answer="mouse:\n- color: navy")


def test_reset_builds_system_and_user(toy_env, single_instance):
    state = toy_env.reset(single_instance, 1)
    assert [m["role"] for m in state.messages] == ["system", "user"]
    assert '"mem_search"' in state.messages[0]["content"]
    assert '"product_search"' not in state.messages[0]["content"]
    assert state.messages[1]["content"] == "Looking for a mouse."


def test_stage2_reset_needs_preferences(toy_env, single_instance):
    with pytest.raises(ValueError):
        toy_env.reset(single_instance, 2)
    state = toy_env.reset(single_instance, 2, preferences="color: navy")
    assert "color: navy" in state.messages[1]["content"]


def test_step_tool_then_answer(toy_env, single_instance):
    state = toy_env.reset(single_instance, 1)
    _, obs = toy_env.step(state, SEARCH)
    assert obs.startswith('<tool_response name="mem_search">')
    assert state.messages[-1] == {"role": "user", "content": obs}
    _, obs = toy_env.step(state, ANSWER_NAVY)
    assert obs is None and state.terminal
    assert state.trajectory.terminated_by == "answer"
    with pytest.raises(RuntimeError):
        toy_env.step(state, ANSWER_NAVY)


def test_invalid_turn_gets_a_nudge(toy_env, single_instance):
    state = toy_env.reset(single_instance, 1)
    _, obs = toy_env.step(state, "rambling")
    assert obs and not state.terminal


ADVERSARIAL = {
    "empty": empty_policy,
    "garbage": ScriptedPolicy(["\x00\xff<think>"]),
    "unclosed": ScriptedPolicy(["<tool_call>\n{\"name\": \"mem_search\""]),
    "endless_tools": ScriptedPolicy([SEARCH]),
    "bad_tool": ScriptedPolicy([render_turn(tool_calls=[{"name": "rm_rf", "arguments": {}}])]),
    "answer_outside_tags": ScriptedPolicy(["answer: @REC::P1@"]),
}


@pytest.mark.parametrize("name", sorted(ADVERSARIAL))
@pytest.mark.parametrize("mode", ["1", "2", "one-stage"])
def test_adversarial_policies_hit_the_cap(toy_env, single_instance, name, mode):
    traj = run_episode(toy_env, single_instance, mode, ADVERSARIAL[name], preferences="x")
    assert traj.turn_count == 20
    assert traj.terminated_by == "turn_cap"


def test_random_policies_never_exceed_cap(toy_env, single_instance):
    rng = random.Random(0)
    pieces = ["<think>", "</think>", "<tool_call>", "</tool_call>", "<answer>", "</answer>", SEARCH, "{}", "\n"]
    for _ in range(30):
        outputs = ["".join(rng.choices(pieces, k=rng.randint(0, 5))) for _ in range(25)]
        traj = run_episode(toy_env, single_instance, "one-stage", ScriptedPolicy(outputs))
        assert 1 <= traj.turn_count <= 20


def test_custom_cap(toy_env, single_instance):
    traj = run_episode(toy_env, single_instance, 1, empty_policy, EpisodeConfig(max_turns=3))
    assert traj.turn_count == 3


def test_backend_failure_aborts(toy_env, single_instance):
    def failing(messages):
        raise BackendError("timeout")

    traj = run_episode(toy_env, single_instance, 1, failing)
    assert traj.aborted and traj.error == "timeout"


def _mixed_policy():
    return ScriptedPolicy(
        [
            SEARCH,
            render_turn(tool_calls=[{"name": "product_search", "arguments": {"query": "navy mouse"}}]),
            render_turn(tool_calls=[{"name": "product_view", "arguments": {"product_ids": ["P1", "PX"]}}]),
            render_turn(tool_calls=[{"name": "mem_view", "arguments": {"session_indices": [1, 5]}}]),
            render_turn(answer="mouse:\n- color: navy\n@REC::P1@"),
        ]
    )


def test_replay_reproduces_observations(toy_env, single_instance):
    traj = run_episode(toy_env, single_instance, "one-stage", _mixed_policy())
    restored = Trajectory.from_dict(json.loads(traj.to_json()))
    again = replay(toy_env, single_instance, restored)
    assert again.messages == traj.messages
    assert [i.to_dict() for i in again.invocations] == [i.to_dict() for i in traj.invocations]
    assert again.recommendation == ["P1"]


def test_replay_with_feedback_rounds(toy_env, single_instance, oracle):
    config = EpisodeConfig(hint=HintLevel.HIGH)
    traj = run_episode(toy_env, single_instance, 1, ScriptedPolicy([ANSWER_NAVY]), config, judge=oracle)
    again = replay(toy_env, single_instance, load_trajectories([traj.to_json()])[0])
    assert again.messages == traj.messages


def test_feedback_rounds_are_capped(toy_env, single_instance, oracle):
    config = EpisodeConfig(hint=HintLevel.HIGH)
    traj = run_episode(toy_env, single_instance, 1, ScriptedPolicy([ANSWER_NAVY]), config, judge=oracle)
    assert traj.turn_count == 3
    assert [f["round"] for f in traj.feedback] == [1, 2]
    assert traj.feedback[0]["feedback"] == {"missing": ["grip"], "wrong": []}
    # Feedback arrives as a plain user message after the answer.
    assert traj.messages[3] == {"role": "user", "content": json.dumps({"missing": ["grip"], "wrong": []})}


def test_clean_answer_gets_no_second_round(toy_env, single_instance, oracle):
    full = render_turn(answer="mouse:\n- color: navy\n- grip: ergonomic")
    config = EpisodeConfig(hint=HintLevel.LOW)
    traj = run_episode(toy_env, single_instance, 1, ScriptedPolicy([full]), config, judge=oracle)
    assert traj.turn_count == 1
    assert traj.feedback[0]["feedback"] == "all matched"


def test_no_feedback_without_hint(toy_env, single_instance, oracle):
    traj = run_episode(toy_env, single_instance, 1, ScriptedPolicy([ANSWER_NAVY]), judge=oracle)
    assert traj.turn_count == 1 and traj.feedback == []


def _stage2(instance, rec):
    answer = "" if rec is None else "@REC::" + ",".join(rec) + "@"
    return Trajectory(instance.instance_id, "2", instance.instruction, final_answer=answer, recommendation=rec, terminated_by="answer")


def test_success_single(single_instance, toy_catalog, oracle):
    gold = single_instance.gold
    assert success(_stage2(single_instance, ["P1"]), gold, toy_catalog, oracle) == 1
    # wrong count
    assert success(_stage2(single_instance, ["P1", "P4"]), gold, toy_catalog, oracle) == 0
    # right category, wrong features
    assert success(_stage2(single_instance, ["P4"]), gold, toy_catalog, oracle) == 0
    # wrong category
    assert success(_stage2(single_instance, ["P2"]), gold, toy_catalog, oracle) == 0
    assert success(_stage2(single_instance, ["PX"]), gold, toy_catalog, oracle) == 0
    assert success(_stage2(single_instance, None), gold, toy_catalog, oracle) == 0


class _FixedChecks:
    def __init__(self, needs, prefs):
        self.result = (needs, prefs)

    def success_checks(self, recommendation, instruction, gold):
        return self.result


@pytest.mark.parametrize("needs, prefs", [(True, True), (False, True), (True, False), (False, False)])
def test_needs_and_prefs_flip_independently(bundle_instance, toy_catalog, needs, prefs):
    traj = _stage2(bundle_instance, ["P1", "P2"])
    assert success(traj, bundle_instance.gold, toy_catalog, _FixedChecks(needs, prefs)) == int(needs and prefs)


def test_budget_flips_verdict(bundle_instance, toy_catalog, oracle):
    traj = _stage2(bundle_instance, ["P1", "P2"])
    assert success(traj, bundle_instance.gold, toy_catalog, oracle) == 1  # 85 - 10 = 75 <= 80
    tight = replace(bundle_instance.gold, budget=Decimal("74.99"))
    assert success(traj, tight, toy_catalog, oracle) == 0
    no_voucher = replace(bundle_instance.gold, voucher=None)
    assert success(traj, no_voucher, toy_catalog, oracle) == 0


def test_count_flips_bundle(bundle_instance, toy_catalog, oracle):
    gold = bundle_instance.gold
    assert success(_stage2(bundle_instance, ["P1"]), gold, toy_catalog, oracle) == 0
    assert success(_stage2(bundle_instance, ["P1", "P1"]), gold, toy_catalog, oracle) == 0


def test_success_rejects_stage1(single_instance, toy_catalog, oracle):
    traj = Trajectory("x", "1", "i", terminated_by="answer")
    with pytest.raises(ValueError):
        success(traj, single_instance.gold, toy_catalog, oracle)


@pytest.mark.parametrize("fixture", ["single_instance", "bundle_instance"])
def test_perfect_policy_two_stage(request, toy_env, toy_catalog, oracle, fixture):
    inst = request.getfixturevalue(fixture)
    first, second = run_two_stage(toy_env, inst, PerfectPolicy(inst, toy_catalog), EpisodeConfig(hint=HintLevel.HIGH), oracle)
    assert first.feedback[0]["feedback"] == {"missing": [], "wrong": []}
    assert second.preferences == first.final_answer
    for traj in (first, second):
        assert final_reward(traj, inst.gold, oracle).total == 3
    assert success(second, inst.gold, toy_catalog, oracle) == 1


def test_behavioral_metrics_recount(toy_env, single_instance):
    trajs = [
        run_episode(toy_env, single_instance, "one-stage", _mixed_policy()),
        run_episode(toy_env, single_instance, 1, ScriptedPolicy([ANSWER_NAVY])),
    ]
    m = behavioral_metrics(trajs)
    assert m.mean_turns == (5 + 1) / 2
    assert m.mean_tool_uses == (4 + 0) / 2
    outputs = [t["content"] for tr in trajs for t in tr.messages if t["role"] == "assistant"]
    assert m.mean_response_chars == sum(map(len, outputs)) / 2
    assert m.mean_response_tokens == sum(len(o.split()) for o in outputs) / 2
    with pytest.raises(ValueError):
        behavioral_metrics([])
