from __future__ import annotations

from fractions import Fraction
from typing import Mapping, Sequence

from ..catalog import Catalog
from ..episode import Trajectory, success
from ..rewards import Judge
from ..synth.instance import BenchmarkInstance


def _match(trajectories: Sequence[Trajectory], instances: Mapping[str, BenchmarkInstance], stage: int):
    if not trajectories:
        raise ValueError("no trajectories to score")
    for traj in trajectories:
        if traj.instance_id not in instances:
            raise ValueError(f"trajectory for unknown instance {traj.instance_id!r}")
        if traj.stage != stage:
            raise ValueError(f"expected stage-{stage} trajectories, got stage {traj.stage} for {traj.instance_id!r}")
        yield traj, instances[traj.instance_id]


def _percent(value: Fraction) -> float:
    return round(float(value * 100), 1)


def accuracy_metric(
    trajectories: Sequence[Trajectory], instances: Mapping[str, BenchmarkInstance], judge: Judge
) -> float:
    """Mean fraction of wanted features the stage-1 answer recovers, as a percentage."""
    total = Fraction(0)
    pairs = list(_match(trajectories, instances, 1))
    for traj, inst in pairs:
        signals = judge.stage_signals(1, traj.final_answer, None, inst.instruction, inst.gold)
        signals.validate(inst.gold)
        total += Fraction(signals.m, inst.gold.feature_count)
    return _percent(total / len(pairs))


def success_metric(
    trajectories: Sequence[Trajectory],
    instances: Mapping[str, BenchmarkInstance],
    catalog: Catalog,
    judge: Judge,
) -> float:
    pairs = list(_match(trajectories, instances, 2))
    passed = sum(success(traj, inst.gold, catalog, judge) for traj, inst in pairs)
    return _percent(Fraction(passed, len(pairs)))
