from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from ..errors import SchemaError
from ..memory import MemoryStore
from ..rewards import GoldAnnotation


@dataclass(frozen=True)
class BenchmarkInstance:
    instance_id: str
    task_type: int
    instruction: str
    history: MemoryStore
    gold: GoldAnnotation

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "task_type": self.task_type,
            "instruction": self.instruction,
            "history": self.history.to_json(),
            "gold": self.gold.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Any) -> "BenchmarkInstance":
        if not isinstance(data, dict):
            raise SchemaError("instance must be a JSON object")
        for key in ("instance_id", "task_type", "instruction", "history", "gold"):
            if key not in data:
                raise SchemaError("missing field", field=key)
        task_type = data["task_type"]
        if task_type not in (0, 1):
            raise SchemaError("task_type must be 0 or 1", field="task_type")
        if not isinstance(data["instruction"], str):
            raise SchemaError("expected a string", field="instruction")
        history = MemoryStore.from_json(data["history"])
        gold = GoldAnnotation.from_dict(data["gold"], task_type=task_type)
        for idx in gold.gold_session_indices:
            if history.get(idx) is None:
                raise SchemaError(f"gold session {idx} not in history", field="gold_session_indices")
        return cls(str(data["instance_id"]), task_type, data["instruction"], history, gold)


def load_instances(path: str | Path) -> list[BenchmarkInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                out.append(BenchmarkInstance.from_dict(json.loads(raw)))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from None
            except SchemaError as exc:
                raise SchemaError(str(exc), line=lineno) from None
    return out


def dump_instances(instances: Iterable[BenchmarkInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(inst.to_json() + "\n")
