"""Stage rewards, tool-wise rewards, format reward aggregation and the oracle judge.

All reward arithmetic is exact (``fractions.Fraction``); floats only appear
when a breakdown is serialized.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import TYPE_CHECKING, Any, Iterable, Protocol, Sequence

from .catalog import Catalog, Product, to_price
from .errors import InvalidSignalError, SchemaError
from .protocol import format_reward, trajectory_format_flags
from .tools import ToolInvocation

if TYPE_CHECKING:
    from .episode import Trajectory

SCOREABLE_TOOLS = ("mem_search", "mem_view", "product_search", "product_view")


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def feature_name(feature: str) -> str:
    return feature.split(":", 1)[0].strip()


@dataclass(frozen=True)
class Voucher:
    kind: str
    threshold: Decimal
    amount: Decimal
    cap: Decimal | None = None

    KINDS = ("flat_off_over_threshold", "percent_off_capped")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise SchemaError(f"unknown voucher kind {self.kind!r}", field="voucher.kind")
        if self.threshold < 0 or self.amount < 0 or (self.cap is not None and self.cap < 0):
            raise SchemaError("voucher amounts must be non-negative", field="voucher")
        if self.kind == "percent_off_capped" and self.amount > 100:
            raise SchemaError("voucher percent must be <= 100", field="voucher.amount")

    def discount(self, subtotal: Decimal) -> Decimal:
        if subtotal < self.threshold:
            return Decimal(0)
        if self.kind == "flat_off_over_threshold":
            return min(self.amount, subtotal)
        pct = self.amount * subtotal / 100
        return pct if self.cap is None else min(pct, self.cap)

    def describe(self) -> str:
        if self.kind == "flat_off_over_threshold":
            return f"${self.amount} off orders of ${self.threshold} or more"
        text = f"{self.amount}% off orders of ${self.threshold} or more"
        if self.cap is not None:
            text += f", up to ${self.cap} off"
        return text

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "threshold": float(self.threshold),
            "amount": float(self.amount),
            "cap": None if self.cap is None else float(self.cap),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Voucher":
        try:
            return cls(
                kind=data["kind"],
                threshold=to_price(data["threshold"]),
                amount=to_price(data["amount"]),
                cap=None if data.get("cap") is None else to_price(data["cap"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid voucher: {exc}", field="voucher") from None


def voucher_adjusted_total(prices: Iterable[Decimal], voucher: Voucher | None) -> Decimal:
    subtotal = sum(prices, Decimal(0))
    if voucher is None:
        return subtotal
    return subtotal - voucher.discount(subtotal)


@dataclass(frozen=True)
class GoldAnnotation:
    product_ids: tuple[str, ...]
    wanted_features: dict[str, list[str]]
    gold_session_indices: tuple[int, ...]
    bundle_size: int = 1
    task_type: int = 0
    does_not_matter_features: tuple[str, ...] = ()
    voucher: Voucher | None = None
    budget: Decimal | None = None

    def __post_init__(self) -> None:
        b, n = self.task_type, self.bundle_size
        if b not in (0, 1):
            raise SchemaError("task_type must be 0 or 1", field="task_type")
        if b == 0 and (n != 1 or self.voucher is not None or self.budget is not None):
            raise SchemaError("single-product tasks need bundle_size 1 and no voucher or budget", field="gold")
        if b == 1 and (n < 2 or self.budget is None):
            raise SchemaError("add-on tasks need bundle_size >= 2 and a budget", field="gold")
        if len(self.product_ids) != n:
            raise SchemaError(f"expected {n} gold products, got {len(self.product_ids)}", field="product_ids")
        if self.feature_count < 1:
            raise SchemaError("at least one wanted feature is required", field="wanted_features")

    @property
    def features(self) -> list[str]:
        """Unique wanted-feature strings (normalized), in annotation order."""
        seen: dict[str, None] = {}
        for pid in self.product_ids:
            for f in self.wanted_features.get(pid, []):
                seen.setdefault(normalize_text(f), None)
        return list(seen)

    @property
    def feature_count(self) -> int:
        return len(self.features)

    def to_dict(self) -> dict[str, Any]:
        return {
            "product_ids": list(self.product_ids),
            "wanted_features": {k: list(v) for k, v in self.wanted_features.items()},
            "does_not_matter_features": list(self.does_not_matter_features),
            "gold_session_indices": list(self.gold_session_indices),
            "bundle_size": self.bundle_size,
            "voucher": None if self.voucher is None else self.voucher.to_dict(),
            "budget": None if self.budget is None else float(self.budget),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], task_type: int) -> "GoldAnnotation":
        try:
            return cls(
                product_ids=tuple(data["product_ids"]),
                wanted_features={k: list(v) for k, v in data["wanted_features"].items()},
                gold_session_indices=tuple(int(i) for i in data["gold_session_indices"]),
                bundle_size=int(data.get("bundle_size", 1)),
                task_type=task_type,
                does_not_matter_features=tuple(data.get("does_not_matter_features", ())),
                voucher=None if data.get("voucher") is None else Voucher.from_dict(data["voucher"]),
                budget=None if data.get("budget") is None else to_price(data["budget"]),
            )
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"invalid gold annotation: {exc}", field="gold") from None


@dataclass(frozen=True)
class JudgeSignals:
    """Structured judge output. Stage-1 uses q1/m1/c1, stage-2 uses p2/q2/m2/n2/u2."""

    stage: int
    q: int = 0
    m: int = 0
    c: int | None = None
    p: int | None = None
    n: int | None = None
    u: int | None = None

    def validate(self, gold: GoldAnnotation) -> None:
        F, N, b = gold.feature_count, gold.bundle_size, gold.task_type

        def check(name: str, value: int | None, hi: int, required: bool) -> None:
            if value is None:
                if required:
                    raise InvalidSignalError(f"signal {name} is required")
                return
            if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= hi:
                raise InvalidSignalError(f"signal {name}={value!r} outside 0..{hi}")

        if self.stage == 1:
            check("q1", self.q, 1, True)
            check("m1", self.m, F, True)
            check("c1", self.c, N, b == 1)
        elif self.stage == 2:
            check("p2", self.p, 1, True)
            check("q2", self.q, 1, True)
            check("m2", self.m, F, True)
            check("n2", self.n, N, b == 1)
            check("u2", self.u, 1, b == 1)
        else:
            raise InvalidSignalError(f"stage must be 1 or 2, got {self.stage!r}")

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def stage1_value(q: int, m: int, c: int, F: int, N: int, b: int) -> Fraction:
    """(q1 + m1 + b·c1) / (1 + F + b·N) on raw counts."""
    return Fraction(q + m + b * c, 1 + F + b * N)


def stage2_value(p: int, q: int, m: int, n: int, u: int, F: int, N: int, b: int) -> Fraction:
    """(p2 + q2 + m2 + b·(n2 + u2)) / (2 + F + b·(N + 1)) on raw counts."""
    return Fraction(p + q + m + b * (n + u), 2 + F + b * (N + 1))


def stage1_reward(signals: JudgeSignals, gold: GoldAnnotation) -> Fraction:
    if signals.stage != 1:
        raise InvalidSignalError("stage-1 reward needs stage-1 signals")
    signals.validate(gold)
    return stage1_value(signals.q, signals.m, signals.c or 0, gold.feature_count, gold.bundle_size, gold.task_type)


def stage2_reward(signals: JudgeSignals, gold: GoldAnnotation) -> Fraction:
    if signals.stage != 2:
        raise InvalidSignalError("stage-2 reward needs stage-2 signals")
    signals.validate(gold)
    return stage2_value(
        signals.p, signals.q, signals.m, signals.n or 0, signals.u or 0,
        gold.feature_count, gold.bundle_size, gold.task_type,
    )


def stage_reward(signals: JudgeSignals, gold: GoldAnnotation) -> Fraction:
    if signals.stage == 1:
        return stage1_reward(signals, gold)
    if signals.stage == 2:
        return stage2_reward(signals, gold)
    raise InvalidSignalError(f"stage must be 1 or 2, got {signals.stage!r}")


class Judge(Protocol):
    def stage_signals(
        self, stage: int, answer: str | None, recommendation: list[str] | None, instruction: str, gold: GoldAnnotation
    ) -> JudgeSignals: ...

    def success_checks(
        self, recommendation: list[str], instruction: str, gold: GoldAnnotation
    ) -> tuple[bool, bool]: ...

    def feedback(self, answer: str, instruction: str, gold: GoldAnnotation, level: str) -> str | dict[str, list[str]]: ...


def dual_reward(trajectory: "Trajectory", gold: GoldAnnotation, judge: Judge) -> Fraction:
    stage = trajectory.stage
    if stage not in (1, 2):
        raise ValueError(f"trajectory stage must be 1 or 2, got {stage!r}")
    signals = judge.stage_signals(
        stage, trajectory.final_answer, trajectory.recommendation, trajectory.instruction, gold
    )
    if signals.stage != stage:
        raise InvalidSignalError(f"judge returned stage-{signals.stage} signals for a stage-{stage} trajectory")
    return stage_reward(signals, gold)


def _session_of(hit: Any) -> Any:
    if isinstance(hit, dict):
        return hit.get("session_index")
    if isinstance(hit, (list, tuple)) and hit:
        return hit[0]
    return hit


def _product_of(item: Any) -> Any:
    if isinstance(item, (list, tuple)) and item:
        return item[0]
    if isinstance(item, dict):
        return item.get("product_id")
    return item


def _fraction_in(items: Sequence[Any], gold: set) -> Fraction:
    if not items:
        return Fraction(0)
    return Fraction(sum(1 for i in items if i in gold), len(items))


def score_tool_call(call: ToolInvocation, gold: GoldAnnotation, strict: bool = False) -> Fraction | None:
    """Per-call score in [0, 1]; None for tools without a defined reward (0 in strict mode).

    mem_search averages the per-query fraction of hits whose session is gold;
    mem_view, product_search and product_view score the fraction of ids that
    are gold. Failed calls and empty results score 0.
    """
    if call.name not in SCOREABLE_TOOLS:
        return Fraction(0) if strict else None
    results = call.results
    if call.error or not results:
        return Fraction(0)
    gold_sessions = set(gold.gold_session_indices)
    gold_products = set(gold.product_ids)
    if call.name == "mem_search":
        per_query = [_fraction_in([_session_of(h) for h in row or []], gold_sessions) for row in results]
        return sum(per_query, Fraction(0)) / len(per_query)
    if call.name == "mem_view":
        return _fraction_in(list(results), gold_sessions)
    return _fraction_in([_product_of(p) for p in results], gold_products)


def tool_wise_reward(
    invocations: Iterable[ToolInvocation], gold: GoldAnnotation, strict: bool = False
) -> tuple[Fraction, list[tuple[int, str, Fraction | None]]]:
    """Mean of defined per-call scores, 0 when there is none; also returns the per-call scores."""
    scored = [(i, inv.name, score_tool_call(inv, gold, strict)) for i, inv in enumerate(invocations)]
    defined = [s for _, _, s in scored if s is not None]
    if not defined:
        return Fraction(0), scored
    return sum(defined, Fraction(0)) / len(defined), scored


@dataclass
class RewardBreakdown:
    r_stage: Fraction | None
    r_tool: Fraction
    r_fmt: Fraction
    tool_scores: list[tuple[int, str, Fraction | None]] = field(default_factory=list)
    error: str | None = None

    @property
    def total(self) -> Fraction | None:
        if self.r_stage is None:
            return None
        return self.r_stage + self.r_tool + self.r_fmt

    def to_dict(self) -> dict[str, Any]:
        def num(x: Fraction | None) -> float | None:
            return None if x is None else float(x)

        out = {
            "r_stage": num(self.r_stage),
            "r_tool": num(self.r_tool),
            "r_fmt": num(self.r_fmt),
            "total": num(self.total),
            "tool_scores": [
                {"index": i, "tool": name, "score": num(s)} for i, name, s in self.tool_scores
            ],
        }
        if self.error:
            out["error"] = self.error
        return out


def final_reward(
    trajectory: "Trajectory", gold: GoldAnnotation, judge: Judge, strict_tools: bool = False
) -> RewardBreakdown:
    """R = R_stage + R_tool + R_fmt with unit weights."""
    from .errors import BackendError

    r_tool, scores = tool_wise_reward(trajectory.invocations, gold, strict=strict_tools)
    flags = trajectory_format_flags(trajectory.parses)
    r_fmt = format_reward(flags, trajectory.stage)
    try:
        r_stage: Fraction | None = dual_reward(trajectory, gold, judge)
        error = None
    except (BackendError, InvalidSignalError) as exc:
        r_stage, error = None, f"stage reward unavailable: {exc}"
    return RewardBreakdown(r_stage=r_stage, r_tool=r_tool, r_fmt=r_fmt, tool_scores=scores, error=error)


_CLAIM_VALUE = r"\s*:\s*([^\n;,]+)"


class OracleJudge:
    """Deterministic containment judge standing in for an LLM judge.

    Feature strings are compared after lowercasing and whitespace
    normalization. Stage-1 signals read the answer text; stage-2 signals read
    the recommended products' features as stored in the catalog.
    """

    name = "oracle"

    def __init__(self, catalog: Catalog):
        self.catalog = catalog
        self._feature_names = sorted({normalize_text(n) for n in catalog.feature_names()}, key=len, reverse=True)

    def _gold_categories(self, gold: GoldAnnotation) -> list[str]:
        cats = []
        for pid in gold.product_ids:
            product = self.catalog.get(pid)
            cats.append(normalize_text(product.category) if product else f"\0missing:{pid}")
        return cats

    def _recommended(self, recommendation: Sequence[str]) -> list[Product]:
        return [self.catalog[pid] for pid in dict.fromkeys(recommendation) if pid in self.catalog]

    def _slots_covered(self, gold: GoldAnnotation, products: Sequence[Product]) -> int:
        remaining = [normalize_text(p.category) for p in products]
        covered = 0
        for cat in self._gold_categories(gold):
            if cat in remaining:
                remaining.remove(cat)
                covered += 1
        return covered

    def _features_matched(self, gold: GoldAnnotation, products: Sequence[Product]) -> int:
        offered = {normalize_text(f) for p in products for f in p.feature_strings()}
        return sum(1 for f in gold.features if f in offered)

    def stage_signals(
        self, stage: int, answer: str | None, recommendation: list[str] | None, instruction: str, gold: GoldAnnotation
    ) -> JudgeSignals:
        b, N = gold.task_type, gold.bundle_size
        if stage == 1:
            if answer is None:
                return JudgeSignals(1, q=0, m=0, c=0 if b else None)
            text = normalize_text(answer)
            cats = self._gold_categories(gold)
            return JudgeSignals(
                1,
                q=int(all(c in text for c in cats)),
                m=sum(1 for f in gold.features if f in text),
                c=min(N, sum(1 for c in cats if c in text)) if b else None,
            )
        if stage != 2:
            raise InvalidSignalError(f"stage must be 1 or 2, got {stage!r}")
        if not recommendation:
            return JudgeSignals(2, p=0, q=0, m=0, n=0 if b else None, u=0 if b else None)
        products = self._recommended(recommendation)
        valid = all(pid in self.catalog for pid in recommendation)
        covered = self._slots_covered(gold, products)
        signals = JudgeSignals(
            2,
            p=int(valid),
            q=int(covered == len(gold.product_ids)),
            m=self._features_matched(gold, products),
        )
        if b:
            within = valid and voucher_adjusted_total((p.price for p in products), gold.voucher) <= gold.budget
            signals = JudgeSignals(2, p=signals.p, q=signals.q, m=signals.m, n=min(N, covered), u=int(within))
        return signals

    def success_checks(
        self, recommendation: list[str], instruction: str, gold: GoldAnnotation
    ) -> tuple[bool, bool]:
        products = self._recommended(recommendation)
        needs = self._slots_covered(gold, products) == len(gold.product_ids)
        prefs = self._features_matched(gold, products) == gold.feature_count
        return needs, prefs

    def claimed_features(self, answer: str) -> list[str]:
        """``name: value`` claims in the answer whose name is a catalog feature name."""
        text = answer.lower()
        claims = []
        taken: list[tuple[int, int]] = []
        for name in self._feature_names:
            for m in re.finditer(r"(?<![\w-])" + re.escape(name) + _CLAIM_VALUE, text):
                if any(s <= m.start() < e for s, e in taken):
                    continue
                taken.append((m.start(), m.end()))
                value = m.group(1).strip().rstrip(".").strip()
                claims.append((m.start(), normalize_text(f"{name}: {value}")))
        return [c for _, c in sorted(claims)]

    def feedback(self, answer: str, instruction: str, gold: GoldAnnotation, level: str) -> str | dict[str, list[str]]:
        text = normalize_text(answer or "")
        gold_set = set(gold.features)
        missing = list(dict.fromkeys(feature_name(f) for f in gold.features if f not in text))
        wrong = list(dict.fromkeys(feature_name(c) for c in self.claimed_features(answer or "") if c not in gold_set))
        if level == "high":
            return {"missing": missing, "wrong": wrong}
        if level != "low":
            raise ValueError(f"feedback level must be 'low' or 'high', got {level!r}")
        labels = [label for label, hit in (("missing", missing), ("wrong", wrong)) if hit]
        return ", ".join(labels) if labels else "all matched"
