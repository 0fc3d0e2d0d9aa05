"""Benchmark synthesis: sample products, write the instruction, write preference
dialogues, bury them among distractor sessions, then verify the result."""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_FLOOR, Decimal
from pathlib import Path
from typing import Any, Sequence

from ..catalog import Catalog, Product, ProductIndex, build_product_index, product_search
from ..errors import CompanionError
from ..memory import Embedder, HashingEmbedder, MemoryStore, Session, Turn, build_memory_index, mem_search
from ..rewards import GoldAnnotation, Voucher, normalize_text, voucher_adjusted_total
from .backends import GenerationBackend, MockBackend, join_names
from .instance import BenchmarkInstance, dump_instances

log = logging.getLogger(__name__)

MAX_RETRIES = 5
SINGLE_FEATURE_RANGE = (2, 6)
BUNDLE_FEATURE_RANGE = (2, 4)
DEFAULT_TURN_RANGE = (15, 50)
START_DATE = dt.date(2024, 1, 1)


class GenerationError(CompanionError):
    """A generation step exhausted its retries; ``reason`` names the failed check."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


# Step 1: products


@dataclass(frozen=True)
class ProductSample:
    products: tuple[Product, ...]
    voucher: Voucher | None = None
    budget: Decimal | None = None


def _whole_dollars(value: Decimal) -> Decimal:
    return value.quantize(Decimal(1), rounding=ROUND_FLOOR)


def sample_products(catalog: Catalog, task_type: int, seed: int) -> ProductSample:
    """One product (single) or 2 to 3 products from distinct categories (bundle).

    Bundles also get a voucher whose threshold sits at 60 to 90 percent of the
    bundle subtotal and a whole-dollar budget at or above the discounted total.
    """
    rng = random.Random(seed)
    by_cat: dict[str, list[Product]] = {}
    for p in catalog:
        if len(p.features) >= SINGLE_FEATURE_RANGE[0]:
            by_cat.setdefault(p.category, []).append(p)
    categories = sorted(by_cat)
    if task_type == 0:
        if not categories:
            raise GenerationError("catalog", "no product has enough features")
        cat = rng.choice(categories)
        return ProductSample((rng.choice(by_cat[cat]),))
    n = rng.choice((2, 3))
    if len(categories) < n:
        raise GenerationError("catalog", f"need {n} categories, catalog has {len(categories)}")
    chosen = tuple(rng.choice(by_cat[c]) for c in rng.sample(categories, n))
    subtotal = sum((p.price for p in chosen), Decimal(0))
    threshold = _whole_dollars(subtotal * Decimal(rng.randint(60, 90)) / 100)
    if rng.random() < 0.5:
        voucher = Voucher("flat_off_over_threshold", threshold, Decimal(rng.choice((5, 10, 15, 20, 25))))
    else:
        voucher = Voucher("percent_off_capped", threshold, Decimal(rng.choice((5, 10, 15, 20))), Decimal(rng.choice((10, 20, 30))))
    total = voucher_adjusted_total((p.price for p in chosen), voucher)
    slack = Decimal(rng.randint(0, 20)) / 100
    budget = Decimal(math.ceil(total * (1 + slack)))
    return ProductSample(chosen, voucher, budget)


# Step 2: instruction


def _mentions(text: str, phrase: str) -> bool:
    return normalize_text(phrase) in normalize_text(text)


def check_instruction(text: str, sample: ProductSample, task_type: int) -> list[str]:
    """Problems with a candidate instruction; empty means it passes."""
    problems = []
    if not text.strip():
        return ["empty"]
    for p in sample.products:
        if not _mentions(text, p.category):
            problems.append(f"category {p.category!r} not named")
        for value in p.features.values():
            if _mentions(text, value):
                problems.append(f"leaks feature value {value!r}")
        if _mentions(text, p.name):
            problems.append("copies a product title")
    if task_type == 1:
        if not _mentions(text, sample.voucher.describe()):
            problems.append("voucher missing")
        if f"${sample.budget}" not in text:
            problems.append("budget missing")
    elif _mentions(text, "voucher") or _mentions(text, "budget"):
        problems.append("single-product request mentions voucher or budget")
    return problems


def generate_instruction(sample: ProductSample, task_type: int, backend: GenerationBackend) -> str:
    last: list[str] = []
    for attempt in range(MAX_RETRIES):
        if task_type == 0:
            p = sample.products[0]
            slots: dict[str, Any] = {"category": p.category, "product_name": p.name}
            text = backend.generate("instruction_single", slots, attempt).strip()
        else:
            slots = {
                "categories": [p.category for p in sample.products],
                "product_names": [p.name for p in sample.products],
                "voucher": sample.voucher.describe(),
                "budget": str(sample.budget),
            }
            text = backend.generate("instruction_bundle", slots, attempt).strip()
        last = check_instruction(text, sample, task_type)
        if not last:
            return text
    raise GenerationError("instruction", "; ".join(last))


# Step 3: preference dialogues


@dataclass(frozen=True)
class PreferenceDialogue:
    product_id: str
    wanted: tuple[str, ...]
    does_not_matter: tuple[str, ...]
    turns: tuple[Turn, ...]


def _strip_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        text = text.split("\n", 1)[1] if "\n" in text else ""
        text = text.rsplit("```", 1)[0]
    return text


def check_dialogue(raw: str, product: Product, n_features: int) -> tuple[PreferenceDialogue | None, list[str]]:
    try:
        data = json.loads(_strip_fences(raw))
    except ValueError:
        return None, ["not JSON"]
    if not isinstance(data, dict):
        return None, ["not a JSON object"]
    wanted, dnm, dialogue = data.get("wanted_features"), data.get("does_not_matter_features"), data.get("dialogue")
    if not isinstance(wanted, list) or not isinstance(dnm, list) or not isinstance(dialogue, list):
        return None, ["schema"]
    problems = []
    offered = {normalize_text(f) for f in product.feature_strings()}
    if len({normalize_text(str(f)) for f in wanted}) != n_features:
        problems.append(f"expected {n_features} wanted features, got {len(wanted)}")
    for f in wanted + dnm:
        if not isinstance(f, str) or normalize_text(f) not in offered:
            problems.append(f"feature {f!r} is not on the product")
    turns = []
    for i, t in enumerate(dialogue):
        if not isinstance(t, dict) or t.get("role") not in ("user", "assistant") or not isinstance(t.get("content"), str):
            return None, problems + ["schema"]
        if not t["content"].strip():
            problems.append(f"turn {i} empty")
        if t["role"] != ("user" if i % 2 == 0 else "assistant"):
            problems.append("roles must alternate starting with the user")
            break
        turns.append(Turn(t["role"], t["content"]))
    if not turns:
        problems.append("empty dialogue")
    text = normalize_text(" ".join(t.content for t in turns))
    for f in wanted:
        if isinstance(f, str) and normalize_text(f) not in text:
            problems.append(f"wanted feature {f!r} never stated")
    if problems:
        return None, problems
    return PreferenceDialogue(product.product_id, tuple(wanted), tuple(dnm), tuple(turns)), []


def generate_preference_dialogue(product: Product, n_features: int, backend: GenerationBackend) -> PreferenceDialogue:
    if not 1 <= n_features <= len(product.features):
        raise GenerationError("dialogue", f"{product.product_id} has {len(product.features)} features, asked for {n_features}")
    slots = {"product": product.to_dict(), "n_features": n_features}
    last: list[str] = []
    for attempt in range(MAX_RETRIES):
        dialogue, last = check_dialogue(backend.generate("dialogue", slots, attempt), product, n_features)
        if dialogue is not None:
            return dialogue
    raise GenerationError("dialogue", "; ".join(last))


# Step 4: haystack


def interleave_haystack(
    preference_sessions: Sequence[Sequence[Turn]],
    distractor_pool: Sequence[Sequence[Turn]],
    target_turns: tuple[int, int] = DEFAULT_TURN_RANGE,
    seed: int = 0,
    start_date: dt.date = START_DATE,
) -> tuple[MemoryStore, list[int]]:
    """Mix gold sessions into shuffled distractors; gold slots are uniform over all positions.

    Returns the history and the (sorted) indices of the gold sessions.
    """
    lo, hi = target_turns
    if not 1 <= lo <= hi:
        raise ValueError(f"bad turn range {target_turns}")
    rng = random.Random(seed)
    gold_turns = sum(len(s) for s in preference_sessions)
    if gold_turns > hi:
        raise GenerationError("haystack", f"preference sessions alone have {gold_turns} turns, limit {hi}")
    target = rng.randint(max(lo, gold_turns), hi)
    order = list(range(len(distractor_pool)))
    rng.shuffle(order)
    # Fill until the drawn target is reached; overshoot is allowed up to the upper bound.
    chosen, total = [], gold_turns
    for i in order:
        if chosen and total >= target:
            break
        size = len(distractor_pool[i])
        if size and total + size <= hi:
            chosen.append(i)
            total += size
    if not chosen or total < lo:
        raise GenerationError("haystack", f"distractor pool cannot reach {lo} turns")
    n_sessions = len(chosen) + len(preference_sessions)
    gold_slots = sorted(rng.sample(range(n_sessions), len(preference_sessions)))
    gold_iter, distract_iter = iter(preference_sessions), iter(chosen)
    sessions, date = [], start_date + dt.timedelta(days=rng.randint(0, 60))
    for idx in range(n_sessions):
        turns = next(gold_iter) if idx in gold_slots else distractor_pool[next(distract_iter)]
        sessions.append(Session(idx, date, tuple(Turn(t.role, t.content) for t in turns)))
        date += dt.timedelta(days=rng.randint(0, 6))
    return MemoryStore(sessions), gold_slots


# Step 5: verification


@dataclass
class Verdict:
    accepted: bool
    failures: list[str] = field(default_factory=list)


def verify_instance(
    instance: BenchmarkInstance,
    catalog: Catalog,
    product_index: ProductIndex | None = None,
    embedder: Embedder | None = None,
    mem_k: int = 5,
    search_k: int = 50,
) -> Verdict:
    """Automated solvability checks: gold memory and products are reachable, the bundle fits the budget,
    and the instruction does not give away any wanted feature."""
    gold, failures = instance.gold, []
    products = [catalog.get(pid) for pid in gold.product_ids]
    if any(p is None for p in products):
        return Verdict(False, ["gold product missing from catalog"])

    index = build_memory_index(instance.history, embedder or HashingEmbedder())
    queries = list(dict.fromkeys(p.category for p in products))
    hits = mem_search(instance.history, index, queries, k=mem_k)
    reached = {h.session_index for row in hits for h in row}
    if not set(gold.gold_session_indices) <= reached:
        failures.append("gold session not retrievable")

    product_index = product_index or build_product_index(catalog)
    ranked = {pid for pid, _ in product_search(product_index, instance.instruction, k=search_k)}
    if not set(gold.product_ids) <= ranked:
        failures.append("gold product not retrievable")

    if gold.task_type == 1:
        total = voucher_adjusted_total((p.price for p in products), gold.voucher)
        if gold.budget is None or total > gold.budget:
            failures.append("gold bundle over budget")

    text = normalize_text(instance.instruction)
    for f in gold.features:
        value = f.split(":", 1)[1].strip() if ":" in f else f
        if value and value in text:
            failures.append(f"instruction leaks {f!r}")
    return Verdict(not failures, failures)


# Orchestration


@dataclass
class SynthConfig:
    n_single: int = 10
    n_addon: int = 10
    split: float = 0.8
    seed: int = 0
    turn_range: tuple[int, int] = DEFAULT_TURN_RANGE
    max_attempts_per_instance: int = 5


def generate_instance(
    instance_id: str,
    task_type: int,
    seed: int,
    catalog: Catalog,
    pool: Sequence[Sequence[Turn]],
    backend: GenerationBackend,
    turn_range: tuple[int, int] = DEFAULT_TURN_RANGE,
) -> BenchmarkInstance:
    rng = random.Random(seed)
    sample = sample_products(catalog, task_type, rng.randrange(2**32))
    instruction = generate_instruction(sample, task_type, backend)
    lo, hi = BUNDLE_FEATURE_RANGE if task_type else SINGLE_FEATURE_RANGE
    dialogues = [
        generate_preference_dialogue(p, min(rng.randint(lo, hi), len(p.features)), backend) for p in sample.products
    ]
    history, gold_slots = interleave_haystack(
        [d.turns for d in dialogues], pool, turn_range, seed=rng.randrange(2**32)
    )
    gold = GoldAnnotation(
        product_ids=tuple(p.product_id for p in sample.products),
        wanted_features={d.product_id: list(d.wanted) for d in dialogues},
        gold_session_indices=tuple(gold_slots),
        bundle_size=len(sample.products),
        task_type=task_type,
        does_not_matter_features=tuple(f for d in dialogues for f in d.does_not_matter),
        voucher=sample.voucher,
        budget=sample.budget,
    )
    return BenchmarkInstance(instance_id, task_type, instruction, history, gold)


@dataclass
class DatasetResult:
    train: list[BenchmarkInstance]
    test: list[BenchmarkInstance]
    discarded: list[dict[str, Any]]
    stats: dict[str, Any]


def _distribution(values: list[int]) -> dict[str, Any]:
    if not values:
        return {"count": 0}
    return {
        "count": len(values),
        "min": min(values),
        "max": max(values),
        "mean": round(sum(values) / len(values), 3),
        "histogram": {str(k): v for k, v in sorted(Counter(values).items())},
    }


def dataset_stats(instances: Sequence[BenchmarkInstance], discarded: Sequence[dict[str, Any]]) -> dict[str, Any]:
    return {
        "instances": len(instances),
        "by_task_type": {str(k): v for k, v in sorted(Counter(i.task_type for i in instances).items())},
        "history_turns": _distribution([i.history.turn_count() for i in instances]),
        "history_sessions": _distribution([len(i.history) for i in instances]),
        "wanted_features": _distribution([i.gold.feature_count for i in instances]),
        "bundle_size": _distribution([i.gold.bundle_size for i in instances]),
        "discarded": len(discarded),
        "discard_reasons": dict(sorted(Counter(d["reason"] for d in discarded).items())),
    }


def generate_dataset(
    config: SynthConfig,
    catalog: Catalog,
    pool: Sequence[Sequence[Turn]],
    backend: GenerationBackend | None = None,
    embedder: Embedder | None = None,
) -> DatasetResult:
    """Generate, verify and split. Identical inputs give identical output."""
    backend = backend or MockBackend(config.seed)
    product_index = build_product_index(catalog)
    accepted: list[BenchmarkInstance] = []
    discarded: list[dict[str, Any]] = []
    for task_type, count in ((0, config.n_single), (1, config.n_addon)):
        prefix = "single" if task_type == 0 else "addon"
        made, draw = 0, 0
        budget = count * config.max_attempts_per_instance
        while made < count:
            if draw >= budget:
                raise GenerationError("dataset", f"only {made}/{count} {prefix} instances after {draw} draws")
            seed = config.seed * 1_000_003 + task_type * 100_003 + draw
            draw += 1
            instance_id = f"{prefix}-{made:04d}"
            try:
                inst = generate_instance(instance_id, task_type, seed, catalog, pool, backend, config.turn_range)
            except GenerationError as exc:
                discarded.append({"seed": seed, "task_type": task_type, "reason": exc.reason, "detail": str(exc)})
                continue
            verdict = verify_instance(inst, catalog, product_index, embedder)
            if not verdict.accepted:
                discarded.append(
                    {"seed": seed, "task_type": task_type, "reason": "verification", "detail": "; ".join(verdict.failures)}
                )
                continue
            accepted.append(inst)
            made += 1
    order = list(range(len(accepted)))
    random.Random(config.seed).shuffle(order)
    n_train = round(config.split * len(accepted))
    train = [accepted[i] for i in order[:n_train]]
    test = [accepted[i] for i in order[n_train:]]
    stats = dataset_stats(accepted, discarded)
    stats["train"], stats["test"] = len(train), len(test)
    return DatasetResult(train, test, discarded, stats)


def write_dataset(result: DatasetResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.jsonl" for name in ("train", "test")}
    dump_instances(result.train, paths["train"])
    dump_instances(result.test, paths["test"])
    paths["stats"] = out / "stats.json"
    paths["stats"].write_text(json.dumps(result.stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["discarded"] = out / "discarded.jsonl"
    with open(paths["discarded"], "w", encoding="utf-8") as fh:
        for record in result.discarded:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return paths


__all__ = [
    "GenerationError",
    "ProductSample",
    "PreferenceDialogue",
    "SynthConfig",
    "DatasetResult",
    "Verdict",
    "check_instruction",
    "check_dialogue",
    "dataset_stats",
    "generate_dataset",
    "generate_instance",
    "generate_instruction",
    "generate_preference_dialogue",
    "interleave_haystack",
    "join_names",
    "sample_products",
    "verify_instance",
    "write_dataset",
]
