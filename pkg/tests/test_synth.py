from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import replace
from decimal import Decimal

import pytest

from companion_gym.catalog import Catalog
from companion_gym.memory import Turn
from companion_gym.rewards import voucher_adjusted_total
from companion_gym.synth.backends import MockBackend, join_names
from companion_gym.synth.instance import BenchmarkInstance, load_instances
from companion_gym.synth.pipeline import (
    GenerationError,
    ProductSample,
    SynthConfig,
    check_dialogue,
    check_instruction,
    generate_dataset,
    generate_instruction,
    generate_preference_dialogue,
    interleave_haystack,
    sample_products,
    verify_instance,
    write_dataset,
)
from companion_gym.synth.toydata import CATEGORIES, load_distractor_pool, make_catalog


def chi2_sf_even_df(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution for even degrees of freedom (closed form)."""
    half = x / 2
    return math.exp(-half) * sum(half**i / math.factorial(i) for i in range(df // 2))


def test_chi2_closed_form_known_values():
    assert chi2_sf_even_df(13.2767, 4) == pytest.approx(0.01, rel=1e-3)
    assert chi2_sf_even_df(5.9915, 2) == pytest.approx(0.05, rel=1e-3)


def test_toy_catalog_shape(synth_catalog):
    assert len(synth_catalog) == 300
    assert {p.category for p in synth_catalog} == set(CATEGORIES)
    assert [p.to_dict() for p in make_catalog(300, seed=0)] == [p.to_dict() for p in synth_catalog]


def test_distractors_never_name_a_category():
    for session in load_distractor_pool():
        text = " ".join(t.content.lower() for t in session)
        assert not [c for c in CATEGORIES if c in text]


def test_join_names():
    assert join_names(["a"]) == "a"
    assert join_names(["a", "b"]) == "a and b"
    assert join_names(["a", "b", "c"]) == "a, b, and c"


@pytest.mark.parametrize("seed", range(20))
def test_bundle_sampling(synth_catalog, seed):
    sample = sample_products(synth_catalog, 1, seed)
    assert 2 <= len(sample.products) <= 3
    assert len({p.category for p in sample.products}) == len(sample.products)
    total = voucher_adjusted_total((p.price for p in sample.products), sample.voucher)
    assert total <= sample.budget
    assert sample_products(synth_catalog, 1, seed) == sample


def test_single_sampling_has_no_voucher(synth_catalog):
    sample = sample_products(synth_catalog, 0, 4)
    assert len(sample.products) == 1 and sample.voucher is None and sample.budget is None


def test_sampling_needs_categories():
    catalog = Catalog([p for p in make_catalog(30) if p.category == "mouse"])
    with pytest.raises(GenerationError):
        sample_products(catalog, 1, 0)


def test_instruction_checks(synth_catalog):
    sample = sample_products(synth_catalog, 1, 7)
    cats = [p.category for p in sample.products]
    good = f"Product bundle includes: {join_names(cats)}. Voucher: {sample.voucher.describe()}. Budget: ${sample.budget}."
    assert check_instruction(good, sample, 1) == []
    assert "budget missing" in check_instruction(good.replace(f"${sample.budget}", "a fair amount"), sample, 1)
    leaked = good + " " + next(iter(sample.products[0].features.values()))
    assert any("leaks" in p for p in check_instruction(leaked, sample, 1))
    assert check_instruction("", sample, 1) == ["empty"]


class _FlakyBackend:
    """Drops the budget on the first attempt."""

    def __init__(self):
        self.inner = MockBackend(0)
        self.attempts = []

    def generate(self, template_id, slots, attempt=0):
        self.attempts.append(attempt)
        text = self.inner.generate(template_id, slots, attempt)
        return text.split(" Budget:")[0] if attempt == 0 else text


def test_instruction_retry_after_failed_check(synth_catalog):
    sample = sample_products(synth_catalog, 1, 3)
    backend = _FlakyBackend()
    text = generate_instruction(sample, 1, backend)
    assert backend.attempts == [0, 1]
    assert check_instruction(text, sample, 1) == []


class _BadBackend:
    def generate(self, template_id, slots, attempt=0):
        return "nothing useful"


def test_instruction_gives_up(synth_catalog):
    with pytest.raises(GenerationError) as info:
        generate_instruction(sample_products(synth_catalog, 0, 1), 0, _BadBackend())
    assert info.value.reason == "instruction"


def test_mock_dialogue_passes_checks(synth_catalog):
    product = synth_catalog["P00000"]
    dialogue = generate_preference_dialogue(product, 3, MockBackend(0))
    assert len(dialogue.wanted) == 3
    text = " ".join(t.content for t in dialogue.turns).lower()
    assert all(f.lower() in text for f in dialogue.wanted)
    assert dialogue.turns[0].role == "user"


def test_dialogue_checks_reject(synth_catalog):
    product = synth_catalog["P00000"]
    feature = product.feature_strings()[0]
    turns = [{"role": "user", "content": f"I want {feature}"}]
    ok = {"wanted_features": [feature], "does_not_matter_features": [], "dialogue": turns}
    assert check_dialogue(json.dumps(ok), product, 1)[0] is not None
    assert check_dialogue("```json\n" + json.dumps(ok) + "\n```", product, 1)[0] is not None
    assert check_dialogue("nope", product, 1)[1] == ["not JSON"]
    assert check_dialogue(json.dumps({**ok, "wanted_features": ["size: enormous"]}), product, 1)[0] is None
    silent = {**ok, "dialogue": [{"role": "user", "content": "hello"}]}
    assert any("never stated" in p for p in check_dialogue(json.dumps(silent), product, 1)[1])
    swapped = {**ok, "dialogue": [{"role": "assistant", "content": feature}]}
    assert check_dialogue(json.dumps(swapped), product, 1)[0] is None


def _fixed_pool(n=10, size=3):
    return [[Turn("user", f"d{i} q"), Turn("assistant", "a"), Turn("user", "b")][:size] for i in range(n)]


def test_one_gold_four_distractors():
    gold = [Turn("user", "g"), Turn("assistant", "g"), Turn("user", "g")]
    store, slots = interleave_haystack([gold], _fixed_pool(), (15, 15), seed=0)
    assert len(store) == 5 and store.turn_count() == 15
    assert len(slots) == 1 and store.sessions[slots[0]].turns == tuple(gold)


def test_dates_never_go_backwards():
    store, _ = interleave_haystack([[Turn("user", "g")]], load_distractor_pool(), seed=8)
    dates = [s.date for s in store.sessions]
    assert dates == sorted(dates)


@pytest.mark.parametrize("seed", range(100))
def test_haystack_turns_in_range(seed):
    store, slots = interleave_haystack([[Turn("user", "g")] * 4], load_distractor_pool(), seed=seed)
    assert 15 <= store.turn_count() <= 50
    assert len(store) > 1


def test_haystack_rejects_oversized_gold():
    with pytest.raises(GenerationError):
        interleave_haystack([[Turn("user", "g")] * 60], load_distractor_pool())


def test_gold_position_uniformity_chi_square():
    gold = [Turn("user", "g"), Turn("assistant", "g"), Turn("user", "g")]
    counts = Counter(interleave_haystack([gold], _fixed_pool(), (15, 15), seed=s)[1][0] for s in range(1000))
    expected = 1000 / 5
    chi2 = sum((counts.get(k, 0) - expected) ** 2 / expected for k in range(5))
    assert chi2_sf_even_df(chi2, 4) > 0.01


def test_dataset_split_and_verification(synth_dataset, synth_catalog):
    assert len(synth_dataset.train) + len(synth_dataset.test) == 12
    assert len(synth_dataset.train) == round(0.8 * 12)
    for inst in synth_dataset.train + synth_dataset.test:
        assert verify_instance(inst, synth_catalog).accepted
        assert 15 <= inst.history.turn_count() <= 50


def test_gold_sessions_hold_the_preferences(synth_dataset):
    for inst in synth_dataset.train + synth_dataset.test:
        text = " ".join(
            t.content.lower() for i in inst.gold.gold_session_indices for t in inst.history.sessions[i].turns
        )
        assert all(f in text for f in inst.gold.features)


def _first(dataset) -> BenchmarkInstance:
    return (dataset.train + dataset.test)[0]


def test_verify_rejects_missing_product(synth_dataset, synth_catalog):
    inst = _first(synth_dataset)
    pruned = Catalog([p for p in synth_catalog if p.product_id != inst.gold.product_ids[0]])
    assert verify_instance(inst, pruned).failures == ["gold product missing from catalog"]


def test_verify_rejects_low_budget(synth_dataset, synth_catalog):
    inst = next(i for i in synth_dataset.train + synth_dataset.test if i.task_type == 1)
    broke = replace(inst, gold=replace(inst.gold, budget=Decimal("1")))
    assert "gold bundle over budget" in verify_instance(broke, synth_catalog).failures


def test_verify_rejects_leaky_instruction(synth_dataset, synth_catalog):
    inst = _first(synth_dataset)
    leaky = replace(inst, instruction=inst.instruction + " " + inst.gold.features[0])
    assert any(f.startswith("instruction leaks") for f in verify_instance(leaky, synth_catalog).failures)


def test_generation_is_deterministic(synth_catalog, tmp_path):
    config = SynthConfig(n_single=3, n_addon=3, seed=5)
    pool = load_distractor_pool()
    a = write_dataset(generate_dataset(config, synth_catalog, pool), tmp_path / "a")
    b = write_dataset(generate_dataset(config, synth_catalog, pool), tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    loaded = load_instances(a["train"]) + load_instances(a["test"])
    assert len(loaded) == 6


def test_stats_are_reported(synth_dataset):
    stats = synth_dataset.stats
    assert stats["instances"] == 12
    assert stats["by_task_type"] == {"0": 6, "1": 6}
    assert stats["discarded"] == len(synth_dataset.discarded)
