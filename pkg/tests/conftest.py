from __future__ import annotations

import datetime as dt
from decimal import Decimal

import pytest

from companion_gym.catalog import Catalog, Product, build_product_index
from companion_gym.episode import Environment
from companion_gym.memory import MemoryStore, Session, Turn
from companion_gym.rewards import GoldAnnotation, OracleJudge, Voucher
from companion_gym.synth.instance import BenchmarkInstance
from companion_gym.synth.pipeline import SynthConfig, generate_dataset
from companion_gym.synth.toydata import load_distractor_pool, make_catalog

# Filled by test_acceptance; echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


def product(pid, name, category, price, features, shop="S1", options=None, brand=None):
    return Product(
        product_id=pid,
        name=name,
        category=category,
        price=Decimal(str(price)),
        shop_id=shop,
        brand=brand,
        features=features,
        options=options or {},
    )


@pytest.fixture
def toy_catalog() -> Catalog:
    return Catalog(
        [
            product("P1", "Acme Wireless Mouse", "mouse", "25.00", {"color": "navy", "grip": "ergonomic"}),
            product("P2", "Koda Mechanical Keyboard", "keyboard", "60.00", {"color": "black", "layout": "compact"}),
            product("P3", "Lumio Desk Lamp", "desk lamp", "40.00", {"color": "white", "light tone": "warm"}, shop="S2"),
            product("P4", "Orbit Travel Mouse", "mouse", "15.00", {"color": "red", "grip": "ergonomic"}),
        ]
    )


def history(*sessions: list[tuple[str, str]], start=dt.date(2024, 3, 1)) -> MemoryStore:
    return MemoryStore(
        [
            Session(i, start + dt.timedelta(days=i), tuple(Turn(r, c) for r, c in turns))
            for i, turns in enumerate(sessions)
        ]
    )


@pytest.fixture
def single_instance() -> BenchmarkInstance:
    store = history(
        [("user", "Any tips for a weekend hike?"), ("assistant", "Pack water and check the weather.")],
        [
            ("user", "I need a new mouse for work."),
            ("assistant", "What color do you like?"),
            ("user", "I want color: navy and grip: ergonomic."),
        ],
        [("user", "What should I cook tonight?"), ("assistant", "Try a quick stir fry.")],
    )
    gold = GoldAnnotation(
        product_ids=("P1",),
        wanted_features={"P1": ["color: navy", "grip: ergonomic"]},
        gold_session_indices=(1,),
    )
    return BenchmarkInstance("inst-single", 0, "Looking for a mouse.", store, gold)


@pytest.fixture
def bundle_instance() -> BenchmarkInstance:
    store = history(
        [("user", "I want a mouse with color: navy."), ("assistant", "Noted.")],
        [("user", "Talk me through pasta recipes."), ("assistant", "Sure.")],
        [("user", "For a keyboard I want layout: compact."), ("assistant", "Noted.")],
    )
    voucher = Voucher("flat_off_over_threshold", Decimal("70"), Decimal("10"))
    gold = GoldAnnotation(
        product_ids=("P1", "P2"),
        wanted_features={"P1": ["color: navy"], "P2": ["layout: compact"]},
        gold_session_indices=(0, 2),
        bundle_size=2,
        task_type=1,
        voucher=voucher,
        budget=Decimal("80"),
    )
    instruction = f"Product bundle includes: mouse and keyboard. Voucher: {voucher.describe()}. Budget: $80."
    return BenchmarkInstance("inst-bundle", 1, instruction, store, gold)


@pytest.fixture
def toy_env(toy_catalog) -> Environment:
    return Environment(toy_catalog, build_product_index(toy_catalog))


@pytest.fixture
def oracle(toy_catalog) -> OracleJudge:
    return OracleJudge(toy_catalog)


@pytest.fixture(scope="session")
def synth_catalog() -> Catalog:
    return make_catalog(300, seed=0)


@pytest.fixture(scope="session")
def synth_dataset(synth_catalog):
    config = SynthConfig(n_single=6, n_addon=6, seed=3)
    return generate_dataset(config, synth_catalog, load_distractor_pool())
