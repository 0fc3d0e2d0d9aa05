from __future__ import annotations

import json
import random
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from companion_gym.catalog import (
    Catalog,
    NotFound,
    PriceFilter,
    ProductIndex,
    build_product_index,
    ingest_products,
    parse_price_filter,
    product_search,
    product_view,
    tokenize,
)
from companion_gym.errors import DuplicateKeyError, SchemaError, ToolError
from companion_gym.synth.toydata import make_catalog

from conftest import product
from oracles import bm25_rank, words


def _line(pid, **extra):
    data = {"product_id": pid, "name": "Thing", "category": "misc", "price": 1.5, "shop_id": "S1", **extra}
    return json.dumps(data)


def test_ingest_one_line(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(_line("P1") + "\n")
    assert len(ingest_products(path)) == 1


def test_ingest_empty_file(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text("")
    assert len(ingest_products(path)) == 0


def test_duplicate_id_names_the_key(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(_line("P1") + "\n" + _line("P1") + "\n")
    with pytest.raises(DuplicateKeyError, match="P1"):
        ingest_products(path)


@pytest.mark.parametrize(
    "bad, field",
    [
        ({"price": "abc"}, "price"),
        ({"price": -1}, "price"),
        ({"features": {"color": 3}}, "features"),
        ({"options": {"size": "m"}}, "options"),
        ({"name": None}, "name"),
    ],
)
def test_schema_errors_carry_line_and_field(tmp_path, bad, field):
    path = tmp_path / "p.jsonl"
    path.write_text(_line("P0") + "\n" + _line("P1", **bad) + "\n")
    with pytest.raises(SchemaError) as info:
        ingest_products(path)
    assert info.value.line == 2
    assert info.value.field == field


def test_invalid_json_line(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(SchemaError):
        ingest_products(path)


def test_prices_are_exact_decimals(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(_line("P1", price=19.99) + "\n")
    assert ingest_products(path)["P1"].price == Decimal("19.99")


def test_index_counts(toy_catalog):
    index = build_product_index(toy_catalog)
    assert index.doc_count == 4


def test_postings_follow_tokenization(toy_catalog):
    index = build_product_index(toy_catalog)
    p1 = index.doc_ids.index("P1")
    assert any(d == p1 for d, _ in index.postings["wireless"])
    assert any(d == p1 for d, _ in index.postings["mouse"])


def test_avg_doc_length_matches_hand_count():
    products = [
        product(f"P{i}", name, "cat", "1", {"k": "v w"})
        for i, name in enumerate(["a", "a b", "a b c", "x-ray y", "z"])
    ]
    catalog = Catalog(products)
    counts = [len(words(p.document_text())) for p in products]
    # name + "cat" + "k v w"
    assert counts == [5, 6, 7, 7, 5]
    assert build_product_index(catalog).avg_doc_length == sum(counts) / 5


def test_empty_catalog_gives_empty_index():
    index = build_product_index(Catalog())
    assert index.doc_count == 0
    assert product_search(index, "anything") == []


def test_single_candidate_ranks_first():
    catalog = Catalog([product("P1", "usb-c charger 65w", "charger", "30", {})])
    assert product_search(build_product_index(catalog), "usb-c charger 65w")[0][0] == "P1"


def test_unmatched_query_is_empty(toy_catalog):
    assert product_search(build_product_index(toy_catalog), "zebra xylophone") == []


def _docs(catalog):
    return {p.product_id: p.document_text() for p in catalog}


def test_oracle_top10_on_200_products():
    catalog = make_catalog(200, seed=11)
    extra = [product("Z1", "Volt usb-c charger 65w", "charger", "30", {}), product("Z2", "usb-c cable", "cable", "9", {})]
    catalog = Catalog(list(catalog) + extra)
    index = build_product_index(catalog)
    got = product_search(index, "usb-c charger 65w", k=10)
    assert got == bm25_rank(_docs(catalog), "usb-c charger 65w", k=10)
    assert got[0][0] == "Z1"


def test_ties_break_by_product_id():
    catalog = Catalog([product(pid, "same text", "c", "1", {}) for pid in ("B", "A", "C")])
    assert [pid for pid, _ in product_search(build_product_index(catalog), "same")] == ["A", "B", "C"]


def test_prefix_stability():
    catalog = make_catalog(120, seed=5)
    index = build_product_index(catalog)
    full = product_search(index, "matte black mouse warranty", k=50)
    for k in (1, 5, 17, 50):
        assert product_search(index, "matte black mouse warranty", k=k) == full[:k]


def test_shop_and_price_filters_apply_before_ranking(toy_catalog):
    index = build_product_index(toy_catalog)
    assert [p for p, _ in product_search(index, "mouse", price="<=20")] == ["P4"]
    assert [p for p, _ in product_search(index, "mouse", price=">=20")] == ["P1"]
    assert {p for p, _ in product_search(index, "mouse", price="10-30")} == {"P1", "P4"}
    assert product_search(index, "lamp", shop_id="S1") == []
    assert [p for p, _ in product_search(index, "lamp", shop_id="S2")] == ["P3"]


@pytest.mark.parametrize(
    "text, expected",
    [
        ("10-20", PriceFilter(Decimal(10), Decimal(20))),
        ("$5 - $7.5", PriceFilter(Decimal(5), Decimal("7.5"))),
        ("<=30", PriceFilter(high=Decimal(30))),
        (">= 4", PriceFilter(low=Decimal(4))),
        ("", None),
        (None, None),
    ],
)
def test_price_filter_grammar(text, expected):
    assert parse_price_filter(text) == expected


@pytest.mark.parametrize("text", ["cheap", "20-10", "<>5", "1-2-3"])
def test_bad_price_filters(text):
    with pytest.raises(ToolError):
        parse_price_filter(text)


def test_product_view_contract(toy_catalog):
    assert product_view(toy_catalog, ["P1"]) == [toy_catalog["P1"]]
    assert product_view(toy_catalog, ["P1", "PX"]) == [toy_catalog["P1"], NotFound("PX")]
    assert product_view(toy_catalog, ["P2", "P1"]) == [toy_catalog["P2"], toy_catalog["P1"]]
    with pytest.raises(ToolError):
        product_view(toy_catalog, [])


def test_index_round_trip(tmp_path):
    catalog = make_catalog(60, seed=2)
    index = build_product_index(catalog)
    index.save(tmp_path)
    loaded = ProductIndex.load(tmp_path)
    for query in ("navy blue backpack", "quiet blender", "lifetime warranty"):
        assert product_search(loaded, query) == product_search(index, query)
    before = (tmp_path / "postings.jsonl").read_bytes()
    loaded.save(tmp_path)
    assert (tmp_path / "postings.jsonl").read_bytes() == before


def test_index_version_mismatch(tmp_path):
    build_product_index(make_catalog(5)).save(tmp_path)
    meta = json.loads((tmp_path / "index-meta.json").read_text())
    meta["format_version"] = 99
    (tmp_path / "index-meta.json").write_text(json.dumps(meta))
    with pytest.raises(SchemaError):
        ProductIndex.load(tmp_path)


def test_plural_stemming_is_opt_in():
    assert tokenize("Batteries and Boxes") == ["batteries", "and", "boxes"]
    assert tokenize("Batteries and Boxes", stem=True) == ["battery", "and", "box"]


VOCAB = ["red", "blue", "mouse", "lamp", "steel", "quiet", "usb", "c", "soft", "large", "small", "pro"]


@settings(max_examples=60, deadline=None)
@given(
    docs=st.lists(st.lists(st.sampled_from(VOCAB), min_size=1, max_size=8), min_size=1, max_size=25),
    query=st.lists(st.sampled_from(VOCAB), min_size=1, max_size=4),
    k=st.integers(1, 30),
)
def test_search_matches_oracle_property(docs, query, k):
    catalog = Catalog([product(f"P{i:03d}", " ".join(d), "x", "1", {}) for i, d in enumerate(docs)])
    index = build_product_index(catalog)
    q = " ".join(query)
    assert product_search(index, q, k=k) == bm25_rank(_docs(catalog), q, k=k)


def test_random_queries_against_oracle():
    rng = random.Random(4)
    catalog = make_catalog(150, seed=9)
    docs = _docs(catalog)
    vocab = sorted({w for text in docs.values() for w in words(text)})
    index = build_product_index(catalog)
    for _ in range(20):
        q = " ".join(rng.sample(vocab, rng.randint(1, 5)))
        assert product_search(index, q) == bm25_rank(docs, q)
