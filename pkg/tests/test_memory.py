from __future__ import annotations

import datetime as dt
import json
import random

import numpy as np
import pytest

from companion_gym.catalog import NotFound
from companion_gym.errors import SchemaError, ToolError
from companion_gym.memory import (
    HashingEmbedder,
    MemoryStore,
    Session,
    Turn,
    build_memory_index,
    extractive_summary,
    load_history,
    mem_search,
    mem_summarize_by_date,
    mem_view,
)
from companion_gym.synth.toydata import load_distractor_pool

from conftest import history
from oracles import cosine_rank


def _session(i, turns=(("user", "hi"),), date="2024-01-01"):
    return {"session_index": i, "date": date, "turns": [{"role": r, "content": c} for r, c in turns]}


def test_load_two_sessions(tmp_path):
    path = tmp_path / "h.json"
    path.write_text(json.dumps([_session(0), _session(1)]))
    store = load_history(path)
    assert [s.session_index for s in store.sessions] == [0, 1]


def test_non_contiguous_indices_rejected():
    with pytest.raises(SchemaError):
        MemoryStore.from_json([_session(0), _session(2)])


def test_empty_turns_rejected():
    bad = _session(0)
    bad["turns"] = []
    with pytest.raises(SchemaError):
        MemoryStore.from_json([bad])


@pytest.mark.parametrize("patch", [{"date": "yesterday"}, {"session_index": -1}, {"turns": [{"role": "bot", "content": "x"}]}])
def test_malformed_sessions(patch):
    with pytest.raises(SchemaError):
        MemoryStore.from_json([{**_session(0), **patch}])


def test_instance_file_is_accepted(tmp_path):
    path = tmp_path / "i.json"
    path.write_text(json.dumps({"history": [_session(0)]}))
    assert len(load_history(path)) == 1


def test_identical_text_ranks_first_with_unit_similarity():
    store = history([("user", "I love quiet keyboards"), ("assistant", "Noted, quiet it is")], [("user", "Pasta tonight")])
    index = build_memory_index(store)
    top = mem_search(store, index, ["I love quiet keyboards"], k=3)[0][0]
    assert (top.session_index, top.turn_index) == (0, 0)
    assert top.similarity == pytest.approx(1.0, abs=1e-9)


def test_one_turn_store_truncates_k():
    store = history([("user", "only turn")])
    hits = mem_search(store, build_memory_index(store), ["unrelated words"], k=5)
    assert len(hits[0]) == 1


def test_empty_text_never_zero_vector():
    vec = HashingEmbedder().embed(["", "!!!"])
    assert np.allclose(np.linalg.norm(vec, axis=1), 1.0)


def _random_store(n_turns, seed):
    rng = random.Random(seed)
    pool = load_distractor_pool()
    sessions, total = [], 0
    while total < n_turns:
        turns = rng.choice(pool)[: n_turns - total]
        sessions.append(Session(len(sessions), dt.date(2024, 1, 1), tuple(turns)))
        total += len(turns)
    return MemoryStore(sessions)


def test_fifty_turn_store_matches_cosine_oracle():
    store = _random_store(50, seed=1)
    index = build_memory_index(store)
    embedder = HashingEmbedder()
    queries = ["weekend travel plans", "how long to rest lasagna", "stretching for a stiff back"]
    got = mem_search(store, index, queries, k=10)
    raw = embedder.embed([t.content for _, _, t in store.iter_turns()])
    positions = [(s, t) for s, t, _ in store.iter_turns()]
    for q, row in zip(queries, got):
        expected = cosine_rank(raw, positions, embedder.embed([q])[0], 10)
        assert [(h.session_index, h.turn_index) for h in row] == expected


def test_search_is_deterministic():
    store = _random_store(40, seed=2)
    index = build_memory_index(store)
    assert mem_search(store, index, ["books", "garden"]) == mem_search(store, index, ["books", "garden"])


@pytest.mark.parametrize("queries, k", [([], 5), ("text", 5), ([1], 5), (["x"], 0)])
def test_search_argument_errors(queries, k):
    store = history([("user", "a")])
    with pytest.raises(ToolError):
        mem_search(store, build_memory_index(store), queries, k=k)


def test_mem_view_contract():
    store = history([("user", "a")], [("user", "b")], [("user", "c")])
    assert mem_view(store, [0]) == [store.sessions[0]]
    assert mem_view(store, [7]) == [NotFound(7)]
    assert mem_view(store, [1, 0]) == [store.sessions[1], store.sessions[0]]


def test_summaries_cover_exact_date_range():
    store = history([("user", "a.")], [("user", "b.")], [("user", "c.")], start=dt.date(2024, 5, 1))
    assert mem_summarize_by_date(store, "2023-01-01", "2023-12-31") == []
    assert len(mem_summarize_by_date(store, "2024-05-01", "2024-05-03")) == 3
    assert [s.session_index for s in mem_summarize_by_date(store, "2024-05-02", "2024-05-02")] == [1]
    with pytest.raises(ToolError):
        mem_summarize_by_date(store, "2024-05-03", "2024-05-01")
    with pytest.raises(ToolError):
        mem_summarize_by_date(store, "May 1", "2024-05-01")


def test_extractive_summary_is_first_sentences():
    session = Session(0, dt.date(2024, 1, 1), (Turn("user", "First one. Second one."), Turn("assistant", "Sure! More text")))
    first = "First one. Second one.".split(". ")[0] + "."
    second = "Sure! More text"[: "Sure! More text".index("!") + 1]
    assert extractive_summary(session) == f"{first} {second}"


def test_extractive_summary_caps_tokens():
    long = " ".join(f"w{i}" for i in range(100))
    session = Session(0, dt.date(2024, 1, 1), (Turn("user", long),))
    assert len(extractive_summary(session).split()) == 40
