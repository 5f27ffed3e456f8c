import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gtlm.data import (
    AmbiguousAnchor,
    GENERATORS,
    GRAPHQA_TASKS,
    RejectionBudgetExceeded,
    TaskSpec,
    UnknownTask,
    build_company,
    component_probe_item,
    evaluate_accuracy,
    family_question,
    family_relatives,
    generate_dataset,
    graphqa_question,
    kg_question,
    normalize_answer,
    scaled_spec,
    write_dataset,
)
from gtlm.graph import graph_to_record, load_graphs

import generator_oracles


def small(task, seed=0, **counts):
    return generate_dataset(scaled_spec(task, seed=seed, counts=counts or {"train": 40, "val": 10, "test": 10}))


def test_graphqa_hand_examples():
    k3 = [(0, 1), (1, 2), (2, 0)]
    assert graphqa_question("triangle_counting", 3, k3)[1] == "1"
    tree = [(0, 1), (0, 2), (2, 3)]
    assert graphqa_question("cycle_check", 4, tree)[1] == "No"
    path = [(0, 1), (1, 2), (2, 3)]
    assert graphqa_question("shortest_path", 4, path, 0, 3)[1] == "3"
    assert graphqa_question("shortest_path", 5, path, 0, 4)[1] == "No path"
    assert graphqa_question("connected_nodes", 4, path, 1)[1] == "0, 2"
    assert graphqa_question("reachability", 4, path, 3, 0)[1] == "No"
    assert graphqa_question("reachability", 4, path, 0, 3)[1] == "Yes"
    with pytest.raises(UnknownTask):
        graphqa_question("diameter", 3, k3)
    with pytest.raises(UnknownTask):
        scaled_spec("diameter")


@pytest.mark.parametrize("task", sorted(GENERATORS))
def test_generation_is_reproducible(task, tmp_path):
    a = write_dataset(tmp_path / "a", scaled_spec(task, seed=3, counts={"train": 6, "val": 2, "test": 2}),
                      small(task, 3, train=6, val=2, test=2))
    b = write_dataset(tmp_path / "b", scaled_spec(task, seed=3, counts={"train": 6, "val": 2, "test": 2}),
                      small(task, 3, train=6, val=2, test=2))
    for split in a:
        assert a[split].name == f"{task}_{split}.jsonl"
        assert a[split].read_bytes() == b[split].read_bytes()
    assert len(load_graphs(a["train"])) == len(small(task, 3, train=6)["train"])


def test_splits_use_disjoint_streams():
    d = small("component_probe", train=20, val=20, test=20)
    questions = {s: {g.nodes[0].raw_text + str(g.edges) for g in d[s]} for s in d}
    assert not questions["train"] & questions["test"]


@pytest.mark.parametrize("task", ["component_probe", "directed_reachability"])
def test_probes_are_exactly_balanced(task):
    d = small(task, train=50, val=10, test=24)
    for items in d.values():
        labels = [g.label for g in items]
        assert abs(labels.count("Yes") - labels.count("No")) <= len(labels) % 2


def test_component_probe_shape():
    g = component_probe_item(np.random.default_rng(0), 10, 3, positive=True)
    letters = [n.raw_text for n in g.nodes[1:]]
    assert all(len(t) == 1 and t.isalpha() for t in letters) and len(set(letters)) == 10
    assert sorted(v for u, v in g.edges if u == 0) == sorted(
        i for i, n in enumerate(g.nodes) if f" {n.raw_text} " in g.question)
    assert len(g.meta["components"]) == 3
    assert g.question.endswith("connected? [Yes/No]")
    with pytest.raises(ValueError):
        component_probe_item(np.random.default_rng(0), 5, 3, positive=True)


def test_component_probe_size_range():
    d = small("component_probe", train=30)
    assert all(9 <= g.num_nodes <= 15 for g in d["train"])


def test_directed_reachability_shape():
    for g in small("directed_reachability", train=40)["train"]:
        into_prompt = [u for u, v in g.edges if v == 0]
        source = g.question.split()[6]
        assert [g.nodes[u].raw_text for u in into_prompt] == [source]
        assert all(u != 0 for u, _ in g.edges)
        # the prefix is an oriented tree, so only directions can carry the label
        assert len(g.edges) - 1 == (g.num_nodes - 1) - 1


def family_fixture():
    people = [
        {"first": "A", "last": "X", "gender": "male", "born": 1900, "color": "red", "food": "soup", "city": "Rome"},
        {"first": "B", "last": "X", "gender": "female", "born": 1901, "color": "blue", "food": "pizza", "city": "Oslo"},
        {"first": "C", "last": "X", "gender": "male", "born": 1930, "color": "teal", "food": "tacos", "city": "Lima"},
        {"first": "D", "last": "X", "gender": "male", "born": 1930, "color": "pink", "food": "curry", "city": "Lima"},
        {"first": "E", "last": "X", "gender": "female", "born": 1925, "color": "black", "food": "steak", "city": "Seoul"},
    ]
    spouses = [(0, 1)]
    children = [(p, c) for p in (0, 1) for c in (2, 3, 4)]
    return people, spouses, children


def test_family_spouse_lookup():
    people, spouses, children = family_fixture()
    q, a = family_question(people, spouses, children, 0, "spouse", 1, "favorite city")
    assert q == "What is the favorite city of A X's spouse?" and a == "Oslo"


def test_family_ordinal_ties_by_node_id():
    people, spouses, children = family_fixture()
    assert family_relatives(people, spouses, children, 0, "son") == [2, 3]
    q, a = family_question(people, spouses, children, 0, "son", 2, "favorite color")
    assert q == "What is the favorite color of A X's 2nd oldest son?" and a == "pink"
    assert family_question(people, spouses, children, 0, "child", 1, "birth year")[1] == "1925"
    assert family_question(people, spouses, children, 0, "daughter", 2, "birth year") is None


def test_family_rejects_ambiguous_anchor():
    people, spouses, children = family_fixture()
    people[3]["first"] = "C"
    with pytest.raises(AmbiguousAnchor):
        family_question(people, spouses, children, 2, "father", 1, "favorite food")


def test_family_tree_items_parse():
    for g in small("family_tree", train=20)["train"]:
        assert g.nodes[0].raw_text.startswith("Family tree query")
        for n in g.nodes[1:]:
            assert generator_oracles.PERSON.fullmatch(n.raw_text)


def test_kgqa_node_mix_and_hierarchy():
    nodes, edges = build_company(np.random.default_rng(4), 40)
    kinds = [k for k, _ in nodes]
    assert (kinds.count("person"), kinds.count("project"), kinds.count("resource")) == (22, 8, 10)
    bosses = {}
    for u, v in edges:
        if kinds[u] == kinds[v] == "person":
            assert u not in bosses
            bosses[u] = v
    assert len(bosses) == kinds.count("person") - 1  # a tree: everyone but the root has one boss


def test_kgqa_ceo_is_root():
    rng = np.random.default_rng(0)
    nodes, edges = build_company(rng, 30)
    for _ in range(200):
        q, label, linked = kg_question(rng, nodes, edges)
        if q.startswith("Is ") and "CEO" in q:
            assert label == (linked[0] == 0)


def test_kgqa_vacuous_access_is_yes():
    nodes = [("person", "Ann Lee"), ("project", "Project Tau"), ("resource", "Vault 1")]
    edges = [(0, 1)]
    rng = np.random.default_rng(0)
    for _ in range(50):
        q, label, _ = kg_question(rng, nodes, edges)
        if q.startswith("Are all resources"):
            assert label is True
            return
    pytest.fail("all_access question never drawn")


def test_kgqa_balance_and_bounds():
    d = generate_dataset(scaled_spec("kgqa", seed=1, counts={"train": 20, "val": 2, "test": 2}))
    labels = [g.label for g in d["train"]]
    assert 0.45 <= labels.count("Yes") / len(labels) <= 0.55
    with pytest.raises(ValueError):
        generate_dataset(scaled_spec("kgqa", n_min=5, n_max=20))
    with pytest.raises(RejectionBudgetExceeded):
        from gtlm.data import kgqa_items
        kgqa_items(np.random.default_rng(0), 12, per_graph=6, budget=1)


@pytest.mark.parametrize("task", sorted(GENERATORS))
def test_generators_agree_with_oracles(task):
    counts = {"train": 12} if task == "kgqa" else {"train": 60}
    oracle = generator_oracles.oracle_for(task)
    for g in small(task, seed=11, **counts)["train"]:
        rec = graph_to_record(g)
        assert oracle(rec) == rec["label"], rec["question"]


def test_oracle_catches_a_wrong_label():
    g = small("component_probe", train=1)["train"][0]
    rec = graph_to_record(g)
    rec["edges"] = [e for e in rec["edges"] if 0 in e]  # drop every prefix edge
    assert generator_oracles.component_probe(rec) == "No"


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(GRAPHQA_TASKS))
def test_graphqa_property(seed, task):
    g = generate_dataset(TaskSpec(task, 5, 15, counts={"train": 1}, seed=seed))["train"][0]
    assert generator_oracles.graphqa(graph_to_record(g)) == g.label
    assert [n.raw_text for n in g.nodes[1:]] == [str(i) for i in range(g.num_nodes - 1)]


def test_normalize_answer():
    assert normalize_answer("  Yes ") == normalize_answer("yes")
    assert normalize_answer("0,  2") == normalize_answer("0, 2")


def test_evaluate_accuracy_with_predictor():
    data = small("component_probe", train=40)["train"]
    assert evaluate_accuracy(None, data, predict=lambda g: g.label)[0] == 1.0
    assert evaluate_accuracy(None, data, predict=lambda g: "Yes")[0] == 0.5
    acc, records = evaluate_accuracy(None, data, predict=lambda g: f" {g.label.upper()}  ")
    assert acc == 1.0 and records[0]["gold"] == data[0].label


def test_all_tasks_registered():
    assert set(GRAPHQA_TASKS) < set(GENERATORS)
    assert {"family_tree", "kgqa", "component_probe", "directed_reachability"} < set(GENERATORS)
    assert len(GRAPHQA_TASKS) == 9
