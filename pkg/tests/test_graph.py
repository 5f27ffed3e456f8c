import json

import pytest
from hypothesis import given, settings, strategies as st

from gtlm.graph import (
    GraphError,
    ParseError,
    append_question,
    graph_violations,
    load_graphs,
    make_graph,
    prompt_graph,
    sample_ego_subgraph,
    save_graphs,
    to_incidence,
    validate_graph,
)


@st.composite
def graphs(draw, max_nodes=8):
    n = draw(st.integers(1, max_nodes))
    pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
    edges = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs))) if pairs else []
    texts = draw(st.lists(st.text(min_size=1, max_size=6), min_size=n, max_size=n))
    return make_graph(texts, edges)


def kinds(g):
    return sorted(v.kind for v in graph_violations(g))


def test_minimal_graph_is_valid():
    g = make_graph(["hello"])
    assert validate_graph(g) is g


def test_dangling_endpoint():
    assert kinds(make_graph(["a", "b", "c"], [(0, 5)])) == ["DanglingEndpoint"]


def test_duplicate_edge():
    assert kinds(make_graph(["a", "b", "c"], [(1, 2), (1, 2)])) == ["DuplicateEdge"]


def test_all_violations_reported_at_once():
    g = make_graph(["a", ""], [(0, 0), (0, 1), (0, 1)])
    with pytest.raises(GraphError) as err:
        validate_graph(g)
    assert sorted(v.kind for v in err.value.violations) == ["DuplicateEdge", "EmptyText", "SelfLoop"]
    assert kinds(make_graph([])) == ["MissingTarget"]


def test_incidence_single_edge():
    g = to_incidence(make_graph(["a", "b"], [(0, 1)]))
    assert g.num_nodes == 3
    assert set(g.edges) == {(0, 2), (2, 1)}
    assert g.nodes[2].raw_text == "(0, 1)"


def test_incidence_without_edges_is_identity():
    g = make_graph(["only"])
    assert to_incidence(g) == g


def test_incidence_three_cycle():
    g = to_incidence(make_graph(["a", "b", "c"], [(0, 1), (1, 2), (2, 0)]))
    assert g.num_nodes == 6 and len(g.edges) == 6
    assert [n.raw_text for n in g.nodes[3:]] == ["(0, 1)", "(1, 2)", "(2, 0)"]


@given(graphs())
def test_incidence_is_bipartite_with_expected_sizes(g):
    lifted = to_incidence(g)
    n = g.num_nodes
    assert lifted.num_nodes == n + len(g.edges)
    assert len(lifted.edges) == 2 * len(g.edges)
    for u, v in lifted.edges:
        assert (u < n) != (v < n)
    assert lifted.nodes[:n] == g.nodes


def test_ego_star_takes_budget_from_first_ring():
    g = make_graph(["c"] + [f"leaf{i}" for i in range(100)], [(0, i) for i in range(1, 101)])
    sub = sample_ego_subgraph(g, 0, max_neighbors=30, seed=3)
    assert sub.num_nodes == 31
    assert all(e[0] == 0 for e in sub.edges) and len(sub.edges) == 30
    other = sample_ego_subgraph(g, 0, max_neighbors=30, seed=4)
    assert sub == sample_ego_subgraph(g, 0, max_neighbors=30, seed=3)
    assert sub.nodes != other.nodes


def test_ego_isolated_center():
    g = make_graph(["a", "b"])
    assert sample_ego_subgraph(g, 1, max_neighbors=5).num_nodes == 1


def test_ego_path_admits_closest_first():
    g = make_graph(["0", "1", "2", "3"], [(0, 1), (1, 2), (2, 3)])
    sub = sample_ego_subgraph(g, 0, max_neighbors=2, hops=2)
    assert [n.raw_text for n in sub.nodes] == ["0", "1", "2"]
    assert set(sub.edges) == {(0, 1), (1, 2)}


def test_ego_keeps_edges_between_sampled_neighbours():
    g = make_graph(["c", "a", "b"], [(0, 1), (0, 2), (1, 2)])
    assert len(sample_ego_subgraph(g, 0, max_neighbors=5).edges) == 3


def test_ego_invalid_center():
    with pytest.raises(GraphError):
        sample_ego_subgraph(make_graph(["a"]), 4, max_neighbors=3)


def test_append_question_template():
    g = append_question(make_graph(["ctx"]), "Q?", "yes")
    assert g.nodes[0].raw_text == "ctx\n\nQ?\n A: yes"
    start, stop = g.answer_span()
    assert bytes(g.nodes[0].text[start:stop]) == b"yes"


def test_append_question_errors():
    g = make_graph(["ctx"])
    with pytest.raises(ValueError):
        append_question(g, "Q?", "")
    with pytest.raises(ValueError):
        append_question(append_question(g, "Q?", "yes"), "Q2?", "no")


def test_prompt_graph_strips_label():
    g = append_question(make_graph(["ctx", "n"], [(0, 1)]), "Q?", "yes")
    p = prompt_graph(g)
    assert p.nodes[0].raw_text == "ctx\n\nQ?\n A: "
    assert p.label is None and p.edges == g.edges


@settings(max_examples=30)
@given(graphs())
def test_save_load_round_trip(tmp_path_factory, g):
    path = tmp_path_factory.mktemp("io") / "g.jsonl"
    save_graphs(path, [g, append_question(g, "Q?", "A")])
    back = load_graphs(path)
    assert back[0] == g
    assert back[1].nodes[0].raw_text == g.nodes[0].raw_text + "\n\nQ?\n A: A"


def test_record_field_names(tmp_path):
    path = tmp_path / "g.jsonl"
    save_graphs(path, [append_question(make_graph(["x", "y"], [(1, 0)]), "Q?", "A")])
    rec = json.loads(path.read_text())
    assert list(rec) == ["nodes", "edges", "question", "label"]
    assert rec["nodes"][0] == {"id": "0", "text": "x"}


def test_truncated_line_is_a_parse_error(tmp_path):
    path = tmp_path / "g.jsonl"
    save_graphs(path, [make_graph(["a"]), make_graph(["b"])])
    path.write_text(path.read_text()[:-5])
    with pytest.raises(ParseError) as err:
        load_graphs(path)
    assert err.value.line == 2


def test_empty_file(tmp_path):
    path = tmp_path / "g.jsonl"
    path.write_text("")
    assert load_graphs(path) == []


def test_load_incidence_format(tmp_path):
    path = tmp_path / "g.jsonl"
    save_graphs(path, [make_graph(["a", "b"], [(0, 1)])])
    assert load_graphs(path, fmt="incidence")[0].num_nodes == 3
