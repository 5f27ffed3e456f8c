import numpy as np
import torch

from gtlm.data import component_probe_item
from gtlm.graph import append_question, make_graph
from gtlm.model import collate, make_example
from gtlm.verification import (
    check_feature_oracles,
    check_gradients,
    components_of,
    format_attention_dump,
    format_report,
    mean_separation,
    node_attention,
    oracle_spd,
    parameter_groups,
    probe_message_passing,
    random_graph,
    relabel,
    run_battery,
    separation_statistic,
    verification_model,
)


def test_oracle_spd_hand_case():
    g = make_graph(["a", "b", "c", "d"], [(0, 1), (2, 1)])
    spd = oracle_spd(g, max_spd=8)
    assert spd[0, 2] == 2 and spd[0, 3] == 8 and spd[3, 3] == 0


def test_feature_oracles_pass_on_random_graphs():
    rng = np.random.default_rng(0)
    rep = check_feature_oracles([random_graph(rng) for _ in range(20)])
    assert rep["passed"]


def test_relabel_moves_text_and_edges():
    g = make_graph(["t", "a", "b"], [(1, 2), (2, 0)])
    h = relabel(g, [0, 2, 1])
    assert [n.raw_text for n in h.nodes] == ["t", "b", "a"]
    assert set(h.edges) == {(2, 1), (1, 0)}


def test_gradient_check_covers_every_group():
    model = verification_model(64, seed=1)
    g = append_question(make_graph(["p", "q r", "s"], [(1, 0), (2, 1), (0, 2)]), "Who?", "q")
    rep = check_gradients(model, collate([make_example(g, model.cfg)]), n_coords=40, seed=1)
    assert rep["passed"]
    assert set(rep["groups"]) == set(parameter_groups(model))


def test_gradient_check_detects_a_wrong_gradient():
    model = verification_model(64, seed=1)
    g = append_question(make_graph(["p", "q"], [(1, 0), (0, 1)]), "Who?", "q")
    batch = collate([make_example(g, model.cfg)])
    # corrupt the analytic bias gradients; the numeric side is untouched
    handles = [p.register_hook(lambda grad: grad * 2) for p in model.bias.parameters()]
    try:
        rep = check_gradients(model, batch, n_coords=30, seed=2)
    finally:
        for h in handles:
            h.remove()
    assert not rep["passed"]


def test_node_attention_is_mean_over_token_pairs():
    probs = torch.zeros(1, 3, 3)
    probs[0, :, 0] = 0.25
    probs[0, :, 1] = 0.75
    # node 1 owns tokens 0 and 1, node 2 owns token 2
    out = node_attention(probs, np.array([1, 1, 2]), [1, 2])
    assert np.allclose(out[0], [[0.5, 0.0], [0.5, 0.0]])


def test_separation_statistic():
    attn = np.array([[[0, 0.6, 0.1], [0.6, 0, 0.1], [0.2, 0.2, 0]]])
    assert np.allclose(separation_statistic(attn, [0, 0, 1]), [0.6 - 0.15])
    assert separation_statistic(attn, [0, 0, 0]) is None


def test_components_ignore_prompt_links():
    g = make_graph(["q", "a", "b", "c"], [(0, 1), (0, 3), (1, 2), (2, 1)])
    assert components_of(g, [1, 2, 3]) == [1, 1, 3]


def test_untrained_separation_near_zero():
    model = verification_model(32, seed=0, spd_scale=0.0)
    rng = np.random.default_rng(0)
    graphs = [component_probe_item(rng, 10, 2, bool(i % 2)) for i in range(10)]
    assert np.abs(mean_separation(model, graphs)).max() < 0.05


def test_attention_dump_format():
    model = verification_model(32, seed=0)
    g = component_probe_item(np.random.default_rng(1), 8, 2, True)
    rep = probe_message_passing(model, g)
    text = format_attention_dump(rep)
    lines = text.splitlines()
    assert lines[0].split()[1:] == [n.raw_text for n in g.nodes[1:]]
    assert sum(line.startswith("layer ") for line in lines) == 2 * 4
    assert len(lines) == 2 + 2 * 4 * (1 + 8)


def test_single_component_reports_absent():
    model = verification_model(32, seed=0)
    g = make_graph(["q", "a", "b"], [(0, 1), (1, 2)])
    rep = probe_message_passing(model, g)
    assert all(layer["separation"] is None for layer in rep["layers"])
    assert "separation absent" in format_attention_dump(rep)


def test_battery_32_bit_passes_and_formats():
    reports = run_battery(precision=32, n_graphs=10)
    text = format_report(reports)
    assert all(line.split()[1] == "passed=true" for line in text.splitlines())
    assert {r["check"] for r in reports} >= {"backward_compat", "equivariance", "kernel_invariance"}
