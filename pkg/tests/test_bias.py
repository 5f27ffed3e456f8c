import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gtlm.bias import (
    BiasConfig,
    BucketOutOfRange,
    FeatureTensors,
    ShapeMismatch,
    assemble_node_bias,
    assemble_node_bias_batch,
    broadcast_to_tokens,
    count_parameters,
    deepset_phi,
    init_bias_params,
    mag_kernel,
    spd_bias,
)
from gtlm.features import compute_features
from gtlm.graph import make_graph
from gtlm.verification import complete_graph, oracle_kernel_invariance, path_graph, random_graph


def random_params(cfg, seed=0):
    params = init_bias_params(cfg, seed=seed)
    with torch.no_grad():
        params.spd_table.normal_(generator=torch.Generator().manual_seed(seed))
    return params


def features(g, cfg):
    return compute_features(g, cfg.max_spd, cfg.rrwp_steps, cfg.mag_q)


def test_paper_scale_counts():
    counts = count_parameters(BiasConfig(n_layers=16, n_heads=32, max_spd=8, rrwp_steps=16, rrwp_hidden=64))
    assert counts["spd"] == 4096
    assert counts["rrwp"] == 50688
    assert counts["total"] == counts["spd"] + counts["rrwp"] + counts["mag"]


@pytest.mark.parametrize("kw", [{}, {"n_layers": 3, "n_heads": 5, "mag_dim": 7}, {"use_mag": False},
                                {"use_spd": False, "use_rrwp": False}])
def test_counts_match_module(kw):
    cfg = BiasConfig(**kw)
    params = init_bias_params(cfg)
    fam = params.family_parameters()
    actual = {
        "spd": (params.spd_table.numel() - cfg.n_layers * cfg.n_heads) if cfg.use_spd else 0,
        "rrwp": sum(p.numel() for p in fam["rrwp"]) if cfg.use_rrwp else 0,
        "mag": sum(p.numel() for p in fam["mag"]) if cfg.use_mag else 0,
    }
    counts = count_parameters(cfg)
    assert {k: counts[k] for k in actual} == actual


def test_config_validation():
    with pytest.raises(ValueError):
        BiasConfig(max_spd=1)
    with pytest.raises(ValueError):
        BiasConfig(mag_q=0.7)
    with pytest.raises(ValueError):
        BiasConfig(n_heads=0)


def test_init_is_deterministic():
    a, b = init_bias_params(BiasConfig(), seed=5), init_bias_params(BiasConfig(), seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert torch.all(a.spd_table == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_node_bias_diagonal_is_exactly_zero(seed):
    cfg = BiasConfig()
    g = random_graph(np.random.default_rng(seed), n_max=9)
    bias = assemble_node_bias(features(g, cfg), random_params(cfg, seed % 1000))
    n = g.num_nodes
    assert bias.shape == (cfg.n_layers, cfg.n_heads, n, n)
    assert torch.all(torch.diagonal(bias, dim1=-2, dim2=-1) == 0)


def test_pinned_bucket_gets_no_gradient():
    cfg = BiasConfig()
    params = random_params(cfg)
    g = make_graph(["a", "b", "c"], [(0, 1)])
    assemble_node_bias(features(g, cfg), params).sum().backward()
    assert torch.all(params.spd_table.grad[:, :, 0] == 0)
    assert torch.any(params.spd_table.grad[:, :, 1] != 0)
    assert torch.any(params.spd_table.grad[:, :, cfg.max_spd] != 0)


def test_spd_lookup_indexes_table():
    cfg = BiasConfig(n_layers=1, n_heads=2, max_spd=3)
    params = random_params(cfg)
    spd = torch.tensor([[0, 1], [3, 0]])
    out = spd_bias(spd, params)
    assert out[0, 1, 1, 0] == params.spd_table[0, 1, 3]
    assert out[0, 0, 0, 0] == 0
    with pytest.raises(BucketOutOfRange):
        spd_bias(torch.tensor([[0, 4], [4, 0]]), params)


def test_ablation_flags_remove_families():
    g = make_graph(["a", "b", "c"], [(0, 1), (1, 2)])
    full_cfg = BiasConfig()
    params = random_params(full_cfg)
    feats = features(g, full_cfg)
    parts = []
    for flag in ("use_spd", "use_rrwp", "use_mag"):
        only = {k: k == flag for k in ("use_spd", "use_rrwp", "use_mag")}
        params.cfg = BiasConfig(**only)
        parts.append(assemble_node_bias(feats, params))
    params.cfg = full_cfg
    assert torch.allclose(sum(parts), assemble_node_bias(feats, params), atol=1e-12)
    params.cfg = BiasConfig(use_spd=False, use_rrwp=False, use_mag=False)
    assert torch.all(assemble_node_bias(feats, params) == 0)


def test_batched_assembly_matches_single():
    cfg = BiasConfig()
    params = random_params(cfg)
    rng = np.random.default_rng(1)
    feats = [features(random_graph(rng, n_max=8), cfg) for _ in range(4)]
    for single, batched in zip([assemble_node_bias(f, params) for f in feats],
                               assemble_node_bias_batch(feats, params)):
        assert torch.allclose(single, batched, atol=1e-12)


def test_shape_mismatch():
    cfg = BiasConfig()
    f = FeatureTensors.from_features(features(make_graph(["a", "b"], [(0, 1)]), cfg))
    f.rrwp = f.rrwp[:, :, :4]
    with pytest.raises(ShapeMismatch):
        assemble_node_bias(f, init_bias_params(cfg))


def test_broadcast_to_tokens():
    node_bias = torch.arange(4.0).reshape(2, 2)
    out = broadcast_to_tokens(node_bias, [0, 0, 1])
    assert out.tolist() == [[0, 0, 1], [0, 0, 1], [2, 2, 3]]


def test_kernel_is_hermitian_per_channel():
    cfg = BiasConfig()
    f = features(make_graph(["a", "b", "c"], [(0, 1), (1, 2)]), cfg)
    phi = deepset_phi(torch.as_tensor(f.mag_eigvals), init_bias_params(cfg))
    k = mag_kernel(f.mag_eigvecs, phi)
    assert torch.allclose(k, k.transpose(0, 1).conj(), atol=1e-12)


def test_deepset_is_permutation_equivariant():
    params = init_bias_params(BiasConfig())
    lam = torch.tensor([0.0, 0.3, 1.2, 1.9], dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(deepset_phi(lam, params)[perm], deepset_phi(lam[perm], params), atol=1e-14)


@pytest.mark.parametrize("g", [path_graph(5), complete_graph(4)], ids=["path", "K4"])
def test_kernel_basis_invariance(g):
    rep = oracle_kernel_invariance(g, seed=3)
    assert rep["phase"]["invariant"]
    assert rep["block"]["invariant"]
    # a non-unitary change must be detected, otherwise the check is vacuous
    assert not rep["nonunitary"]["invariant"]


def test_complete_graph_has_a_degenerate_block():
    # K4 exercises the block-unitary path, not just per-vector phases
    assert oracle_kernel_invariance(complete_graph(4))["degenerate_blocks"]
