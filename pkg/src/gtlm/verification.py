"""Numerical checks and independent oracles.

Every check is deterministic given its seed and returns a plain report dict
with measured magnitudes and a ``passed`` flag. The oracles here deliberately
re-derive features from the raw edge list instead of calling into
:mod:`gtlm.features`.
"""
from __future__ import annotations

import string
from collections import deque
from typing import Sequence

import numpy as np
import torch

from .bias import deepset_phi, init_bias_params, mag_kernel
from .features import compute_features, hermitian_eigendecomposition, magnetic_laplacian
from .graph import TextAttributedGraph, make_graph, undirected_neighbors
from .model import GtlmModel, Batch, batch_objective, forward, gradients

DEGENERACY_GAP = 1e-9


def default_tolerance(model: GtlmModel) -> float:
    return 1e-12 if model.dtype == torch.float64 else 1e-4


def _random_text(rng: np.random.Generator, lo: int = 4, hi: int = 40) -> str:
    alphabet = list(string.ascii_letters + string.digits + " .,:;!?")
    return "".join(rng.choice(alphabet, size=int(rng.integers(lo, hi + 1))))


# -- backward compatibility and equivariance ---------------------------------------------

def check_backward_compat(model: GtlmModel, trials: int = 5, seed: int = 0,
                          tol: float | None = None) -> dict:
    """Single-node graphs through the biased model and its bias-free twin."""
    tol = default_tolerance(model) if tol is None else tol
    rng = np.random.default_rng(seed)
    diffs = []
    with torch.no_grad():
        for _ in range(trials):
            g = make_graph([_random_text(rng)])
            with_bias, _ = forward(g, None, model)
            without, _ = forward(g, None, model, use_bias=False)
            diffs.append(float((with_bias - without).abs().max()))
    return {"check": "backward_compat", "max_abs_diff": diffs, "tol": tol,
            "passed": all(d <= tol for d in diffs)}


def relabel(g: TextAttributedGraph, perm: Sequence[int]) -> TextAttributedGraph:
    """Graph whose node ``i`` is ``g``'s node ``perm[i]`` (``perm[0]`` must be 0)."""
    inv = np.argsort(perm)
    nodes = tuple(g.nodes[p] for p in perm)
    edges = tuple((int(inv[u]), int(inv[v])) for u, v in g.edges)
    return TextAttributedGraph(nodes, edges, g.question, g.label, g.base_text,
                               g.allow_self_loops, dict(g.meta))


def _node_blocks(logits: torch.Tensor, layout) -> dict[int, torch.Tensor]:
    return {node: logits[sl] for node, sl in layout.node_slices().items()}


def check_equivariance(model: GtlmModel, g: TextAttributedGraph, n_permutations: int = 5,
                       seed: int = 0, tol: float | None = None) -> dict:
    """Relabel the prefix nodes at random and compare outputs node by node.

    Structural features are recomputed from scratch for each relabelled graph,
    so eigenvector sign/phase choices differ between runs as they would in use.
    """
    if g.num_nodes < 3:
        raise ValueError("need at least two prefix nodes")
    tol = default_tolerance(model) if tol is None else tol
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        base_logits, base_layout = forward(g, None, model)
        base = _node_blocks(base_logits, base_layout)
        deltas = []
        for _ in range(n_permutations):
            perm = [0] + list(1 + rng.permutation(g.num_nodes - 1))
            logits, layout = forward(relabel(g, perm), None, model)
            blocks = _node_blocks(logits, layout)
            # node i of the relabelled graph is node perm[i] of the original
            delta = max(float((blocks[i] - base[perm[i]]).abs().max()) for i in blocks)
            deltas.append(delta)
    return {"check": "equivariance", "max_abs_diff": deltas, "tol": tol,
            "passed": all(d <= tol for d in deltas)}


# -- gradients --------------------------------------------------------------------------

def parameter_groups(model: GtlmModel) -> dict[str, list[str]]:
    """Parameter names grouped as backbone / spd / rrwp / mag."""
    groups = {"backbone": [], "spd": [], "rrwp": [], "mag": []}
    for name, _ in model.named_parameters():
        if not name.startswith("bias."):
            groups["backbone"].append(name)
        elif name == "bias.spd_table":
            groups["spd"].append(name)
        elif name.startswith("bias.rrwp"):
            groups["rrwp"].append(name)
        else:
            groups["mag"].append(name)
    return groups


def check_gradients(model: GtlmModel, batch: Batch, n_coords: int = 200, eps: float = 1e-6,
                    tol: float = 1e-4, seed: int = 0, floor: float = 5e-5) -> dict:
    """Central differences on coordinates drawn round-robin from every parameter group.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    near-zero gradients from being judged on rounding noise alone.
    """
    if model.dtype != torch.float64:
        raise ValueError("gradient checks need a 64-bit model")
    flags = {name: p.requires_grad for name, p in model.named_parameters()}
    for p in model.parameters():
        p.requires_grad_(True)
    try:
        analytic = gradients(model, batch)
        params = dict(model.named_parameters())
        rng = np.random.default_rng(seed)
        groups = {k: v for k, v in parameter_groups(model).items() if v}
        sizes = {k: [params[n].numel() for n in v] for k, v in groups.items()}
        names = list(groups)
        rows = []
        for i in range(n_coords):
            group = names[i % len(names)]
            weights = np.array(sizes[group], dtype=float)
            pname = groups[group][rng.choice(len(weights), p=weights / weights.sum())]
            p = params[pname]
            flat = int(rng.integers(p.numel()))
            idx = np.unravel_index(flat, p.shape)
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + eps
                up = batch_objective(model, batch).item()
                p[idx] = orig - eps
                down = batch_objective(model, batch).item()
                p[idx] = orig
            num = (up - down) / (2 * eps)
            ana = float(analytic[pname][idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            rows.append({"param": pname, "index": [int(j) for j in idx], "group": group,
                         "analytic": ana, "numeric": num, "rel_err": rel})
    finally:
        for name, p in model.named_parameters():
            p.requires_grad_(flags[name])
        model.zero_grad(set_to_none=True)
    worst = max(r["rel_err"] for r in rows)
    return {"check": "gradients", "coords": rows, "max_rel_err": worst, "tol": tol,
            "groups": sorted({r["group"] for r in rows}), "passed": worst <= tol}


# -- structural-feature oracles ------------------------------------------------------

def oracle_spd(g: TextAttributedGraph, max_spd: int = 8) -> np.ndarray:
    """Floyd-Warshall on the symmetrized edge list, then bucketed."""
    n = g.num_nodes
    if n > 64:
        raise ValueError("oracle limited to 64 nodes")
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for u, v in g.edges:
        if u != v:
            dist[u, v] = dist[v, u] = 1.0
    for k in range(n):
        for i in range(n):
            for j in range(n):
                if dist[i, k] + dist[k, j] < dist[i, j]:
                    dist[i, j] = dist[i, k] + dist[k, j]
    out = np.where(np.isinf(dist), max_spd, np.minimum(dist, max_spd - 1))
    return out.astype(np.int64)


def oracle_rrwp(g: TextAttributedGraph, K: int = 16) -> np.ndarray:
    """Walk probabilities by explicit matrix powers built from the edge list."""
    n = g.num_nodes
    out_edges = [[] for _ in range(n)]
    for u, v in g.edges:
        out_edges[u].append(v)
    m = np.zeros((n, n))
    for u, targets in enumerate(out_edges):
        for v in targets:
            m[u, v] += 1.0 / len(targets)
    result = np.zeros((n, n, K))
    for k in range(K):
        power = np.eye(n)
        for _ in range(k):
            power = power @ m
        result[:, :, k] = power
    return result


def oracle_spectrum_bounds(lap: np.ndarray, lo: float = -1e-9, hi: float = 2 + 1e-9) -> dict:
    hermitian_err = float(np.abs(lap - lap.conj().T).max())
    lam, vecs = hermitian_eigendecomposition(lap)
    residual = float(np.abs(lap @ vecs - vecs * lam).max())
    return {"hermitian_err": hermitian_err, "eig_min": float(lam.min()), "eig_max": float(lam.max()),
            "residual": residual, "in_bounds": bool(lam.min() >= lo and lam.max() <= hi)}


def check_feature_oracles(graphs: Sequence[TextAttributedGraph], max_spd: int = 8, K: int = 16,
                          q: float = 0.25) -> dict:
    spd_ok, rrwp_err, herm, resid, bounds = True, 0.0, 0.0, 0.0, True
    for g in graphs:
        f = compute_features(g, max_spd, K, q)
        spd_ok &= bool(np.array_equal(f.spd, oracle_spd(g, max_spd)))
        rrwp_err = max(rrwp_err, float(np.abs(f.rrwp - oracle_rrwp(g, K)).max()))
        lap = magnetic_laplacian(g, q)
        herm = max(herm, float(np.abs(lap - lap.conj().T).max()))
        resid = max(resid, float(np.abs(lap - (f.mag_eigvecs * f.mag_eigvals) @ f.mag_eigvecs.conj().T).max()))
        bounds &= bool(f.mag_eigvals.min() >= -1e-9 and f.mag_eigvals.max() <= 2 + 1e-9)
    passed = spd_ok and rrwp_err <= 1e-12 and herm <= 1e-12 and bounds and resid <= 1e-8
    return {"check": "feature_oracles", "graphs": len(graphs), "spd_exact": spd_ok,
            "rrwp_max_err": rrwp_err, "hermitian_err": herm, "eig_in_bounds": bounds,
            "reconstruction_residual": resid, "passed": passed}


def random_graph(rng: np.random.Generator, n_max: int = 12, p: float | None = None) -> TextAttributedGraph:
    n = int(rng.integers(1, n_max + 1))
    p = rng.uniform(0.05, 0.6) if p is None else p
    edges = [(u, v) for u in range(n) for v in range(n) if u != v and rng.random() < p]
    return make_graph([f"v{i}" for i in range(n)], edges)


# -- kernel basis invariance ------------------------------------------------------------

def degenerate_blocks(eigvals: np.ndarray, gap: float = DEGENERACY_GAP) -> list[list[int]]:
    blocks = [[0]]
    for i in range(1, len(eigvals)):
        if eigvals[i] - eigvals[i - 1] < gap:
            blocks[-1].append(i)
        else:
            blocks.append([i])
    return blocks


def _random_unitary(rng, k):
    z = rng.normal(size=(k, k)) + 1j * rng.normal(size=(k, k))
    qm, r = np.linalg.qr(z)
    return qm * (np.diag(r) / np.abs(np.diag(r)))


def perturb_basis(vecs: np.ndarray, eigvals: np.ndarray, mode: str,
                  rng: np.random.Generator) -> np.ndarray:
    """Apply a basis change: ``phase``, ``block`` (unitary in degenerate blocks) or ``nonunitary``."""
    n = vecs.shape[1]
    if mode == "phase":
        return vecs * np.exp(1j * rng.uniform(0, 2 * np.pi, size=n))
    if mode == "block":
        out = vecs.copy()
        for block in degenerate_blocks(eigvals):
            out[:, block] = vecs[:, block] @ _random_unitary(rng, len(block))
        return out
    if mode == "nonunitary":
        out = vecs.copy()
        out[:, int(rng.integers(n))] *= 1.5
        return out
    raise ValueError(mode)


def oracle_kernel_invariance(g: TextAttributedGraph, q: float = 0.25, d_mag: int = 32,
                             seed: int = 0, modes=("phase", "block", "nonunitary"),
                             tol: float = 1e-8) -> dict:
    """Kernel change under each basis perturbation; ``invariant`` iff max-abs delta <= tol."""
    from .bias import BiasConfig

    rng = np.random.default_rng(seed)
    lam, vecs = hermitian_eigendecomposition(magnetic_laplacian(g, q))
    params = init_bias_params(BiasConfig(n_layers=1, n_heads=1, mag_dim=d_mag), seed=seed)
    with torch.no_grad():
        phi = deepset_phi(torch.as_tensor(lam), params)
        ref = mag_kernel(vecs, phi)
        results = {}
        for mode in modes:
            delta = float((mag_kernel(perturb_basis(vecs, lam, mode, rng), phi) - ref).abs().max())
            results[mode] = {"max_abs_delta": delta, "invariant": delta <= tol}
    blocks = [b for b in degenerate_blocks(lam) if len(b) > 1]
    return {"check": "kernel_invariance", "degenerate_blocks": blocks, "tol": tol, **results}


def path_graph(n: int = 5) -> TextAttributedGraph:
    return make_graph([f"v{i}" for i in range(n)], [(i, i + 1) for i in range(n - 1)])


def complete_graph(n: int = 4) -> TextAttributedGraph:
    return make_graph([f"v{i}" for i in range(n)], [(u, v) for u in range(n) for v in range(n) if u != v])


# -- message-passing probe ---------------------------------------------------------

def node_attention(probs: torch.Tensor, node_index: np.ndarray, nodes: Sequence[int]) -> np.ndarray:
    """Aggregate token attention ``(H, T, T)`` to ``(H, n, n)`` over ``nodes``.

    Entry ``[h, a, b]`` is the mean attention weight over all token pairs
    (query in node ``nodes[a]``, key in node ``nodes[b]``).
    """
    p = probs.detach().cpu().numpy()
    out = np.zeros((p.shape[0], len(nodes), len(nodes)))
    for a, u in enumerate(nodes):
        rows = np.flatnonzero(node_index == u)
        for b, v in enumerate(nodes):
            cols = np.flatnonzero(node_index == v)
            out[:, a, b] = p[:, rows][:, :, cols].mean(axis=(1, 2))
    return out


def components_of(g: TextAttributedGraph, nodes: Sequence[int]) -> list[int]:
    """Undirected component id for each of ``nodes`` within the subgraph they induce."""
    keep = set(nodes)
    nbrs = undirected_neighbors(g)
    label = {}
    for s in nodes:
        if s in label:
            continue
        label[s] = s
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for w in nbrs[u]:
                if w in keep and w not in label:
                    label[w] = s
                    queue.append(w)
    return [label[v] for v in nodes]


def separation_statistic(node_attn: np.ndarray, comp: Sequence[int]) -> np.ndarray | None:
    """Per head: mean intra-component (u != v) minus mean cross-component attention."""
    comp = np.asarray(comp)
    same = comp[:, None] == comp[None, :]
    off = ~np.eye(len(comp), dtype=bool)
    intra, cross = same & off, ~same
    if not cross.any() or not intra.any():
        return None
    return node_attn[:, intra].mean(axis=1) - node_attn[:, cross].mean(axis=1)


def probe_message_passing(model: GtlmModel, g: TextAttributedGraph) -> dict:
    """Prefix-only node attention per layer/head and its component separation."""
    with torch.no_grad():
        _, layout, maps = forward(g, None, model, capture=True)
    prefix = list(range(1, g.num_nodes))
    comp = components_of(g, prefix)
    layers = []
    for probs in maps:
        attn = node_attention(probs, layout.node_index, prefix)
        sep = separation_statistic(attn, comp)
        layers.append({"node_attention": attn,
                       "separation": None if sep is None else sep.tolist()})
    return {"nodes": prefix, "labels": [g.nodes[i].raw_text for i in prefix],
            "components": comp, "layers": layers}


def mean_separation(model: GtlmModel, graphs: Sequence[TextAttributedGraph]) -> np.ndarray | None:
    """Per-(layer, head) separation averaged over graphs that have >= 2 components."""
    stats = []
    for g in graphs:
        rep = probe_message_passing(model, g)
        if any(layer["separation"] is None for layer in rep["layers"]):
            continue
        stats.append([layer["separation"] for layer in rep["layers"]])
    return np.mean(stats, axis=0) if stats else None


def format_attention_dump(rep: dict, precision: int = 3) -> str:
    """Line-oriented text of every node-aggregated attention matrix in a probe report."""
    lines = [f"nodes {' '.join(rep['labels'])}",
             f"components {' '.join(map(str, rep['components']))}"]
    for li, layer in enumerate(rep["layers"]):
        for h, mat in enumerate(layer["node_attention"]):
            sep = layer["separation"]
            lines.append(f"layer {li} head {h} separation "
                         + ("absent" if sep is None else f"{sep[h]:.{precision}f}"))
            for label, row in zip(rep["labels"], mat):
                lines.append(f"  {label:>4} " + " ".join(f"{x:.{precision}f}" for x in row))
    return "\n".join(lines) + "\n"


# -- full battery -------------------------------------------------------------------------

def verification_model(precision: int = 64, seed: int = 0, n_layers: int = 2, n_heads: int = 4,
                       spd_scale: float = 1.0) -> GtlmModel:
    """Small model with random (non-zero) biases, including the SPD table."""
    from .model import ModelConfig, init_model

    dtype = torch.float64 if precision == 64 else torch.float32
    cfg = ModelConfig.create(n_layers=n_layers, n_heads=n_heads, d_head=16, d_ffn=128)
    model = init_model(cfg, seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 7)
    with torch.no_grad():
        model.bias.spd_table.copy_(torch.randn(model.bias.spd_table.shape, generator=gen,
                                               dtype=torch.float64) * spd_scale)
    return model.to(dtype)


def run_battery(precision: int = 64, seed: int = 0, n_graphs: int = 50) -> list[dict]:
    from .model import collate, make_example

    model = verification_model(precision, seed)
    rng = np.random.default_rng(seed)
    reports = [check_backward_compat(model, 5, seed)]
    eq_graph = make_graph([_random_text(rng) for _ in range(6)],
                          [(0, 1), (1, 2), (2, 3), (3, 1), (4, 5), (5, 0), (2, 4)])
    reports.append(check_equivariance(model, eq_graph, 5, seed))
    reports.append(check_feature_oracles([random_graph(rng) for _ in range(n_graphs)]))
    for name, g in (("path", path_graph(5)), ("K4", complete_graph(4))):
        rep = oracle_kernel_invariance(g, seed=seed)
        rep["fixture"] = name
        rep["passed"] = (rep["phase"]["invariant"] and rep["block"]["invariant"]
                         and not rep["nonunitary"]["invariant"])
        reports.append(rep)
    if precision == 64:
        from .graph import append_question

        graphs = [append_question(eq_graph, "Which?", "abc"),
                  append_question(make_graph(["p", "q r", "s"], [(1, 0), (2, 1)]), "Who?", "q")]
        batch = collate([make_example(g, model.cfg) for g in graphs])
        reports.append(check_gradients(model, batch, 200, seed=seed))
    return reports


def format_report(reports: Sequence[dict]) -> str:
    """One ``key=value`` line per check; nested coordinate tables are summarized."""
    lines = []
    for rep in reports:
        fields = [f"check={rep['check']}", f"passed={str(rep.get('passed')).lower()}"]
        for key, val in rep.items():
            if key in ("check", "passed", "coords"):
                continue
            if isinstance(val, float):
                val = f"{val:.3e}"
            elif isinstance(val, list) and val and isinstance(val[0], float):
                val = ",".join(f"{v:.3e}" for v in val)
            elif isinstance(val, dict):
                val = ",".join(f"{k}:{v:.3e}" if isinstance(v, float) else f"{k}:{v}" for k, v in val.items())
            fields.append(f"{key}={val}")
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"
