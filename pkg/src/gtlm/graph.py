"""Text-attributed graphs: validation, incidence lifting, ego sampling and I/O.

A graph is an ordered list of text-bearing nodes plus directed edges between
node indices. Node 0 is always the target node whose text is generated.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import encode

QA_SEPARATOR = "\n A: "


class GraphError(ValueError):
    """Raised when a graph violates its invariants."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class Violation:
    kind: str  # DuplicateEdge | DanglingEndpoint | EmptyText | MissingTarget | SelfLoop
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.detail}"


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


@dataclass(frozen=True)
class NodeRecord:
    node_id: str
    raw_text: str

    @property
    def text(self) -> list[int]:
        return encode(self.raw_text)


@dataclass(frozen=True)
class TextAttributedGraph:
    """Directed graph whose nodes carry text; node 0 is the target.

    ``question``/``label`` are set once :func:`append_question` has injected
    the QA template into the target text. ``base_text`` keeps the target text
    from before injection so records can be written back losslessly.
    """

    nodes: tuple[NodeRecord, ...]
    edges: tuple[tuple[int, int], ...] = ()
    question: str | None = None
    label: str | None = None
    base_text: str | None = None
    allow_self_loops: bool = False
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def target_index(self) -> int:
        return 0

    def adjacency(self) -> np.ndarray:
        """Dense 0/1 matrix with ``A[u, v] = 1`` for each edge ``u -> v``."""
        a = np.zeros((self.num_nodes, self.num_nodes))
        for u, v in self.edges:
            a[u, v] = 1.0
        return a

    def answer_span(self) -> tuple[int, int] | None:
        """Token span ``[start, stop)`` of the label inside the target text."""
        if self.label is None:
            return None
        n = len(self.nodes[0].text)
        return n - len(encode(self.label)), n


def make_graph(
    texts: Sequence[str],
    edges: Iterable[tuple[int, int]] = (),
    ids: Sequence[str] | None = None,
) -> TextAttributedGraph:
    """Convenience constructor; node ids default to the node index."""
    if ids is None:
        ids = [str(i) for i in range(len(texts))]
    nodes = tuple(NodeRecord(str(i), t) for i, t in zip(ids, texts))
    return TextAttributedGraph(nodes, tuple((int(u), int(v)) for u, v in edges))


def graph_violations(g: TextAttributedGraph) -> list[Violation]:
    out: list[Violation] = []
    n = g.num_nodes
    if n == 0:
        out.append(Violation("MissingTarget", "graph has no node 0"))
    for i, node in enumerate(g.nodes):
        if not node.raw_text:
            out.append(Violation("EmptyText", f"node {i} ({node.node_id!r})"))
    seen = set()
    for u, v in g.edges:
        if not (0 <= u < n and 0 <= v < n):
            out.append(Violation("DanglingEndpoint", f"edge ({u}, {v}) with {n} nodes"))
            continue
        if u == v and not g.allow_self_loops:
            out.append(Violation("SelfLoop", f"edge ({u}, {v})"))
        if (u, v) in seen:
            out.append(Violation("DuplicateEdge", f"edge ({u}, {v})"))
        seen.add((u, v))
    return out


def validate_graph(g: TextAttributedGraph) -> TextAttributedGraph:
    """Return ``g`` unchanged, or raise :class:`GraphError` listing every violation."""
    violations = graph_violations(g)
    if violations:
        raise GraphError(violations)
    return g


def to_incidence(g: TextAttributedGraph) -> TextAttributedGraph:
    """Lift every edge ``(u, v)`` into a node on the path ``u -> e -> v``.

    Original nodes keep their indices; edge-nodes are appended in edge order
    and carry the text ``"(u, v)"``.
    """
    validate_graph(g)
    n = g.num_nodes
    nodes = list(g.nodes)
    edges: list[tuple[int, int]] = []
    for k, (u, v) in enumerate(g.edges):
        e = n + k
        nodes.append(NodeRecord(f"e{k}", f"({u}, {v})"))
        edges += [(u, e), (e, v)]
    return replace(g, nodes=tuple(nodes), edges=tuple(edges))


def undirected_neighbors(g: TextAttributedGraph) -> list[set[int]]:
    nbrs: list[set[int]] = [set() for _ in range(g.num_nodes)]
    for u, v in g.edges:
        if u != v:
            nbrs[u].add(v)
            nbrs[v].add(u)
    return nbrs


def induced_subgraph(g: TextAttributedGraph, keep: Sequence[int]) -> TextAttributedGraph:
    """Subgraph on ``keep`` (in that order); ``keep[0]`` becomes the target."""
    index = {old: new for new, old in enumerate(keep)}
    edges = tuple((index[u], index[v]) for u, v in g.edges if u in index and v in index)
    nodes = tuple(g.nodes[i] for i in keep)
    return TextAttributedGraph(nodes, edges, allow_self_loops=g.allow_self_loops)


def sample_ego_subgraph(
    g: TextAttributedGraph,
    center: int,
    max_neighbors: int,
    hops: int = 2,
    seed: int = 0,
) -> TextAttributedGraph:
    """Closeness-first ego sample around ``center``.

    Rings of equal (undirected) hop distance are admitted whole while they
    fit; the first ring that does not fit is subsampled uniformly under
    ``seed``. All edges induced by the kept nodes are retained.
    """
    if not 0 <= center < g.num_nodes:
        raise GraphError([Violation("InvalidCenter", f"center {center} with {g.num_nodes} nodes")])
    if hops < 1:
        raise ValueError("hops must be >= 1")
    nbrs = undirected_neighbors(g)
    dist = {center: 0}
    frontier = deque([center])
    while frontier:
        u = frontier.popleft()
        if dist[u] == hops:
            continue
        for w in sorted(nbrs[u]):
            if w not in dist:
                dist[w] = dist[u] + 1
                frontier.append(w)

    rng = np.random.default_rng(seed)
    keep = [center]
    budget = max_neighbors
    for d in range(1, hops + 1):
        ring = sorted(v for v, dv in dist.items() if dv == d)
        if budget <= 0 or not ring:
            break
        if len(ring) > budget:
            ring = sorted(rng.choice(ring, size=budget, replace=False).tolist())
        keep += ring
        budget -= len(ring)
    return induced_subgraph(g, keep)


def qa_suffix(question: str, label: str = "") -> str:
    return f"\n\n{question}{QA_SEPARATOR}{label}"


def append_question(g: TextAttributedGraph, question: str, label: str) -> TextAttributedGraph:
    """Inject ``"\\n\\n{question}\\n A: {label}"`` at the end of the target text."""
    if not question:
        raise ValueError("EmptyQuestion: question must be non-empty")
    if not label:
        raise ValueError("EmptyQuestion: label must be non-empty")
    target = g.nodes[0]
    if g.question is not None or QA_SEPARATOR in target.raw_text:
        raise ValueError("target node already carries a question template")
    new_target = replace(target, raw_text=target.raw_text + qa_suffix(question, label))
    return replace(
        g,
        nodes=(new_target,) + g.nodes[1:],
        question=question,
        label=label,
        base_text=target.raw_text,
    )


def prompt_graph(g: TextAttributedGraph, question: str | None = None) -> TextAttributedGraph:
    """Strip the label (if any) so the target text ends with ``"\\n A: "``.

    Used for generation: the model continues the target text from there.
    """
    if g.question is not None:
        base, question = g.base_text, g.question
    else:
        if question is None:
            raise ValueError("graph has no question; pass one explicitly")
        base = g.nodes[0].raw_text
    target = replace(g.nodes[0], raw_text=base + qa_suffix(question))
    return replace(g, nodes=(target,) + g.nodes[1:], question=None, label=None, base_text=None)


# -- line-delimited record format ------------------------------------------------

def graph_to_record(g: TextAttributedGraph) -> dict:
    texts = [n.raw_text for n in g.nodes]
    if g.question is not None:
        texts[0] = g.base_text
    return {
        "nodes": [{"id": n.node_id, "text": t} for n, t in zip(g.nodes, texts)],
        "edges": [[u, v] for u, v in g.edges],
        "question": g.question,
        "label": g.label,
        **({"meta": g.meta} if g.meta else {}),
    }


def graph_from_record(rec: dict) -> TextAttributedGraph:
    nodes = tuple(NodeRecord(str(n["id"]), n["text"]) for n in rec["nodes"])
    edges = tuple((int(u), int(v)) for u, v in rec["edges"])
    g = validate_graph(TextAttributedGraph(nodes, edges, meta=dict(rec.get("meta") or {})))
    if rec.get("question") is not None:
        g = append_question(g, rec["question"], rec["label"])
    return g


def save_graphs(path: str | Path, graphs: Iterable[TextAttributedGraph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g), ensure_ascii=False) + "\n")


def load_graphs(path: str | Path, fmt: str = "standard") -> list[TextAttributedGraph]:
    """Read one graph per line; ``fmt="incidence"`` lifts each graph on load."""
    if fmt not in ("standard", "incidence"):
        raise ValueError(f"unknown format {fmt!r}")
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                g = graph_from_record(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(lineno, str(exc)) from exc
            if fmt == "incidence":
                g = to_incidence(g)
            graphs.append(g)
    return graphs

