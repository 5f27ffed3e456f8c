"""Synthetic question-answering datasets over text-attributed graphs.

Every generated item is a :class:`TextAttributedGraph` whose target node is a
prompt node carrying the question; the prompt node has directed edges to the
entities the question mentions. Splits draw from disjoint seed streams.
"""
from __future__ import annotations

import itertools
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .graph import (
    NodeRecord,
    TextAttributedGraph,
    append_question,
    save_graphs,
    validate_graph,
)

SPLITS = ("train", "val", "test")
YES_NO = ("Yes", "No")


class UnknownTask(ValueError):
    pass


class RejectionBudgetExceeded(RuntimeError):
    pass


class AmbiguousAnchor(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task: str
    n_min: int = 5
    n_max: int = 15
    counts: dict = field(default_factory=lambda: {"train": 100, "val": 20, "test": 50})
    seed: int = 0
    answer_format: str = "text"  # "yes_no" | "integer" | "text" | "list"
    params: dict = field(default_factory=dict)

    def split_rngs(self) -> dict[str, np.random.Generator]:
        children = np.random.SeedSequence(self.seed).spawn(len(SPLITS))
        return {s: np.random.default_rng(c) for s, c in zip(SPLITS, children)}


Dataset = dict  # split name -> list[TextAttributedGraph]


def choices_for(g: TextAttributedGraph) -> tuple[str, ...] | None:
    return tuple(g.meta["choices"]) if g.meta.get("choices") else None


def with_prompt(
    prefix_texts: Sequence[str],
    edges: Sequence[tuple[int, int]],
    prompt_text: str,
    linked: Sequence[int],
    question: str,
    label: str,
    meta: dict | None = None,
    ids: Sequence[str] | None = None,
) -> TextAttributedGraph:
    """Assemble a QA graph: node 0 is the prompt, prefix node ``i`` becomes ``i + 1``.

    ``edges`` and ``linked`` use prefix indices; the prompt gets an edge to each
    linked node.
    """
    ids = list(ids) if ids is not None else [f"n{i}" for i in range(len(prefix_texts))]
    nodes = (NodeRecord("prompt", prompt_text),) + tuple(
        NodeRecord(i, t) for i, t in zip(ids, prefix_texts)
    )
    all_edges = tuple((u + 1, v + 1) for u, v in edges) + tuple((0, x + 1) for x in linked)
    g = TextAttributedGraph(nodes, all_edges, meta=dict(meta or {}))
    return append_question(validate_graph(g), question, label)


# -- small exact algorithms used by the generators -------------------------------------

def _adjacency_sets(n, edges, directed):
    out = [set() for _ in range(n)]
    for u, v in edges:
        out[u].add(v)
        if not directed:
            out[v].add(u)
    return out


def _bfs(adj, src):
    dist = {src: 0}
    frontier = [src]
    while frontier:
        nxt = []
        for u in frontier:
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    nxt.append(w)
        frontier = nxt
    return dist


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        self.parent[self.find(a)] = self.find(b)


def _random_oriented_graph(rng, n, p):
    """Erdos-Renyi skeleton with each edge given a random direction."""
    edges = []
    for u, v in itertools.combinations(range(n), 2):
        if rng.random() < p:
            edges.append((u, v) if rng.random() < 0.5 else (v, u))
    return edges


# -- GraphQA-style tasks -----------------------------------------------------------

GRAPHQA_TASKS = (
    "node_count", "edge_count", "cycle_check", "triangle_counting", "node_degree",
    "connected_nodes", "reachability", "edge_existence", "shortest_path",
)


def graphqa_question(task: str, n: int, edges, x: int | None = None, y: int | None = None):
    """Question text, label and linked nodes for one abstract-graph task."""
    und = _adjacency_sets(n, edges, directed=False)
    if task == "node_count":
        return "How many nodes are in this graph?", str(n), []
    if task == "edge_count":
        return "How many edges are in this graph?", str(len(edges)), []
    if task == "cycle_check":
        uf, cyclic = UnionFind(n), False
        for u, v in edges:
            if uf.find(u) == uf.find(v):
                cyclic = True
            uf.union(u, v)
        return "Is there a cycle in this graph?", "Yes" if cyclic else "No", []
    if task == "triangle_counting":
        count = sum(1 for a, b, c in itertools.combinations(range(n), 3)
                    if b in und[a] and c in und[a] and c in und[b])
        return "How many triangles are in this graph?", str(count), []
    if task == "node_degree":
        return f"What is the degree of node {x}?", str(len(und[x])), [x]
    if task == "connected_nodes":
        nb = sorted(und[x])
        return (f"Which nodes are connected to node {x}?",
                ", ".join(map(str, nb)) if nb else "None", [x])
    if task == "reachability":
        reach = y in _bfs(_adjacency_sets(n, edges, directed=True), x)
        return f"Is node {y} reachable from node {x}?", "Yes" if reach else "No", [x, y]
    if task == "edge_existence":
        return (f"Is there an edge between node {x} and node {y}?",
                "Yes" if y in und[x] else "No", [x, y])
    if task == "shortest_path":
        d = _bfs(und, x).get(y)
        return (f"What is the length of the shortest path from node {x} to node {y}?",
                "No path" if d is None else str(d), [x, y])
    raise UnknownTask(task)


def gen_graphqa(spec: TaskSpec) -> Dataset:
    if spec.task not in GRAPHQA_TASKS:
        raise UnknownTask(spec.task)
    p = spec.params.get("edge_prob", 0.3)
    fmt = {"cycle_check": "yes_no", "reachability": "yes_no", "edge_existence": "yes_no",
           "connected_nodes": "list"}.get(spec.task, "integer")
    out = {}
    for split, rng in spec.split_rngs().items():
        items = []
        for _ in range(spec.counts.get(split, 0)):
            n = int(rng.integers(spec.n_min, spec.n_max + 1))
            edges = _random_oriented_graph(rng, n, p)
            x, y = (int(v) for v in rng.choice(n, size=2, replace=False))
            q, label, linked = graphqa_question(spec.task, n, edges, x, y)
            meta = {"task": spec.task, "choices": YES_NO if fmt == "yes_no" else None}
            items.append(with_prompt([str(i) for i in range(n)], edges, "Graph query",
                                     linked, q, label, meta, ids=[str(i) for i in range(n)]))
        out[split] = items
    return out


# -- connected-component probe ----------------------------------------------------------

def _random_connected_component(rng, nodes, extra_p):
    """Random spanning tree over ``nodes`` plus extra chords; undirected as edge pairs."""
    order = list(rng.permutation(nodes))
    und = set()
    for i in range(1, len(order)):
        j = int(rng.integers(0, i))
        und.add(tuple(sorted((int(order[i]), int(order[j])))))
    for a, b in itertools.combinations(sorted(nodes), 2):
        if (a, b) not in und and rng.random() < extra_p:
            und.add((a, b))
    return [e for a, b in sorted(und) for e in ((a, b), (b, a))]


def component_probe_item(rng, n: int, n_components: int, positive: bool, extra_p: float = 0.2):
    """One probe instance with ``n`` lettered nodes in ``n_components`` components."""
    if n_components < 2 or n < 2 * n_components:
        raise ValueError("need >= 2 components of >= 2 nodes each")
    # random composition of n into parts >= 2
    cuts = sorted(rng.choice(np.arange(1, n - 2 * n_components + n_components),
                             size=n_components - 1, replace=False))
    sizes = np.diff([0, *cuts, n - 2 * n_components + n_components]) + 1
    perm = rng.permutation(n)
    comps, start = [], 0
    for s in sizes:
        comps.append(sorted(int(v) for v in perm[start:start + s]))
        start += s
    edges = []
    for c in comps:
        edges += _random_connected_component(rng, c, extra_p)
    letters = list(rng.choice(list(string.ascii_uppercase), size=n, replace=False))
    if positive:
        c = comps[int(rng.integers(len(comps)))]
        x, y = (int(v) for v in rng.choice(c, size=2, replace=False))
    else:
        ci, cj = rng.choice(len(comps), size=2, replace=False)
        x, y = int(rng.choice(comps[ci])), int(rng.choice(comps[cj]))
    question = f"Are the nodes {letters[x]} and {letters[y]} connected? [Yes/No]"
    meta = {"task": "component_probe", "choices": YES_NO,
            "components": [[v + 1 for v in c] for c in comps]}
    return with_prompt(letters, edges, "Connectivity query", [x, y], question,
                       "Yes" if positive else "No", meta)


def gen_component_probe(spec: TaskSpec) -> Dataset:
    """Balanced same-component queries; even-indexed items are positive."""
    k = spec.params.get("n_components", 2)
    extra_p = spec.params.get("extra_edge_prob", 0.2)
    out = {}
    for split, rng in spec.split_rngs().items():
        count = spec.counts.get(split, 0)
        labels = np.array([i % 2 == 0 for i in range(count)])
        rng.shuffle(labels)
        out[split] = [
            component_probe_item(rng, int(rng.integers(spec.n_min, spec.n_max + 1)), k,
                                 bool(pos), extra_p)
            for pos in labels
        ]
    return out


# -- directed reachability (orientation-only signal) --------------------------------------

def directed_pair_item(rng, n: int, positive: bool, gap: int = 2):
    """Random tree with random edge directions; ask whether ``x`` reaches ``y``.

    ``x`` and ``y`` are ``gap`` hops apart and the answer is Yes iff every edge on
    the tree path points from ``x`` towards ``y``. Only the source ``x`` is linked,
    by an edge *into* the prompt node, so walks from the prompt go nowhere and the
    undirected structure is independent of the label: only edge orientation (as
    seen from the prompt) carries the answer.
    """
    parent = {}
    order = [int(v) for v in rng.permutation(n)]
    for i in range(1, n):
        parent[order[i]] = order[int(rng.integers(0, i))]
    und = [set() for _ in range(n)]
    for c, p in parent.items():
        und[c].add(p)
        und[p].add(c)
    pairs = []
    for s in range(n):
        for t, d in _bfs(und, s).items():
            if d == gap:
                pairs.append((s, t))
    if not pairs:
        return None
    x, y = pairs[int(rng.integers(len(pairs)))]
    path = _tree_path(und, x, y)
    if positive:
        flips = [False] * gap
    else:
        while True:
            flips = [bool(b) for b in rng.integers(0, 2, size=gap)]
            if any(flips):
                break
    path_index = {frozenset(e): k for k, e in enumerate(zip(path, path[1:]))}
    edges = []
    for c, p in sorted(parent.items()):
        k = path_index.get(frozenset((c, p)))
        if k is None:
            edges.append((c, p) if rng.random() < 0.5 else (p, c))
        else:
            u, v = path[k], path[k + 1]
            edges.append((v, u) if flips[k] else (u, v))
    letters = list(rng.choice(list(string.ascii_uppercase), size=n, replace=False))
    question = f"Is there a directed path from {letters[x]} to {letters[y]}? [Yes/No]"
    nodes = (NodeRecord("prompt", "Direction query"),) + tuple(NodeRecord(f"n{i}", t) for i, t in enumerate(letters))
    all_edges = tuple((u + 1, v + 1) for u, v in edges) + ((x + 1, 0),)
    g = TextAttributedGraph(nodes, all_edges, meta={"task": "directed_reachability", "choices": YES_NO})
    return append_question(validate_graph(g), question, "Yes" if positive else "No")


def _tree_path(und, x, y):
    prev = {x: None}
    frontier = [x]
    while frontier:
        nxt = []
        for u in frontier:
            for w in und[u]:
                if w not in prev:
                    prev[w] = u
                    nxt.append(w)
        frontier = nxt
    path = [y]
    while path[-1] != x:
        path.append(prev[path[-1]])
    return path[::-1]


def gen_directed_reachability(spec: TaskSpec) -> Dataset:
    gap = spec.params.get("gap", 2)
    out = {}
    for split, rng in spec.split_rngs().items():
        count = spec.counts.get(split, 0)
        labels = np.array([i % 2 == 0 for i in range(count)])
        rng.shuffle(labels)
        items = []
        for pos in labels:
            item = None
            while item is None:
                item = directed_pair_item(rng, int(rng.integers(spec.n_min, spec.n_max + 1)),
                                          bool(pos), gap)
            items.append(item)
        out[split] = items
    return out


# -- family tree --------------------------------------------------------------------------

MALE = ["James", "John", "Robert", "Michael", "William", "David", "Richard", "Joseph",
        "Thomas", "Charles", "Daniel", "Paul", "Mark", "George", "Henry", "Peter"]
FEMALE = ["Mary", "Patricia", "Jennifer", "Linda", "Elizabeth", "Barbara", "Susan",
          "Jessica", "Sarah", "Karen", "Nancy", "Lisa", "Emma", "Olivia", "Grace", "Alice"]
SURNAMES = ["Smith", "Johnson", "Brown", "Taylor", "Miller", "Wilson", "Moore", "Clark",
            "Lewis", "Walker", "Hall", "Young", "King", "Wright", "Green", "Baker"]
COLORS = ["red", "blue", "green", "yellow", "purple", "orange", "black", "white", "teal", "pink"]
FOODS = ["pizza", "sushi", "pasta", "tacos", "curry", "salad", "steak", "ramen", "paella", "soup"]
CITIES = ["Paris", "Tokyo", "Lima", "Oslo", "Cairo", "Rome", "Sydney", "Toronto", "Seoul", "Lisbon"]
ATTRIBUTES = {"favorite color": "color", "favorite food": "food",
              "favorite city": "city", "birth year": "born"}

PERSON_RE = re.compile(
    r"Name: (?P<first>\w+) (?P<last>\w+)\. Gender: (?P<gender>\w+)\. Born: (?P<born>\d+)\. "
    r"Favorite color: (?P<color>\w+)\. Favorite food: (?P<food>\w+)\. Favorite city: (?P<city>\w+)\."
)


def person_text(p: dict) -> str:
    return (f"Name: {p['first']} {p['last']}. Gender: {p['gender']}. Born: {p['born']}. "
            f"Favorite color: {p['color']}. Favorite food: {p['food']}. Favorite city: {p['city']}.")


def _new_person(rng, gender, last, born):
    first = str(rng.choice(MALE if gender == "male" else FEMALE))
    return {"first": first, "last": last, "gender": gender, "born": int(born),
            "color": str(rng.choice(COLORS)), "food": str(rng.choice(FOODS)),
            "city": str(rng.choice(CITIES))}


def build_family(rng, generations: int = 3, max_children: int = 4, marry_p: float = 0.85):
    """People plus ``spouse`` pairs and ``(parent, child)`` pairs."""
    if generations < 2:
        raise ValueError("need at least two generations")
    last = str(rng.choice(SURNAMES))
    born = int(rng.integers(1900, 1921))
    people = [_new_person(rng, "male", last, born),
              _new_person(rng, "female", last, born + int(rng.integers(-4, 5)))]
    spouses = [(0, 1)]
    children = []
    couples = [(0, 1)]
    for gen in range(1, generations):
        next_couples = []
        for dad, mom in couples:
            for _ in range(int(rng.integers(1, max_children + 1))):
                gender = "male" if rng.random() < 0.5 else "female"
                b = people[mom]["born"] + int(rng.integers(20, 36))
                kid = len(people)
                people.append(_new_person(rng, gender, people[dad]["last"], b))
                children += [(dad, kid), (mom, kid)]
                if gen < generations - 1 and rng.random() < marry_p:
                    other = "female" if gender == "male" else "male"
                    sp = len(people)
                    people.append(_new_person(rng, other, str(rng.choice(SURNAMES)),
                                              b + int(rng.integers(-4, 5))))
                    spouses.append((kid, sp))
                    next_couples.append((kid, sp) if gender == "male" else (sp, kid))
        couples = next_couples
    return people, spouses, children


def _ordinal(k: int) -> str:
    return {1: "", 2: "2nd ", 3: "3rd "}.get(k, f"{k}th ")


def family_relatives(people, spouses, children, anchor: int, relation: str) -> list[int]:
    """Relatives of ``anchor`` sorted by birth year, ties by index."""
    kids = {}
    parents = {}
    for p, c in children:
        kids.setdefault(p, []).append(c)
        parents.setdefault(c, []).append(p)
    key = lambda i: (people[i]["born"], i)  # noqa: E731
    if relation == "spouse":
        return sorted([b for a, b in spouses if a == anchor] + [a for a, b in spouses if b == anchor], key=key)
    if relation in ("father", "mother"):
        g = "male" if relation == "father" else "female"
        return [p for p in parents.get(anchor, []) if people[p]["gender"] == g]
    base, _, _ = relation.partition(":")
    if base in ("son", "daughter", "child"):
        pool = kids.get(anchor, [])
    elif base in ("grandson", "granddaughter", "grandchild"):
        pool = [g for c in kids.get(anchor, []) for g in kids.get(c, [])]
    else:
        raise ValueError(relation)
    if base in ("son", "grandson"):
        pool = [i for i in pool if people[i]["gender"] == "male"]
    elif base in ("daughter", "granddaughter"):
        pool = [i for i in pool if people[i]["gender"] == "female"]
    return sorted(set(pool), key=key)


def family_question(people, spouses, children, anchor: int, relation: str, k: int, attribute: str):
    """Question and answer; raises :class:`AmbiguousAnchor` for non-unique names."""
    name = (people[anchor]["first"], people[anchor]["last"])
    if sum((p["first"], p["last"]) == name for p in people) > 1:
        raise AmbiguousAnchor(f"{name[0]} {name[1]} is not unique")
    rel = family_relatives(people, spouses, children, anchor, relation)
    if len(rel) < k:
        return None
    target = rel[k - 1]
    if relation in ("spouse", "father", "mother"):
        phrase = relation
    else:
        phrase = f"{_ordinal(k)}oldest {relation}"
    q = f"What is the {attribute} of {name[0]} {name[1]}'s {phrase}?"
    return q, str(people[target][ATTRIBUTES[attribute]])


FAMILY_RELATIONS = ("spouse", "father", "mother", "son", "daughter", "child",
                    "grandson", "granddaughter", "grandchild")


def family_tree_item(rng, generations: int = 3, max_tries: int = 200):
    people, spouses, children = build_family(rng, generations)
    for _ in range(max_tries):
        anchor = int(rng.integers(len(people)))
        relation = str(rng.choice(FAMILY_RELATIONS))
        k = 1 if relation in ("spouse", "father", "mother") else int(rng.integers(1, 4))
        attribute = str(rng.choice(list(ATTRIBUTES)))
        try:
            qa = family_question(people, spouses, children, anchor, relation, k, attribute)
        except AmbiguousAnchor:
            continue
        if qa is None:
            continue
        edges = [e for a, b in spouses for e in ((a, b), (b, a))] + list(children)
        meta = {"task": "family_tree"}
        return with_prompt([person_text(p) for p in people], edges, "Family tree query",
                           [anchor], qa[0], qa[1], meta, ids=[f"p{i:03d}" for i in range(len(people))])
    return None


def gen_family_tree(spec: TaskSpec) -> Dataset:
    generations = spec.params.get("generations", 3)
    out = {}
    for split, rng in spec.split_rngs().items():
        items = []
        while len(items) < spec.counts.get(split, 0):
            item = family_tree_item(rng, generations)
            if item is not None:
                items.append(item)
        out[split] = items
    return out


# -- corporate knowledge graph ---------------------------------------------------------

PROJECT_NAMES = ["Alpha", "Beta", "Gamma", "Delta", "Epsilon", "Zeta", "Eta", "Theta",
                 "Iota", "Kappa", "Lambda", "Omicron", "Sigma", "Tau", "Omega"]
RESOURCE_NAMES = ["Database", "Server", "Cluster", "Repository", "Bucket", "Gateway",
                  "Ledger", "Dashboard", "Vault", "Queue", "Cache", "Pipeline", "Archive"]


def build_company(rng, n: int, geo_p: float = 0.5):
    """Typed nodes and edges (person 55%, project 20%, resource 25%)."""
    n_person = int(round(0.55 * n))
    n_project = int(round(0.20 * n))
    n_resource = n - n_person - n_project
    full_names = [f"{f} {l}" for f in MALE + FEMALE for l in SURNAMES]
    names = [str(s) for s in rng.choice(full_names, size=n_person, replace=False)]
    projects = [f"Project {s}" for s in rng.choice(PROJECT_NAMES, size=n_project, replace=False)]
    res_pool = [f"{r} {i}" for r in RESOURCE_NAMES for i in range(1, 10)]
    resources = [str(s) for s in rng.choice(res_pool, size=n_resource, replace=False)]
    nodes = ([("person", s) for s in names] + [("project", s) for s in projects]
             + [("resource", s) for s in resources])
    person_ids = list(range(n_person))
    project_ids = list(range(n_person, n_person + n_project))
    resource_ids = list(range(n_person + n_project, n))

    def popular(pool, count):
        w = (1 - geo_p) ** np.arange(len(pool))
        w /= w.sum()
        count = min(count, len(pool))
        return [pool[i] for i in rng.choice(len(pool), size=count, replace=False, p=w)]

    edges = []
    for i in person_ids[1:]:
        edges.append((i, int(rng.integers(0, i))))  # REPORTS_TO
    for i in person_ids:
        edges += [(i, p) for p in popular(project_ids, int(rng.geometric(geo_p)) - 1)]
        edges += [(i, r) for r in popular(resource_ids, int(rng.geometric(geo_p)) - 1)]
    for p in project_ids:
        edges += [(p, r) for r in popular(resource_ids, int(rng.geometric(geo_p)) - 1)]
    return nodes, edges


def kg_text(kind: str, name: str) -> str:
    return f"{kind.capitalize()}: {name}"


def kg_relations(nodes, edges):
    kinds = [k for k, _ in nodes]
    rel = {"boss": {}, "works_on": {}, "requires": {}, "access": {}}
    for u, v in edges:
        pair = (kinds[u], kinds[v])
        key = {("person", "person"): "boss", ("person", "project"): "works_on",
               ("project", "resource"): "requires", ("person", "resource"): "access"}[pair]
        rel[key].setdefault(u, set()).add(v)
    return rel


def kg_question(rng, nodes, edges):
    """Draw one yes/no question; returns ``(question, label, linked nodes)``."""
    rel = kg_relations(nodes, edges)
    kinds = [k for k, _ in nodes]
    people = [i for i, k in enumerate(kinds) if k == "person"]
    projects = [i for i, k in enumerate(kinds) if k == "project"]
    resources = [i for i, k in enumerate(kinds) if k == "resource"]
    name = lambda i: nodes[i][1]  # noqa: E731
    boss = {u: next(iter(v)) for u, v in rel["boss"].items()}

    def chain(x):
        out = []
        while x in boss:
            x = boss[x]
            out.append(x)
        return out

    kind = str(rng.choice(["ceo", "reports", "all_access", "team_access"]))
    if kind == "ceo":
        x = int(rng.choice(people))
        return f"Is {name(x)} the CEO (i.e., has no boss)?", x not in boss, [x]
    if kind == "reports":
        x, y = (int(v) for v in rng.choice(people, size=2, replace=False))
        return f"Does {name(x)} report to {name(y)}, directly or indirectly?", y in chain(x), [x, y]
    if kind == "all_access" and projects:
        p = int(rng.choice(projects))
        workers = [w for w in people if p in rel["works_on"].get(w, set())]
        needed = rel["requires"].get(p, set())
        ok = all(r in rel["access"].get(w, set()) for w in workers for r in needed)
        q = f"Are all resources required by {name(p)} accessible by the people working on it?"
        return q, ok, [p]
    x = int(rng.choice(people))
    r = int(rng.choice(resources))
    team = [w for w in people if w == x or x in chain(w)]
    ok = any(r in rel["access"].get(w, set()) for w in team)
    q = (f"Can someone in {name(x)}'s team ({name(x)} or anyone reporting to them, "
         f"directly or indirectly) access {name(r)}?")
    return q, ok, [x, r]


def kgqa_items(rng, n: int, per_graph: int = 6, geo_p: float = 0.5, budget: int = 400):
    """``per_graph`` questions on one company graph, exactly half Yes (rejection sampled)."""
    nodes, edges = build_company(rng, n, geo_p)
    want = {True: per_graph // 2, False: per_graph - per_graph // 2}
    seen, picked = set(), []
    for _ in range(budget):
        q, label, linked = kg_question(rng, nodes, edges)
        if want[label] == 0 or q in seen:
            continue
        seen.add(q)
        want[label] -= 1
        picked.append((q, label, linked))
        if len(picked) == per_graph:
            break
    else:
        raise RejectionBudgetExceeded(f"could not balance {per_graph} questions in {budget} draws")
    texts = [kg_text(k, s) for k, s in nodes]
    return [
        with_prompt(texts, edges, "Company knowledge graph query", linked, q,
                    "Yes" if label else "No", {"task": "kgqa", "choices": YES_NO},
                    ids=[f"k{i:03d}" for i in range(n)])
        for q, label, linked in picked
    ]


def gen_kgqa(spec: TaskSpec) -> Dataset:
    if not (10 <= spec.n_min <= spec.n_max <= 200):
        raise ValueError("node-count range must lie within [10, 200]")
    per_graph = spec.params.get("questions_per_graph", 6)
    geo_p = spec.params.get("geometric_p", 0.5)
    out = {}
    for split, rng in spec.split_rngs().items():
        items = []
        for _ in range(spec.counts.get(split, 0)):
            for _attempt in range(20):
                try:
                    items += kgqa_items(rng, int(rng.integers(spec.n_min, spec.n_max + 1)),
                                        per_graph, geo_p)
                    break
                except RejectionBudgetExceeded:
                    continue
            else:
                raise RejectionBudgetExceeded("no balanced graph after 20 attempts")
        out[split] = items
    return out


# -- registry, scaling and evaluation ----------------------------------------------------

DEFAULT_SPECS: dict[str, TaskSpec] = {
    "family_tree": TaskSpec("family_tree", counts={"train": 3500, "val": 200, "test": 1000},
                            answer_format="text"),
    "kgqa": TaskSpec("kgqa", 30, 50, counts={"train": 500, "val": 30, "test": 150},
                     answer_format="yes_no"),
    "component_probe": TaskSpec("component_probe", 8, 14,
                                counts={"train": 2000, "val": 200, "test": 400},
                                answer_format="yes_no"),
    "directed_reachability": TaskSpec("directed_reachability", 8, 12,
                                      counts={"train": 2000, "val": 200, "test": 400},
                                      answer_format="yes_no"),
    **{t: TaskSpec(t, 5, 15, counts={"train": 1000, "val": 100, "test": 500},
                   answer_format="yes_no" if t in ("cycle_check", "reachability", "edge_existence")
                   else "integer")
       for t in GRAPHQA_TASKS},
}

GENERATORS: dict[str, Callable[[TaskSpec], Dataset]] = {
    "family_tree": gen_family_tree,
    "kgqa": gen_kgqa,
    "component_probe": gen_component_probe,
    "directed_reachability": gen_directed_reachability,
    **{t: gen_graphqa for t in GRAPHQA_TASKS},
}


def scaled_spec(task: str, scale: float = 1.0, seed: int = 0, **overrides) -> TaskSpec:
    if task not in DEFAULT_SPECS:
        raise UnknownTask(task)
    base = DEFAULT_SPECS[task]
    counts = {k: max(1, int(round(v * scale))) for k, v in base.counts.items()}
    fields = dict(task=task, n_min=base.n_min, n_max=base.n_max, counts=counts, seed=seed,
                  answer_format=base.answer_format, params=dict(base.params))
    fields.update(overrides)
    return TaskSpec(**fields)


def generate_dataset(spec: TaskSpec) -> Dataset:
    if spec.task not in GENERATORS:
        raise UnknownTask(spec.task)
    return GENERATORS[spec.task](spec)


def write_dataset(out_dir: str | Path, spec: TaskSpec, data: Dataset) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, items in data.items():
        paths[split] = out_dir / f"{spec.task}_{split}.jsonl"
        save_graphs(paths[split], items)
    return paths


def normalize_answer(s: str) -> str:
    return " ".join(s.split()).casefold()


def evaluate_accuracy(model, dataset: Sequence[TextAttributedGraph], choices=None,
                      max_new_tokens: int = 24, predict: Callable | None = None):
    """Exact-match accuracy of greedy answers after whitespace/case normalization.

    ``predict(graph) -> str`` overrides decoding (useful for baselines).
    Yes/no items are decoded with their answer choices unless ``choices`` is given.
    """
    from .model import generate

    records = []
    for g in dataset:
        if predict is not None:
            answer = predict(g)
        else:
            opts = choices if choices is not None else choices_for(g)
            answer = generate(model, g, max_new_tokens, choices=opts)
        records.append({"gold": g.label, "prediction": answer,
                        "correct": normalize_answer(answer) == normalize_answer(g.label)})
    acc = float(np.mean([r["correct"] for r in records])) if records else 0.0
    return acc, records
