"""Computation graphs, circuits, the weighted edge count and circuit files.

Edge names follow ``"src_kind.layer.index->dst_kind.layer.index"``, e.g.
``"embed.0.0->head.1.3"``. The embedding node sits at layer 0 and the logits
node at layer ``n_layers``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

DEFAULT_GRID: tuple[float, ...] = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
CIRCUIT_FORMAT = "mibkit-circuit/1"
_BUDGET_EPS = 1e-9


class GraphError(ValueError):
    pass


class CircuitFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    kind: str  # embed | head | mlp | logits
    layer: int
    index: int = 0

    @property
    def name(self) -> str:
        return f"{self.kind}.{self.layer}.{self.index}"

    @classmethod
    def parse(cls, name: str) -> "Node":
        try:
            kind, layer, index = name.split(".")
            return cls(kind, int(layer), int(index))
        except ValueError:
            raise GraphError(f"malformed node name {name!r}") from None

    def __str__(self):
        return self.name


def edge_name(u: Node, v: Node) -> str:
    return f"{u.name}->{v.name}"


def split_edge(name: str) -> tuple[str, str]:
    src, sep, dst = name.partition("->")
    if not sep:
        raise GraphError(f"malformed edge name {name!r}")
    return src, dst


class ComputationGraph:
    """All upstream-to-downstream edges a pre-norm residual transformer permits.

    Nodes are kept in execution order: embed, then per layer the heads followed
    by the MLP, then logits. A head at layer ``l`` reads every node of earlier
    layers; the MLP at ``l`` additionally reads that layer's heads.
    """

    def __init__(self, n_layers: int, n_heads: int, has_mlp: bool = True, d_model: int = 1):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.has_mlp = has_mlp
        self.d_model = d_model
        self.embed = Node("embed", 0, 0)
        self.logits = Node("logits", n_layers, 0)
        nodes = [self.embed]
        for layer in range(n_layers):
            nodes.extend(Node("head", layer, h) for h in range(n_heads))
            if has_mlp:
                nodes.append(Node("mlp", layer, 0))
        nodes.append(self.logits)
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.node_index = {n.name: i for i, n in enumerate(self.nodes)}
        self._by_name = {n.name: n for n in self.nodes}

        self._upstream: dict[Node, tuple[Node, ...]] = {}
        edges: list[tuple[Node, Node]] = []
        for i, v in enumerate(self.nodes):
            if v.kind == "embed":
                continue
            ups = tuple(u for u in self.nodes[:i] if self._feeds(u, v))
            self._upstream[v] = ups
            edges.extend((u, v) for u in ups)
        self.edges: tuple[tuple[Node, Node], ...] = tuple(edges)
        self.edge_names: tuple[str, ...] = tuple(edge_name(u, v) for u, v in edges)
        self.edge_index = {n: i for i, n in enumerate(self.edge_names)}
        self.readers: tuple[Node, ...] = tuple(n for n in self.nodes if n.kind != "embed")

    @classmethod
    def from_config(cls, config) -> "ComputationGraph":
        return cls(config.n_layers, config.n_heads, config.d_mlp > 0, config.d_model)

    @staticmethod
    def _feeds(u: Node, v: Node) -> bool:
        if u.kind == "logits":
            return False
        if v.kind == "logits" or u.kind == "embed":
            return True
        if u.layer < v.layer:
            return True
        return u.layer == v.layer and u.kind == "head" and v.kind == "mlp"

    @staticmethod
    def expected_edge_count(n_layers: int, n_heads: int, has_mlp: bool = True) -> int:
        """Closed-form edge count for the wiring above."""
        per_layer = n_heads + (1 if has_mlp else 0)
        total = 0
        for layer in range(n_layers):
            earlier = 1 + layer * per_layer
            total += n_heads * earlier
            if has_mlp:
                total += earlier + n_heads
        return total + 1 + n_layers * per_layer

    def __len__(self):
        return len(self.edges)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def node(self, name: str) -> Node:
        try:
            return self._by_name[name]
        except KeyError:
            raise GraphError(f"unknown node {name!r}") from None

    def upstream(self, v: Node) -> tuple[Node, ...]:
        return self._upstream.get(v, ())

    def in_edges(self, v: Node) -> list[str]:
        return [edge_name(u, v) for u in self.upstream(v)]

    def out_edges(self, u: Node) -> list[str]:
        return [n for n, (a, _) in zip(self.edge_names, self.edges) if a == u]

    def edge(self, name: str) -> tuple[Node, Node]:
        try:
            return self.edges[self.edge_index[name]]
        except KeyError:
            raise GraphError(f"unknown edge {name!r}") from None

    def check_edges(self, names: Iterable[str]) -> None:
        unknown = sorted(set(names) - set(self.edge_index))
        if unknown:
            raise GraphError(f"unknown edges: {unknown}")

    def is_acyclic(self) -> bool:
        return all(self.node_index[u.name] < self.node_index[v.name] for u, v in self.edges)

    def paths(self, src: Node | None = None, dst: Node | None = None) -> list[tuple[str, ...]]:
        """Every directed path from ``src`` (embed) to ``dst`` (logits) as edge-name tuples."""
        src = src or self.embed
        dst = dst or self.logits
        out: list[tuple[str, ...]] = []
        succ: dict[Node, list[Node]] = {}
        for u, v in self.edges:
            succ.setdefault(u, []).append(v)

        def walk(node, acc):
            if node == dst:
                out.append(tuple(acc))
                return
            for nxt in succ.get(node, []):
                acc.append(edge_name(node, nxt))
                walk(nxt, acc)
                acc.pop()

        walk(src, [])
        return out

    def shortest_path_length(self) -> int:
        """Edges on the shortest embed-to-logits path (1: the direct edge)."""
        return 1 if (self.embed, self.logits) in set(self.edges) else min(map(len, self.paths()))


@dataclass
class Circuit:
    """A subgraph given either by edge membership flags or by per-edge scores.

    ``neurons`` optionally restricts a node to a 1-based subset of its
    ``d_model`` neurons (the ``N_u`` intersection in the weighted count).
    """

    graph: ComputationGraph
    members: frozenset[str] | None = None
    scores: dict[str, float] | None = None
    neurons: dict[str, frozenset[int]] = field(default_factory=dict)

    def __post_init__(self):
        if (self.members is None) == (self.scores is None):
            raise GraphError("a circuit holds exactly one of membership flags or scores")
        names = self.members if self.members is not None else self.scores.keys()
        self.graph.check_edges(names)
        if self.members is not None:
            self.members = frozenset(self.members)
            sources = {split_edge(e)[0] for e in self.members}
            for node, subset in self.neurons.items():
                self.graph.node(node)
                if node not in sources:
                    raise GraphError(f"neuron subset on {node} which has no member outgoing edge")
                bad = [i for i in subset if not 1 <= i <= self.graph.d_model]
                if bad:
                    raise GraphError(f"neuron indices {sorted(bad)} outside 1..{self.graph.d_model}")
            self.neurons = {k: frozenset(v) for k, v in self.neurons.items()}
        elif self.neurons:
            raise GraphError("neuron subsets apply to membership circuits only")

    @classmethod
    def full(cls, graph: ComputationGraph) -> "Circuit":
        return cls(graph, members=frozenset(graph.edge_names))

    @classmethod
    def empty(cls, graph: ComputationGraph) -> "Circuit":
        return cls(graph, members=frozenset())

    @property
    def is_scored(self) -> bool:
        return self.scores is not None

    def contains(self, edge: str) -> bool:
        return edge in self.members

    def neuron_fraction(self, node: str) -> float:
        subset = self.neurons.get(node)
        return 1.0 if subset is None else len(subset) / self.graph.d_model

    def nodes(self) -> set[str]:
        out = set()
        for e in self.members:
            out.update(split_edge(e))
        return out

    def __len__(self):
        return len(self.members) if self.members is not None else len(self.scores)


def weighted_edge_count(circuit: Circuit) -> float:
    """Sum over member edges of the fraction of the source's neurons kept."""
    if circuit.members is None:
        raise GraphError("weighted edge count needs a membership circuit")
    return float(sum(circuit.neuron_fraction(split_edge(e)[0]) for e in sorted(circuit.members)))


def edge_percentage(circuit: Circuit) -> float:
    total = circuit.graph.n_edges
    if total == 0:
        raise GraphError("graph has no edges")
    return weighted_edge_count(circuit) / total


def budget_for(k: float, total: int) -> int:
    """floor(k * total); the epsilon absorbs representation error such as 0.29*100."""
    return int(math.floor(k * total + _BUDGET_EPS))


def rank_edges(scores: Mapping[str, float], absolute: bool = True) -> list[str]:
    """Edges by descending (|score| or score), ties by ascending edge name."""
    key = (lambda e: (-abs(scores[e]), e)) if absolute else (lambda e: (-scores[e], e))
    return sorted(scores, key=key)


@dataclass
class CircuitSeries:
    entries: list[tuple[float, Circuit]]

    def __post_init__(self):
        ks = [k for k, _ in self.entries]
        if ks != sorted(ks) or len(set(ks)) != len(ks):
            raise GraphError("series thresholds must be strictly increasing")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def grid(self) -> list[float]:
        return [k for k, _ in self.entries]

    def is_nested(self) -> bool:
        circuits = [c.members for _, c in self.entries]
        return all(a <= b for a, b in zip(circuits, circuits[1:]))

    def within_budget(self) -> bool:
        return all(edge_percentage(c) <= k + _BUDGET_EPS for k, c in self.entries)


def _scores_dict(scores) -> dict[str, float]:
    return dict(scores.scores) if hasattr(scores, "scores") else dict(scores)


def circuits_from_scores(scores, graph: ComputationGraph,
                         grid: Iterable[float] = DEFAULT_GRID,
                         absolute: bool = True) -> CircuitSeries:
    """Top-floor(k * |E|) edges for each k in ``grid``; nested by construction."""
    values = _scores_dict(scores)
    if not values:
        raise GraphError("empty score map")
    graph.check_edges(values)
    grid = sorted(float(k) for k in grid)
    if any(not 0 < k <= 1 for k in grid):
        raise GraphError(f"thresholds must lie in (0, 1], got {grid}")
    ranked = rank_edges(values, absolute)
    total = graph.n_edges
    entries = [(k, Circuit(graph, members=frozenset(ranked[:budget_for(k, total)]))) for k in grid]
    return CircuitSeries(entries)


def circuit_from_nodes(graph: ComputationGraph, nodes: Iterable[str]) -> Circuit:
    """Including a node means including all of its outgoing edges."""
    members: set[str] = set()
    for name in nodes:
        members.update(graph.out_edges(graph.node(name)))
    return Circuit(graph, members=frozenset(members))


# circuit files ----------------------------------------------------------------

def _format_k(k: float) -> str:
    return repr(float(k))


def circuit_to_document(circuit: Circuit, *, k: float | None = None, model: str = "",
                        task: str = "", provenance: Mapping | None = None) -> dict:
    doc = {"format": CIRCUIT_FORMAT, "model": model, "task": task}
    graph = circuit.graph
    if circuit.is_scored:
        doc["kind"] = "importances"
        doc["edges"] = {e: float(circuit.scores[e]) for e in graph.edge_names if e in circuit.scores}
    else:
        doc["kind"] = "binary"
        doc["k"] = k
        nodes = circuit.nodes()
        doc["nodes"] = {n.name: n.name in nodes for n in graph.nodes}
        doc["edges"] = {e: e in circuit.members for e in graph.edge_names}
        if circuit.neurons:
            doc["neurons"] = {n: sorted(s) for n, s in sorted(circuit.neurons.items())}
    doc["provenance"] = dict(provenance or {})
    return doc


def serialize_circuit(circuit_or_scores, path, graph: ComputationGraph | None = None, **meta) -> Path:
    if not isinstance(circuit_or_scores, Circuit):
        if graph is None:
            raise GraphError("graph required to serialize a bare score map")
        circuit_or_scores = Circuit(graph, scores=_scores_dict(circuit_or_scores))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = circuit_to_document(circuit_or_scores, **meta)
    path.write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n", encoding="utf-8")
    return path


def parse_circuit(path, graph: ComputationGraph) -> Circuit:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CircuitFormatError(f"{path}: invalid JSON ({exc})") from None
    return circuit_from_document(doc, graph, source=str(path))


def circuit_from_document(doc: Mapping, graph: ComputationGraph, source: str = "<doc>") -> Circuit:
    edges = doc.get("edges")
    if not isinstance(edges, Mapping) or not edges:
        raise CircuitFormatError(f"{source}: missing 'edges' mapping")
    unknown = sorted(set(edges) - set(graph.edge_index))
    if unknown:
        raise CircuitFormatError(f"{source}: unknown edge keys {unknown}")
    unknown_nodes = sorted(set(doc.get("nodes", {})) - set(graph.node_index))
    if unknown_nodes:
        raise CircuitFormatError(f"{source}: unknown node keys {unknown_nodes}")
    kinds = {"bool" if isinstance(v, bool) else "score" if isinstance(v, (int, float)) else "other"
             for v in edges.values()}
    if "other" in kinds:
        bad = sorted(k for k, v in edges.items() if not isinstance(v, (bool, int, float)))
        raise CircuitFormatError(f"{source}: values must be booleans or numbers (keys {bad})")
    if kinds == {"bool", "score"}:
        raise CircuitFormatError(f"{source}: mixed boolean and score values in one file")
    if kinds == {"bool"}:
        neurons = {n: frozenset(int(i) for i in idx) for n, idx in doc.get("neurons", {}).items()}
        try:
            return Circuit(graph, members=frozenset(e for e, v in edges.items() if v), neurons=neurons)
        except GraphError as exc:
            raise CircuitFormatError(f"{source}: {exc}") from None
    missing = sorted(set(graph.edge_names) - set(edges))
    if missing:
        raise CircuitFormatError(f"{source}: score file lacks edges {missing}")
    values = {e: float(v) for e, v in edges.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise CircuitFormatError(f"{source}: non-finite scores")
    return Circuit(graph, scores=values)


# leaderboard-style folder layout ------------------------------------------------

IMPORTANCE_FILE = "importances.json"


def binary_filename(k: float) -> str:
    return f"circuit_{_format_k(k)}.json"


def write_submission(root, model: str, task: str, *, scores=None, series: CircuitSeries | None = None,
                     graph: ComputationGraph | None = None, provenance: Mapping | None = None) -> list[Path]:
    """Write ``importances/<model>/<task>/`` (one score file) or ``binary/<model>/<task>/`` (one per k)."""
    root = Path(root)
    written = []
    if scores is not None:
        path = root / "importances" / model / task / IMPORTANCE_FILE
        written.append(serialize_circuit(scores, path, graph=graph, model=model, task=task,
                                         provenance=provenance))
    if series is not None:
        folder = root / "binary" / model / task
        for k, circuit in series:
            written.append(serialize_circuit(circuit, folder / binary_filename(k), k=k, model=model,
                                             task=task, provenance=provenance))
    return written


def load_submission(root, model: str, task: str, graph: ComputationGraph,
                    grid: Iterable[float] = DEFAULT_GRID, kind: str | None = None,
                    absolute: bool = True) -> CircuitSeries:
    """Load a submission folder as a circuit series over ``grid``.

    A score submission must hold exactly one file; a binary submission must
    hold one file per threshold.
    """
    root = Path(root)
    grid = sorted(float(k) for k in grid)
    imp = root / "importances" / model / task
    binary = root / "binary" / model / task
    if kind is None:
        kind = "importances" if imp.is_dir() else "binary" if binary.is_dir() else None
    if kind == "importances":
        files = sorted(p for p in imp.iterdir() if p.suffix == ".json") if imp.is_dir() else []
        if len(files) != 1:
            raise CircuitFormatError(
                f"{imp}: score submissions need exactly one file per model/task, found {len(files)}")
        circuit = parse_circuit(files[0], graph)
        if not circuit.is_scored:
            raise CircuitFormatError(f"{files[0]}: expected importance scores, found boolean flags")
        return circuits_from_scores(circuit.scores, graph, grid, absolute=absolute)
    if kind == "binary":
        entries = []
        present = {p.name for p in binary.iterdir()} if binary.is_dir() else set()
        for k in grid:
            name = binary_filename(k)
            if name not in present:
                raise CircuitFormatError(f"{binary}: missing circuit file for threshold k={k}")
            circuit = parse_circuit(binary / name, graph)
            if circuit.is_scored:
                raise CircuitFormatError(f"{binary / name}: expected boolean flags, found scores")
            entries.append((k, circuit))
        extra = sorted(present - {binary_filename(k) for k in grid})
        if extra:
            raise CircuitFormatError(f"{binary}: unexpected files {extra}")
        return CircuitSeries(entries)
    raise CircuitFormatError(f"no submission for {model}/{task} under {root}")


def random_circuit(graph: ComputationGraph, rng: np.random.Generator, p: float = 0.5,
                   neuron_p: float | None = None) -> Circuit:
    mask = rng.random(graph.n_edges) < p
    members = frozenset(e for e, m in zip(graph.edge_names, mask) if m)
    neurons = {}
    if neuron_p is not None:
        for src in sorted({split_edge(e)[0] for e in members}):
            if rng.random() < neuron_p:
                k = int(rng.integers(1, graph.d_model + 1))
                neurons[src] = frozenset(int(i) + 1 for i in rng.choice(graph.d_model, k, replace=False))
    return Circuit(graph, members=members, neurons=neurons)

