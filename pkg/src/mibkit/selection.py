"""Stage-2: turn edge scores into a circuit under an edge budget.

Connectivity means one-hop support in both directions: a selected edge (u, v)
needs a selected edge into u unless u is the source, and a selected edge out
of v unless v is the sink.
"""

from __future__ import annotations

import heapq
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import Circuit, ComputationGraph, rank_edges, split_edge

if os.environ.get("MIBKIT_PURE_PYTHON"):
    from . import _kernels_py as _kernels
    KERNEL = "python"
else:
    try:
        from . import _kernels  # type: ignore[attr-defined]
        KERNEL = "cython"
    except ImportError:
        from . import _kernels_py as _kernels
        KERNEL = "python"

INT_TOL = 1e-6
MAX_ILP_VARIABLES = 10_000
MAX_BRUTE_EDGES = 20


class SelectionError(ValueError):
    pass


class InfeasibleError(SelectionError):
    pass


@dataclass(frozen=True)
class EdgeSet:
    """A small DAG view: edge names with endpoints, plus the source and sink node names."""

    names: tuple[str, ...]
    src: tuple[str, ...]
    dst: tuple[str, ...]
    source: str
    sink: str

    @classmethod
    def from_graph(cls, graph: ComputationGraph) -> "EdgeSet":
        names = graph.edge_names
        return cls(names, tuple(split_edge(e)[0] for e in names), tuple(split_edge(e)[1] for e in names),
                   graph.embed.name, graph.logits.name)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]], source: str, sink: str) -> "EdgeSet":
        names = tuple(f"{u}->{v}" for u, v in pairs)
        return cls(names, tuple(u for u, _ in pairs), tuple(v for _, v in pairs), source, sink)

    def __len__(self):
        return len(self.names)

    def in_edges(self, node: str) -> list[int]:
        return [i for i, d in enumerate(self.dst) if d == node]

    def out_edges(self, node: str) -> list[int]:
        return [i for i, s in enumerate(self.src) if s == node]

    def shortest_path(self) -> int | None:
        """Edges on the shortest source-to-sink path (None if unreachable)."""
        dist = {self.source: 0}
        frontier = [self.source]
        while frontier:
            nxt = []
            for node in frontier:
                for i in self.out_edges(node):
                    d = self.dst[i]
                    if d not in dist:
                        dist[d] = dist[node] + 1
                        nxt.append(d)
            frontier = nxt
        return dist.get(self.sink)

    def feasible(self, selected: set[int]) -> bool:
        for i in selected:
            if self.src[i] != self.source and not any(j in selected for j in self.in_edges(self.src[i])):
                return False
            if self.dst[i] != self.sink and not any(j in selected for j in self.out_edges(self.dst[i])):
                return False
        return True


@dataclass
class SelectionProblem:
    scores: Mapping[str, float]
    budget: int
    edges: EdgeSet
    connectivity: bool = True
    rho: float | None = None
    absolute: bool = True

    def __post_init__(self):
        self.scores = dict(getattr(self.scores, "scores", self.scores))
        missing = set(self.edges.names) - set(self.scores)
        if missing:
            raise SelectionError(f"scores missing for edges {sorted(missing)}")
        if not 0 <= self.budget <= len(self.edges):
            raise SelectionError(f"budget {self.budget} outside [0, {len(self.edges)}]")
        if self.rho is not None and not 0.0 <= self.rho <= 1.0:
            raise SelectionError("rho must lie in [0, 1]")

    @classmethod
    def for_graph(cls, scores, graph: ComputationGraph, budget: int, **kw) -> "SelectionProblem":
        return cls(scores, budget, EdgeSet.from_graph(graph), **kw)

    def costs(self) -> np.ndarray:
        s = np.array([self.scores[e] for e in self.edges.names], dtype=np.float64)
        return np.abs(s) if self.absolute else s

    def n_positive_required(self) -> int:
        return 0 if self.rho is None else round_half_up(self.rho * self.budget)

    def positive(self) -> np.ndarray:
        return np.array([self.scores[e] > 0 for e in self.edges.names])


@dataclass
class Selection:
    edges: frozenset[str]
    objective: float
    info: dict = field(default_factory=dict)

    def circuit(self, graph: ComputationGraph) -> Circuit:
        return Circuit(graph, members=self.edges)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _objective(problem: SelectionProblem, chosen: Sequence[str]) -> float:
    costs = dict(zip(problem.edges.names, problem.costs()))
    return float(sum(costs[e] for e in sorted(chosen, key=problem.edges.names.index)))


def select_topk_abs(problem: SelectionProblem) -> Selection:
    chosen = rank_edges({e: problem.scores[e] for e in problem.edges.names})[:problem.budget]
    return Selection(frozenset(chosen), _objective(problem, chosen), {"method": "topk-abs"})


def select_pnr(problem: SelectionProblem, rho: float | None = None) -> Selection:
    """Take round(rho * B) top positive edges first, then fill by |score|."""
    rho = problem.rho if rho is None else rho
    if rho is None or not 0.0 <= rho <= 1.0:
        raise SelectionError("rho must lie in [0, 1]")
    want = round_half_up(rho * problem.budget)
    scores = {e: problem.scores[e] for e in problem.edges.names}
    positive = [e for e in rank_edges(scores, absolute=False) if scores[e] > 0]
    chosen = positive[:want]
    shortfall = want - len(chosen)
    taken = set(chosen)
    rest = [e for e in rank_edges(scores) if e not in taken]
    chosen += rest[:problem.budget - len(chosen)]
    info = {"method": "pnr", "rho": rho, "positive_target": want, "shortfall": shortfall}
    return Selection(frozenset(chosen), _objective(problem, chosen), info)


# linear programming -----------------------------------------------------------------

def lp_max(c: np.ndarray, A: np.ndarray, b: np.ndarray, tol: float = 1e-9):
    """max c.x subject to A x <= b, x >= 0 by a two-phase tableau simplex with Bland's rule.

    Returns (status, x, value) with status in {"optimal", "infeasible", "unbounded"}.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    m, n = A.shape
    neg = b < 0
    n_art = int(neg.sum())
    width = n + m + n_art
    T = np.zeros((m, width + 1))
    T[:, :n] = A
    T[np.arange(m), n + np.arange(m)] = 1.0
    T[:, -1] = b
    T[neg] *= -1.0
    basis = list(n + np.arange(m))
    for k, i in enumerate(np.flatnonzero(neg)):
        T[i, n + m + k] = 1.0
        basis[i] = n + m + k

    def pivot(r, col):
        T[r] /= T[r, col]
        others = np.flatnonzero(np.abs(T[:, col]) > 0)
        for i in others:
            if i != r:
                T[i] -= T[i, col] * T[r]
        basis[r] = col

    def solve(cost, allowed):
        while True:
            cb = cost[basis]
            reduced = cost[:width] - cb @ T[:, :width]
            enter = next((j for j in range(width) if allowed[j] and reduced[j] > tol), None)
            if enter is None:
                return "optimal"
            col = T[:, enter]
            rows = np.flatnonzero(col > tol)
            if len(rows) == 0:
                return "unbounded"
            ratios = T[rows, -1] / col[rows]
            best = ratios.min()
            ties = rows[ratios <= best + tol * max(1.0, abs(best))]
            leave = min(ties, key=lambda i: basis[i])
            pivot(leave, enter)

    allowed = np.ones(width, dtype=bool)
    if n_art:
        phase1 = np.zeros(width)
        phase1[n + m:] = -1.0
        solve(phase1, allowed)
        if T[[i for i in range(m) if basis[i] >= n + m], -1].sum() > 1e-7:
            return "infeasible", None, None
        for i in range(m):
            if basis[i] >= n + m:
                cand = [j for j in range(n + m) if abs(T[i, j]) > tol]
                if cand:
                    pivot(i, cand[0])
        allowed[n + m:] = False
        keep = [i for i in range(m) if basis[i] < n + m]
        T = T[keep]
        basis = [basis[i] for i in keep]
        m = len(keep)
    phase2 = np.zeros(width)
    phase2[:n] = c
    status = solve(phase2, allowed)
    if status != "optimal":
        return status, None, None
    x = np.zeros(width)
    x[basis] = T[:, -1]
    x = x[:n]
    return "optimal", x, float(c @ x)


def _ilp_constraints(problem: SelectionProblem):
    es = problem.edges
    E = len(es)
    rows, rhs = [], []
    rows.append(np.ones(E))
    rhs.append(problem.budget)
    for i in range(E):
        if es.src[i] != es.source:
            r = np.zeros(E)
            r[i] = 1.0
            r[es.in_edges(es.src[i])] -= 1.0
            rows.append(r)
            rhs.append(0.0)
        if es.dst[i] != es.sink:
            r = np.zeros(E)
            r[i] = 1.0
            r[es.out_edges(es.dst[i])] -= 1.0
            rows.append(r)
            rhs.append(0.0)
    need = problem.n_positive_required()
    if need:
        rows.append(-problem.positive().astype(np.float64))
        rhs.append(-float(need))
    for i in range(E):
        r = np.zeros(E)
        r[i] = 1.0
        rows.append(r)
        rhs.append(1.0)
    return np.array(rows), np.array(rhs, dtype=np.float64)


def _check_feasible_budget(problem: SelectionProblem):
    if problem.budget == 0:
        return
    shortest = problem.edges.shortest_path()
    if shortest is None:
        raise InfeasibleError("no source-to-sink path exists; only the empty circuit is feasible")
    if problem.budget < shortest:
        raise InfeasibleError(f"budget {problem.budget} admits no connected path; minimal feasible budget is "
                              f"{shortest}")


def select_ilp(problem: SelectionProblem, max_nodes: int = 200_000) -> Selection:
    """Exact best-bound branch-and-bound over LP relaxations."""
    if not problem.connectivity:
        return select_topk_abs(problem) if problem.rho is None else _unconstrained(problem)
    E = len(problem.edges)
    if E > MAX_ILP_VARIABLES:
        raise SelectionError(f"{E} variables exceed the exact-solve limit of {MAX_ILP_VARIABLES}")
    _check_feasible_budget(problem)
    need = problem.n_positive_required()
    if need > problem.positive().sum():
        raise InfeasibleError(f"{need} positive edges required but only {int(problem.positive().sum())} exist")
    c = problem.costs()
    A, b = _ilp_constraints(problem)

    def relax(fixed: dict[int, int]):
        free = [i for i in range(E) if i not in fixed]
        x_fix = np.zeros(E)
        for i, v in fixed.items():
            x_fix[i] = v
        b_eff = b - A @ x_fix
        if not free:
            ok = np.all(b_eff >= -1e-9)
            return (float(c @ x_fix), x_fix) if ok else None
        status, xf, val = lp_max(c[free], A[:, free], b_eff)
        if status != "optimal":
            return None
        x = x_fix.copy()
        x[free] = xf
        return float(c @ x_fix) + val, x

    best_val, best_x = 0.0 if need == 0 else -math.inf, np.zeros(E)
    counter = 0
    root = relax({})
    heap = []
    if root is not None:
        heap.append((-root[0], counter, {}, root[1]))
    nodes = 0
    while heap:
        neg_bound, _, fixed, x = heapq.heappop(heap)
        bound = -neg_bound
        scale = max(1.0, abs(bound))
        if bound <= best_val + 1e-9 * scale:
            break
        nodes += 1
        if nodes > max_nodes:
            raise SelectionError(f"branch-and-bound exceeded {max_nodes} nodes")
        frac = np.abs(x - np.round(x))
        j = int(np.argmax(frac))
        if frac[j] <= INT_TOL:
            val = float(c @ np.round(x))
            if val > best_val:
                best_val, best_x = val, np.round(x)
            continue
        for v in (1, 0):
            child = dict(fixed)
            child[j] = v
            r = relax(child)
            if r is not None and r[0] > best_val + 1e-9 * max(1.0, abs(r[0])):
                counter += 1
                heapq.heappush(heap, (-r[0], counter, child, r[1]))
    if best_val == -math.inf:
        raise InfeasibleError(f"no connected circuit within budget {problem.budget} has {need} positive edges")
    chosen = [problem.edges.names[i] for i in range(E) if best_x[i] > 0.5]
    return Selection(frozenset(chosen), _objective(problem, chosen), {"method": "ilp", "nodes": nodes})


def _unconstrained(problem: SelectionProblem) -> Selection:
    """Budgeted maximization with only the positive-count constraint (separable)."""
    need = problem.n_positive_required()
    c = problem.costs()
    pos = problem.positive()
    names = problem.edges.names
    order_pos = sorted((i for i in range(len(c)) if pos[i]), key=lambda i: (-c[i], names[i]))
    chosen = order_pos[:need]
    rest = sorted((i for i in range(len(c)) if i not in chosen and c[i] > 0), key=lambda i: (-c[i], names[i]))
    chosen += rest[:problem.budget - len(chosen)]
    sel = [names[i] for i in chosen]
    return Selection(frozenset(sel), _objective(problem, sel), {"method": "ilp-unconstrained"})


def brute_force_select(problem: SelectionProblem) -> Selection:
    E = len(problem.edges)
    if E > MAX_BRUTE_EDGES:
        raise SelectionError(f"brute force limited to {MAX_BRUTE_EDGES} edges, got {E}")
    es = problem.edges
    need_in = np.zeros(E, dtype=np.uint8)
    need_out = np.zeros(E, dtype=np.uint8)
    in_req = np.zeros(E, dtype=np.int64)
    out_req = np.zeros(E, dtype=np.int64)
    if problem.connectivity:
        for i in range(E):
            if es.src[i] != es.source:
                need_in[i] = 1
                in_req[i] = sum(1 << j for j in es.in_edges(es.src[i]))
            if es.dst[i] != es.sink:
                need_out[i] = 1
                out_req[i] = sum(1 << j for j in es.out_edges(es.dst[i]))
    pos_mask = sum(1 << i for i in range(E) if problem.positive()[i])
    mask, obj = _kernels.enumerate_best(problem.costs(), need_in, in_req, need_out, out_req,
                                        problem.budget, pos_mask, problem.n_positive_required())
    if mask < 0:
        raise InfeasibleError("no feasible subset")
    chosen = [es.names[i] for i in range(E) if (mask >> i) & 1]
    return Selection(frozenset(chosen), float(obj), {"method": "brute-force", "kernel": KERNEL})


def select(problem: SelectionProblem, method: str = "topk") -> Selection:
    if method == "topk":
        return select_topk_abs(problem)
    if method == "pnr":
        return select_pnr(problem)
    if method == "ilp":
        return select_ilp(problem)
    if method == "brute":
        return brute_force_select(problem)
    raise SelectionError(f"unknown selection method {method!r}; expected topk, pnr, ilp or brute")


def random_problem(rng: np.random.Generator, n_edges: int = 15, n_nodes: int = 7, **kw) -> SelectionProblem:
    """Random DAG with a source and sink plus random signed scores (for oracle checks)."""
    nodes = [f"n{i}" for i in range(n_nodes)]
    pairs = [(nodes[0], nodes[-1])]
    candidates = [(nodes[i], nodes[j]) for i in range(n_nodes) for j in range(i + 1, n_nodes)
                  if (i, j) != (0, n_nodes - 1)]
    pick = rng.choice(len(candidates), size=min(n_edges - 1, len(candidates)), replace=False)
    pairs += [candidates[i] for i in sorted(pick)]
    es = EdgeSet.from_pairs(pairs, nodes[0], nodes[-1])
    scores = dict(zip(es.names, rng.normal(size=len(es)) * rng.choice([0.1, 1.0, 10.0], size=len(es))))
    budget = int(kw.pop("budget", rng.integers(0, len(es) + 1)))
    return SelectionProblem(scores, budget, es, **kw)
