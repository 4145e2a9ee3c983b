"""Stage-1 scoring of graph components.

Every gradient score has the form  delta . gradient, where delta is the
change of an upstream contribution under the ablation source and the gradient
is of the metric m = logit(y) - logit(y') (summed over a chunk, so each
instance keeps its own gradient) with respect to a reader's input. Chunk sums
are reduced in chunk order and divided by the dataset size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .ablation import AblationSpec
from .autodiff import Tensor
from .graph import ComputationGraph, GraphError, Node, edge_name, split_edge
from .model import EdgeGates, PatchPlan, Transformer
from .optim import Adam
from .parallel import map_chunks
from .tasks import EncodedDataset

DEFAULT_IG_STEPS = 32
DEFAULT_EXACT_BUDGET = 5_000_000


class AttributionError(RuntimeError):
    pass


@dataclass
class AttributionScores:
    scores: dict[str, float]
    provenance: dict = field(default_factory=dict)
    level: str = "edge"
    filtered: frozenset[str] = frozenset()

    def validate(self, graph: ComputationGraph) -> "AttributionScores":
        known = graph.edge_index if self.level == "edge" else graph.node_index
        unknown = sorted(set(self.scores) - set(known))
        if unknown:
            raise GraphError(f"scores reference unknown {self.level}s {unknown}")
        bad = sorted(k for k, v in self.scores.items() if not math.isfinite(v))
        if bad:
            raise AttributionError(f"non-finite scores for {bad}")
        return self

    def array(self, graph: ComputationGraph) -> np.ndarray:
        return np.array([self.scores[e] for e in graph.edge_names])

    def to_edges(self, graph: ComputationGraph) -> "AttributionScores":
        """Broadcast node scores to every outgoing edge of the node."""
        if self.level == "edge":
            return self
        scores = {e: self.scores.get(split_edge(e)[0], 0.0) for e in graph.edge_names}
        return AttributionScores(scores, dict(self.provenance, broadcast="node->out-edges"), "edge")


def _metric_weights(answers, cf_answers, vocab_size) -> np.ndarray:
    w = np.zeros((len(answers), vocab_size))
    r = np.arange(len(answers))
    w[r, answers] += 1.0
    w[r, cf_answers] -= 1.0
    return w


def _backprop_metric(run, answers, cf_answers) -> np.ndarray:
    logits = run.logits
    w = _metric_weights(answers, cf_answers, logits.shape[-1])
    final = logits[:, -1]
    ad.backward((final * Tensor(w)).sum())
    return (final.data * w).sum(axis=1)


def _check_grad(g: np.ndarray, where: str, offset: int):
    ok = np.isfinite(g.reshape(len(g), -1)).all(axis=1)
    if not ok.all():
        raise AttributionError(f"non-finite gradient at {where} for instance {offset + int(np.argmin(ok))}")


def _provenance(method, ablation, data, **extra):
    return {"method": method, "ablation": ablation.kind, "dataset": data.fingerprint(), "n": len(data), **extra}


def _reduce(parts: Sequence[np.ndarray], n: int) -> np.ndarray:
    total = np.zeros_like(parts[0])
    for p in parts:
        total = total + p
    return total / n


def _edge_dict(graph, values) -> dict[str, float]:
    return {e: float(v) for e, v in zip(graph.edge_names, values)}


def _deltas(sources, clean_outputs) -> dict[str, np.ndarray]:
    return {u: sources[u] - z.data for u, z in clean_outputs.items()}


def _edge_products(graph: ComputationGraph, deltas, grads: Mapping[str, np.ndarray]) -> np.ndarray:
    """sum over instances, positions and width of delta_u * grad_v for each edge (u, v)."""
    out = np.zeros(graph.n_edges)
    for i, (u, v) in enumerate(graph.edges):
        g = grads.get(v.name)
        if g is not None:
            out[i] = np.sum(deltas[u.name] * g)
    return out


def _check_data(data: EncodedDataset):
    if len(data) == 0:
        raise AttributionError("empty dataset")


# EAP and integrated-gradient variants -------------------------------------------

def eap_scores(model: Transformer, data: EncodedDataset, ablation: AblationSpec | None = None) -> AttributionScores:
    ablation = ablation or AblationSpec()
    _check_data(data)
    graph = model.graph

    def part(s):
        run = model.run(data.tokens[s], track_grad=True)
        _backprop_metric(run, data.answers[s], data.cf_answers[s])
        grads = {}
        for v in graph.readers:
            g = run.inputs[v.name].grad
            _check_grad(g, v.name, s.start)
            grads[v.name] = g
        deltas = _deltas(ablation.source_outputs(model, data.cf_tokens[s]), run.outputs)
        return _edge_products(graph, deltas, grads)

    values = _reduce(map_chunks(part, len(data)), len(data))
    return AttributionScores(_edge_dict(graph, values), _provenance("eap", ablation, data))


def eap_ig_inputs_scores(model: Transformer, data: EncodedDataset, steps: int = DEFAULT_IG_STEPS,
                         ablation: AblationSpec | None = None) -> AttributionScores:
    """Gradients averaged along the straight line from clean to ablated embeddings."""
    if steps < 1:
        raise AttributionError("steps must be at least 1")
    ablation = ablation or AblationSpec()
    _check_data(data)
    graph = model.graph
    embed = graph.embed.name

    def part(s):
        tokens = data.tokens[s]
        clean = model.run(tokens)
        sources = ablation.source_outputs(model, data.cf_tokens[s])
        deltas = _deltas(sources, clean.outputs)
        e0 = clean.outputs[embed].data
        acc = {v.name: 0.0 for v in graph.readers}
        for j in range(steps):
            point = e0 + (j / steps) * deltas[embed]
            run = model.run(tokens, overrides={embed: Tensor(point, requires_grad=True)})
            _backprop_metric(run, data.answers[s], data.cf_answers[s])
            for v in graph.readers:
                g = run.inputs[v.name].grad
                _check_grad(g, v.name, s.start)
                acc[v.name] = acc[v.name] + g
        grads = {v: a / steps for v, a in acc.items()}
        return _edge_products(graph, deltas, grads)

    values = _reduce(map_chunks(part, len(data)), len(data))
    return AttributionScores(_edge_dict(graph, values), _provenance("eap-ig-inputs", ablation, data, steps=steps))


def ig_input_attributions(model: Transformer, data: EncodedDataset, steps: int = 256,
                          ablation: AblationSpec | None = None) -> np.ndarray:
    """Per-instance, per-position integrated-gradient attributions of the embedding.

    They sum (over positions) to approximately m(x) - m(x'), with m measured
    for the instance's own (y, y') on both inputs.
    """
    ablation = ablation or AblationSpec()
    embed = model.graph.embed.name

    def part(s):
        tokens = data.tokens[s]
        e0 = model.run(tokens).outputs[embed].data
        delta = ablation.source_outputs(model, data.cf_tokens[s])[embed] - e0
        acc = 0.0
        for j in range(steps):
            point = Tensor(e0 + (j / steps) * delta, requires_grad=True)
            run = model.run(tokens, overrides={embed: point})
            _backprop_metric(run, data.answers[s], data.cf_answers[s])
            acc = acc + point.grad
        return np.sum(-delta * acc / steps, axis=-1)

    return np.concatenate(map_chunks(part, len(data)))


def eap_ig_acts_scores(model: Transformer, data: EncodedDataset, steps: int = DEFAULT_IG_STEPS,
                       ablation: AblationSpec | None = None) -> AttributionScores:
    """Gradients averaged while one upstream node's output moves from clean to ablated."""
    if steps < 1:
        raise AttributionError("steps must be at least 1")
    ablation = ablation or AblationSpec()
    _check_data(data)
    graph = model.graph
    succ: dict[str, list[Node]] = {}
    for u, v in graph.edges:
        succ.setdefault(u.name, []).append(v)

    def part(s):
        tokens = data.tokens[s]
        clean = model.run(tokens)
        deltas = _deltas(ablation.source_outputs(model, data.cf_tokens[s]), clean.outputs)
        out = np.zeros(graph.n_edges)
        for u in graph.nodes:
            if u.name not in succ:
                continue
            z0 = clean.outputs[u.name].data
            acc = {v.name: 0.0 for v in succ[u.name]}
            for j in range(steps):
                point = Tensor(z0 + (j / steps) * deltas[u.name], requires_grad=True)
                run = model.run(tokens, overrides={u.name: point}, base=clean)
                _backprop_metric(run, data.answers[s], data.cf_answers[s])
                for v in succ[u.name]:
                    g = run.inputs[v.name].grad
                    _check_grad(g, v.name, s.start)
                    acc[v.name] = acc[v.name] + g
            for v in succ[u.name]:
                out[graph.edge_index[edge_name(u, v)]] = np.sum(deltas[u.name] * (acc[v.name] / steps))
        return out

    values = _reduce(map_chunks(part, len(data)), len(data))
    return AttributionScores(_edge_dict(graph, values), _provenance("eap-ig-acts", ablation, data, steps=steps))


# exact patching -------------------------------------------------------------------

def exact_edge_patch_scores(model: Transformer, data: EncodedDataset, ablation: AblationSpec | None = None,
                            budget: int = DEFAULT_EXACT_BUDGET) -> AttributionScores:
    """Mean change of m when exactly one edge is patched from the ablation source."""
    ablation = ablation or AblationSpec()
    _check_data(data)
    graph = model.graph
    if graph.n_edges * len(data) > budget:
        raise AttributionError(
            f"exact patching needs {graph.n_edges} x {len(data)} evaluations, above the budget of {budget}; "
            f"sub-sample the dataset")

    def part(s):
        tokens = data.tokens[s]
        clean = model.run(tokens)
        w = _metric_weights(data.answers[s], data.cf_answers[s], model.config.vocab_size)
        m0 = (clean.logits.data[:, -1] * w).sum(axis=1)
        sources = ablation.source_outputs(model, data.cf_tokens[s])
        out = np.zeros(graph.n_edges)
        for i, e in enumerate(graph.edge_names):
            run = model.run(tokens, patches=ablation.plan([e], sources), base=clean)
            out[i] = np.sum((run.logits.data[:, -1] * w).sum(axis=1) - m0)
        return out

    values = _reduce(map_chunks(part, len(data)), len(data))
    return AttributionScores(_edge_dict(graph, values), _provenance("eactp", ablation, data))


# node attribution --------------------------------------------------------------------

def node_attribution_scores(model: Transformer, data: EncodedDataset, ablation: AblationSpec | None = None,
                            ig_steps: int | None = None) -> AttributionScores:
    """(z'_u - z_u) . dm/dz_u per node; with ``ig_steps`` the gradient is path-averaged."""
    ablation = ablation or AblationSpec()
    _check_data(data)
    graph = model.graph
    senders = [n for n in graph.nodes if n.kind != "logits"]
    if ig_steps is not None and ig_steps < 1:
        raise AttributionError("ig_steps must be at least 1")

    def part(s):
        tokens = data.tokens[s]
        out = np.zeros(len(senders))
        if ig_steps is None:
            run = model.run(tokens, track_grad=True)
            _backprop_metric(run, data.answers[s], data.cf_answers[s])
            deltas = _deltas(ablation.source_outputs(model, data.cf_tokens[s]), run.outputs)
            for i, u in enumerate(senders):
                g = run.outputs[u.name].grad
                _check_grad(g, u.name, s.start)
                out[i] = np.sum(deltas[u.name] * g)
            return out
        clean = model.run(tokens)
        deltas = _deltas(ablation.source_outputs(model, data.cf_tokens[s]), clean.outputs)
        for i, u in enumerate(senders):
            z0 = clean.outputs[u.name].data
            acc = 0.0
            for j in range(ig_steps):
                point = Tensor(z0 + (j / ig_steps) * deltas[u.name], requires_grad=True)
                run = model.run(tokens, overrides={u.name: point}, base=clean)
                _backprop_metric(run, data.answers[s], data.cf_answers[s])
                _check_grad(point.grad, u.name, s.start)
                acc = acc + point.grad
            out[i] = np.sum(deltas[u.name] * (acc / ig_steps))
        return out

    values = _reduce(map_chunks(part, len(data)), len(data))
    method = "nap" if ig_steps is None else "nap-ig"
    extra = {} if ig_steps is None else {"steps": ig_steps}
    return AttributionScores({u.name: float(v) for u, v in zip(senders, values)},
                             _provenance(method, ablation, data, **extra), level="node")


# bootstrap ---------------------------------------------------------------------------

def bootstrap_filter(score_fn: Callable, data, resamples: int = 50, tau: float = 0.95,
                     seed: int = 0) -> AttributionScores:
    """Zero out edges whose majority sign appears in fewer than ``tau`` of the resamples.

    ``score_fn(dataset)`` returns AttributionScores (or a plain mapping);
    ``data`` must support ``len`` and ``subset(indices)``.
    """
    if resamples < 2:
        raise AttributionError("bootstrap needs at least 2 resamples")
    if not 0.5 < tau <= 1.0:
        raise AttributionError("tau must lie in (0.5, 1]")
    full = score_fn(data)
    full_scores = dict(getattr(full, "scores", full))
    names = list(full_scores)
    rng = np.random.default_rng(seed)
    n = len(data)
    signs = np.zeros((resamples, len(names)), dtype=np.int8)
    for r in range(resamples):
        idx = rng.integers(n, size=n)
        res = score_fn(data.subset(idx))
        res = dict(getattr(res, "scores", res))
        signs[r] = np.sign([res[e] for e in names])
    counts = np.stack([(signs == k).sum(axis=0) for k in (-1, 0, 1)])
    consistency = counts.max(axis=0) / resamples
    keep = consistency >= tau
    scores = {e: (full_scores[e] if k else 0.0) for e, k in zip(names, keep)}
    filtered = frozenset(e for e, k in zip(names, keep) if not k)
    prov = dict(getattr(full, "provenance", {}), bootstrap={"resamples": resamples, "tau": tau, "seed": seed,
                                                            "filtered": len(filtered)})
    return AttributionScores(scores, prov, getattr(full, "level", "edge"), filtered)


# ensembles ------------------------------------------------------------------------------

def normalize(scores: AttributionScores) -> AttributionScores:
    peak = max((abs(v) for v in scores.scores.values()), default=0.0)
    scale = 1.0 / peak if peak > 0 else 0.0
    return AttributionScores({e: v * scale for e, v in scores.scores.items()},
                             dict(scores.provenance, normalized="max-abs"), scores.level)


def ensemble_parallel(score_sets: Sequence[AttributionScores], merge: str = "mean",
                      weights: Sequence[float] | None = None) -> AttributionScores:
    if len(score_sets) < 2:
        raise AttributionError("parallel ensembling needs at least two score sets")
    keys = set(score_sets[0].scores)
    for s in score_sets[1:]:
        if set(s.scores) != keys:
            raise AttributionError(f"score sets disagree on edges: {sorted(keys ^ set(s.scores))}")
    names = sorted(keys)
    mat = np.array([[normalize(s).scores[e] for e in names] for s in score_sets])
    if merge == "mean":
        merged = mat.mean(axis=0)
    elif merge == "weighted":
        if weights is None or len(weights) != len(score_sets):
            raise AttributionError("weighted merge needs one weight per score set")
        w = np.asarray(weights, dtype=np.float64)
        merged = (w[:, None] * mat).sum(axis=0) / w.sum()
    elif merge == "max":
        merged = mat.max(axis=0)
    elif merge == "min":
        merged = mat.min(axis=0)
    else:
        raise AttributionError(f"unknown merge {merge!r}; expected mean, weighted, max or min")
    prov = {"method": f"parallel-{merge}", "members": [s.provenance.get("method", "?") for s in score_sets]}
    return AttributionScores(dict(zip(names, map(float, merged))), prov, score_sets[0].level)


@dataclass
class PruneConfig:
    steps: int = 200
    lr: float = 0.1
    sparsity: float = 0.02
    mode: str = "lagrangian"  # lagrangian | budget
    target: float = 0.1  # kept-edge fraction for budget mode
    init_range: tuple[float, float] = (-3.0, 3.0)
    warm_start: bool = True
    temperature: float = 1.0
    batch_size: int = 128
    seed: int = 0


@dataclass
class PruneResult:
    scores: AttributionScores
    losses: list[float]
    log_alpha: np.ndarray


def initial_log_alpha(init: AttributionScores | None, graph: ComputationGraph, cfg: PruneConfig) -> np.ndarray:
    lo, hi = cfg.init_range
    if not cfg.warm_start or init is None:
        return np.full(graph.n_edges, (lo + hi) / 2)
    missing = set(graph.edge_names) - set(init.scores)
    if missing:
        raise AttributionError(f"initial scores miss edges {sorted(missing)}")
    mag = np.abs(init.array(graph))
    peak = mag.max()
    frac = mag / peak if peak > 0 else np.zeros_like(mag)
    return lo + (hi - lo) * frac


def prune_edges(init: AttributionScores | None, model: Transformer, data: EncodedDataset,
                cfg: PruneConfig | None = None, ablation: AblationSpec | None = None) -> PruneResult:
    """Learn sigmoid edge gates minimizing KL(full || gated) plus a sparsity term."""
    cfg = cfg or PruneConfig()
    ablation = ablation or AblationSpec()
    if cfg.mode not in {"lagrangian", "budget"}:
        raise AttributionError(f"unknown sparsity mode {cfg.mode!r}")
    graph = model.graph
    rng = np.random.default_rng(cfg.seed)
    idx = np.sort(rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False))
    batch = data.subset(idx)
    sources = ablation.source_outputs(model, batch.cf_tokens)
    full = model.run(batch.tokens).logits.data[:, -1]
    log_p = full - full.max(axis=-1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)

    log_alpha = Tensor(initial_log_alpha(init, graph, cfg), requires_grad=True)
    opt = Adam({"log_alpha": log_alpha}, lr=cfg.lr)
    losses = []
    for step in range(cfg.steps + 1):
        gates_all = ad.sigmoid(log_alpha * (1.0 / cfg.temperature))
        gates = {e: gates_all[i] for i, e in enumerate(graph.edge_names)}
        run = model.run(batch.tokens, gates=EdgeGates(gates, sources))
        log_q = ad.log_softmax(run.logits[:, -1])
        kl = (Tensor(p) * (Tensor(log_p) - log_q)).sum() * (1.0 / len(batch))
        density = gates_all.mean()
        if cfg.mode == "lagrangian":
            penalty = density * cfg.sparsity
        else:
            excess = ad.relu(density - cfg.target)
            penalty = excess * excess * cfg.sparsity
        loss = kl + penalty
        value = loss.item()
        if not math.isfinite(value):
            raise AttributionError(f"edge pruning diverged at step {step}")
        losses.append(value)
        if step == cfg.steps:
            break
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        log_alpha.data = np.clip(log_alpha.data, -30.0, 30.0)
    final = 1.0 / (1.0 + np.exp(-log_alpha.data / cfg.temperature))
    prov = {"method": "edge-pruning", "ablation": ablation.kind, "dataset": data.fingerprint(),
            "steps": cfg.steps, "warm_start": bool(cfg.warm_start and init is not None), "mode": cfg.mode,
            "sparsity": cfg.sparsity, "final_loss": losses[-1]}
    return PruneResult(AttributionScores(_edge_dict(graph, final), prov), losses, log_alpha.data.copy())


def ensemble_sequential(init_scores: AttributionScores, model: Transformer, data: EncodedDataset,
                        cfg: PruneConfig | None = None, ablation: AblationSpec | None = None) -> AttributionScores:
    return prune_edges(init_scores, model, data, cfg, ablation).scores


def ensemble_hybrid(model: Transformer, data: EncodedDataset, ablation: AblationSpec | None = None,
                    ig_steps: int = DEFAULT_IG_STEPS, prune: PruneConfig | None = None,
                    sequential: bool = True, log: Callable[[str], None] | None = None) -> AttributionScores:
    """Unweighted mean of EAP, EAP-IG-inputs, EAP-IG-activations and (optionally) the sequential ensemble.

    Gate values only carry magnitude, while the patching estimates are signed
    (an edge the behaviour relies on scores negative). Each gate therefore takes
    the sign of the EAP-IG-inputs score that warm-started it; averaging raw gates
    would cancel the strongest edges instead.
    """
    ablation = ablation or AblationSpec()
    members = [eap_scores(model, data, ablation)]
    members.append(eap_ig_inputs_scores(model, data, ig_steps, ablation))
    members.append(eap_ig_acts_scores(model, data, ig_steps, ablation))
    if sequential:
        gates = ensemble_sequential(members[1], model, data, prune, ablation)
        init = members[1].scores
        members.append(AttributionScores({e: g * float(np.sign(init[e])) for e, g in gates.scores.items()},
                                         dict(gates.provenance, oriented_by="eap-ig-inputs")))
    if log:
        for m in members:
            log(f"hybrid member {m.provenance['method']} done")
    merged = ensemble_parallel(members, "mean")
    merged.provenance = dict(merged.provenance, method="hybrid" if sequential else "parallel-mean",
                             sequential=sequential)
    return merged


# path effects --------------------------------------------------------------------------

def _check_path(graph: ComputationGraph, path: Sequence[str]) -> list[tuple[Node, Node]]:
    edges = [graph.edge(e) for e in path]
    if not edges:
        raise AttributionError("empty path")
    if edges[0][0] != graph.embed or edges[-1][1] != graph.logits:
        raise AttributionError("path must run from the embedding node to the logits node")
    for (_, v), (u2, _) in zip(edges, edges[1:]):
        if v != u2:
            raise AttributionError(f"disconnected path: {v} does not feed {u2}")
    return edges


def isolate_path_effect(model: Transformer, tokens, cf_tokens, answers, cf_answers,
                        path: Sequence[str], mode: str = "counterfactual") -> float:
    """Change of m carried by exactly one embed-to-logits path.

    The embedding's change enters the first path edge only; each node on the
    path passes its own resulting change along the next path edge, while every
    off-path edge keeps its clean value. ``ablate`` mode replaces the
    embedding with zeros instead of the counterfactual embedding.
    """
    if mode not in {"ablate", "counterfactual"}:
        raise AttributionError(f"unknown mode {mode!r}")
    graph = model.graph
    edges = _check_path(graph, path)
    tokens = model.check_tokens(tokens)
    answers, cf_answers = np.atleast_1d(answers), np.atleast_1d(cf_answers)
    clean = model.run(tokens)
    embed = graph.embed.name
    if mode == "counterfactual":
        message = model.run(model.check_tokens(cf_tokens)).outputs[embed].data
    else:
        message = np.zeros_like(clean.outputs[embed].data)
    run = clean
    for u, v in edges:
        # only this edge carries the message, so off-path readers of u see clean values
        run = model.run(tokens, patches=PatchPlan({edge_name(u, v): message}), base=clean)
        if v.kind != "logits":
            message = run.outputs[v.name].data
    w = _metric_weights(answers, cf_answers, model.config.vocab_size)
    m_path = (run.logits.data[:, -1] * w).sum(axis=1)
    m_clean = (clean.logits.data[:, -1] * w).sum(axis=1)
    return float(np.mean(m_path - m_clean))
