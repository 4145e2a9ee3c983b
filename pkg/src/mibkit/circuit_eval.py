"""Circuit metrics: logit difference, faithfulness, CPR/CMD and ground-truth AUROC."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ablation import AblationSpec
from .graph import Circuit, CircuitSeries
from .model import ModelError, PatchPlan, Transformer
from .parallel import map_chunks
from .tasks import EncodedDataset

DEGENERATE_EPS = 1e-9


class EvalError(ValueError):
    pass


def _check_answers(model: Transformer, data: EncodedDataset):
    V = model.config.vocab_size
    for arr in (data.answers, data.cf_answers):
        if np.any((arr < 0) | (arr >= V)):
            raise EvalError("answer token out of vocabulary")


def metric_values(model: Transformer, tokens, answers, cf_answers, plan: PatchPlan | None = None) -> np.ndarray:
    """Per-instance logit(y) - logit(y') at the final position."""
    logits = model.run(tokens, patches=plan).logits.data[:, -1]
    r = np.arange(len(logits))
    return logits[r, answers] - logits[r, cf_answers]


def metric_m(model: Transformer, data: EncodedDataset, plan: PatchPlan | None = None) -> float:
    """Dataset-level m: mean over instances (optionally under one fixed patch plan)."""
    _check_answers(model, data)
    vals = map_chunks(lambda s: metric_values(model, data.tokens[s], data.answers[s], data.cf_answers[s],
                                              plan), len(data))
    return float(np.concatenate(vals).mean())


def circuit_metric(model: Transformer, circuit: Circuit | None, data: EncodedDataset,
                   ablation: AblationSpec | None = None) -> float:
    """m with every edge outside ``circuit`` patched from the ablation source (None: full model)."""
    ablation = ablation or AblationSpec()
    _check_answers(model, data)
    if circuit is None:
        outside = []
    else:
        if circuit.members is None:
            raise EvalError("faithfulness needs a membership circuit")
        outside = [e for e in model.graph.edge_names if e not in circuit.members]

    def part(s):
        plan = None
        if outside:
            plan = ablation.plan(outside, ablation.source_outputs(model, data.cf_tokens[s]))
        return metric_values(model, data.tokens[s], data.answers[s], data.cf_answers[s], plan)

    return float(np.concatenate(map_chunks(part, len(data))).mean())


@dataclass
class Anchors:
    m_full: float
    m_empty: float

    def ratio(self, m_circuit: float) -> float:
        denom = self.m_full - self.m_empty
        if not abs(denom) > DEGENERATE_EPS:
            raise EvalError(f"degenerate task: |m(N) - m(empty)| = {abs(denom):.3g} <= {DEGENERATE_EPS}")
        return (m_circuit - self.m_empty) / denom


def anchors(model: Transformer, data: EncodedDataset, ablation: AblationSpec | None = None) -> Anchors:
    graph = model.graph
    return Anchors(circuit_metric(model, Circuit.full(graph), data, ablation),
                   circuit_metric(model, Circuit.empty(graph), data, ablation))


def faithfulness(model: Transformer, circuit: Circuit, data: EncodedDataset,
                 ablation: AblationSpec | None = None, anchor: Anchors | None = None) -> float:
    anchor = anchor or anchors(model, data, ablation)
    if circuit.members == frozenset(model.graph.edge_names):
        m_c = anchor.m_full
    elif not circuit.members:
        m_c = anchor.m_empty
    else:
        m_c = circuit_metric(model, circuit, data, ablation)
    return anchor.ratio(m_c)


@dataclass
class FaithfulnessCurve:
    points: list[tuple[float, float]]
    ablation: str = "counterfactual"
    dataset: str = ""
    m_full: float = float("nan")
    m_empty: float = float("nan")

    def __post_init__(self):
        ks = [k for k, _ in self.points]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise EvalError("curve thresholds must be strictly increasing")
        if not all(math.isfinite(f) for _, f in self.points):
            raise EvalError("curve values must be finite")

    @property
    def ks(self) -> list[float]:
        return [k for k, _ in self.points]

    @property
    def values(self) -> list[float]:
        return [f for _, f in self.points]

    def to_document(self) -> dict:
        return {"points": [[k, f] for k, f in self.points], "ablation": self.ablation,
                "dataset": self.dataset, "m_full": self.m_full, "m_empty": self.m_empty}

    @classmethod
    def from_document(cls, doc: Mapping) -> "FaithfulnessCurve":
        return cls([(float(k), float(f)) for k, f in doc["points"]], doc.get("ablation", ""),
                   doc.get("dataset", ""), doc.get("m_full", float("nan")), doc.get("m_empty", float("nan")))


def curve(model: Transformer, series: CircuitSeries, data: EncodedDataset,
          ablation: AblationSpec | None = None) -> FaithfulnessCurve:
    ablation = ablation or AblationSpec()
    anchor = anchors(model, data, ablation)
    pts = [(k, faithfulness(model, c, data, ablation, anchor)) for k, c in series]
    return FaithfulnessCurve(pts, ablation.kind, data.fingerprint(), anchor.m_full, anchor.m_empty)


def riemann_weights(ks: Sequence[float]) -> np.ndarray:
    """Trapezoid weights over log10(k), normalized to sum to one."""
    x = np.log10(np.asarray(ks, dtype=np.float64))
    if len(x) == 0:
        raise EvalError("empty curve")
    if len(x) == 1:
        return np.ones(1)
    w = np.zeros(len(x))
    gaps = np.diff(x)
    w[:-1] += gaps / 2
    w[1:] += gaps / 2
    return w / w.sum()


def _as_curve(c) -> tuple[list[float], list[float]]:
    if isinstance(c, FaithfulnessCurve):
        return c.ks, c.values
    ks, fs = zip(*c)
    return list(ks), list(fs)


def cpr(c) -> float:
    ks, fs = _as_curve(c)
    return float(np.dot(riemann_weights(ks), np.asarray(fs, dtype=np.float64)))


def cmd(c) -> float:
    ks, fs = _as_curve(c)
    return float(np.dot(riemann_weights(ks), np.abs(np.asarray(fs, dtype=np.float64) - 1.0)))


def ground_truth_auroc(scores: Mapping[str, float], truth: Iterable[str]) -> float:
    """Mann-Whitney AUROC of |score| separating true edges from the rest (ties count half)."""
    scores = dict(getattr(scores, "scores", scores))
    truth = set(truth)
    unknown = truth - set(scores)
    if unknown:
        raise EvalError(f"truth edges without scores: {sorted(unknown)}")
    pos = np.array([abs(v) for e, v in scores.items() if e in truth])
    neg = np.array([abs(v) for e, v in scores.items() if e not in truth])
    if len(pos) == 0 or len(neg) == 0:
        raise EvalError("AUROC undefined when the truth set is empty or covers every edge")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))


# reports --------------------------------------------------------------------------

@dataclass
class MetricReport:
    method: str
    model: str
    task: str
    cpr: float
    cmd: float
    curve: FaithfulnessCurve
    auroc: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cmd < 0:
            raise EvalError("CMD must be non-negative")

    def to_document(self) -> dict:
        return {"method": self.method, "model": self.model, "task": self.task, "cpr": self.cpr,
                "cmd": self.cmd, "auroc": self.auroc, "curve": self.curve.to_document(), "extra": self.extra}

    @classmethod
    def from_document(cls, doc: Mapping) -> "MetricReport":
        return cls(doc["method"], doc["model"], doc["task"], doc["cpr"], doc["cmd"],
                   FaithfulnessCurve.from_document(doc["curve"]), doc.get("auroc"), doc.get("extra", {}))


def report_for(method: str, model_name: str, task: str, c: FaithfulnessCurve,
               auroc: float | None = None) -> MetricReport:
    return MetricReport(method, model_name, task, cpr(c), cmd(c), c, auroc)


def table(cells: Mapping[tuple[str, str], float], higher_is_better: bool, fmt: str = "{:.3f}") -> dict:
    """Rows x columns table with best/second-best marks per column.

    ``cells`` maps (row, column) to a value; absent cells render as "-".
    """
    rows = sorted({r for r, _ in cells})
    cols = sorted({c for _, c in cells})
    marks = {}
    for c in cols:
        vals = sorted({cells[(r, c)] for r in rows if (r, c) in cells}, reverse=higher_is_better)
        for r in rows:
            if (r, c) in cells:
                v = cells[(r, c)]
                marks[(r, c)] = "best" if v == vals[0] else "second" if len(vals) > 1 and v == vals[1] else ""
    return {"rows": rows, "columns": cols, "higher_is_better": higher_is_better,
            "cells": {f"{r}|{c}": {"value": cells[(r, c)], "text": fmt.format(cells[(r, c)]),
                                   "mark": marks[(r, c)]}
                      for r in rows for c in cols if (r, c) in cells}}


def render_table(doc: Mapping, title: str = "") -> str:
    """Plain text: best values wrapped in **, second-best in __, missing cells as '-'."""
    rows, cols = doc["rows"], doc["columns"]
    body = []
    for r in rows:
        line = [r]
        for c in cols:
            cell = doc["cells"].get(f"{r}|{c}")
            if cell is None:
                line.append("-")
            else:
                wrap = {"best": "**", "second": "__"}.get(cell["mark"], "")
                line.append(f"{wrap}{cell['text']}{wrap}")
        body.append(line)
    header = ["method"] + list(cols)
    widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
    fmt_line = lambda xs: "  ".join(x.ljust(w) for x, w in zip(xs, widths)).rstrip()  # noqa: E731
    out = ([title] if title else []) + [fmt_line(header), fmt_line(["-" * w for w in widths])]
    out += [fmt_line(x) for x in body]
    return "\n".join(out) + "\n"


def write_report(reports: Sequence[MetricReport], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cpr_cells = {(r.method, f"{r.model}/{r.task}"): r.cpr for r in reports}
    cmd_cells = {(r.method, f"{r.model}/{r.task}"): r.cmd for r in reports}
    docs = {"cpr": table(cpr_cells, True), "cmd": table(cmd_cells, False)}
    paths = {}
    for name, doc in docs.items():
        (out / f"{name}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        (out / f"{name}.txt").write_text(render_table(doc, name.upper()))
        paths[name] = out / f"{name}.txt"
    return paths
