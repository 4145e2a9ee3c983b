from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError, PatchPlan, Transformer
from .parallel import map_chunks

ABLATION_KINDS = ("counterfactual", "mean")


@dataclass
class AblationSpec:
    """Where replacement contributions come from.

    ``counterfactual`` uses each instance's paired counterfactual run;
    ``mean`` uses per-(node, position) means over a reference token set.
    """

    kind: str = "counterfactual"
    means: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ABLATION_KINDS:
            raise ModelError(f"unknown ablation kind {self.kind!r}; expected one of {ABLATION_KINDS}")
        if self.kind == "mean" and self.means is None:
            raise ModelError("mean ablation needs means; build it with AblationSpec.mean_over")

    @classmethod
    def mean_over(cls, model: Transformer, tokens) -> "AblationSpec":
        tokens = model.check_tokens(tokens)

        def part(s):
            run = model.run(tokens[s])
            return {k: v.data.sum(axis=0) for k, v in run.outputs.items()}

        parts = map_chunks(part, len(tokens))
        means = {}
        for k in parts[0]:
            total = parts[0][k].copy()
            for p in parts[1:]:
                total += p[k]
            means[k] = total / len(tokens)
        return cls("mean", means)

    def source_outputs(self, model: Transformer, cf_tokens) -> dict[str, np.ndarray]:
        if self.kind == "counterfactual":
            return {k: v.data for k, v in model.run(cf_tokens).outputs.items()}
        T = np.asarray(cf_tokens).shape[-1]
        return {k: v[:T] for k, v in self.means.items()}

    def plan(self, edges, sources) -> PatchPlan:
        return PatchPlan.from_outputs(edges, sources, kind=self.kind)

    def tag(self) -> str:
        return self.kind
