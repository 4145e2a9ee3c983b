"""A tiny pre-norm decoder-only transformer with a decomposed residual stream.

Every reader node (attention head, MLP, logits) receives the explicit sum of
its upstream nodes' raw contributions, so any single edge can be patched
without touching the other readers of the same upstream node. Normalization
happens inside each reader.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import AutodiffError, Tensor
from .graph import ComputationGraph, GraphError, Node, edge_name
from .optim import Adam

CHECKPOINT_FORMAT = "mibkit-model/1"


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_head: int = 8
    d_mlp: int = 64
    vocab_size: int = 64
    max_seq_len: int = 32
    norm_epsilon: float = 1e-5
    seed: int = 0
    norm: str = "layernorm"  # layernorm | none
    activation: str = "gelu"  # gelu | relu | identity
    qk_source: str = "patched"  # patched | clean

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ModelError(f"d_model ({self.d_model}) must equal n_heads*d_head "
                             f"({self.n_heads}*{self.d_head})")
        if self.norm not in {"layernorm", "none"}:
            raise ModelError(f"unknown norm {self.norm!r}")
        if self.activation not in {"gelu", "relu", "identity"}:
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.qk_source not in {"patched", "clean"}:
            raise ModelError(f"unknown qk_source {self.qk_source!r}")
        if min(self.n_layers, self.n_heads, self.d_head, self.vocab_size, self.max_seq_len) < 1:
            raise ModelError("layer, head, width, vocab and length sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return ad.gelu(x)
    if kind == "relu":
        return ad.relu(x)
    return x


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, dh, dm = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp
    shapes = {"W_E": (cfg.vocab_size, d), "W_pos": (cfg.max_seq_len, d)}
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        shapes.update({p + "ln1.w": (d,), p + "ln1.b": (d,),
                       p + "attn.W_Q": (h, d, dh), p + "attn.W_K": (h, d, dh),
                       p + "attn.W_V": (h, d, dh), p + "attn.W_O": (h, dh, d)})
        if dm:
            shapes.update({p + "ln2.w": (d,), p + "ln2.b": (d,), p + "mlp.W_in": (d, dm),
                           p + "mlp.b_in": (dm,), p + "mlp.W_out": (dm, d), p + "mlp.b_out": (d,)})
    shapes.update({"ln_f.w": (d,), "ln_f.b": (d,), "W_U": (d, cfg.vocab_size)})
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".w"):
            params[name] = np.ones(shape)
        elif name.endswith((".b", "b_in", "b_out")):
            params[name] = np.zeros(shape)
        elif name in {"W_E", "W_pos"}:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), shape)
        else:
            fan_in = shape[-2]
            scale = 1.0 / math.sqrt(fan_in)
            if name.endswith(("W_O", "W_out")):
                scale /= math.sqrt(2 * cfg.n_layers)
            params[name] = rng.normal(0.0, scale, shape)
    return params


@dataclass
class ActivationCache:
    """Per-node raw contributions, per-reader pre-norm inputs and normalized inputs."""

    tokens: np.ndarray
    outputs: dict[str, np.ndarray]
    inputs: dict[str, np.ndarray]
    normalized: dict[str, np.ndarray] = field(default_factory=dict)
    logits: np.ndarray | None = None

    def contribution(self, node: str, position: int) -> np.ndarray:
        return self.outputs[node][:, position]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[-1]

    @property
    def n_entries(self) -> int:
        """(node, position) contribution entries; every node but logits contributes."""
        return len(self.outputs) * self.seq_len


@dataclass
class PatchPlan:
    """Replacement contributions for individual edges.

    ``replacements[edge]`` is broadcastable to ``(batch, seq, d_model)``;
    ``positions[edge]``, when given, is a boolean mask broadcastable to
    ``(batch, seq)`` restricting the replacement to those positions.
    """

    replacements: dict[str, object] = field(default_factory=dict)
    positions: dict[str, np.ndarray] = field(default_factory=dict)
    kind: str = "counterfactual"

    def __len__(self):
        return len(self.replacements)

    def __contains__(self, edge):
        return edge in self.replacements

    @classmethod
    def from_outputs(cls, edges, outputs: Mapping[str, object], positions=None,
                     kind: str = "counterfactual") -> "PatchPlan":
        repl = {}
        for e in edges:
            src = e.split("->", 1)[0]
            repl[e] = outputs[src]
        pos = {}
        if positions is not None:
            pos = {e: np.asarray(positions, dtype=bool) for e in repl}
        return cls(repl, pos, kind)

    def validate(self, graph: ComputationGraph) -> None:
        if self.kind not in {"counterfactual", "mean", "zero", "custom"}:
            raise ModelError(f"unknown ablation kind {self.kind!r}")
        unknown = sorted(set(self.replacements) - set(graph.edge_index))
        if unknown:
            raise GraphError(f"patch plan references unknown edges {unknown}")
        for e, r in self.replacements.items():
            data = r.data if isinstance(r, Tensor) else np.asarray(r)
            if data.shape[-1] != graph.d_model:
                raise ModelError(f"replacement for {e} has width {data.shape[-1]}, expected {graph.d_model}")
            if not np.isfinite(data).all():
                raise ModelError(f"replacement for {e} is not finite")

    def term(self, edge: str, z: Tensor) -> Tensor:
        r = self.replacements[edge]
        r = r if isinstance(r, Tensor) else Tensor(r)
        mask = self.positions.get(edge)
        if mask is None:
            if r.shape != z.shape:
                r = r + Tensor(np.zeros(z.shape))
            return r
        return ad.where(np.asarray(mask, dtype=bool)[..., None], r, z)


@dataclass
class EdgeGates:
    """Soft edge gates: contribution = ablated + gate * (live - ablated)."""

    gates: dict[str, Tensor]
    ablated: Mapping[str, object]  # node -> ablation contribution


@dataclass
class ForwardRun:
    logits: Tensor
    outputs: dict[str, Tensor]
    inputs: dict[str, Tensor]
    normalized: dict[str, Tensor]
    graph: ComputationGraph

    @property
    def final_logits(self) -> Tensor:
        return self.logits[:, -1]

    def resid(self, layer: int) -> np.ndarray:
        """Residual stream entering block ``layer`` (``n_layers`` = before the final norm)."""
        total = None
        for node in self.graph.nodes:
            if node.kind == "logits" or (node.kind != "embed" and node.layer >= layer):
                continue
            z = self.outputs[node.name].data
            total = z if total is None else total + z
        return total

    def to_cache(self, tokens) -> ActivationCache:
        return ActivationCache(
            tokens=np.asarray(tokens),
            outputs={k: v.data for k, v in self.outputs.items()},
            inputs={k: v.data for k, v in self.inputs.items()},
            normalized={k: v.data for k, v in self.normalized.items()},
            logits=self.logits.data,
        )


class Transformer:
    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray],
                 vocab: list[str] | None = None, meta: Mapping | None = None):
        self.config = config
        shapes = param_shapes(config)
        missing = sorted(set(shapes) - set(params))
        if missing:
            raise ModelError(f"missing parameters {missing}")
        self.params = {k: np.array(params[k], dtype=np.float64) for k in shapes}
        for k, shape in shapes.items():
            if self.params[k].shape != shape:
                raise ModelError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")
        if vocab is not None and len(vocab) > config.vocab_size:
            raise ModelError("vocabulary larger than vocab_size")
        self.vocab = list(vocab) if vocab is not None else None
        self.meta = dict(meta or {})
        self.graph = ComputationGraph.from_config(config)
        self._const: dict[str, Tensor] = {}
        self._causal = np.tril(np.ones((config.max_seq_len, config.max_seq_len), dtype=bool))

    @classmethod
    def random(cls, config: ModelConfig, vocab=None) -> "Transformer":
        return cls(config, init_params(config), vocab)

    @classmethod
    def zeros(cls, config: ModelConfig, vocab=None) -> "Transformer":
        params = {k: np.zeros(s) for k, s in param_shapes(config).items()}
        for k in params:
            if k.endswith(".w"):
                params[k] = np.ones(params[k].shape)
        return cls(config, params, vocab)

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()[:16]

    # helpers ---------------------------------------------------------------
    def _p(self, name: str) -> Tensor:
        t = self._const.get(name)
        if t is None:
            t = self._const[name] = Tensor(self.params[name])
        return t

    def _head_w(self, layer: int, head: int, which: str) -> Tensor:
        key = f"blocks.{layer}.attn.{which}[{head}]"
        t = self._const.get(key)
        if t is None:
            t = self._const[key] = Tensor(self.params[f"blocks.{layer}.attn.{which}"][head])
        return t

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
            raise ModelError("tokens must be a (batch, seq) integer array")
        if tokens.shape[1] > self.config.max_seq_len:
            raise ModelError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        bad = tokens[(tokens < 0) | (tokens >= self.config.vocab_size)]
        if bad.size:
            raise ModelError(f"out-of-vocab token ids {sorted(set(bad.tolist()))[:5]}")
        return tokens

    def encode(self, words) -> np.ndarray:
        if self.vocab is None:
            raise ModelError("model has no vocabulary bound")
        index = {w: i for i, w in enumerate(self.vocab)}
        try:
            return np.array([index[w] for w in words])
        except KeyError as exc:
            raise ModelError(f"out-of-vocab token {exc.args[0]!r}") from None

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        if self.config.norm == "none":
            return x
        return ad.layernorm(x, self._p(prefix + ".w"), self._p(prefix + ".b"), eps=self.config.norm_epsilon)

    def _act(self, x: Tensor) -> Tensor:
        return _activate(x, self.config.activation)

    def embed_output(self, tokens: np.ndarray) -> Tensor:
        T = tokens.shape[1]
        return ad.embed_lookup(self._p("W_E"), tokens) + Tensor(self.params["W_pos"][:T])

    def head_output(self, layer: int, head: int, x: Tensor, x_qk: Tensor | None = None):
        cfg = self.config
        n = self._norm(x, f"blocks.{layer}.ln1")
        n_qk = n if x_qk is None else self._norm(x_qk, f"blocks.{layer}.ln1")
        q = n_qk @ self._head_w(layer, head, "W_Q")
        k = n_qk @ self._head_w(layer, head, "W_K")
        v = n @ self._head_w(layer, head, "W_V")
        T = x.shape[-2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(cfg.d_head))
        att = ad.softmax(scores, mask=self._causal[:T, :T])
        return (att @ v) @ self._head_w(layer, head, "W_O"), n

    def mlp_output(self, layer: int, x: Tensor):
        p = f"blocks.{layer}."
        n = self._norm(x, p + "ln2")
        hidden = self._act(n @ self._p(p + "mlp.W_in") + self._p(p + "mlp.b_in"))
        return hidden @ self._p(p + "mlp.W_out") + self._p(p + "mlp.b_out"), n

    def unembed(self, x: Tensor):
        n = self._norm(x, "ln_f")
        return n @ self._p("W_U"), n

    def node_output(self, node: Node, x: Tensor, x_qk: Tensor | None = None):
        if node.kind == "head":
            return self.head_output(node.layer, node.index, x, x_qk)
        if node.kind == "mlp":
            return self.mlp_output(node.layer, x)
        if node.kind == "logits":
            return self.unembed(x)
        raise ModelError(f"node {node} has no reader computation")

    # decomposed forward ----------------------------------------------------
    def run(self, tokens, *, patches: PatchPlan | None = None, gates: EdgeGates | None = None,
            overrides: Mapping[str, object] | None = None, node_edits: Mapping[str, Tensor] | None = None,
            resid_edits: Mapping[int, Tensor] | None = None, base: ForwardRun | None = None,
            track_grad: bool = False) -> ForwardRun:
        """Run the decomposed forward pass.

        ``overrides`` replace a node's output outright, ``node_edits`` add to it,
        ``resid_edits[l]`` adds to the input of every reader at layer >= l.
        With ``base`` (an unmodified run on the same tokens), nodes unaffected by
        any modification reuse the base values.
        """
        tokens = self.check_tokens(tokens)
        graph = self.graph
        overrides = overrides or {}
        node_edits = node_edits or {}
        resid_edits = resid_edits or {}
        if patches is not None:
            patches.validate(graph)
        if gates is not None:
            graph.check_edges(gates.gates)
        qk_inputs = None
        if self.config.qk_source == "clean" and (patches or gates or overrides or node_edits or resid_edits):
            qk_inputs = (base or self.run(tokens)).inputs

        outputs: dict[str, Tensor] = {}
        inputs: dict[str, Tensor] = {}
        normalized: dict[str, Tensor] = {}
        dirty: set[str] = set()
        logits = None
        for node in graph.nodes:
            name = node.name
            if node.kind == "embed":
                if name in overrides:
                    out = overrides[name]
                    out = out if isinstance(out, Tensor) else Tensor(out)
                    dirty.add(name)
                elif base is not None:
                    out = base.outputs[name]
                else:
                    out = self.embed_output(tokens)
                    if track_grad:
                        out = Tensor(out.data, requires_grad=True)
                if name in node_edits:
                    out = out + node_edits[name]
                    dirty.add(name)
                outputs[name] = out
                continue

            ups = graph.upstream(node)
            touched = (any(u.name in dirty for u in ups)
                       or any(node.layer >= l for l in resid_edits)
                       or name in overrides or name in node_edits)
            terms = []
            for u in ups:
                e = edge_name(u, node)
                z = outputs[u.name]
                if patches is not None and e in patches.replacements:
                    z = patches.term(e, z)
                    touched = True
                if gates is not None and e in gates.gates:
                    abl = gates.ablated[u.name]
                    abl = abl if isinstance(abl, Tensor) else Tensor(abl)
                    z = abl + gates.gates[e] * (z - abl)
                    touched = True
                terms.append(z)

            if base is not None and not touched:
                inputs[name] = base.inputs[name]
                if name in base.normalized:
                    normalized[name] = base.normalized[name]
                if node.kind == "logits":
                    logits = base.logits
                else:
                    outputs[name] = base.outputs[name]
                continue

            x = terms[0] * 1.0
            for t in terms[1:]:
                x = x + t
            for layer in sorted(resid_edits):
                if node.layer >= layer:
                    x = x + resid_edits[layer]
            inputs[name] = x
            x_qk = qk_inputs[name] if (qk_inputs is not None and node.kind == "head") else None
            if name in overrides:
                out = overrides[name]
                out = out if isinstance(out, Tensor) else Tensor(out)
            else:
                out, n = self.node_output(node, x, x_qk)
                normalized[name] = n
            if node.kind == "logits":
                logits = out
                continue
            if name in node_edits:
                out = out + node_edits[name]
            outputs[name] = out
            dirty.add(name)
        return ForwardRun(logits, outputs, inputs, normalized, graph)

    def forward(self, tokens):
        """Return (final-position logits, full-sequence logits) as arrays."""
        logits = self.run(tokens).logits.data
        return logits[:, -1], logits

    def forward_with_cache(self, tokens):
        tokens = self.check_tokens(tokens)
        r = self.run(tokens)
        return r.logits.data, r.to_cache(tokens)

    def forward_with_patches(self, tokens, plan: PatchPlan, base: ForwardRun | None = None):
        return self.run(tokens, patches=plan, base=base).logits.data

    def replay_logits(self, cache: ActivationCache) -> np.ndarray:
        """Logits rebuilt from cached contributions alone."""
        node = self.graph.logits
        terms = [Tensor(cache.outputs[u.name]) for u in self.graph.upstream(node)]
        x = terms[0] * 1.0
        for t in terms[1:]:
            x = x + t
        return self.unembed(x)[0].data

    # fast path for training -------------------------------------------------
    def fast_logits(self, tokens, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Standard residual-stream forward (mathematically equal to :meth:`run`)."""
        cfg = self.config
        P = params if params is not None else {k: self._p(k) for k in self.params}
        tokens = self.check_tokens(tokens)
        B, T = tokens.shape
        H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model

        def norm(x, prefix):
            if cfg.norm == "none":
                return x
            return ad.layernorm(x, P[prefix + ".w"], P[prefix + ".b"], eps=cfg.norm_epsilon)

        x = ad.embed_lookup(P["W_E"], tokens) + P["W_pos"][:T]
        mask = self._causal[:T, :T]
        for layer in range(cfg.n_layers):
            p = f"blocks.{layer}."
            n = norm(x, p + "ln1")

            def proj(w):
                w2 = P[p + "attn." + w].transpose(1, 0, 2).reshape(d, H * dh)
                return (n @ w2).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

            q, k, v = proj("W_Q"), proj("W_K"), proj("W_V")
            att = ad.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), mask=mask)
            z = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, H * dh)
            x = x + z @ P[p + "attn.W_O"].reshape(H * dh, d)
            if cfg.d_mlp:
                n2 = norm(x, p + "ln2")
                hidden = n2 @ P[p + "mlp.W_in"] + P[p + "mlp.b_in"]
                hidden = _activate(hidden, cfg.activation)
                x = x + hidden @ P[p + "mlp.W_out"] + P[p + "mlp.b_out"]
        return norm(x, "ln_f") @ P["W_U"]

    def predict(self, tokens, batch_size: int = 512) -> np.ndarray:
        tokens = self.check_tokens(tokens)
        out = []
        for i in range(0, len(tokens), batch_size):
            out.append(self.fast_logits(tokens[i:i + batch_size]).data[:, -1].argmax(-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def accuracy(self, tokens, answers) -> float:
        if len(tokens) == 0:
            return float("nan")
        return float((self.predict(tokens) == np.asarray(answers)).mean())

    # checkpoints ------------------------------------------------------------
    def to_document(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "vocab": self.vocab,
            "meta": self.meta,
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(self.params.items())},
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_document()) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_document(cls, doc: Mapping) -> "Transformer":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ModelError(f"unsupported checkpoint format {doc.get('format')!r}")
        cfg = ModelConfig.from_dict(doc["config"])
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
        return cls(cfg, params, doc.get("vocab"), doc.get("meta"))

    @classmethod
    def load(cls, path) -> "Transformer":
        return cls.from_document(json.loads(Path(path).read_text(encoding="utf-8")))


def forward(model: Transformer, tokens):
    return model.forward(tokens)


def forward_with_cache(model: Transformer, tokens):
    return model.forward_with_cache(tokens)


def forward_with_patches(model: Transformer, tokens, plan: PatchPlan):
    return model.forward_with_patches(tokens, plan)


# training -------------------------------------------------------------------

@dataclass
class TrainSettings:
    lr: float = 3e-3
    steps: int = 3000
    batch_size: int = 64
    weight_decay: float = 0.0
    target_accuracy: float | None = 0.9
    early_stop_accuracy: float | None = 0.99
    eval_every: int = 100
    seed: int = 0


@dataclass
class TrainReport:
    steps: int
    final_loss: float
    train_accuracy: float
    val_accuracy: float
    history: list[tuple[int, float, float]] = field(default_factory=list)


def train_toy_model(config: ModelConfig, train, val, settings: TrainSettings | None = None,
                    vocab=None) -> tuple[Transformer, TrainReport]:
    """Train on final-position cross-entropy; ``train``/``val`` expose ``tokens`` and ``answers``."""
    settings = settings or TrainSettings()
    model = Transformer.random(config, vocab)
    params = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    opt = Adam(params, lr=settings.lr, weight_decay=settings.weight_decay)
    rng = np.random.default_rng(settings.seed)
    tokens, answers = np.asarray(train.tokens), np.asarray(train.answers)
    n = len(tokens)
    history = []
    loss_value = float("nan")
    step = 0

    def sync():
        model.params = {k: p.data.copy() for k, p in params.items()}
        model._const.clear()

    val_acc = model.accuracy(val.tokens, val.answers)
    for step in range(1, settings.steps + 1):
        idx = rng.choice(n, size=min(settings.batch_size, n), replace=False)
        try:
            logits = model.fast_logits(tokens[idx], params)
            loss = ad.cross_entropy_with_logits(logits[:, -1], answers[idx])
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingError(f"loss diverged (non-finite) at step {step}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        except AutodiffError as exc:
            raise TrainingError(f"training diverged at step {step}: {exc}") from exc
        if step % settings.eval_every == 0 or step == settings.steps:
            sync()
            val_acc = model.accuracy(val.tokens, val.answers)
            history.append((step, loss_value, val_acc))
            if settings.early_stop_accuracy is not None and val_acc >= settings.early_stop_accuracy:
                break
    sync()
    report = TrainReport(step, loss_value, model.accuracy(tokens, answers),
                         model.accuracy(val.tokens, val.answers), history)
    model.meta["train"] = asdict(report) | {"settings": asdict(settings)}
    if settings.target_accuracy is not None and report.val_accuracy < settings.target_accuracy:
        raise TrainingError(f"validation accuracy {report.val_accuracy:.3f} below target "
                            f"{settings.target_accuracy:.3f} after {step} steps")
    return model, report
