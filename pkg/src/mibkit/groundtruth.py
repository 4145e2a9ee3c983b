"""Hand-wired models with known circuits or known causal directions.

All fixtures use ``norm="none"`` so that every planted subspace is read
exactly; the circuit fixtures are saturated (attention
logit gaps of about 20 or more).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, Transformer, param_shapes
from .tasks import CausalModel, EncodedDataset, TaskInstance, Vocab, encode


@dataclass
class GroundTruthModel:
    kind: str
    model: Transformer
    vocab: Vocab
    circuit: frozenset[str] = frozenset()
    direction: np.ndarray | None = None
    layer: int | None = None
    position: int | None = None
    causal_model: CausalModel | None = None
    variable: str | None = None
    meta: dict = field(default_factory=dict)

    def instances(self, n: int, seed: int = 0) -> list[TaskInstance]:
        return _GENERATORS[self.kind](self, n, seed)

    def dataset(self, n: int, seed: int = 0) -> EncodedDataset:
        return encode(self.instances(n, seed), self.vocab)


def _blank(cfg: ModelConfig) -> dict[str, np.ndarray]:
    params = {k: np.zeros(s) for k, s in param_shapes(cfg).items()}
    for k in params:
        if k.endswith(".w"):
            params[k][:] = 1.0
    return params


# copy head ----------------------------------------------------------------------

COPY_VOCAB = 12
COPY_POS, COPY_CONST, COPY_OUT = 12, 20, 32


def build_copy_head(seed: int = 0) -> GroundTruthModel:
    """One layer; head 0 attends to position 0 and copies its token to the output subspace."""
    cfg = ModelConfig(n_layers=1, n_heads=4, d_model=64, d_head=16, d_mlp=8, vocab_size=COPY_VOCAB,
                      max_seq_len=8, norm="none", activation="gelu", seed=seed)
    p = _blank(cfg)
    rng = np.random.default_rng(seed)
    p["W_E"][np.arange(COPY_VOCAB), np.arange(COPY_VOCAB)] = 1.0
    p["W_pos"][np.arange(8), COPY_POS + np.arange(8)] = 1.0
    p["W_pos"][:, COPY_CONST] = 1.0
    wq, wk, wv, wo = (p[f"blocks.0.attn.{w}"] for w in ("W_Q", "W_K", "W_V", "W_O"))
    wq[0, COPY_CONST, 0] = 160.0  # score 40 = 160 / sqrt(16) at position 0
    wk[0, COPY_POS, 0] = 1.0
    wv[0, np.arange(COPY_VOCAB), np.arange(COPY_VOCAB)] = 1.0
    wo[0, np.arange(COPY_VOCAB), COPY_OUT + np.arange(COPY_VOCAB)] = 10.0
    for h in range(1, 4):  # distractors: live attention, zero output weights
        wq[h] = rng.normal(0, 0.3, wq[h].shape)
        wk[h] = rng.normal(0, 0.3, wk[h].shape)
        wv[h] = rng.normal(0, 0.3, wv[h].shape)
    p["W_U"][COPY_OUT + np.arange(COPY_VOCAB), np.arange(COPY_VOCAB)] = 1.0
    vocab = Vocab([f"t{i}" for i in range(COPY_VOCAB)])
    model = Transformer(cfg, p, vocab.tokens, {"fixture": "copy-head"})
    cm = CausalModel("copy", lambda inst: {"First": inst.tokens[0]},
                     {"X_First": (("First",), lambda t: t), "O_Answer": (("X_First",), lambda t: t)},
                     "O_Answer")
    circuit = frozenset({"embed.0.0->head.0.0", "head.0.0->logits.1.0"})
    return GroundTruthModel("copy-head", model, vocab, circuit, causal_model=cm, variable="X_First")


def _copy_instances(gt: GroundTruthModel, n: int, seed: int) -> list[TaskInstance]:
    rng = np.random.default_rng(seed)
    toks = gt.vocab.tokens
    out = []
    for _ in range(n):
        a, b, c = (toks[i] for i in rng.integers(COPY_VOCAB, size=3))
        a2 = toks[(toks.index(a) + 1 + rng.integers(COPY_VOCAB - 1)) % COPY_VOCAB]
        out.append(TaskInstance("copy-head", (a, b, c), a, (a2, b, c), a2, {"cf_meta": {"first": a2}}))
    return out


# planted direction ------------------------------------------------------------------

PL_CONTENT, PL_SELECTORS = 8, 4
PL_POS, PL_BLOCK, PL_OUT = 8, 12, 20


def build_planted_direction(seed: int = 0, axis_aligned: bool = False, nuisance: float = 0.6,
                            query_scale: float = 4.0) -> GroundTruthModel:
    """[A, B, selector]: the selector's component along ``u`` decides which token is copied.

    The answer-position variable lives on a single direction ``u`` of the
    residual stream entering layer 1 at the final position; every selector
    also carries nuisance components orthogonal to ``u``. The attention score
    is ``query_scale / 4 * (u . x)``; keeping it unsaturated means the
    interchange loss keeps rewarding exact alignment with ``u``.
    """
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_head=16, d_mlp=8,
                      vocab_size=PL_CONTENT + 2 * PL_SELECTORS, max_seq_len=4, norm="none",
                      activation="gelu", seed=seed)
    p = _blank(cfg)
    rng = np.random.default_rng(seed)
    if axis_aligned:
        basis = np.eye(8)
    else:
        basis, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    u = np.zeros(32)
    u[PL_BLOCK:PL_BLOCK + 8] = basis[:, 0]
    nuis = np.zeros((7, 32))
    nuis[:, PL_BLOCK:PL_BLOCK + 8] = basis[:, 1:].T

    p["W_E"][np.arange(PL_CONTENT), np.arange(PL_CONTENT)] = 1.0
    # L_j and R_j share their nuisance, so the two classes differ only along u
    shared = rng.normal(0, nuisance, (PL_SELECTORS, 7)) @ nuis
    for j in range(PL_SELECTORS):
        p["W_E"][PL_CONTENT + j] = u + shared[j]
        p["W_E"][PL_CONTENT + PL_SELECTORS + j] = -u + shared[j]
    p["W_pos"][np.arange(4), PL_POS + np.arange(4)] = 1.0

    wq, wk, wv, wo = (p[f"blocks.1.attn.{w}"] for w in ("W_Q", "W_K", "W_V", "W_O"))
    wq[0, :, 0] = query_scale * u
    wk[0, PL_POS, 0] = 1.0
    wk[0, PL_POS + 1, 0] = -1.0
    # the selector position never attends to itself, so edits there cannot steer attention via its own key
    wq[0, PL_POS + 2, 1] = 1.0
    wk[0, PL_POS + 2, 1] = -60.0
    wv[0, np.arange(PL_CONTENT), np.arange(PL_CONTENT)] = 1.0
    wo[0, np.arange(PL_CONTENT), PL_OUT + np.arange(PL_CONTENT)] = 10.0
    p["W_U"][PL_OUT + np.arange(PL_CONTENT), np.arange(PL_CONTENT)] = 1.0

    content = [f"c{i}" for i in range(PL_CONTENT)]
    selectors = [f"L{j}" for j in range(PL_SELECTORS)] + [f"R{j}" for j in range(PL_SELECTORS)]
    vocab = Vocab(content + selectors)
    kind = "planted-axis" if axis_aligned else "planted-direction"
    model = Transformer(cfg, p, vocab.tokens, {"fixture": kind})
    cm = CausalModel(
        "planted",
        lambda inst: {"A": inst.tokens[0], "B": inst.tokens[1], "Sel": inst.tokens[2]},
        {"X_Pos": (("Sel",), lambda s: 0 if s.startswith("L") else 1),
         "O_Answer": (("A", "B", "X_Pos"), lambda a, b, x: (a, b)[x])},
        "O_Answer",
    )
    circuit = frozenset({"embed.0.0->head.1.0", "head.1.0->logits.2.0"})
    return GroundTruthModel(kind, model, vocab, circuit, direction=u, layer=1, position=2,
                            causal_model=cm, variable="X_Pos",
                            meta={"axis": PL_BLOCK if axis_aligned else None})


def _planted_instances(gt: GroundTruthModel, n: int, seed: int) -> list[TaskInstance]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        a, b = (f"c{i}" for i in rng.choice(PL_CONTENT, 2, replace=False))
        side = int(rng.integers(2))
        sel = ("L", "R")[side] + str(rng.integers(PL_SELECTORS))
        sel2 = ("R", "L")[side] + str(rng.integers(PL_SELECTORS))
        ans, cf_ans = (a, b) if side == 0 else (b, a)
        out.append(TaskInstance(gt.kind, (a, b, sel), ans, (a, b, sel2), cf_ans, {"cf_meta": {"selector": sel2}}))
    return out


# XOR of two directions -------------------------------------------------------------

XOR_MAGS = (0.5, 1.0, 1.5, 2.0)


def _xor_name(s1, m1, s2, m2):
    return f"x{'+-'[int(s1 < 0)]}{m1}y{'+-'[int(s2 < 0)]}{m2}"


def build_xor(seed: int = 0) -> GroundTruthModel:
    """Output sign(x * y) where x, y are magnitudes along two planted directions.

    The MLP computes |x + y| - |x - y| = 2 sign(xy) min(|x|, |y|) with four ReLUs,
    so the output variable is not a linear function of the residual stream.
    """
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_head=8, d_mlp=4, vocab_size=3 + 64,
                      max_seq_len=2, norm="none", activation="relu", seed=seed)
    p = _blank(cfg)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(8, 2)))
    a, b = np.zeros(16), np.zeros(16)
    a[:8], b[:8] = q[:, 0], q[:, 1]
    tokens = ["BOS", "pos", "neg"]
    p["W_E"][0, 12] = 1.0
    row = 3
    for s1 in (1, -1):
        for m1 in XOR_MAGS:
            for s2 in (1, -1):
                for m2 in XOR_MAGS:
                    tokens.append(_xor_name(s1, m1, s2, m2))
                    p["W_E"][row] = s1 * m1 * a + s2 * m2 * b
                    row += 1
    p["W_pos"][0, 10] = 1.0
    p["W_pos"][1, 11] = 1.0
    w_in = p["blocks.0.mlp.W_in"]
    w_in[:, 0], w_in[:, 1], w_in[:, 2], w_in[:, 3] = a + b, -a - b, a - b, b - a
    p["blocks.0.mlp.W_out"][:, 14] = [1.0, 1.0, -1.0, -1.0]
    p["W_U"][14, 1] = 5.0
    p["W_U"][14, 2] = -5.0
    vocab = Vocab(tokens)
    model = Transformer(cfg, p, vocab.tokens, {"fixture": "xor"})

    def parse(tok):
        return (1 if tok[1] == "+" else -1), (1 if tok[tok.index("y") + 1] == "+" else -1)

    cm = CausalModel(
        "xor",
        lambda inst: {"S": parse(inst.tokens[1])},
        {"X_Sign": (("S",), lambda s: s[0] * s[1]),
         "O_Answer": (("X_Sign",), lambda x: "pos" if x > 0 else "neg")},
        "O_Answer",
    )
    return GroundTruthModel("xor", model, vocab, frozenset({"embed.0.0->mlp.0.0", "mlp.0.0->logits.1.0"}),
                            direction=np.stack([a, b]), layer=0, position=1, causal_model=cm,
                            variable="X_Sign")


def _xor_instances(gt: GroundTruthModel, n: int, seed: int) -> list[TaskInstance]:
    """Pairs always flip the sign variable."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s1, s2, t1, t2 = rng.choice([1, -1], 4)
        while s1 * s2 == t1 * t2:
            t1, t2 = rng.choice([1, -1], 2)
        m = rng.choice(XOR_MAGS, 4)
        base, src = _xor_name(s1, m[0], s2, m[1]), _xor_name(t1, m[2], t2, m[3])
        out.append(TaskInstance("xor", ("BOS", base), "pos" if s1 * s2 > 0 else "neg",
                                ("BOS", src), "pos" if t1 * t2 > 0 else "neg", {"cf_meta": {"source": src}}))
    return out


# linear and near-linear regimes ------------------------------------------------------

def build_linearized(seed: int = 0, vocab_size: int = 16, n_layers: int = 1) -> GroundTruthModel:
    """Random weights with W_Q = W_K = 0, no normalization and identity MLP activation.

    Attention is uniform over the causal prefix and every map is linear, so
    first-order edge attribution is exact.
    """
    cfg = ModelConfig(n_layers=n_layers, n_heads=2, d_model=16, d_head=8, d_mlp=16, vocab_size=vocab_size,
                      max_seq_len=6, norm="none", activation="identity", seed=seed)
    model = Transformer.random(cfg)
    p = dict(model.params)
    for layer in range(n_layers):
        p[f"blocks.{layer}.attn.W_Q"] = np.zeros_like(p[f"blocks.{layer}.attn.W_Q"])
        p[f"blocks.{layer}.attn.W_K"] = np.zeros_like(p[f"blocks.{layer}.attn.W_K"])
    vocab = Vocab([f"w{i}" for i in range(vocab_size)])
    return GroundTruthModel("linearized", Transformer(cfg, p, vocab.tokens, {"fixture": "linearized"}), vocab)


def build_near_linear(seed: int = 0, vocab_size: int = 16, spread: float = 0.005) -> GroundTruthModel:
    """A layernormed GELU model whose counterfactual tokens have nearby embeddings.

    Token ``2i + 1`` embeds within ``spread`` of token ``2i``; pairs swap the
    two members, so every activation delta is small and first-order
    attribution is accurate to second order.
    """
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_head=8, d_mlp=32, vocab_size=vocab_size,
                      max_seq_len=6, seed=seed)
    model = Transformer.random(cfg)
    p = dict(model.params)
    rng = np.random.default_rng(seed + 1)
    p["W_E"] = p["W_E"].copy()
    p["W_E"][1::2] = p["W_E"][0::2] + spread * rng.normal(size=p["W_E"][0::2].shape)
    vocab = Vocab([f"w{i}" for i in range(vocab_size)])
    return GroundTruthModel("near-linear", Transformer(cfg, p, vocab.tokens, {"fixture": "near-linear"}), vocab)


def _random_pair_instances(gt: GroundTruthModel, n: int, seed: int, length: int = 5) -> list[TaskInstance]:
    """Random sequences; the counterfactual flips the low bit of each token id.

    Answers are placeholders that only fix which logits the metric compares.
    """
    rng = np.random.default_rng(seed)
    V = len(gt.vocab)
    out = []
    for _ in range(n):
        ids = rng.integers(V, size=length)
        cf = ids ^ 1 if gt.kind == "near-linear" else rng.integers(V, size=length)
        y, y2 = rng.choice(V, 2, replace=False)
        toks = gt.vocab.decode(ids)
        out.append(TaskInstance(gt.kind, toks, gt.vocab.tokens[y], gt.vocab.decode(cf), gt.vocab.tokens[y2]))
    return out


_GENERATORS = {
    "copy-head": _copy_instances,
    "planted-direction": _planted_instances,
    "planted-axis": _planted_instances,
    "xor": _xor_instances,
    "linearized": _random_pair_instances,
    "near-linear": _random_pair_instances,
}


def build_ground_truth_model(kind: str, seed: int = 0) -> GroundTruthModel:
    builders = {"copy-head": build_copy_head, "planted-direction": build_planted_direction,
                "planted-axis": lambda seed=0: build_planted_direction(seed, axis_aligned=True),
                "xor": build_xor, "linearized": build_linearized, "near-linear": build_near_linear}
    if kind not in builders:
        raise ValueError(f"unknown fixture {kind!r}; known: {sorted(builders)}")
    return builders[kind](seed=seed)
