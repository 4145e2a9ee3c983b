"""Causal-variable localization: invertible featurizers and interchange interventions.

A featurizer maps a hidden vector h (width d) to features y = F(h) of the same
width. An interchange intervention on coordinates Pi replaces y_Pi on the base
run with the counterfactual run's y_Pi and maps back through F^-1.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Transformer, TrainingError
from .optim import Adam
from .parallel import map_chunks
from .tasks import CausalModel, TaskInstance, Vocab

ARTIFACT_VERSION = "mibkit-alignment/1"
FEATURIZER_KINDS = ("identity", "orthogonal", "pca", "mask", "nonlinear", "tanh-orthogonal")
SITE_KINDS = ("resid", "head")
POSITION_RULES = ("fixed", "last", "first_token")


class FeaturizeError(ValueError):
    pass


class ArtifactError(FeaturizeError):
    pass


class GuardrailError(RuntimeError):
    pass


# sites --------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionRule:
    """Token-position selector: a named rule plus parameters (so it serializes)."""

    name: str = "last"
    params: tuple = ()

    def __post_init__(self):
        if self.name not in POSITION_RULES:
            raise FeaturizeError(f"unknown position rule {self.name!r}; expected one of {POSITION_RULES}")

    @classmethod
    def fixed(cls, index: int) -> "PositionRule":
        return cls("fixed", (("index", int(index)),))

    def positions(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        N, T = tokens.shape
        p = dict(self.params)
        if self.name == "last":
            return np.full(N, T - 1)
        if self.name == "fixed":
            if not 0 <= p["index"] < T:
                raise FeaturizeError(f"position {p['index']} outside sequence of length {T}")
            return np.full(N, p["index"])
        hits = tokens == p["token"]
        if not hits.any(axis=1).all():
            raise FeaturizeError(f"token id {p['token']} missing from some prompts")
        return hits.argmax(axis=1)

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PositionRule":
        return cls(d["name"], tuple(sorted(d.get("params", {}).items())))


@dataclass(frozen=True)
class InterventionSite:
    """``resid``: residual stream entering block ``layer``; ``head``: output of head (layer, head)."""

    layer: int
    kind: str = "resid"
    head: int | None = None
    position: PositionRule = PositionRule()

    def check(self, model: Transformer) -> None:
        cfg = model.config
        if self.kind not in SITE_KINDS:
            raise FeaturizeError(f"unknown site kind {self.kind!r}; expected one of {SITE_KINDS}")
        top = cfg.n_layers if self.kind == "resid" else cfg.n_layers - 1
        if not 0 <= self.layer <= top:
            raise FeaturizeError(f"site layer {self.layer} outside [0, {top}]")
        if self.kind == "head" and (self.head is None or not 0 <= self.head < cfg.n_heads):
            raise FeaturizeError(f"site head {self.head} outside [0, {cfg.n_heads})")

    @property
    def node(self) -> str | None:
        return f"head.{self.layer}.{self.head}" if self.kind == "head" else None

    def to_dict(self) -> dict:
        return {"layer": self.layer, "kind": self.kind, "head": self.head, "position": self.position.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "InterventionSite":
        return cls(d["layer"], d["kind"], d.get("head"), PositionRule.from_dict(d["position"]))


def capture(model: Transformer, site: InterventionSite, tokens):
    """(run, h, positions): the unmodified run and the site vectors at the selected positions."""
    site.check(model)
    tokens = model.check_tokens(tokens)
    run = model.run(tokens)
    pos = site.position.positions(tokens)
    rows = np.arange(len(tokens))
    full = run.resid(site.layer) if site.kind == "resid" else run.outputs[site.node].data
    if full is None:
        raise FeaturizeError(f"could not capture site {site}")
    return run, full[rows, pos], pos


# featurizers -----------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureIndices:
    indices: tuple[int, ...]
    width: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise FeaturizeError("feature indices must be distinct")
        if any(not 0 <= i < self.width for i in idx):
            raise FeaturizeError(f"feature indices outside [0, {self.width})")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    @classmethod
    def leading(cls, k: int, width: int) -> "FeatureIndices":
        return cls(tuple(range(k)), width)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.width, dtype=bool)
        m[list(self.indices)] = True
        return m

    def __len__(self):
        return len(self.indices)


def householder(V: Tensor) -> Tensor:
    """Product of reflections I - 2 v v^T / |v|^2 over the rows of V (exactly orthogonal)."""
    n, d = V.shape
    R = Tensor(np.eye(d))
    for i in range(n):
        v = V[i:i + 1]
        v = v / ad.sqrt((v * v).sum())
        R = R - 2.0 * (R @ v.T) * v
    return R


def gram_deviation(R: np.ndarray) -> float:
    return float(np.abs(R @ R.T - np.eye(len(R))).max())


@dataclass
class Featurizer:
    """Rows of the rotation are feature directions: y = R h (plus coupling for ``nonlinear``).

    ``nonlinear`` rescales the Pi coordinates by 1 + 2 tanh(W_d GeLU(W_u x_rest)),
    a function of the untouched coordinates, so the map stays invertible.
    ``tanh-orthogonal`` mixes in tanh(x / scale) space during training only.
    """

    kind: str
    d: int
    params: dict[str, np.ndarray]
    pi: FeatureIndices

    def __post_init__(self):
        if self.kind not in FEATURIZER_KINDS:
            raise FeaturizeError(f"unknown featurizer kind {self.kind!r}; expected one of {FEATURIZER_KINDS}")
        if self.pi.width != self.d:
            raise FeaturizeError("feature indices built for a different width")

    @property
    def k(self) -> int:
        return self.d

    def tensors(self, trainable: Sequence[str] = ()) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=k in trainable) for k, v in self.params.items()}

    def rotation(self, P: Mapping[str, Tensor] | None = None) -> Tensor | None:
        P = P if P is not None else self.tensors()
        if self.kind in ("identity", "mask"):
            return None
        if "R" in P:
            return P["R"]
        return householder(P["V"])

    def rotation_matrix(self) -> np.ndarray:
        R = self.rotation()
        return np.eye(self.d) if R is None else R.data

    def _coupling(self, x_rest: Tensor, P) -> Tensor:
        return 1.0 + 2.0 * ad.tanh(ad.gelu(x_rest @ P["W_u"].T) @ P["W_d"].T)

    def _split(self):
        pi = np.array(self.pi.indices, dtype=np.int64)
        rest = np.array([i for i in range(self.d) if i not in set(self.pi.indices)], dtype=np.int64)
        return pi, rest

    def forward(self, h, P=None, R=None) -> Tensor:
        P = P if P is not None else self.tensors()
        h = h if isinstance(h, Tensor) else Tensor(h)
        if R is None:
            R = self.rotation(P)
        x = h if R is None else h @ R.T
        if self.kind == "nonlinear" and "W_u" in P:
            pi, rest = self._split()
            g = self._coupling(x[:, rest], P)
            scale = ad.concat([g, Tensor(np.ones((x.shape[0], len(rest))))], axis=1)
            order = np.argsort(np.concatenate([pi, rest]))
            x = x * scale[:, order]
        return x

    def inverse(self, y, P=None, R=None) -> Tensor:
        P = P if P is not None else self.tensors()
        y = y if isinstance(y, Tensor) else Tensor(y)
        if R is None:
            R = self.rotation(P)
        if self.kind == "nonlinear" and "W_u" in P:
            pi, rest = self._split()
            g = self._coupling(y[:, rest], P)
            scale = ad.concat([g, Tensor(np.ones((y.shape[0], len(rest))))], axis=1)
            order = np.argsort(np.concatenate([pi, rest]))
            y = y / scale[:, order]
        return y if R is None else y @ R

    def interchange(self, h_base, h_src, P=None, gates: Tensor | None = None) -> Tensor:
        """Base vectors with features Pi taken from the source vectors."""
        P = P if P is not None else self.tensors()
        h_base = h_base if isinstance(h_base, Tensor) else Tensor(h_base)
        h_src = h_src if isinstance(h_src, Tensor) else Tensor(h_src)
        if gates is not None:  # soft mask used while training DBM
            return h_base + gates * (h_src - h_base)
        R = self.rotation(P)
        yb, ys = self.forward(h_base, P, R), self.forward(h_src, P, R)
        if "tanh_scale" in P:
            s = P["tanh_scale"]
            tb, ts = ad.tanh(yb / s), ad.tanh(ys / s)
            mixed = ad.where(self.pi.mask(), ts, tb)
            mixed = 0.5 * s * ad.log((1.0 + mixed) / (1.0 - mixed))
        else:
            mixed = ad.where(self.pi.mask(), ys, yb)
        return self.inverse(mixed, P, R)

    def reconstruction_error(self, h: np.ndarray) -> float:
        h = np.atleast_2d(h)
        back = self.inverse(self.forward(h)).data
        norms = np.linalg.norm(h, axis=1)
        norms[norms == 0] = 1.0
        return float((np.linalg.norm(back - h, axis=1) / norms).max())

    def export(self, drop_mlp: bool = False) -> "Featurizer":
        """Concrete featurizer: rotation stored as R, training-only pieces removed."""
        params = {}
        kind = self.kind
        R = self.rotation()
        if R is not None:
            params["R"] = R.data.copy()
        if self.kind == "nonlinear":
            if drop_mlp:
                kind = "orthogonal"
            else:
                params["W_u"], params["W_d"] = self.params["W_u"].copy(), self.params["W_d"].copy()
        if self.kind == "tanh-orthogonal":
            kind = "orthogonal"
        if self.kind == "mask":
            params["gate_logits"] = self.params["gate_logits"].copy()
        return Featurizer(kind, self.d, params, self.pi)


def identity_featurizer(d: int, dims: int | None = None) -> Featurizer:
    return Featurizer("identity", d, {}, FeatureIndices.leading(d if dims is None else dims, d))


def random_orthogonal(d: int, dims: int, seed: int = 0) -> Featurizer:
    V = np.random.default_rng(seed).normal(size=(d, d))
    return Featurizer("orthogonal", d, {"V": V}, FeatureIndices.leading(dims, d))


# interventions ------------------------------------------------------------------------

@dataclass
class PairedData:
    """Base prompts, source (counterfactual) prompts and the expected output under interchange."""

    tokens: np.ndarray
    cf_tokens: np.ndarray
    answers: np.ndarray
    expected: np.ndarray

    def __len__(self):
        return len(self.tokens)

    def subset(self, idx) -> "PairedData":
        idx = np.asarray(idx)
        return PairedData(self.tokens[idx], self.cf_tokens[idx], self.answers[idx], self.expected[idx])


def expected_output(causal_model: CausalModel, base: TaskInstance, source: TaskInstance, variable: str,
                    source_is_cf: bool = False) -> str:
    return causal_model.interchange(base, source, variable, source_is_cf=source_is_cf)


def paired_data(instances: Sequence[TaskInstance], vocab: Vocab, causal_model: CausalModel,
                variable: str) -> PairedData:
    """Pairs (base = prompt, source = counterfactual prompt) with their expected outputs."""
    if not instances:
        raise FeaturizeError("empty pair set")
    return PairedData(
        np.stack([vocab.encode(i.tokens) for i in instances]),
        np.stack([vocab.encode(i.cf_tokens) for i in instances]),
        np.array([vocab.id(i.answer) for i in instances], dtype=np.int64),
        np.array([vocab.id(expected_output(causal_model, i, i, variable, source_is_cf=True))
                  for i in instances], dtype=np.int64),
    )


def _intervened_run(model: Transformer, site: InterventionSite, tokens, base_run, pos, h_new: Tensor, h_base):
    N, T = tokens.shape
    onehot = np.zeros((N, T, 1))
    onehot[np.arange(N), pos, 0] = 1.0
    if site.kind == "resid":
        delta = (h_new - Tensor(h_base)).reshape(N, 1, -1) * Tensor(onehot)
        return model.run(tokens, resid_edits={site.layer: delta}, base=base_run)
    out = base_run.outputs[site.node]
    replaced = ad.where(onehot.astype(bool), h_new.reshape(N, 1, -1), out)
    return model.run(tokens, overrides={site.node: replaced}, base=base_run)


def intervened_logits(model: Transformer, site: InterventionSite, featurizer: Featurizer, tokens, cf_tokens,
                      P=None, gates=None) -> Tensor:
    tokens = model.check_tokens(tokens)
    cf_tokens = model.check_tokens(cf_tokens)
    base_run, h_b, pos = capture(model, site, tokens)
    _, h_c, _ = capture(model, site, cf_tokens)
    h_new = featurizer.interchange(h_b, h_c, P, gates)
    return _intervened_run(model, site, tokens, base_run, pos, h_new, h_b).final_logits


def interchange_intervene(model: Transformer, base, counterfactual, artifact) -> np.ndarray:
    """Greedy output tokens of the base run with features Pi fixed to the counterfactual's."""
    feat, site = _unpack(artifact)
    base = np.atleast_2d(base)
    counterfactual = np.atleast_2d(counterfactual)
    if base.shape != counterfactual.shape:
        raise FeaturizeError("base and counterfactual prompts differ in shape")

    def part(s):
        return intervened_logits(model, site, feat, base[s], counterfactual[s]).data.argmax(-1)

    return np.concatenate(map_chunks(part, len(base)))


def faithfulness_score(model: Transformer, artifact, data: PairedData) -> float:
    """Fraction of pairs whose intervened output equals the expected output."""
    out = interchange_intervene(model, data.tokens, data.cf_tokens, artifact)
    return int((out == data.expected).sum()) / len(data)


def _unpack(artifact):
    if isinstance(artifact, AlignmentArtifact):
        return artifact.featurizer, artifact.site
    feat, site = artifact
    return feat, site


# training ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 0.02
    batch_size: int = 64
    seed: int = 0
    sparsity: float = 0.01
    hidden: int = 16


def _train(model, site, data: PairedData, feat: Featurizer, trainable: Sequence[str], cfg: TrainConfig,
           extra_loss=None, gate_fn=None, check_orthogonal: bool = False):
    site.check(model)
    base_run, h_b, pos = capture(model, site, data.tokens)
    _, h_c, _ = capture(model, site, data.cf_tokens)
    P = feat.tensors(trainable)
    opt = Adam({k: P[k] for k in trainable}, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    N = len(data)
    losses, max_dev = [], 0.0
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(N, size=min(cfg.batch_size, N), replace=False))
        run = model.run(data.tokens[idx])
        gates = gate_fn(P) if gate_fn else None
        h_new = feat.interchange(h_b[idx], h_c[idx], P, gates)
        logits = _intervened_run(model, site, data.tokens[idx], run, pos[idx], h_new, h_b[idx]).final_logits
        loss = ad.cross_entropy_with_logits(logits, data.expected[idx])
        if extra_loss is not None:
            loss = loss + extra_loss(P)
        if not np.isfinite(loss.data):
            raise TrainingError(f"featurizer training diverged at step {step}")
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(float(loss.data))
        if check_orthogonal:
            max_dev = max(max_dev, gram_deviation(householder(Tensor(P["V"].data)).data))
    params = {k: np.array(v.data) for k, v in P.items()}
    return params, losses, max_dev


def _init_v(d: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 1]).normal(size=(d, d))


@dataclass
class AlignmentArtifact:
    featurizer: Featurizer
    site: InterventionSite
    variable: str
    model_fingerprint: str
    provenance: dict = field(default_factory=dict)
    faithfulness: float | None = None

    @property
    def pi(self) -> FeatureIndices:
        return self.featurizer.pi

    def evaluate(self, model: Transformer, data: PairedData) -> float:
        check_binding(self, model)
        return faithfulness_score(model, self, data)


def _artifact(model, feat, site, variable, provenance, drop_mlp=False):
    return AlignmentArtifact(feat.export(drop_mlp), site, variable, model.fingerprint(), provenance)


def train_das(model, site, variable, data: PairedData, dims: int, cfg: TrainConfig | None = None,
              steps: int | None = None) -> AlignmentArtifact:
    cfg = cfg or TrainConfig()
    if steps is not None:
        cfg = TrainConfig(**{**cfg.__dict__, "steps": steps})
    d = model.config.d_model
    if not 1 <= dims <= d:
        raise FeaturizeError(f"dims must lie in [1, {d}]")
    feat = Featurizer("orthogonal", d, {"V": _init_v(d, cfg.seed)}, FeatureIndices.leading(dims, d))
    params, losses, dev = _train(model, site, data, feat, ["V"], cfg, check_orthogonal=True)
    feat = Featurizer("orthogonal", d, params, feat.pi)
    prov = {"method": "das", "dims": dims, **cfg.__dict__, "final_loss": losses[-1] if losses else None,
            "max_gram_deviation": dev}
    return _artifact(model, feat, site, variable, prov)


def train_tanh_orthogonal(model, site, variable, data: PairedData, dims: int,
                          cfg: TrainConfig | None = None) -> AlignmentArtifact:
    cfg = cfg or TrainConfig()
    d = model.config.d_model
    _, h_b, _ = capture(model, site, data.tokens)
    _, h_c, _ = capture(model, site, data.cf_tokens)
    scale = 4.0 * max(float(np.abs(h_b).max()), float(np.abs(h_c).max()), 1e-6)
    feat = Featurizer("tanh-orthogonal", d, {"V": _init_v(d, cfg.seed), "tanh_scale": np.array(scale)},
                      FeatureIndices.leading(dims, d))
    params, losses, dev = _train(model, site, data, feat, ["V"], cfg, check_orthogonal=True)
    feat = Featurizer("tanh-orthogonal", d, params, feat.pi)
    prov = {"method": "tanh-orthogonal", "dims": dims, **cfg.__dict__, "tanh_scale": scale,
            "final_loss": losses[-1] if losses else None, "max_gram_deviation": dev}
    return _artifact(model, feat, site, variable, prov)


def train_nonlinear(model, site, variable, data: PairedData, dims: int, cfg: TrainConfig | None = None,
                    drop_mlp: bool = False) -> AlignmentArtifact:
    cfg = cfg or TrainConfig()
    d = model.config.d_model
    if cfg.hidden < dims:
        raise FeaturizeError("hidden width must be at least dims")
    rng = np.random.default_rng([cfg.seed, 2])
    params = {"V": _init_v(d, cfg.seed),
              "W_u": rng.normal(0, 1.0 / math.sqrt(d - dims), (cfg.hidden, d - dims)),
              "W_d": np.zeros((dims, cfg.hidden))}
    feat = Featurizer("nonlinear", d, params, FeatureIndices.leading(dims, d))
    params, losses, dev = _train(model, site, data, feat, ["V", "W_u", "W_d"], cfg, check_orthogonal=True)
    feat = Featurizer("nonlinear", d, params, feat.pi)
    prov = {"method": "nonlinear", "dims": dims, **cfg.__dict__, "final_loss": losses[-1] if losses else None,
            "max_gram_deviation": dev, "drop_mlp": drop_mlp}
    return _artifact(model, feat, site, variable, prov, drop_mlp)


def train_dbm(model, site, variable, data: PairedData, sparsity: float | None = None,
              cfg: TrainConfig | None = None) -> AlignmentArtifact:
    """Sigmoid mask over standard-basis coordinates; Pi = coordinates whose gate exceeds 0.5."""
    cfg = cfg or TrainConfig()
    lam = cfg.sparsity if sparsity is None else sparsity
    d = model.config.d_model
    feat = Featurizer("mask", d, {"gate_logits": np.zeros(d)}, FeatureIndices((), d))
    gate_ranges = []

    def gate_fn(P):
        g = ad.sigmoid(P["gate_logits"])
        gate_ranges.append((float(g.data.min()), float(g.data.max())))
        return g

    params, losses, _ = _train(model, site, data, feat, ["gate_logits"], cfg,
                               extra_loss=lambda P: lam * ad.sigmoid(P["gate_logits"]).sum(), gate_fn=gate_fn)
    gates = 1.0 / (1.0 + np.exp(-params["gate_logits"]))
    pi = FeatureIndices(tuple(np.flatnonzero(gates > 0.5)), d)
    feat = Featurizer("mask", d, params, pi)
    prov = {"method": "dbm", **cfg.__dict__, "sparsity": lam, "final_loss": losses[-1] if losses else None,
            "gate_min": min((r[0] for r in gate_ranges), default=None),
            "gate_max": max((r[1] for r in gate_ranges), default=None)}
    return _artifact(model, feat, site, variable, prov)


@dataclass
class PCAFit:
    basis: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray


def pca_basis(acts: np.ndarray) -> PCAFit:
    acts = np.asarray(acts, dtype=np.float64)
    mean = acts.mean(axis=0)
    _, s, vt = np.linalg.svd(acts - mean, full_matrices=False)
    d = acts.shape[1]
    if len(vt) < d:  # fewer samples than dimensions: complete to an orthonormal basis
        q, _ = np.linalg.qr(np.vstack([vt, np.eye(d)]).T)
        vt = np.vstack([vt, q[:, len(vt):d].T])
    var = np.zeros(d)
    var[:len(s)] = s**2 / max(len(acts) - 1, 1)
    return PCAFit(vt, var, mean)


def fit_pca(model, site, variable, data: PairedData, dims: int) -> AlignmentArtifact:
    d = model.config.d_model
    if not 1 <= dims <= d:
        raise FeaturizeError(f"dims must lie in [1, {d}]")
    _, h_b, _ = capture(model, site, data.tokens)
    fit = pca_basis(h_b)
    rank = int((fit.explained_variance > 1e-12 * max(fit.explained_variance.max(), 1e-300)).sum())
    if rank < dims:
        warnings.warn(f"site activations have rank {rank} < {dims}; trailing components carry no variance",
                      stacklevel=2)
    feat = Featurizer("pca", d, {"R": fit.basis}, FeatureIndices.leading(dims, d))
    prov = {"method": "pca", "dims": dims, "rank": rank,
            "explained_variance": [float(v) for v in fit.explained_variance]}
    return AlignmentArtifact(feat, site, variable, model.fingerprint(), prov)


def train_featurizer(kind: str, model, site, variable, data: PairedData, dims: int = 1,
                     cfg: TrainConfig | None = None, **kw) -> AlignmentArtifact:
    if kind == "identity":
        return AlignmentArtifact(identity_featurizer(model.config.d_model, dims), site, variable,
                                 model.fingerprint(), {"method": "identity", "dims": dims})
    if kind in ("das", "orthogonal"):
        return train_das(model, site, variable, data, dims, cfg)
    if kind == "tanh-orthogonal":
        return train_tanh_orthogonal(model, site, variable, data, dims, cfg)
    if kind == "nonlinear":
        return train_nonlinear(model, site, variable, data, dims, cfg, **kw)
    if kind in ("dbm", "mask"):
        return train_dbm(model, site, variable, data, cfg=cfg)
    if kind == "pca":
        return fit_pca(model, site, variable, data, dims)
    raise FeaturizeError(f"unknown featurizer kind {kind!r}; expected identity, das, tanh-orthogonal, "
                         "nonlinear, dbm or pca")


# control-task guardrail -----------------------------------------------------------------

@dataclass
class ControlReport:
    trained: float
    baseline: float
    margin: float = 0.05

    @property
    def passed(self) -> bool:
        return self.trained <= self.baseline + self.margin


def control_task(data: PairedData, seed: int = 0) -> PairedData:
    """Same pairs with the expected outputs shuffled across pairs."""
    perm = np.random.default_rng([seed, 3]).permutation(len(data))
    return PairedData(data.tokens, data.cf_tokens, data.answers, data.expected[perm])


def control_guardrail(model, site, variable, train: PairedData, held_out: PairedData, dims: int = 1,
                      cfg: TrainConfig | None = None, margin: float = 0.05) -> ControlReport:
    """Train a nonlinear featurizer on shuffled labels and compare held-out accuracy to an untrained one."""
    cfg = cfg or TrainConfig()
    ctrl_train, ctrl_test = control_task(train, cfg.seed), control_task(held_out, cfg.seed + 1)
    trained = train_nonlinear(model, site, variable, ctrl_train, dims, cfg)
    untrained = train_nonlinear(model, site, variable, ctrl_train, dims, TrainConfig(**{**cfg.__dict__, "steps": 0}))
    return ControlReport(faithfulness_score(model, trained, ctrl_test),
                         faithfulness_score(model, untrained, ctrl_test), margin)


def enforce_guardrail(report: ControlReport) -> None:
    if not report.passed:
        raise GuardrailError(f"control-task faithfulness {report.trained:.3f} exceeds untrained baseline "
                             f"{report.baseline:.3f} + {report.margin:.2f}")


# persistence ------------------------------------------------------------------------------

def check_binding(artifact: AlignmentArtifact, model: Transformer) -> None:
    if artifact.model_fingerprint != model.fingerprint():
        raise ArtifactError(f"artifact bound to model {artifact.model_fingerprint}, got {model.fingerprint()}")


def save_artifact(artifact: AlignmentArtifact, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    feat = artifact.featurizer
    params = {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
              for k, v in sorted(feat.params.items())}
    (root / "params.json").write_text(json.dumps(params, sort_keys=True) + "\n")
    meta = {"version": ARTIFACT_VERSION, "kind": feat.kind, "d": feat.d, "pi": list(feat.pi.indices),
            "site": artifact.site.to_dict(), "variable": artifact.variable,
            "model_fingerprint": artifact.model_fingerprint, "faithfulness": artifact.faithfulness,
            "provenance": artifact.provenance}
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return root


def load_artifact(path, model: Transformer | None = None) -> AlignmentArtifact:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
        raw = json.loads((root / "params.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read artifact at {root}: {exc}") from None
    if meta.get("version") != ARTIFACT_VERSION:
        raise ArtifactError(f"artifact version {meta.get('version')!r}, expected {ARTIFACT_VERSION!r}")
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in raw.items()}
    feat = Featurizer(meta["kind"], meta["d"], params, FeatureIndices(tuple(meta["pi"]), meta["d"]))
    art = AlignmentArtifact(feat, InterventionSite.from_dict(meta["site"]), meta["variable"],
                            meta["model_fingerprint"], meta.get("provenance", {}), meta.get("faithfulness"))
    if model is not None:
        check_binding(art, model)
    return art
