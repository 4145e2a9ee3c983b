import numpy as np
import pytest

from mibkit import attribution as A
from mibkit.ablation import AblationSpec
from mibkit.circuit_eval import anchors, metric_values
from mibkit.graph import circuit_from_nodes, split_edge
from mibkit.groundtruth import build_ground_truth_model
from mibkit.model import ModelConfig, PatchPlan, Transformer
from mibkit.tasks import EncodedDataset


@pytest.fixture(scope="module")
def copy_head():
    gt = build_ground_truth_model("copy-head")
    return gt, gt.dataset(96, seed=2)


@pytest.fixture(scope="module")
def linear():
    gt = build_ground_truth_model("linearized")
    return gt, gt.dataset(48, seed=1)


@pytest.fixture(scope="module")
def nonlinear():
    m = Transformer.random(ModelConfig(n_layers=2, n_heads=2, d_model=16, d_head=8, d_mlp=32, vocab_size=12,
                                       max_seq_len=6, seed=3))
    rng = np.random.default_rng(0)
    data = EncodedDataset(rng.integers(12, size=(24, 5)), rng.integers(6, size=24),
                          rng.integers(12, size=(24, 5)), 6 + rng.integers(6, size=24))
    return m, data


def _self_pair(data):
    return EncodedDataset(data.tokens, data.answers, data.tokens, data.cf_answers)


def _top2(scores):
    return set(sorted(scores.scores, key=lambda e: -abs(scores.scores[e]))[:2])


# EAP and its integrated-gradient variants --------------------------------------------------

def test_eap_exact_on_linear_model(linear):
    gt, data = linear
    g = gt.model.graph
    eap = A.eap_scores(gt.model, data).array(g)
    exact = A.exact_edge_patch_scores(gt.model, data).array(g)
    assert np.max(np.abs(eap - exact)) <= 1e-9 * np.max(np.abs(exact))


@pytest.mark.parametrize("method", ["eap", "ig-inputs", "ig-acts", "eactp", "nap", "nap-ig"])
def test_zero_delta_nullity(nonlinear, method):
    m, data = nonlinear
    same = _self_pair(data)
    fn = {"eap": lambda: A.eap_scores(m, same), "ig-inputs": lambda: A.eap_ig_inputs_scores(m, same, 4),
          "ig-acts": lambda: A.eap_ig_acts_scores(m, same, 4), "eactp": lambda: A.exact_edge_patch_scores(m, same),
          "nap": lambda: A.node_attribution_scores(m, same),
          "nap-ig": lambda: A.node_attribution_scores(m, same, ig_steps=4)}[method]
    assert all(v == 0.0 for v in fn().scores.values())


@pytest.mark.parametrize("variant", [A.eap_ig_inputs_scores, A.eap_ig_acts_scores])
def test_ig_single_step_equals_eap_bitwise(nonlinear, variant):
    m, data = nonlinear
    g = m.graph
    assert np.array_equal(variant(m, data, steps=1).array(g), A.eap_scores(m, data).array(g))


@pytest.mark.parametrize("method", [A.eap_scores, A.eap_ig_acts_scores, A.eap_ig_inputs_scores])
def test_true_edges_rank_top_two_on_copy_head(copy_head, method):
    gt, data = copy_head
    assert _top2(method(gt.model, data)) == gt.circuit


def test_ig_steps_validated(nonlinear):
    m, data = nonlinear
    with pytest.raises(A.AttributionError, match="steps"):
        A.eap_ig_inputs_scores(m, data, steps=0)


def test_non_finite_gradient_names_instance(nonlinear, monkeypatch):
    from mibkit import autodiff
    monkeypatch.setattr(autodiff, "CHECK_FINITE", False)
    m, data = nonlinear
    params = dict(m.params)
    params["W_U"] = params["W_U"].copy()
    params["W_U"][0, data.answers[3]] = np.inf
    bad = Transformer(m.config, params)
    with pytest.raises(A.AttributionError, match="instance"):
        A.eap_scores(bad, data)


def test_ig_input_completeness_on_copy_head(copy_head):
    gt, data = copy_head
    sub = data.subset(np.arange(8))
    attr = A.ig_input_attributions(gt.model, sub, steps=256).sum(axis=1)
    w = metric_values(gt.model, sub.tokens, sub.answers, sub.cf_answers)
    w_cf = metric_values(gt.model, sub.cf_tokens, sub.answers, sub.cf_answers)
    np.testing.assert_allclose(attr, w - w_cf, rtol=0.01)


# exact patching ----------------------------------------------------------------------------

def test_exact_self_patch_zero(nonlinear):
    m, data = nonlinear
    assert all(v == 0.0 for v in A.exact_edge_patch_scores(m, _self_pair(data)).scores.values())


def test_exact_matches_eap_in_near_linear_regime():
    gt = build_ground_truth_model("near-linear")
    data = gt.dataset(64, seed=1)
    g = gt.model.graph
    eap = A.eap_scores(gt.model, data).array(g)
    exact = A.exact_edge_patch_scores(gt.model, data).array(g)
    assert np.max(np.abs(eap - exact)) <= 0.05 * np.max(np.abs(exact))


def test_single_edge_effects_not_additive(nonlinear):
    m, data = nonlinear
    total = sum(A.exact_edge_patch_scores(m, data).scores.values())
    a = anchors(m, data)
    assert abs(total - (a.m_empty - a.m_full)) > 1e-3


def test_exact_budget(nonlinear):
    m, data = nonlinear
    with pytest.raises(A.AttributionError, match="sub-sample"):
        A.exact_edge_patch_scores(m, data, budget=10)


# node attribution -------------------------------------------------------------------------

def test_nap_distractors_zero_and_broadcast(copy_head):
    gt, data = copy_head
    nap = A.node_attribution_scores(gt.model, data)
    assert nap.level == "node"
    for h in (1, 2, 3):
        assert nap.scores[f"head.0.{h}"] == 0.0
    g = gt.model.graph
    members = ["embed.0.0", "head.0.0"]
    circuit = circuit_from_nodes(g, members)
    assert len(circuit.members) == sum(len(g.out_edges(g.node(n))) for n in members)
    edges = nap.to_edges(g)
    assert all(edges.scores[e] == nap.scores[split_edge(e)[0]] for e in g.edge_names)


def test_nap_ig_single_step_equals_nap(nonlinear):
    m, data = nonlinear
    assert A.node_attribution_scores(m, data, ig_steps=1).scores == A.node_attribution_scores(m, data).scores


# bootstrap ------------------------------------------------------------------------------------

class TwoPopulations:
    """Per-instance contributions: 'flip' is +1 on one half and -1 on the other, 'steady' is always positive."""

    def __init__(self, n=200):
        rng = np.random.default_rng(0)
        self.flip = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        self.steady = 1.0 + 0.1 * rng.random(n)

    def subset(self, idx):
        out = TwoPopulations.__new__(TwoPopulations)
        out.flip, out.steady = self.flip[idx], self.steady[idx]
        return out

    def __len__(self):
        return len(self.flip)


def _mean_scores(data):
    return {"flip": float(data.flip.mean()), "steady": float(data.steady.mean())}


def test_bootstrap_filters_sign_flipping_edge():
    out = A.bootstrap_filter(_mean_scores, TwoPopulations(), resamples=50, tau=0.95, seed=0)
    assert out.filtered == {"flip"}
    assert out.scores["flip"] == 0.0
    assert out.scores["steady"] == _mean_scores(TwoPopulations())["steady"]


@pytest.mark.parametrize("tau", [0.51, 0.95, 1.0])
def test_bootstrap_keeps_deterministic_scores(tau):
    fixed = {"a": 1.0, "b": -2.0, "c": 0.0}
    out = A.bootstrap_filter(lambda d: fixed, TwoPopulations(), resamples=10, tau=tau)
    assert not out.filtered and out.scores == fixed


def test_bootstrap_preconditions():
    with pytest.raises(A.AttributionError, match="2 resamples"):
        A.bootstrap_filter(_mean_scores, TwoPopulations(), resamples=1)
    with pytest.raises(A.AttributionError, match="tau"):
        A.bootstrap_filter(_mean_scores, TwoPopulations(), tau=0.5)


def test_bootstrap_on_model_scores_propagates_provenance(copy_head):
    gt, data = copy_head
    out = A.bootstrap_filter(lambda d: A.eap_scores(gt.model, d), data, resamples=5, tau=0.95)
    assert out.provenance["bootstrap"]["resamples"] == 5
    assert gt.circuit.isdisjoint(out.filtered)


# ensembles -------------------------------------------------------------------------------------

def _random_scores(seed, names):
    rng = np.random.default_rng(seed)
    return A.AttributionScores(dict(zip(names, rng.normal(size=len(names)))), {"method": f"r{seed}"})


def test_parallel_mean_idempotent():
    names = [f"e{i}" for i in range(10)]
    s = _random_scores(0, names)
    merged = A.ensemble_parallel([s, s, s], "mean")
    expect = A.normalize(s).scores
    assert all(merged.scores[e] == pytest.approx(expect[e], abs=1e-15) for e in names)


def test_merge_order_statistics():
    names = [f"e{i}" for i in range(10)]
    sets = [_random_scores(i, names) for i in range(3)]
    mx, mean, mn = (A.ensemble_parallel(sets, m).scores for m in ("max", "mean", "min"))
    assert all(mx[e] >= mean[e] >= mn[e] for e in names)
    w = A.ensemble_parallel(sets, "weighted", [1, 1, 1]).scores
    assert all(w[e] == pytest.approx(mean[e], abs=1e-15) for e in names)


def test_merge_errors():
    a = _random_scores(0, ["x", "y"])
    b = _random_scores(1, ["x", "z"])
    with pytest.raises(A.AttributionError, match=r"\['y', 'z'\]"):
        A.ensemble_parallel([a, b])
    with pytest.raises(A.AttributionError, match="two"):
        A.ensemble_parallel([a])
    with pytest.raises(A.AttributionError, match="merge"):
        A.ensemble_parallel([a, a], "median")


def test_hybrid_without_sequential_is_parallel_mean_of_three(copy_head):
    gt, data = copy_head
    m = gt.model
    three = [A.eap_scores(m, data), A.eap_ig_inputs_scores(m, data), A.eap_ig_acts_scores(m, data)]
    expect = A.ensemble_parallel(three, "mean").scores
    logged = []
    got = A.ensemble_hybrid(m, data, sequential=False, log=logged.append)
    assert got.scores == expect
    assert len(logged) == 3


def test_hybrid_deterministic_and_logs_four(copy_head):
    gt, data = copy_head
    cfg = A.PruneConfig(steps=20)
    logged = []
    a = A.ensemble_hybrid(gt.model, data, prune=cfg, log=logged.append)
    b = A.ensemble_hybrid(gt.model, data, prune=cfg)
    assert a.scores == b.scores
    assert len(logged) == 4 and "edge-pruning" in logged[-1]


# edge pruning ----------------------------------------------------------------------------------

def test_pruning_without_sparsity_recovers_full_model(copy_head):
    gt, data = copy_head
    res = A.prune_edges(None, gt.model, data, A.PruneConfig(steps=300, lr=0.2, sparsity=0.0))
    g = gt.model.graph
    assert res.losses[-1] < res.losses[0]
    for e in gt.circuit:
        assert res.scores.scores[e] > 0.95
    assert all(0.0 < v < 1.0 for v in res.scores.scores.values())


def test_pruning_warm_start_uses_scores(copy_head):
    gt, data = copy_head
    init = A.eap_scores(gt.model, data)
    cfg = A.PruneConfig(steps=0)
    la = A.initial_log_alpha(init, gt.model.graph, cfg)
    assert la.max() == cfg.init_range[1] and la.min() >= cfg.init_range[0]
    cold = A.initial_log_alpha(None, gt.model.graph, cfg)
    assert np.all(cold == 0.0)
    warm = A.ensemble_sequential(init, gt.model, data, cfg)
    assert _top2(warm) == gt.circuit


def test_pruning_budget_mode_and_errors(copy_head):
    gt, data = copy_head
    res = A.prune_edges(None, gt.model, data, A.PruneConfig(steps=5, mode="budget", target=0.2))
    assert res.scores.provenance["mode"] == "budget"
    with pytest.raises(A.AttributionError, match="sparsity mode"):
        A.prune_edges(None, gt.model, data, A.PruneConfig(mode="hard"))
    with pytest.raises(A.AttributionError, match="miss edges"):
        A.initial_log_alpha(A.AttributionScores({}), gt.model.graph, A.PruneConfig())


# path effects -----------------------------------------------------------------------------------

def test_copy_path_carries_full_effect(copy_head):
    gt, data = copy_head
    m = gt.model
    a = anchors(m, data)
    full = a.m_empty - a.m_full
    path = ["embed.0.0->head.0.0", "head.0.0->logits.1.0"]
    effect = A.isolate_path_effect(m, data.tokens, data.cf_tokens, data.answers, data.cf_answers, path)
    assert effect / full >= 0.99


def test_distractor_path_zero(copy_head):
    gt, data = copy_head
    path = ["embed.0.0->head.0.2", "head.0.2->logits.1.0"]
    effect = A.isolate_path_effect(gt.model, data.tokens, data.cf_tokens, data.answers, data.cf_answers, path)
    assert effect == 0.0


@pytest.mark.parametrize("n_layers", [1, 2])
def test_linear_path_effects_sum_to_full_effect(n_layers):
    gt = build_ground_truth_model("linearized") if n_layers == 1 else None
    if gt is None:
        from mibkit.groundtruth import build_linearized
        gt = build_linearized(n_layers=2)
    data = gt.dataset(16, seed=3)
    m = gt.model
    a = anchors(m, data)
    total = sum(A.isolate_path_effect(m, data.tokens, data.cf_tokens, data.answers, data.cf_answers, p)
                for p in m.graph.paths())
    assert total == pytest.approx(a.m_empty - a.m_full, rel=1e-9, abs=1e-12)


def test_ablate_mode_uses_zero_embedding(linear):
    gt, data = linear
    m = gt.model
    path = ["embed.0.0->logits.1.0"]
    got = A.isolate_path_effect(m, data.tokens, data.cf_tokens, data.answers, data.cf_answers, path, mode="ablate")
    zero = np.zeros_like(m.run(data.tokens).outputs["embed.0.0"].data)
    logits = m.run(data.tokens, patches=PatchPlan({path[0]: zero})).logits.data[:, -1]
    clean = m.run(data.tokens).logits.data[:, -1]
    r = np.arange(len(data))
    diff = (logits[r, data.answers] - logits[r, data.cf_answers]) - (clean[r, data.answers] - clean[r, data.cf_answers])
    assert got == pytest.approx(diff.mean(), abs=1e-12)


def test_path_validation(copy_head):
    gt, data = copy_head
    args = (gt.model, data.tokens, data.cf_tokens, data.answers, data.cf_answers)
    with pytest.raises(A.AttributionError, match="disconnected"):
        A.isolate_path_effect(*args, ["embed.0.0->head.0.0", "mlp.0.0->logits.1.0"])
    with pytest.raises(A.AttributionError, match="embedding node"):
        A.isolate_path_effect(*args, ["head.0.0->logits.1.0"])
    with pytest.raises(A.AttributionError, match="mode"):
        A.isolate_path_effect(*args, ["embed.0.0->logits.1.0"], mode="mean")


# mean ablation ------------------------------------------------------------------------------

def test_mean_ablation_position_resolved(copy_head):
    gt, data = copy_head
    spec = AblationSpec.mean_over(gt.model, data.tokens)
    T, d = data.tokens.shape[1], gt.model.config.d_model
    for node, mean in spec.means.items():
        assert mean.shape == (T, d)
    np.testing.assert_allclose(spec.means["embed.0.0"],
                               gt.model.run(data.tokens).outputs["embed.0.0"].data.mean(axis=0), atol=1e-12)
    scores = A.eap_scores(gt.model, data, spec)
    assert scores.provenance["ablation"] == "mean"


# hybrid on a trained toy model --------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_mcqa():
    from mibkit.model import TrainSettings, train_toy_model
    from mibkit.tasks import encode, gen_mcqa, task_vocab
    vocab = task_vocab("mcqa")
    split = gen_mcqa(2000, seed=0)
    cfg = ModelConfig(n_layers=2, n_heads=4, d_model=32, d_head=8, d_mlp=64, max_seq_len=25, vocab_size=len(vocab))
    model, _ = train_toy_model(cfg, encode(split.train, vocab), encode(split.validation, vocab), TrainSettings(),
                               vocab.tokens)
    return model, encode(split.train[:64], vocab), encode(split.public_test[:100], vocab)


def test_hybrid_cpr_within_five_points_of_best_member(toy_mcqa):
    from mibkit.circuit_eval import cpr, curve
    from mibkit.graph import circuits_from_scores
    model, train, test = toy_mcqa
    g = model.graph
    ig = A.eap_ig_inputs_scores(model, train)
    singles = {"eap": A.eap_scores(model, train), "ig-inputs": ig, "ig-acts": A.eap_ig_acts_scores(model, train),
               "sequential": A.ensemble_sequential(ig, model, train)}
    value = {k: cpr(curve(model, circuits_from_scores(s, g), test)) for k, s in singles.items()}
    hybrid = cpr(curve(model, circuits_from_scores(A.ensemble_hybrid(model, train), g), test))
    assert hybrid >= max(value.values()) - 0.05, (hybrid, value)


def test_hybrid_gates_follow_init_sign(copy_head):
    gt, data = copy_head
    m = gt.model
    cfg = A.PruneConfig(steps=20)
    eap, ig, acts = A.eap_scores(m, data), A.eap_ig_inputs_scores(m, data), A.eap_ig_acts_scores(m, data)
    gates = A.ensemble_sequential(ig, m, data, cfg)
    oriented = A.AttributionScores({e: v * float(np.sign(ig.scores[e])) for e, v in gates.scores.items()})
    expect = A.ensemble_parallel([eap, ig, acts, oriented], "mean").scores
    assert A.ensemble_hybrid(m, data, prune=cfg).scores == expect
