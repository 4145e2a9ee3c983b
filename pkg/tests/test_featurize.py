import json

import numpy as np
import pytest

from mibkit import autodiff as ad
from mibkit import featurize as F
from mibkit.groundtruth import build_planted_direction, build_xor
from mibkit.model import ModelConfig, PatchPlan, Transformer
from mibkit.tasks import TaskInstance, arithmetic_causal_model, mcqa_causal_model, mcqa_tokens


@pytest.fixture(scope="module")
def planted():
    gt = build_planted_direction()
    site = F.InterventionSite(layer=gt.layer, position=F.PositionRule.fixed(gt.position))
    train = F.paired_data(gt.instances(512, 0), gt.vocab, gt.causal_model, gt.variable)
    test = F.paired_data(gt.instances(500, 1), gt.vocab, gt.causal_model, gt.variable)
    return gt, site, train, test


@pytest.fixture(scope="module")
def das_artifact(planted):
    gt, site, train, _ = planted
    return F.train_das(gt.model, site, gt.variable, train, 1)


@pytest.fixture(scope="module")
def random_model():
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_head=8, d_mlp=16, vocab_size=12, max_seq_len=6)
    model = Transformer.random(cfg)
    rng = np.random.default_rng(0)
    return model, rng.integers(12, size=(20, 5)), rng.integers(12, size=(20, 5))


def planted_rotation(u):
    """Orthogonal basis whose first row is the planted direction."""
    q, _ = np.linalg.qr(np.column_stack([u, np.random.default_rng(0).normal(size=(len(u), len(u) - 1))]))
    R = q.T
    return R if R[0] @ u > 0 else -R


# full-vector collapse and no-op ---------------------------------------------------------

def test_identity_full_pi_equals_direct_resid_patch_bitwise(random_model):
    model, toks, cf = random_model
    site = F.InterventionSite(layer=1, position=F.PositionRule.fixed(3))
    base_run, h_b, pos = F.capture(model, site, toks)
    _, h_c, _ = F.capture(model, site, cf)
    delta = np.zeros((len(toks), 5, 16))
    delta[np.arange(len(toks)), pos] = h_c - h_b
    direct = model.run(toks, resid_edits={1: ad.Tensor(delta)}, base=base_run).final_logits.data
    got = F.intervened_logits(model, site, F.identity_featurizer(16), toks, cf).data
    assert np.array_equal(got, direct)


def test_identity_full_pi_matches_edge_patching_oracle(random_model):
    model, toks, cf = random_model
    g = model.graph
    site = F.InterventionSite(layer=1, position=F.PositionRule.fixed(3))
    cf_out = {k: v.data for k, v in model.run(cf).outputs.items()}
    mask = np.zeros((len(toks), 5), dtype=bool)
    mask[:, 3] = True
    edges = [e for e in g.edge_names
             if (lambda u, v: (u.kind == "embed" or u.layer < 1) and v.layer >= 1)(*g.edge(e))]
    plan = PatchPlan.from_outputs(edges, cf_out, positions=mask)
    oracle = model.run(toks, patches=plan).final_logits.data
    got = F.intervened_logits(model, site, F.identity_featurizer(16), toks, cf).data
    np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-10)
    assert np.array_equal(got.argmax(-1), oracle.argmax(-1))


def test_head_site_full_pi_equals_out_edge_patch_bitwise(random_model):
    model, toks, cf = random_model
    g = model.graph
    site = F.InterventionSite(layer=0, kind="head", head=1, position=F.PositionRule("last"))
    cf_out = {k: v.data for k, v in model.run(cf).outputs.items()}
    mask = np.zeros((len(toks), 5), dtype=bool)
    mask[:, -1] = True
    plan = PatchPlan.from_outputs([e for e in g.edge_names if e.startswith("head.0.1->")], cf_out, positions=mask)
    oracle = model.run(toks, patches=plan).final_logits.data
    got = F.intervened_logits(model, site, F.identity_featurizer(16), toks, cf).data
    assert np.array_equal(got, oracle)


def test_empty_pi_is_noop(random_model):
    model, toks, cf = random_model
    site = F.InterventionSite(layer=1, position=F.PositionRule("last"))
    clean = model.run(toks).final_logits.data
    assert np.array_equal(F.intervened_logits(model, site, F.identity_featurizer(16, 0), toks, cf).data, clean)
    rot = F.random_orthogonal(16, 0, seed=3)
    out = F.interchange_intervene(model, toks, cf, (rot, site))
    assert np.array_equal(out, clean.argmax(-1))


def test_identity_empty_pi_faithfulness_one_when_expected_is_base(planted):
    gt, site, _, test = planted
    data = F.PairedData(test.tokens, test.cf_tokens, test.answers, test.answers)
    art = F.AlignmentArtifact(F.identity_featurizer(32, 0), site, gt.variable, gt.model.fingerprint())
    assert F.faithfulness_score(gt.model, art, data) == 1.0


# expected outputs -----------------------------------------------------------------------

def test_expected_output_mcqa_order():
    cm = mcqa_causal_model()
    base = TaskInstance("mcqa", mcqa_tokens("ball", "red", ["blue", "red", "green", "black"]), "B",
                        mcqa_tokens("ball", "red", ["red", "green", "black", "blue"]), "A")
    assert F.expected_output(cm, base, base, "X_Order", source_is_cf=True) == "A"
    assert F.expected_output(cm, base, base, "X_Order") == "B"


def test_expected_output_arithmetic_carry():
    cm = arithmetic_causal_model("addition")
    base = TaskInstance("arithmetic-add", ("12", "+", "13", "="), "25", ("17", "+", "15", "="), "32")
    assert F.expected_output(cm, base, base, "X_Carry", source_is_cf=True) == "35"
    with pytest.raises(ValueError, match="undefined variable"):
        F.expected_output(cm, base, base, "X_Nope", source_is_cf=True)


# planted-direction fixture ----------------------------------------------------------

def test_planted_rotation_flips_every_pair(planted):
    gt, site, _, test = planted
    u = gt.direction / np.linalg.norm(gt.direction)
    feat = F.Featurizer("orthogonal", 32, {"R": planted_rotation(u)}, F.FeatureIndices.leading(1, 32))
    assert F.faithfulness_score(gt.model, (feat, site), test) == 1.0


def test_random_rotation_baseline_low(planted):
    gt, site, _, test = planted
    scores = [F.faithfulness_score(gt.model, (F.random_orthogonal(32, 1, seed=s), site), test) for s in range(3)]
    assert max(scores) <= 0.6


def test_das_recovers_planted_direction(planted, das_artifact):
    gt, _, _, test = planted
    R = das_artifact.featurizer.params["R"]
    u = gt.direction / np.linalg.norm(gt.direction)
    assert abs(R[0] @ u) >= 0.99
    assert F.faithfulness_score(gt.model, das_artifact, test) >= 0.99
    assert das_artifact.provenance["max_gram_deviation"] < 1e-6
    assert F.gram_deviation(R) < 1e-6


def test_das_full_width_contains_full_vector(planted):
    gt, site, train, test = planted
    full = F.faithfulness_score(gt.model, (F.identity_featurizer(32), site), test)
    art = F.train_das(gt.model, site, gt.variable, train, 32, steps=10)
    assert F.faithfulness_score(gt.model, art, test) >= full - 0.02


def test_frozen_das_matches_random_baseline(planted):
    gt, site, train, test = planted
    frozen = F.train_das(gt.model, site, gt.variable, train, 1, steps=0)
    rand = F.faithfulness_score(gt.model, (F.random_orthogonal(32, 1, seed=11), site), test)
    assert abs(F.faithfulness_score(gt.model, frozen, test) - rand) <= 0.1


def test_tanh_orthogonal_close_to_das_and_exports_linear(planted, das_artifact):
    gt, site, train, test = planted
    art = F.train_tanh_orthogonal(gt.model, site, gt.variable, train, 1)
    assert art.featurizer.kind == "orthogonal"
    assert set(art.featurizer.params) == {"R"}
    diff = F.faithfulness_score(gt.model, art, test) - F.faithfulness_score(gt.model, das_artifact, test)
    assert abs(diff) <= 0.02


def test_tanh_loss_gradient_matches_finite_differences(planted):
    gt, site, train, _ = planted
    data = train.subset(np.arange(8))
    _, h_b, pos = F.capture(gt.model, site, data.tokens)
    _, h_c, _ = F.capture(gt.model, site, data.cf_tokens)
    run = gt.model.run(data.tokens)
    V0 = np.random.default_rng(1).normal(size=(4, 32))
    pi = F.FeatureIndices.leading(1, 32)

    def loss(V):
        feat = F.Featurizer("tanh-orthogonal", 32, {}, pi)
        P = {"V": V, "tanh_scale": ad.Tensor(np.array(8.0))}
        h_new = feat.interchange(h_b, h_c, P)
        logits = F._intervened_run(gt.model, site, data.tokens, run, pos, h_new, h_b).final_logits
        return ad.cross_entropy_with_logits(logits, data.expected)

    report = ad.finite_difference_check(loss, V0, tolerance=1e-5)
    assert report.passed, report.max_deviation


# DBM and PCA ---------------------------------------------------------------------------

def test_dbm_selects_axis_and_collapses_under_heavy_sparsity():
    gt = build_planted_direction(axis_aligned=True)
    site = F.InterventionSite(layer=gt.layer, position=F.PositionRule.fixed(gt.position))
    train = F.paired_data(gt.instances(256, 0), gt.vocab, gt.causal_model, gt.variable)
    test = F.paired_data(gt.instances(300, 1), gt.vocab, gt.causal_model, gt.variable)
    art = F.train_dbm(gt.model, site, gt.variable, train, cfg=F.TrainConfig(steps=200))
    assert art.pi.indices == (gt.meta["axis"],)
    assert 0.0 < art.provenance["gate_min"] and art.provenance["gate_max"] < 1.0
    heavy = F.train_dbm(gt.model, site, gt.variable, train, sparsity=1e3, cfg=F.TrainConfig(steps=100))
    assert heavy.pi.indices == ()
    noop = F.faithfulness_score(gt.model, (F.identity_featurizer(32, 0), site), test)
    assert F.faithfulness_score(gt.model, heavy, test) == noop


def test_pca_isotropic_variances_equal():
    acts = np.random.default_rng(0).normal(size=(20000, 8))
    var = F.pca_basis(acts).explained_variance
    assert np.all(np.abs(var - 1.0) < 0.05)


def test_pca_reconstruction_monotone_and_full_basis_exact():
    rng = np.random.default_rng(1)
    acts = rng.normal(size=(500, 8)) * np.linspace(3, 0.1, 8)
    fit = F.pca_basis(acts)
    centred = acts - fit.mean
    errors = []
    for k in range(9):
        B = fit.basis[:k]
        errors.append(float(np.linalg.norm(centred - centred @ B.T @ B)))
    assert all(a >= b - 1e-9 for a, b in zip(errors, errors[1:]))
    feat = F.Featurizer("pca", 8, {"R": fit.basis}, F.FeatureIndices.leading(8, 8))
    assert feat.reconstruction_error(acts) < 1e-10


def test_pca_rank_deficiency_warns(planted):
    gt, site, train, _ = planted
    with pytest.warns(UserWarning, match="rank"):
        art = F.fit_pca(gt.model, site, gt.variable, train, 20)
    assert art.provenance["rank"] < 20


# nonlinear --------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def xor():
    gt = build_xor()
    site = F.InterventionSite(layer=gt.layer, position=F.PositionRule.fixed(gt.position))
    train = F.paired_data(gt.instances(256, 0), gt.vocab, gt.causal_model, gt.variable)
    return gt, site, train


def test_nonlinear_zero_steps_equals_untrained_das(xor):
    gt, site, train = xor
    nl = F.train_nonlinear(gt.model, site, gt.variable, train, 1, F.TrainConfig(steps=0))
    das = F.train_das(gt.model, site, gt.variable, train, 1, F.TrainConfig(steps=0))
    a = F.intervened_logits(gt.model, site, nl.featurizer, train.tokens, train.cf_tokens).data
    b = F.intervened_logits(gt.model, site, das.featurizer, train.tokens, train.cf_tokens).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_nonlinear_export_and_inverse(xor):
    gt, site, train = xor
    art = F.train_nonlinear(gt.model, site, gt.variable, train, 1, F.TrainConfig(steps=30))
    assert {"W_u", "W_d", "R"} <= set(art.featurizer.params)
    _, h, _ = F.capture(gt.model, site, train.tokens)
    assert art.featurizer.reconstruction_error(h) < 1e-4
    dropped = F.train_nonlinear(gt.model, site, gt.variable, train, 1, F.TrainConfig(steps=30), drop_mlp=True)
    assert set(dropped.featurizer.params) == {"R"}
    assert dropped.featurizer.kind == "orthogonal"
    assert F.gram_deviation(dropped.featurizer.params["R"]) < 1e-6


def test_orthogonal_inverse_exact():
    feat = F.random_orthogonal(16, 3, seed=2)
    probes = np.random.default_rng(0).normal(size=(50, 16))
    assert feat.reconstruction_error(probes) < 1e-10
    assert F.identity_featurizer(16).reconstruction_error(probes) == 0.0


# persistence and validation ---------------------------------------------------------------

def test_artifact_round_trip(tmp_path, planted, das_artifact):
    gt, _, _, test = planted
    das_artifact.faithfulness = F.faithfulness_score(gt.model, das_artifact, test)
    F.save_artifact(das_artifact, tmp_path / "a")
    back = F.load_artifact(tmp_path / "a", gt.model)
    assert np.array_equal(back.featurizer.params["R"], das_artifact.featurizer.params["R"])
    assert back.site == das_artifact.site
    assert abs(back.evaluate(gt.model, test) - back.faithfulness) <= 1e-6


def test_artifact_wrong_model_and_version(tmp_path, das_artifact):
    F.save_artifact(das_artifact, tmp_path / "a")
    with pytest.raises(F.ArtifactError, match="bound to model"):
        F.load_artifact(tmp_path / "a", build_xor().model)
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    meta["version"] = "mibkit-alignment/0"
    (tmp_path / "a" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(F.ArtifactError, match="version"):
        F.load_artifact(tmp_path / "a")


def test_dynamic_position_rule_serializes(tmp_path, planted):
    gt, _, _, _ = planted
    rule = F.PositionRule("first_token", (("token", 3),))
    site = F.InterventionSite(layer=1, position=rule)
    art = F.AlignmentArtifact(F.identity_featurizer(32, 2), site, "X", gt.model.fingerprint())
    F.save_artifact(art, tmp_path / "b")
    back = F.load_artifact(tmp_path / "b")
    assert back.site.position == rule
    assert list(rule.positions(np.array([[0, 3, 3], [3, 1, 2]]))) == [1, 0]
    with pytest.raises(F.FeaturizeError, match="missing"):
        rule.positions(np.array([[0, 1, 2]]))


def test_site_and_index_validation(random_model):
    model, toks, cf = random_model
    with pytest.raises(F.FeaturizeError, match="layer"):
        F.capture(model, F.InterventionSite(layer=5), toks)
    with pytest.raises(F.FeaturizeError, match="head"):
        F.capture(model, F.InterventionSite(layer=0, kind="head", head=9), toks)
    with pytest.raises(F.FeaturizeError, match="distinct"):
        F.FeatureIndices((1, 1), 4)
    with pytest.raises(F.FeaturizeError, match="outside"):
        F.FeatureIndices((4,), 4)
    with pytest.raises(F.FeaturizeError, match="unknown featurizer"):
        F.train_featurizer("sae", model, F.InterventionSite(layer=1), "X", None)
