import numpy as np
import pytest

from mibkit.graph import GraphError, edge_name
from mibkit.groundtruth import build_copy_head
from mibkit.model import (
    ModelConfig,
    ModelError,
    PatchPlan,
    TrainingError,
    TrainSettings,
    Transformer,
    forward,
    forward_with_cache,
    forward_with_patches,
    train_toy_model,
)
from mibkit.tasks import encode

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_head=8, d_mlp=32, vocab_size=20, max_seq_len=8)


@pytest.fixture(scope="module")
def model():
    return Transformer.random(CFG)


@pytest.fixture(scope="module")
def pair():
    rng = np.random.default_rng(0)
    return rng.integers(20, size=(6, 7)), rng.integers(20, size=(6, 7))


def _outputs(model, plan=None, tokens=None):
    return model.run(tokens, patches=plan).outputs


def test_copy_model_predicts_first_token():
    gt = build_copy_head()
    toks = gt.model.encode(["t3", "t7", "t3"])
    final, _ = forward(gt.model, toks)
    assert int(final.argmax()) == gt.vocab.id("t3")
    data = gt.dataset(200, seed=4)
    assert gt.model.accuracy(data.tokens, data.answers) == 1.0


def test_zero_model_uniform_logits():
    z = Transformer.zeros(CFG)
    final, full = forward(z, np.arange(5)[None])
    assert np.all(full == full[..., :1])
    assert np.all(final == 0.0)


def test_out_of_vocab_and_length_errors(model):
    with pytest.raises(ModelError, match="out-of-vocab"):
        forward(model, np.array([[1, 25]]))
    with pytest.raises(ModelError, match="max_seq_len"):
        forward(model, np.zeros((1, 9), dtype=int))
    with pytest.raises(ModelError, match="out-of-vocab"):
        build_copy_head().model.encode(["t1", "zz"])


def test_config_invariant():
    with pytest.raises(ModelError, match="n_heads"):
        ModelConfig(n_heads=3, d_model=16, d_head=8)


def test_residual_additivity(model, pair):
    toks, _ = pair
    _, cache = forward_with_cache(model, toks)
    g = model.graph
    for node in g.nodes:
        if node.kind == "embed":
            continue
        total = sum(cache.outputs[u.name] for u in g.upstream(node))
        np.testing.assert_allclose(cache.inputs[node.name], total, atol=1e-9, rtol=0)


def test_one_layer_logits_input_is_sum_of_components():
    m = Transformer.random(ModelConfig(n_layers=1, n_heads=2, d_model=16, d_head=8, d_mlp=8, vocab_size=10,
                                       max_seq_len=4))
    _, cache = forward_with_cache(m, np.array([[1, 2, 3]]))
    parts = ["embed.0.0", "head.0.0", "head.0.1", "mlp.0.0"]
    np.testing.assert_allclose(cache.inputs["logits.1.0"], sum(cache.outputs[p] for p in parts), atol=1e-12)


def test_cache_entry_count(model, pair):
    toks, _ = pair
    _, cache = forward_with_cache(model, toks)
    n_nodes = len(model.graph.nodes) - 1  # logits contributes nothing
    assert cache.n_entries == n_nodes * toks.shape[1]


def test_replay_bit_exact(model, pair):
    toks, _ = pair
    logits, cache = forward_with_cache(model, toks)
    assert np.array_equal(model.replay_logits(cache), logits)


def test_empty_plan_identity(model, pair):
    toks, _ = pair
    assert np.array_equal(forward_with_patches(model, toks, PatchPlan()), forward(model, toks)[1])


def test_full_patch_equals_counterfactual_run(model, pair):
    toks, cf = pair
    cf_out = {k: v.data for k, v in model.run(cf).outputs.items()}
    plan = PatchPlan.from_outputs(model.graph.edge_names, cf_out)
    np.testing.assert_allclose(forward_with_patches(model, toks, plan), forward(model, cf)[1], atol=1e-6)


def test_self_patch_unchanged(model, pair):
    toks, _ = pair
    clean = {k: v.data for k, v in model.run(toks).outputs.items()}
    e = "head.0.1->mlp.1.0"
    out = forward_with_patches(model, toks, PatchPlan.from_outputs([e], clean))
    np.testing.assert_allclose(out, forward(model, toks)[1], atol=1e-12)


def test_patch_locality(model, pair):
    toks, cf = pair
    g = model.graph
    e = "head.0.1->head.1.0"
    cf_out = {k: v.data for k, v in model.run(cf).outputs.items()}
    clean = _outputs(model, tokens=toks)
    patched = _outputs(model, PatchPlan.from_outputs([e], cf_out), toks)
    dst = g.edge(e)[1]
    downstream, frontier = {dst}, [dst]
    while frontier:
        for out in g.out_edges(frontier.pop()):
            v = g.edge(out)[1]
            if v not in downstream:
                downstream.add(v)
                frontier.append(v)
    for node in g.nodes:
        if node.kind != "logits" and node not in downstream:
            assert np.array_equal(clean[node.name].data, patched[node.name].data), node.name
    assert not np.array_equal(clean[dst.name].data, patched[dst.name].data)


def test_unpatched_readers_of_same_source_unaffected(model, pair):
    toks, cf = pair
    cf_out = {k: v.data for k, v in model.run(cf).outputs.items()}
    run = model.run(toks, patches=PatchPlan.from_outputs(["embed.0.0->head.0.0"], cf_out))
    clean = model.run(toks)
    assert np.array_equal(run.outputs["head.0.1"].data, clean.outputs["head.0.1"].data)
    assert np.array_equal(run.inputs["head.0.1"].data, clean.inputs["head.0.1"].data)


def test_unknown_edge_rejected(model, pair):
    toks, _ = pair
    with pytest.raises(GraphError, match="unknown edges"):
        forward_with_patches(model, toks, PatchPlan({"head.1.0->head.0.0": np.zeros(16)}))
    with pytest.raises(ModelError, match="width"):
        forward_with_patches(model, toks, PatchPlan({"embed.0.0->head.0.0": np.zeros(5)}))


def test_qk_source_clean_reads_unpatched_stream(pair):
    toks, cf = pair
    base = Transformer.random(CFG)
    clean_qk = Transformer(ModelConfig(**{**CFG.to_dict(), "qk_source": "clean"}), base.params)
    cf_out = {k: v.data for k, v in base.run(cf).outputs.items()}
    plan = PatchPlan.from_outputs([edge_name(base.graph.embed, base.graph.node("head.0.0"))], cf_out)
    a = forward_with_patches(base, toks, plan)
    b = forward_with_patches(clean_qk, toks, plan)
    assert not np.allclose(a, b)
    assert np.array_equal(forward(base, toks)[1], forward(clean_qk, toks)[1])


def test_checkpoint_round_trip(model, tmp_path):
    path = model.save(tmp_path / "m.json")
    back = Transformer.load(path)
    assert back.fingerprint() == model.fingerprint()
    path.write_text(path.read_text().replace("mibkit-model/1", "other/9"))
    with pytest.raises(ModelError, match="unsupported checkpoint"):
        Transformer.load(path)


# training -------------------------------------------------------------------------------

def test_toy_ioi_reaches_ninety_percent(ioi):
    split, vocab, model, report = ioi
    assert report.val_accuracy >= 0.9
    test = encode(split.public_test, vocab)
    assert model.accuracy(test.tokens, test.answers) >= 0.9


def test_lr_zero_keeps_init_accuracy(ioi):
    split, vocab, _, _ = ioi
    train, val = encode(split.train[:200], vocab), encode(split.validation[:100], vocab)
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_head=8, d_mlp=16, vocab_size=len(vocab), max_seq_len=16)
    init = Transformer.random(cfg)
    model, report = train_toy_model(cfg, train, val, TrainSettings(lr=0.0, steps=20, target_accuracy=None))
    assert report.val_accuracy == init.accuracy(val.tokens, val.answers)
    assert model.fingerprint() == init.fingerprint()


def test_training_deterministic(ioi):
    split, vocab, _, _ = ioi
    train, val = encode(split.train[:200], vocab), encode(split.validation[:100], vocab)
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_head=8, d_mlp=16, vocab_size=len(vocab), max_seq_len=16)
    s = TrainSettings(steps=30, target_accuracy=None)
    a, _ = train_toy_model(cfg, train, val, s)
    b, _ = train_toy_model(cfg, train, val, s)
    assert a.fingerprint() == b.fingerprint()


def test_target_not_met_fails_loudly(ioi):
    split, vocab, _, _ = ioi
    train, val = encode(split.train[:100], vocab), encode(split.validation[:50], vocab)
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_head=8, d_mlp=16, vocab_size=len(vocab), max_seq_len=16)
    with pytest.raises(TrainingError, match="below target"):
        train_toy_model(cfg, train, val, TrainSettings(lr=0.0, steps=5, target_accuracy=0.99))


def test_divergence_names_step(ioi):
    split, vocab, _, _ = ioi
    train, val = encode(split.train[:100], vocab), encode(split.validation[:50], vocab)
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_head=8, d_mlp=16, vocab_size=len(vocab), max_seq_len=16)
    with pytest.raises(TrainingError, match="step"):
        train_toy_model(cfg, train, val, TrainSettings(lr=1e300, steps=50, target_accuracy=None))
