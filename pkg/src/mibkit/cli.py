"""Command-line pipelines: data, toy models, discovery, circuit scoring, featurizers, reports.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys are the
long option names with dashes or underscores); explicit flags override it.
Each output directory receives ``manifest.json`` recording the command, the
resolved configuration and sha256 digests of the inputs.  Manifests carry no
timestamps or absolute output paths, so reruns are byte-identical.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 guardrail failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import attribution as attr
from . import circuit_eval as ce
from . import featurize as fz
from . import selection as sel
from .ablation import AblationSpec
from .autodiff import AutodiffError
from .graph import (DEFAULT_GRID, Circuit, CircuitSeries, budget_for, circuits_from_scores, edge_percentage,
                    load_submission, parse_circuit, serialize_circuit, weighted_edge_count, write_submission)
from .groundtruth import build_ground_truth_model
from .model import ModelConfig, Transformer, TrainingError, TrainSettings, train_toy_model
from .parallel import set_jobs
from .tasks import DatasetSplit, SPLITS, TASKS, Vocab, causal_model, encode, generate, read_dataset, write_dataset

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_GUARDRAIL = 0, 2, 3, 4
FIXTURES = ("copy-head", "planted-direction", "planted-axis", "xor", "linearized", "near-linear")
METHODS = ("eap", "eap-ig-inputs", "eap-ig-acts", "eactp", "nap", "nap-ig", "edge-pruning",
           "sequential-ens", "parallel-ens", "hybrid-ens")
# options that never change outputs; kept out of manifests so 1 vs N jobs match
_UNRECORDED = {"command", "config", "jobs", "out", "func"}


class UsageError(ValueError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# plumbing ------------------------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_tree(root) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(x for x in root.rglob("*") if x.is_file() and x.name != "manifest.json"):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def _digest(path) -> str:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input {p} does not exist")
    return sha256_tree(p) if p.is_dir() else sha256_file(p)


def write_manifest(out, args, inputs: dict) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _UNRECORDED}
    doc = {"command": args.command, "mibkit_version": __version__, "kernel": sel.KERNEL, "config": config,
           "inputs": {name: {"file": Path(p).name, "sha256": _digest(p)} for name, p in sorted(inputs.items())}}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _dump(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _grid(text) -> list[float]:
    if text is None:
        return list(DEFAULT_GRID)
    vals = text if isinstance(text, list) else [t for t in str(text).split(",") if t.strip()]
    try:
        grid = sorted(float(v) for v in vals)
    except ValueError:
        raise UsageError(f"bad threshold grid {text!r}") from None
    if not grid or any(not 0 < k <= 1 for k in grid):
        raise UsageError(f"thresholds must lie in (0, 1], got {grid}")
    return grid


def load_model(path) -> Transformer:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"model checkpoint {path} does not exist")
    return Transformer.load(path)


def load_split(path) -> DatasetSplit:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"dataset {path} does not exist")
    return read_dataset(path)


def _instances(split: DatasetSplit, name: str, n: int | None):
    inst = split.split(name)
    if not inst:
        raise UsageError(f"split {name!r} is empty")
    return inst[:n] if n else inst


def _fixture(model: Transformer):
    kind = (model.meta or {}).get("fixture")
    if kind is None:
        return None
    return build_ground_truth_model(kind, int(model.meta.get("fixture_seed", 0)))


def _ablation(kind: str, model: Transformer, split: DatasetSplit, vocab: Vocab) -> AblationSpec:
    if kind == "counterfactual":
        return AblationSpec()
    if kind == "mean":
        ref = encode(_instances(split, "train", None), vocab)
        return AblationSpec.mean_over(model, ref.tokens)
    raise UsageError(f"unknown ablation {kind!r}; expected counterfactual or mean")


# gen-data / train-model -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if (args.task is None) == (args.fixture is None):
        raise UsageError("give exactly one of --task or --fixture")
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.task is not None:
        split = generate(args.task, args.n, args.seed)
    else:
        gt = build_ground_truth_model(args.fixture, args.fixture_seed)
        quarter = max(1, args.n // 4)
        sizes = {"train": args.n, "validation": quarter, "public_test": quarter, "private_test": quarter}
        split = DatasetSplit(args.fixture, args.seed, strategy="fixture")
        for i, name in enumerate(SPLITS):
            split.split(name).extend(gt.instances(sizes[name], args.seed * 10 + i))
    out = Path(args.out)
    write_dataset(split, out / "data.jsonl")
    write_manifest(out, args, {})
    counts = ", ".join(f"{s}={len(split.split(s))}" for s in SPLITS)
    print(f"{split.task}: {counts}")
    return EXIT_OK


def cmd_train_model(args) -> int:
    out = Path(args.out)
    inputs = {}
    if args.fixture is not None:
        gt = build_ground_truth_model(args.fixture, args.fixture_seed)
        model = gt.model
        model.meta = dict(model.meta, fixture_seed=args.fixture_seed)
        summary = f"fixture {args.fixture}"
    else:
        if args.data is None:
            raise UsageError("train-model needs --data (or --fixture)")
        inputs["data"] = args.data
        split = load_split(args.data)
        vocab = _task_vocab(split)
        train = encode(split.train, vocab)
        val = encode(split.validation or split.train, vocab)
        cfg = ModelConfig(n_layers=args.layers, n_heads=args.heads, d_model=args.d_model,
                          d_head=args.d_model // args.heads, d_mlp=args.d_mlp, vocab_size=len(vocab),
                          max_seq_len=train.tokens.shape[1], seed=args.seed)
        settings = TrainSettings(lr=args.lr, steps=args.steps, batch_size=args.batch_size, seed=args.seed,
                                 target_accuracy=args.target_accuracy)
        model, report = train_toy_model(cfg, train, val, settings, vocab.tokens)
        model.meta = dict(model.meta or {}, task=split.task)
        summary = f"{split.task}: {report.steps} steps, val accuracy {report.val_accuracy:.3f}"
    model.save(out / "model.json")
    write_manifest(out, args, inputs)
    print(summary)
    return EXIT_OK


def _task_vocab(split: DatasetSplit) -> Vocab:
    if split.task in TASKS:
        from .tasks import task_vocab
        return task_vocab(split.task)
    raise UsageError(f"dataset task {split.task!r} has no registered vocabulary; train fixtures with --fixture")


# discover -------------------------------------------------------------------------------

def _method_fn(args, model, ablation):
    steps = args.ig_steps
    prune = attr.PruneConfig(steps=args.prune_steps, seed=args.seed)
    table = {
        "eap": lambda d: attr.eap_scores(model, d, ablation),
        "eap-ig-inputs": lambda d: attr.eap_ig_inputs_scores(model, d, steps, ablation),
        "eap-ig-acts": lambda d: attr.eap_ig_acts_scores(model, d, steps, ablation),
        "eactp": lambda d: attr.exact_edge_patch_scores(model, d, ablation),
        "nap": lambda d: attr.node_attribution_scores(model, d, ablation),
        "nap-ig": lambda d: attr.node_attribution_scores(model, d, ablation, ig_steps=steps),
        "edge-pruning": lambda d: attr.prune_edges(None, model, d, prune, ablation).scores,
        "sequential-ens": lambda d: attr.ensemble_sequential(attr.eap_ig_inputs_scores(model, d, steps, ablation),
                                                             model, d, prune, ablation),
        "parallel-ens": lambda d: attr.ensemble_hybrid(model, d, ablation, steps, prune, sequential=False,
                                                       log=_log),
        "hybrid-ens": lambda d: attr.ensemble_hybrid(model, d, ablation, steps, prune, sequential=True,
                                                     log=_log),
    }
    if args.method not in table:
        raise UsageError(f"unknown method {args.method!r}; registered methods: {', '.join(METHODS)}")
    return table[args.method]


def _series(args, scores, graph, grid) -> CircuitSeries:
    if args.selection == "topk":
        return circuits_from_scores(scores, graph, grid, absolute=True)
    entries = []
    for k in grid:
        problem = sel.SelectionProblem.for_graph(scores.scores, graph, budget_for(k, graph.n_edges),
                                                 connectivity=args.selection == "ilp", rho=args.rho)
        entries.append((k, sel.select(problem, args.selection).circuit(graph)))
    return CircuitSeries(entries)


def cmd_discover(args) -> int:
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; registered methods: {', '.join(METHODS)}")
    if args.selection == "pnr" and args.rho is None:
        raise UsageError("--selection pnr needs --rho")
    model = load_model(args.model)
    split = load_split(args.data)
    vocab = Vocab(model.vocab)
    data = encode(_instances(split, args.split, args.n), vocab)
    ablation = _ablation(args.ablation, model, split, vocab)
    grid = _grid(args.grid)
    fn = _method_fn(args, model, ablation)
    if args.bootstrap:
        scores = attr.bootstrap_filter(fn, data, args.bootstrap, args.tau, args.seed)
    else:
        scores = fn(data)
    graph = model.graph
    scores = scores.to_edges(graph).validate(graph)
    name = args.model_name or Path(args.model).stem
    if name == "model":
        name = Path(args.model).parent.name or "model"
    series = _series(args, scores, graph, grid)
    prov = {"method": args.method, "ablation": args.ablation, "selection": args.selection,
            "dataset": data.fingerprint(), "model": model.fingerprint()}
    out = Path(args.out)
    write_submission(out, name, split.task, scores=scores.scores, graph=graph, provenance=prov)
    write_submission(out, name, split.task, series=series, graph=graph, provenance=prov)
    write_manifest(out, args, {"model": args.model, "data": args.data})
    for k, c in series:
        print(f"k={k:g}  edges={len(c.members)}  weighted={edge_percentage(c) * 100:.2f}%")
    return EXIT_OK


# eval-circuits --------------------------------------------------------------------------

def _submission_method(root: Path, name: str, task: str) -> str:
    for sub in ("importances", "binary"):
        folder = root / sub / name / task
        if folder.is_dir():
            for p in sorted(folder.glob("*.json")):
                prov = json.loads(p.read_text(encoding="utf-8")).get("provenance", {})
                return str(prov.get("method", "submission"))
    return "submission"


def cmd_eval_circuits(args) -> int:
    model = load_model(args.model)
    split = load_split(args.data)
    vocab = Vocab(model.vocab)
    data = encode(_instances(split, args.split, args.n), vocab)
    ablation = _ablation(args.ablation, model, split, vocab)
    grid = _grid(args.grid)
    graph = model.graph
    root = Path(args.circuits)
    name = args.model_name or _single_model(root, split.task)
    series = load_submission(root, name, split.task, graph, grid)
    c = ce.curve(model, series, data, ablation)
    auroc = None
    gt = _fixture(model)
    imp = root / "importances" / name / split.task
    if gt is not None and gt.circuit and imp.is_dir():
        scored = parse_circuit(next(iter(sorted(imp.glob("*.json")))), graph)
        auroc = ce.ground_truth_auroc(scored.scores, gt.circuit)
    method = args.method or _submission_method(root, name, split.task)
    report = ce.report_for(method, name, split.task, c, auroc)
    report.extra = {"weighted_edges": [weighted_edge_count(circ) for _, circ in series]}
    out = Path(args.out)
    _dump(out / "report.json", report.to_document())
    _dump(out / "curve.json", c.to_document())
    row = f"{method}  {name}/{split.task}  CPR={report.cpr:.3f}  CMD={report.cmd:.3f}"
    if auroc is not None:
        row += f"  AUROC={auroc:.3f}"
    (out / "row.txt").write_text(row + "\n", encoding="utf-8")
    write_manifest(out, args, {"model": args.model, "data": args.data, "circuits": args.circuits})
    print(row)
    return EXIT_OK


def _single_model(root: Path, task: str) -> str:
    names = sorted({p.parent.name for sub in ("importances", "binary") for p in root.glob(f"{sub}/*/{task}")})
    if len(names) != 1:
        raise UsageError(f"{root}: expected one model for task {task!r}, found {names}; pass --model-name")
    return names[0]


# featurize ------------------------------------------------------------------------------

def _position(text: str, vocab: Vocab) -> fz.PositionRule:
    if text == "last":
        return fz.PositionRule()
    head, _, val = text.partition(":")
    if head == "fixed" and val.lstrip("-").isdigit():
        return fz.PositionRule.fixed(int(val))
    if head == "token" and val:
        return fz.PositionRule("first_token", (("token", vocab.id(val)),))
    raise UsageError(f"bad position {text!r}; expected last, fixed:N or token:NAME")


def _layers(text, model: Transformer, kind: str) -> list[int]:
    top = model.config.n_layers if kind == "resid" else model.config.n_layers - 1
    if text is None:
        return list(range(top + 1))
    vals = text if isinstance(text, list) else [t for t in str(text).split(",") if t.strip()]
    try:
        layers = [int(v) for v in vals]
    except ValueError:
        raise UsageError(f"bad layer list {text!r}") from None
    if not layers:
        raise UsageError("empty layer list")
    return layers


def _featurize_context(model: Transformer, split: DatasetSplit, variable: str | None):
    gt = _fixture(model)
    if gt is not None and gt.causal_model is not None:
        cm, default = gt.causal_model, gt.variable
    elif split.task in TASKS:
        cm, default = causal_model(split.task), None
    else:
        raise UsageError(f"no causal model registered for {split.task!r}")
    variable = variable or default
    if variable is None:
        raise UsageError(f"--variable is required; {cm.name} defines {cm.variables}")
    return cm, variable


def cmd_featurize(args) -> int:
    model = load_model(args.model)
    split = load_split(args.data)
    vocab = Vocab(model.vocab)
    cm, variable = _featurize_context(model, split, args.variable)
    train = fz.paired_data(_instances(split, "train", args.n), vocab, cm, variable)
    test = fz.paired_data(_instances(split, args.eval_split, None), vocab, cm, variable)
    position = _position(args.position, vocab)
    d = model.config.d_model
    dims = args.dims if args.dims is not None else (d if args.kind == "identity" else 1)
    cfg = fz.TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                         sparsity=args.sparsity, hidden=max(args.hidden, dims))
    out = Path(args.out)
    control = None
    layers = _layers(args.layers, model, args.site)
    per_layer = {}
    for layer in layers:
        site = fz.InterventionSite(layer, args.site, args.head, position)
        site.check(model)
        if args.kind == "nonlinear" and args.control:
            held = fz.paired_data([i for s in ("validation", "public_test") for i in split.split(s)][:args.control_pairs],
                                  vocab, cm, variable)
            rep = fz.control_guardrail(model, site, variable, train, held, dims, cfg, args.control_margin)
            control = control or {}
            control[str(layer)] = {"trained": rep.trained, "baseline": rep.baseline, "margin": rep.margin,
                                   "passed": rep.passed}
            _dump(out / "control.json", control)
            fz.enforce_guardrail(rep)
        kw = {"drop_mlp": args.drop_mlp} if args.kind == "nonlinear" else {}
        art = fz.train_featurizer(args.kind, model, site, variable, train, dims, cfg, **kw)
        art.faithfulness = fz.faithfulness_score(model, art, test)
        fz.save_artifact(art, out / "artifacts" / f"layer{layer}")
        per_layer[layer] = art.faithfulness
        _log(f"layer {layer}: faithfulness {art.faithfulness:.3f}")
    best_layer = max(per_layer, key=lambda l: (per_layer[l], -l))
    mean = float(np.mean(list(per_layer.values())))
    name = args.model_name or Path(args.model).parent.name or "model"
    doc = {"kind": args.kind, "model": name, "task": split.task, "variable": variable, "dims": dims,
           "site": args.site, "head": args.head, "position": position.to_dict(), "eval_split": args.eval_split,
           "layers": {str(l): v for l, v in per_layer.items()}, "mean": mean, "best": per_layer[best_layer],
           "best_layer": best_layer, "control": control}
    _dump(out / "featurize_report.json", doc)
    line = f"{args.kind}  {name}/{split.task}/{variable}  {mean:.2f} ({per_layer[best_layer]:.2f})  layer {best_layer}"
    (out / "row.txt").write_text(line + "\n", encoding="utf-8")
    write_manifest(out, args, {"model": args.model, "data": args.data})
    print(line)
    return EXIT_OK


# report ---------------------------------------------------------------------------------

def _canon(doc) -> str:
    # NaN never equals itself, so compare serialized forms
    return json.dumps(doc, sort_keys=True)


def _collect(runs):
    circuits, features = {}, {}
    for run in runs:
        run = Path(run)
        found = False
        for fname, bucket, key in (("report.json", circuits, ("method", "model", "task")),
                                   ("featurize_report.json", features, ("kind", "model", "task", "variable"))):
            path = run / fname
            if not path.is_file():
                continue
            found = True
            doc = json.loads(path.read_text(encoding="utf-8"))
            k = tuple(doc[x] for x in key)
            prior = bucket.get(k)
            if prior is not None and _canon({a: b for a, b in prior.items() if a != "_run"}) != _canon(doc):
                raise UsageError(f"conflicting runs for {'/'.join(map(str, k))}: {bucket[k]['_run']} and {run}")
            bucket[k] = dict(doc, _run=str(run))
        if not found:
            raise UsageError(f"{run} holds no report.json or featurize_report.json")
    return circuits, features


def cmd_report(args) -> int:
    circuits, features = _collect(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    texts = []
    if circuits:
        ablations = {d["curve"]["ablation"] for d in circuits.values()}
        if len(ablations) > 1:
            raise UsageError(f"runs mix ablation kinds {sorted(ablations)}; tables need one")
        reports = [ce.MetricReport.from_document({k: v for k, v in d.items() if k != "_run"})
                   for _, d in sorted(circuits.items())]
        ce.write_report(reports, out)
        texts += [(out / "cpr.txt").read_text(), (out / "cmd.txt").read_text()]
    if features:
        cells = {(k[0], f"{k[1]}/{k[2]}/{k[3]}"): d["mean"] for k, d in features.items()}
        doc = ce.table(cells, True, fmt="{:.2f}")
        for k, d in features.items():
            doc["cells"][f"{k[0]}|{k[1]}/{k[2]}/{k[3]}"].update(best=d["best"], best_layer=d["best_layer"],
                                                 text=f"{d['mean']:.2f} ({d['best']:.2f})")
        _dump(out / "faithfulness.json", doc)
        txt = ce.render_table(doc, "FAITHFULNESS mean over layers (best layer)")
        (out / "faithfulness.txt").write_text(txt)
        texts.append(txt)
    write_manifest(out, args, {f"run{i}": r for i, r in enumerate(args.runs)})
    print("\n".join(texts), end="")
    return EXIT_OK


# selfcheck ------------------------------------------------------------------------------

def _check_gradients() -> bool:
    from . import autodiff as ad
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 4))
    rep = ad.finite_difference_check(lambda x: ad.log_softmax(ad.tanh(x @ ad.tensor(w))).sum(), rng.normal(size=(2, 3)))
    return bool(rep.passed)


def _check_anchors() -> bool:
    gt = build_ground_truth_model("copy-head")
    data = gt.dataset(64, seed=1)
    graph = gt.model.graph
    f_full = ce.faithfulness(gt.model, Circuit.full(graph), data)
    f_empty = ce.faithfulness(gt.model, Circuit.empty(graph), data)
    return f_full == 1.0 and f_empty == 0.0


def _check_selection() -> bool:
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = sel.random_problem(rng, n_edges=10)
        try:
            a = sel.select_ilp(p).objective
        except sel.InfeasibleError:
            a = None
        try:
            b = sel.brute_force_select(p).objective
        except sel.InfeasibleError:
            b = None
        if (a is None) != (b is None) or (a is not None and abs(a - b) > 1e-9):
            return False
    return True


def _check_roundtrip() -> bool:
    import tempfile
    gt = build_ground_truth_model("copy-head")
    graph = gt.model.graph
    scores = {e: float(i) for i, e in enumerate(graph.edge_names)}
    with tempfile.TemporaryDirectory() as tmp:
        c = parse_circuit(serialize_circuit(scores, Path(tmp) / "s.json", graph=graph), graph)
        b = Circuit(graph, members=frozenset(list(graph.edge_names)[::2]))
        b2 = parse_circuit(serialize_circuit(b, Path(tmp) / "b.json", k=0.5), graph)
    return c.scores == scores and b2.members == b.members


def cmd_selfcheck(args) -> int:
    checks = [("autodiff finite differences", _check_gradients), ("faithfulness anchors", _check_anchors),
              ("ilp vs brute force", _check_selection), ("circuit file round trip", _check_roundtrip)]
    failed = 0
    for name, fn in checks:
        ok = fn()
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
    print(f"kernel: {sel.KERNEL}")
    return EXIT_OK if not failed else EXIT_NUMERIC


# argument parsing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mibkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mibkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of option defaults")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads (outputs do not depend on it)")
        sp.set_defaults(func=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "generate a task dataset or a fixture dataset")
    g.add_argument("--task", choices=TASKS)
    g.add_argument("--fixture", choices=FIXTURES)
    g.add_argument("--fixture-seed", type=int, default=0)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = add("train-model", cmd_train_model, "train a toy transformer or export a fixture checkpoint")
    t.add_argument("--data")
    t.add_argument("--fixture", choices=FIXTURES)
    t.add_argument("--fixture-seed", type=int, default=0)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--d-model", type=int, default=32)
    t.add_argument("--d-mlp", type=int, default=64)
    t.add_argument("--steps", type=int, default=3000)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--target-accuracy", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    d = add("discover", cmd_discover, "score edges and emit a circuit series")
    d.add_argument("--model", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--method", default="eap", help=f"one of {', '.join(METHODS)}")
    d.add_argument("--split", default="train", choices=SPLITS)
    d.add_argument("--n", type=int, default=None, help="use the first N instances")
    d.add_argument("--ablation", default="counterfactual", choices=("counterfactual", "mean"))
    d.add_argument("--grid", default=None, help="comma-separated thresholds")
    d.add_argument("--ig-steps", type=int, default=attr.DEFAULT_IG_STEPS)
    d.add_argument("--prune-steps", type=int, default=200)
    d.add_argument("--bootstrap", type=int, default=0, help="resamples R; 0 disables filtering")
    d.add_argument("--tau", type=float, default=0.95)
    d.add_argument("--selection", default="topk", choices=("topk", "pnr", "ilp"))
    d.add_argument("--rho", type=float, default=None)
    d.add_argument("--model-name", default=None)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)

    e = add("eval-circuits", cmd_eval_circuits, "score a circuit submission (CPR, CMD, curve)")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--circuits", required=True, help="submission root holding importances/ or binary/")
    e.add_argument("--split", default="public_test", choices=SPLITS)
    e.add_argument("--n", type=int, default=None)
    e.add_argument("--ablation", default="counterfactual", choices=("counterfactual", "mean"))
    e.add_argument("--grid", default=None)
    e.add_argument("--method", default=None, help="row label; defaults to the submission's provenance")
    e.add_argument("--model-name", default=None)
    e.add_argument("--out", required=True)

    f = add("featurize", cmd_featurize, "train featurizers over layers and report faithfulness")
    f.add_argument("--model", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--kind", default="das", choices=("identity", "das", "tanh-orthogonal", "nonlinear", "dbm", "pca"))
    f.add_argument("--variable", default=None)
    f.add_argument("--site", default="resid", choices=fz.SITE_KINDS)
    f.add_argument("--head", type=int, default=None)
    f.add_argument("--layers", default=None, help="comma-separated layers; default all")
    f.add_argument("--position", default="last", help="last, fixed:N or token:NAME")
    f.add_argument("--dims", type=int, default=None)
    f.add_argument("--n", type=int, default=None)
    f.add_argument("--eval-split", default="public_test", choices=SPLITS)
    f.add_argument("--steps", type=int, default=300)
    f.add_argument("--lr", type=float, default=0.02)
    f.add_argument("--batch-size", type=int, default=64)
    f.add_argument("--sparsity", type=float, default=0.01)
    f.add_argument("--hidden", type=int, default=16)
    f.add_argument("--drop-mlp", action="store_true")
    f.add_argument("--control", action=argparse.BooleanOptionalAction, default=True,
                   help="control-task guardrail for nonlinear featurizers")
    f.add_argument("--control-pairs", type=int, default=2000)
    f.add_argument("--control-margin", type=float, default=0.05)
    f.add_argument("--model-name", default=None)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)

    r = add("report", cmd_report, "aggregate run directories into CPR, CMD and faithfulness tables")
    r.add_argument("runs", nargs="*")
    r.add_argument("--out", required=True)

    add("selfcheck", cmd_selfcheck, "run fast internal consistency checks")
    return p


def _apply_config(parser: argparse.ArgumentParser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if not known.config or command not in subparsers:
        return parser.parse_args(argv)
    path = Path(known.config)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: expected a JSON object")
    sp = subparsers[command]
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config", "func")}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    if cfg.pop("command", command) != command:
        raise UsageError(f"{path} is for another subcommand, not {command!r}")
    unknown = sorted(set(cfg) - set(actions))
    if unknown:
        raise UsageError(f"{path}: unknown keys {unknown}")
    for dest, value in cfg.items():
        a = actions[dest]
        if a.choices is not None and value not in a.choices and not isinstance(value, list):
            raise UsageError(f"{path}: {dest}={value!r} not in {list(a.choices)}")
        a.required = False
    sp.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if getattr(args, "out", None) is None and args.command != "selfcheck":
            raise UsageError("--out is required")
        set_jobs(args.jobs)
        return args.func(args)
    except fz.GuardrailError as exc:
        _log(f"guardrail failure: {exc}")
        return EXIT_GUARDRAIL
    except (TrainingError, attr.AttributionError, AutodiffError, FloatingPointError, ArithmeticError) as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
