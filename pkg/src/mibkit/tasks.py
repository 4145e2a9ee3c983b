"""Synthetic task generators with fixed counterfactual mappings and causal models.

Every template filler is a single vocabulary token. Instances store token
strings; :class:`Vocab` turns them into id arrays for a model.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

SPLITS = ("train", "validation", "public_test", "private_test")
TASKS = ("ioi", "arithmetic-add", "arithmetic-sub", "mcqa", "attribute")


class TaskError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class TaskInstance:
    task: str
    tokens: tuple[str, ...]
    answer: str
    cf_tokens: tuple[str, ...]
    cf_answer: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = tuple(self.tokens)
        self.cf_tokens = tuple(self.cf_tokens)
        if self.answer == self.cf_answer:
            raise TaskError(f"answer and counterfactual answer coincide ({self.answer!r})")
        if len(self.tokens) != len(self.cf_tokens):
            raise TaskError("prompt and counterfactual differ in length")

    def to_record(self) -> dict:
        return {"task": self.task, "tokens": list(self.tokens), "answer": self.answer,
                "cf_tokens": list(self.cf_tokens), "cf_answer": self.cf_answer, "meta": self.meta}


@dataclass
class DatasetSplit:
    task: str
    seed: int
    train: list[TaskInstance] = field(default_factory=list)
    validation: list[TaskInstance] = field(default_factory=list)
    public_test: list[TaskInstance] = field(default_factory=list)
    private_test: list[TaskInstance] = field(default_factory=list)
    strategy: str = ""

    def split(self, name: str) -> list[TaskInstance]:
        if name not in SPLITS:
            raise TaskError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def all_instances(self) -> list[TaskInstance]:
        return [i for s in SPLITS for i in self.split(s)]


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise TaskError("duplicate vocabulary tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def id(self, tok: str) -> int:
        try:
            return self.index[tok]
        except KeyError:
            raise TaskError(f"out-of-vocab token {tok!r}") from None

    def encode(self, toks: Iterable[str]) -> np.ndarray:
        return np.array([self.id(t) for t in toks], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class EncodedDataset:
    tokens: np.ndarray
    answers: np.ndarray
    cf_tokens: np.ndarray
    cf_answers: np.ndarray

    def __len__(self):
        return len(self.tokens)

    def subset(self, idx) -> "EncodedDataset":
        idx = np.asarray(idx)
        return EncodedDataset(self.tokens[idx], self.answers[idx], self.cf_tokens[idx], self.cf_answers[idx])

    def fingerprint(self) -> str:
        h = zlib.crc32(self.tokens.tobytes())
        for arr in (self.answers, self.cf_tokens, self.cf_answers):
            h = zlib.crc32(arr.tobytes(), h)
        return f"{h:08x}"


def encode(instances: Sequence[TaskInstance], vocab: Vocab) -> EncodedDataset:
    if not instances:
        raise TaskError("cannot encode an empty instance list")
    lengths = {len(i.tokens) for i in instances}
    if len(lengths) != 1:
        raise TaskError(f"instances have mixed lengths {sorted(lengths)}")
    return EncodedDataset(
        np.stack([vocab.encode(i.tokens) for i in instances]),
        np.array([vocab.id(i.answer) for i in instances], dtype=np.int64),
        np.stack([vocab.encode(i.cf_tokens) for i in instances]),
        np.array([vocab.id(i.cf_answer) for i in instances], dtype=np.int64),
    )


# causal models --------------------------------------------------------------

class CausalModel:
    """Structural equations over named variables, evaluated in insertion order."""

    def __init__(self, name: str, inputs: Callable[[TaskInstance], dict],
                 equations: Mapping[str, tuple[tuple[str, ...], Callable]], output: str):
        self.name = name
        self.extract = inputs
        self.equations = dict(equations)
        self.output = output
        if output not in self.equations:
            raise TaskError(f"output variable {output!r} has no equation")

    @property
    def variables(self) -> list[str]:
        return list(self.equations)

    def run(self, inputs: Mapping, interventions: Mapping | None = None) -> dict:
        values = dict(inputs)
        interventions = dict(interventions or {})
        for var in interventions:
            if var not in self.equations and var not in values:
                raise TaskError(f"undefined variable {var!r} in causal model {self.name}")
        values.update({k: v for k, v in interventions.items() if k not in self.equations})
        for var, (parents, fn) in self.equations.items():
            values[var] = interventions[var] if var in interventions else fn(*(values[p] for p in parents))
        return values

    def get(self, instance: TaskInstance, var: str, counterfactual: bool = False):
        values = self.run(self.extract(self._view(instance, counterfactual)))
        if var not in values:
            raise TaskError(f"undefined variable {var!r} in causal model {self.name}")
        return values[var]

    def predict(self, instance: TaskInstance, counterfactual: bool = False) -> str:
        return self.get(instance, self.output, counterfactual)

    def interchange(self, base: TaskInstance, source: TaskInstance, variable: str,
                    source_is_cf: bool = False) -> str:
        """Output on ``base`` with ``variable`` fixed to its value under ``source``."""
        if variable not in self.equations:
            raise TaskError(f"undefined variable {variable!r} in causal model {self.name}")
        value = self.get(source, variable, source_is_cf)
        return self.run(self.extract(base), {variable: value})[self.output]

    @staticmethod
    def _view(instance: TaskInstance, counterfactual: bool) -> TaskInstance:
        if not counterfactual:
            return instance
        return _CFView(instance)


class _CFView:
    """The counterfactual side of an instance, read through the same extractor."""

    def __init__(self, inst: TaskInstance):
        self.task = inst.task
        self.tokens = inst.cf_tokens
        self.answer = inst.cf_answer
        self.meta = inst.meta


def _rng(seed: int, task: str, split: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(task.encode()), zlib.crc32(split.encode())])


def _sizes(n: int, sizes: Mapping[str, int] | None) -> dict[str, int]:
    if n < 1:
        raise TaskError("n must be at least 1")
    out = {"train": n, "validation": max(1, n // 4), "public_test": max(1, n // 4),
           "private_test": max(1, n // 4)}
    out.update(sizes or {})
    return out


# IOI ------------------------------------------------------------------------

IOI_NAMES = ("Mary", "John", "Alice", "Bob", "Carol", "Dave", "Eve", "Frank", "Grace", "Heidi",
             "Ivan", "Judy", "Kevin", "Laura", "Mike", "Nina", "Oscar", "Peggy", "Quinn", "Rita")
IOI_PRIVATE_NAMES = 4
IOI_PLACES = ("store", "park", "school", "office")
IOI_OBJECTS = (("a", "drink"), ("a", "book"), ("an", "apple"), ("a", "ball"), ("an", "orange"), ("a", "gift"))
IOI_POSITIONS = {"n1": 1, "n2": 3, "s2": 9}


def ioi_tokens(n1, n2, s, place, art, obj):
    return ("When", n1, "and", n2, "went", "to", "the", place, ",", s, "gave", art, obj, "to")


def ioi_vocab() -> Vocab:
    words = ["When", "and", "went", "to", "the", ",", "gave", "a", "an"]
    return Vocab(words + list(IOI_NAMES) + list(IOI_PLACES) + [o for _, o in IOI_OBJECTS])


def _ioi_name_pools(names: Sequence[str], n_private: int):
    if len(names) - n_private < 2 or n_private < 2:
        raise TaskError(f"name pool of {len(names)} too small for disjoint splits "
                        f"(need at least 2 shared and 2 private names)")
    return list(names[:-n_private]), list(names[-n_private:])


def _ioi_instance(n1, n2, s, place, art, obj):
    io = n2 if s == n1 else n1
    cf_s = io
    meta = {"template": "when-and-went-gave", "positions": dict(IOI_POSITIONS),
            "cf_meta": {"strategy": "s2-swap", "s2_from": s, "s2_to": cf_s}}
    return TaskInstance("ioi", ioi_tokens(n1, n2, s, place, art, obj), io,
                        ioi_tokens(n1, n2, cf_s, place, art, obj), s, meta)


def gen_ioi(n: int, seed: int = 0, sizes: Mapping[str, int] | None = None,
            names: Sequence[str] = IOI_NAMES, n_private: int = IOI_PRIVATE_NAMES) -> DatasetSplit:
    """Two-name sentences; the counterfactual swaps the repeated subject so the answer flips."""
    shared, private = _ioi_name_pools(names, n_private)
    out = DatasetSplit("ioi", seed, strategy="s2-swap")
    for split, count in _sizes(n, sizes).items():
        rng = _rng(seed, "ioi", split)
        pool = private if split == "private_test" else shared
        items = []
        for _ in range(count):
            n1, n2 = (pool[i] for i in rng.choice(len(pool), 2, replace=False))
            s = n1 if rng.random() < 0.5 else n2
            place = IOI_PLACES[rng.integers(len(IOI_PLACES))]
            art, obj = IOI_OBJECTS[rng.integers(len(IOI_OBJECTS))]
            items.append(_ioi_instance(n1, n2, s, place, art, obj))
        setattr(out, split, items)
    return out


def ioi_causal_model() -> CausalModel:
    p = IOI_POSITIONS
    return CausalModel(
        "ioi",
        lambda inst: {"N1": inst.tokens[p["n1"]], "N2": inst.tokens[p["n2"]], "S2": inst.tokens[p["s2"]]},
        {"X_IOPos": (("N1", "S2"), lambda n1, s2: 1 if s2 == n1 else 0),
         "O_Answer": (("N1", "N2", "X_IOPos"), lambda n1, n2, pos: (n1, n2)[pos])},
        "O_Answer",
    )


# arithmetic -------------------------------------------------------------------

ARITH_MAX_OPERAND = 99
ARITH_PRIVATE_OPERANDS = (11, 26, 37, 48, 53, 64, 79, 82)


def arithmetic_vocab() -> Vocab:
    return Vocab(["+", "-", "="] + [str(i) for i in range(-10, 200)])


def _arith_tokens(a, b, op):
    return (str(a), "+" if op == "addition" else "-", str(b), "=")


def _arith_value(a, b, op):
    return a + b if op == "addition" else a - b


def _carry(a, b, op):
    return int(a % 10 + b % 10 >= 10) if op == "addition" else int(a % 10 < b % 10)


def _arith_cf(a, b, op, rng, allowed):
    """Change one operand's units digit so the carry (borrow) bit flips."""
    want = 1 - _carry(a, b, op)
    options = []
    for which in ("b", "a"):
        for u in range(10):
            a2, b2 = (a, b - b % 10 + u) if which == "b" else (a - a % 10 + u, b)
            if (a2, b2) == (a, b) or not (0 <= a2 <= ARITH_MAX_OPERAND and 0 <= b2 <= ARITH_MAX_OPERAND):
                continue
            if op == "subtraction" and a2 < b2:
                continue
            if a2 not in allowed or b2 not in allowed:
                continue
            if _carry(a2, b2, op) == want:
                options.append((which, a2, b2))
        if options:
            break
    if not options:
        return None
    return options[rng.integers(len(options))]


def gen_arithmetic(n: int, op_kind: str = "addition", seed: int = 0,
                   sizes: Mapping[str, int] | None = None) -> DatasetSplit:
    """Operands 0-99; counterfactuals flip the carry (addition) or borrow (subtraction) bit."""
    if op_kind not in {"addition", "subtraction"}:
        raise TaskError(f"unknown op_kind {op_kind!r}")
    task = "arithmetic-add" if op_kind == "addition" else "arithmetic-sub"
    private = set(ARITH_PRIVATE_OPERANDS)
    shared_ops = [i for i in range(ARITH_MAX_OPERAND + 1) if i not in private]
    out = DatasetSplit(task, seed, strategy="carry-flip")
    for split, count in _sizes(n, sizes).items():
        rng = _rng(seed, task, split)
        items = []
        while len(items) < count:
            if split == "private_test":
                allowed = set(range(ARITH_MAX_OPERAND + 1))
                a = int(rng.choice(ARITH_PRIVATE_OPERANDS))
                b = int(rng.integers(ARITH_MAX_OPERAND + 1))
                if rng.random() < 0.5:
                    a, b = b, a
            else:
                allowed = set(shared_ops)
                a, b = (int(x) for x in rng.choice(shared_ops, 2))
            if op_kind == "subtraction" and a < b:
                a, b = b, a
            cf = _arith_cf(a, b, op_kind, rng, allowed)
            if cf is None:
                continue
            which, a2, b2 = cf
            meta = {"template": "a-op-b-eq", "operands": [a, b], "op": op_kind,
                    "cf_meta": {"strategy": "carry-flip", "changed": which, "operands": [a2, b2]}}
            items.append(TaskInstance(task, _arith_tokens(a, b, op_kind), str(_arith_value(a, b, op_kind)),
                                      _arith_tokens(a2, b2, op_kind), str(_arith_value(a2, b2, op_kind)), meta))
        setattr(out, split, items)
    return out


def arithmetic_causal_model(op_kind: str = "addition") -> CausalModel:
    sign = 1 if op_kind == "addition" else -1
    if op_kind == "addition":
        carry = lambda au, bu: int(au + bu >= 10)  # noqa: E731
    else:
        carry = lambda au, bu: int(au < bu)  # noqa: E731
    return CausalModel(
        f"arithmetic-{op_kind}",
        lambda inst: {"A": int(inst.tokens[0]), "B": int(inst.tokens[2])},
        {"A_units": (("A",), lambda a: a % 10), "A_tens": (("A",), lambda a: a // 10),
         "B_units": (("B",), lambda b: b % 10), "B_tens": (("B",), lambda b: b // 10),
         "X_Carry": (("A_units", "B_units"), carry),
         "O_Units": (("A_units", "B_units"), lambda au, bu: (au + sign * bu) % 10),
         "O_Tens": (("A_tens", "B_tens", "X_Carry"), lambda at, bt, c: at + sign * bt + sign * c),
         "O_Answer": (("O_Tens", "O_Units"), lambda t, u: str(10 * t + u))},
        "O_Answer",
    )


# MCQA -------------------------------------------------------------------------

MCQA_LETTERS = ("A", "B", "C", "D")
MCQA_COLORS = ("red", "blue", "green", "yellow", "black", "white", "purple", "orange")
MCQA_OBJECTS = ("ball", "car", "hat", "cup", "box", "pen", "shoe", "kite", "bag", "lamp", "door", "fan")
MCQA_PRIVATE_OBJECTS = 3
MCQA_CHOICE_POS = (13, 16, 19, 22)


def mcqa_tokens(obj, color, choices):
    toks = ["The", obj, "is", color, ".", "What", "color", "is", "the", obj, "?"]
    for letter, c in zip(MCQA_LETTERS, choices):
        toks += [letter, ":", c]
    return tuple(toks + ["Answer", ":"])


def mcqa_vocab() -> Vocab:
    words = ["The", "is", ".", "What", "color", "the", "?", ":", "Answer"]
    return Vocab(words + list(MCQA_LETTERS) + list(MCQA_COLORS) + list(MCQA_OBJECTS))


def gen_mcqa(n: int, seed: int = 0, sizes: Mapping[str, int] | None = None) -> DatasetSplit:
    """Color questions; the counterfactual rotates the choices so the correct letter moves."""
    shared = MCQA_OBJECTS[:-MCQA_PRIVATE_OBJECTS]
    private = MCQA_OBJECTS[-MCQA_PRIVATE_OBJECTS:]
    out = DatasetSplit("mcqa", seed, strategy="choice-rotate")
    for split, count in _sizes(n, sizes).items():
        rng = _rng(seed, "mcqa", split)
        pool = private if split == "private_test" else shared
        items = []
        for _ in range(count):
            obj = pool[rng.integers(len(pool))]
            choices = [MCQA_COLORS[i] for i in rng.choice(len(MCQA_COLORS), 4, replace=False)]
            order = int(rng.integers(4))
            color = choices[order]
            shift = int(rng.integers(1, 4))
            cf_choices = choices[-shift:] + choices[:-shift]
            cf_order = (order + shift) % 4
            meta = {"template": "color-question", "object": obj, "order": order,
                    "cf_meta": {"strategy": "choice-rotate", "shift": shift, "order": cf_order}}
            items.append(TaskInstance("mcqa", mcqa_tokens(obj, color, choices), MCQA_LETTERS[order],
                                      mcqa_tokens(obj, color, cf_choices), MCQA_LETTERS[cf_order], meta))
        setattr(out, split, items)
    return out


def mcqa_causal_model() -> CausalModel:
    return CausalModel(
        "mcqa",
        lambda inst: {"Color": inst.tokens[3], "Choices": tuple(inst.tokens[i] for i in MCQA_CHOICE_POS)},
        {"X_Order": (("Color", "Choices"), lambda c, ch: ch.index(c)),
         "O_Answer": (("X_Order",), lambda i: MCQA_LETTERS[i])},
        "O_Answer",
    )


# attributes -------------------------------------------------------------------

ATTR_TYPES = {"country": ("in", "the", "country", "of"),
              "continent": ("on", "the", "continent", "of"),
              "language": ("speaks", "the", "language", "of")}
ATTR_VALUES = {"country": tuple(f"Cty{i}" for i in range(8)),
               "continent": tuple(f"Cnt{i}" for i in range(4)),
               "language": tuple(f"Lng{i}" for i in range(6))}
ATTR_VAR = {"country": "A_Country", "continent": "A_Cont", "language": "A_Lang"}
N_ENTITIES = 32
N_PRIVATE_ENTITIES = 6
ATTR_TABLE_SEED = 20250


def entity_table(n_entities: int = N_ENTITIES, seed: int = ATTR_TABLE_SEED) -> dict[str, dict[str, str]]:
    """Independent uniform attribute values per synthetic entity."""
    rng = np.random.default_rng(seed)
    return {f"Ent{i}": {a: vals[rng.integers(len(vals))] for a, vals in ATTR_VALUES.items()}
            for i in range(n_entities)}


def attribute_vocab() -> Vocab:
    words = ["is", "in", "on", "the", "country", "continent", "language", "of", "speaks", "?"]
    values = [v for vals in ATTR_VALUES.values() for v in vals]
    return Vocab(words + values + list(entity_table()))


def _attr_tokens(ent, attr):
    if attr == "language":
        return (ent,) + ATTR_TYPES[attr] + ("?",)
    return (ent, "is") + ATTR_TYPES[attr]


def gen_attribute(n: int, seed: int = 0, sizes: Mapping[str, int] | None = None) -> DatasetSplit:
    """Query one attribute of one entity; the counterfactual swaps the entity."""
    table = entity_table()
    ents = list(table)
    shared, private = ents[:-N_PRIVATE_ENTITIES], ents[-N_PRIVATE_ENTITIES:]
    out = DatasetSplit("attribute", seed, strategy="entity-swap")
    for split, count in _sizes(n, sizes).items():
        rng = _rng(seed, "attribute", split)
        pool = private if split == "private_test" else shared
        items = []
        while len(items) < count:
            attr = list(ATTR_TYPES)[rng.integers(3)]
            e, e2 = (pool[i] for i in rng.choice(len(pool), 2, replace=False))
            if table[e][attr] == table[e2][attr]:
                continue
            meta = {"template": attr, "attribute": attr, "entity": e,
                    "cf_meta": {"strategy": "entity-swap", "entity": e2}}
            items.append(TaskInstance("attribute", _attr_tokens(e, attr), table[e][attr],
                                      _attr_tokens(e2, attr), table[e2][attr], meta))
        setattr(out, split, items)
    return out


def attribute_causal_model() -> CausalModel:
    table = entity_table()

    def query(inst):
        toks = inst.tokens
        attr = next(a for a, words in ATTR_TYPES.items() if words[2] in toks)
        return {"E": toks[0], "Query": attr}

    eqs = {var: (("E",), (lambda a: lambda e: table[e][a])(attr)) for attr, var in ATTR_VAR.items()}
    eqs["O_Answer"] = (("Query", "A_Country", "A_Cont", "A_Lang"),
                       lambda q, c, k, lang: {"country": c, "continent": k, "language": lang}[q])
    return CausalModel("attribute", query, eqs, "O_Answer")


# registry and I/O ---------------------------------------------------------------

def task_vocab(task: str) -> Vocab:
    if task == "ioi":
        v = ioi_vocab()
    elif task.startswith("arithmetic"):
        v = arithmetic_vocab()
    elif task == "mcqa":
        v = mcqa_vocab()
    elif task == "attribute":
        v = attribute_vocab()
    else:
        raise TaskError(f"unknown task {task!r}; known: {TASKS}")
    return v


def causal_model(task: str) -> CausalModel:
    if task == "ioi":
        return ioi_causal_model()
    if task == "arithmetic-add":
        return arithmetic_causal_model("addition")
    if task == "arithmetic-sub":
        return arithmetic_causal_model("subtraction")
    if task == "mcqa":
        return mcqa_causal_model()
    if task == "attribute":
        return attribute_causal_model()
    raise TaskError(f"unknown task {task!r}; known: {TASKS}")


def generate(task: str, n: int, seed: int = 0, sizes: Mapping[str, int] | None = None) -> DatasetSplit:
    if task == "ioi":
        return gen_ioi(n, seed, sizes)
    if task == "arithmetic-add":
        return gen_arithmetic(n, "addition", seed, sizes)
    if task == "arithmetic-sub":
        return gen_arithmetic(n, "subtraction", seed, sizes)
    if task == "mcqa":
        return gen_mcqa(n, seed, sizes)
    if task == "attribute":
        return gen_attribute(n, seed, sizes)
    raise TaskError(f"unknown task {task!r}; known: {TASKS}")


def fillers(inst: TaskInstance) -> set[str]:
    """Filler values that must not leak from private test into train."""
    both = set(inst.tokens) | set(inst.cf_tokens)
    if inst.task == "ioi":
        return both & set(IOI_NAMES)
    if inst.task.startswith("arithmetic"):
        return {t for t in (inst.tokens[0], inst.tokens[2], inst.cf_tokens[0], inst.cf_tokens[2])}
    if inst.task == "mcqa":
        return both & set(MCQA_OBJECTS)
    if inst.task == "attribute":
        return {inst.tokens[0], inst.cf_tokens[0]}
    raise TaskError(f"unknown task {inst.task!r}")


def check_disjoint(split: DatasetSplit) -> None:
    train = set().union(*(fillers(i) for i in split.train)) if split.train else set()
    if split.task.startswith("arithmetic"):
        reserved = {str(v) for v in ARITH_PRIVATE_OPERANDS}
        leaked = train & reserved
        private_ok = all(fillers(i) & reserved for i in split.private_test)
        if leaked or not private_ok:
            raise TaskError(f"reserved operands leaked into train: {sorted(leaked)}")
        return
    private = set().union(*(fillers(i) for i in split.private_test)) if split.private_test else set()
    leaked = train & private
    if leaked:
        raise TaskError(f"private-test fillers appear in train: {sorted(leaked)}")


def write_dataset(split: DatasetSplit, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for name in SPLITS:
            for inst in split.split(name):
                rec = inst.to_record()
                rec["split"] = name
                rec["seed"] = split.seed
                rec["strategy"] = split.strategy
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


_FIELDS = {"task", "tokens", "answer", "cf_tokens", "cf_answer", "meta", "split", "seed", "strategy"}


def read_dataset(path) -> DatasetSplit:
    path = Path(path)
    out = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                missing = _FIELDS - set(rec)
                if missing:
                    raise DatasetFormatError(f"missing fields {sorted(missing)}")
                inst = TaskInstance(rec["task"], rec["tokens"], rec["answer"], rec["cf_tokens"],
                                    rec["cf_answer"], rec["meta"])
                if out is None:
                    out = DatasetSplit(rec["task"], rec["seed"], strategy=rec["strategy"])
                if rec["task"] != out.task:
                    raise DatasetFormatError(f"task {rec['task']!r} differs from {out.task!r}")
                out.split(rec["split"]).append(inst)
            except (json.JSONDecodeError, TaskError, DatasetFormatError, TypeError, KeyError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
    if out is None:
        raise DatasetFormatError(f"{path}: no records")
    return out
