import pytest

from mibkit.model import ModelConfig, TrainSettings, train_toy_model
from mibkit.tasks import encode, gen_ioi, task_vocab

IOI_CONFIG = dict(n_layers=2, n_heads=4, d_model=32, d_head=8, d_mlp=64, max_seq_len=16)


@pytest.fixture(scope="session")
def ioi():
    """Toy IOI split, vocab and a trained 2-layer, 4-head model (trains in a few seconds)."""
    vocab = task_vocab("ioi")
    split = gen_ioi(2000, seed=0)
    train, val = encode(split.train, vocab), encode(split.validation, vocab)
    cfg = ModelConfig(vocab_size=len(vocab), **IOI_CONFIG)
    model, report = train_toy_model(cfg, train, val, TrainSettings(), vocab.tokens)
    return split, vocab, model, report


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one line per acceptance criterion; printed in the terminal summary."""
    return request.config.stash.setdefault(_VERDICTS, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
