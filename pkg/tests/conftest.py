import pytest
import torch

from sltbench.corpus import SLTData, gen_toy_corpus, load_manifest
from sltbench.model import ModelConfig, TextStackConfig, VisualEncoderConfig

torch.set_num_threads(1)


def tiny_config(hidden=16, vocab=12, gloss_vocab=6, **kw) -> ModelConfig:
    visual = VisualEncoderConfig(hidden_dim=hidden, ff_dim=2 * hidden, heads=2,
                                 encoder_layers=1, dropout=0.0)
    text = TextStackConfig(encoder_layers=1, shallow_layers=1, deep_layers=2,
                           hidden_dim=hidden, ff_dim=2 * hidden, heads=2, dropout=0.0)
    return ModelConfig(visual, text, vocab, gloss_vocab, proj_dim=8, max_positions=64, **kw)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """The reference toy corpus: 10 signs, 200 sentences, seed 0."""
    out = tmp_path_factory.mktemp("toy")
    gen_toy_corpus(out, num_signs=10, num_sentences=200, seed=0)
    return out / "manifest.tsv"


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    gen_toy_corpus(out, num_signs=5, num_sentences=30, min_len=2, max_len=3, seed=3)
    return out / "manifest.tsv"


@pytest.fixture(scope="session")
def small_data(small_corpus):
    return SLTData(load_manifest(small_corpus))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
