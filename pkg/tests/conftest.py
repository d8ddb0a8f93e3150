import pytest

from masr.config import RunConfig
from masr.datasets import FeatureStore, synthesize_corpus
from masr.experiment import language_tables, synth_spec


def tiny_config(**over):
    """A model small enough for step-by-step checks in well under a second per run."""
    cfg = RunConfig().replace(
        features__n_mels=6,
        backbone__dim=8, backbone__vocab=8, backbone__code_dim=4, backbone__mask_prob=0.3,
        synth__num_languages=4, synth__utterances_per_language=8, synth__eval_utterances_per_language=8,
        synth__frames=8, synth__confusable_pairs=[["l00", "l01", 0.1]], synth__langvec_dim=4,
        training__phase1_steps=10, training__phase2_steps=10, training__batch_size=8,
        gradcheck__batch_size=6, gradcheck__frames=6,
    )
    return cfg.replace(**over) if over else cfg


class Corpus:
    def __init__(self, config):
        self.spec = synth_spec(config)
        self.records, feats = synthesize_corpus(self.spec)
        self.store = FeatureStore(self.records, preloaded=feats)
        self.tables = language_tables(config, self.spec)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, Corpus(cfg)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; printed live and again in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
