import pytest

from artinv.corpus import SyntheticSpec, generate_synthetic_corpus, load_corpus
from artinv.model import ModelConfig

TINY_MODEL = ModelConfig(dense_units=8, lstm_hidden=4)


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(name="tiny", n_speakers=2, utterances_per_speaker=5, duration_range=(0.4, 0.6))


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory, tiny_spec):
    return generate_synthetic_corpus(tiny_spec, tmp_path_factory.mktemp("tiny") / "tiny")


@pytest.fixture(scope="session")
def tiny_corpus(tiny_manifest):
    return load_corpus(tiny_manifest)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) == "call":
                lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith("ACCEPTANCE ")]
    if lines:
        terminalreporter.section("acceptance")
        for ln in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(ln)
