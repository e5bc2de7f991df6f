import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from smlstm.config import tiny_profile
from smlstm.data import load_dataset, read_manifest
from smlstm.encoders import Vocabulary
from smlstm.synthetic import SyntheticSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small synthetic dataset whose dimensions fit the tiny profile."""
    out = tmp_path_factory.mktemp("tiny_data")
    spec = SyntheticSpec(n_pairs=12, n_val=2, n_test=2, grid_rows=2, grid_cols=2, region_dim=8,
                         context_dim=6, instances=2, concepts=6, max_fillers=1, clutter=1.0, seed=5)
    generate(spec, out)
    vocab = Vocabulary.load(out / "vocab.txt")
    records = read_manifest(out / "manifest.jsonl")
    cfg = tiny_profile(vocab_size=len(vocab), max_words=4)
    splits = {s: load_dataset(records, vocab, cfg.max_words, None, s) for s in ("train", "val", "test")}
    return {"dir": out, "vocab": vocab, "records": records, "cfg": cfg, **splits}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; failing criteria also fail the test."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        request.config._acceptance_lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
