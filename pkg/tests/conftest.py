from __future__ import annotations

from importlib import resources
from pathlib import Path

import pytest
import torch

from graph2graph.junctree import build_vocab
from graph2graph.molgraph import iter_smiles_file, parse_smiles

CORPUS = Path(str(resources.files("graph2graph") / "data" / "corpus200.smi"))

# five small pairs used by the overfit and gradient checks
MICRO_PAIRS = [
    ("CCOc1ccccc1", "CCOc1ccc(C2CC2)cc1"),
    ("CC(=O)Nc1ccccc1", "CC(=O)Nc1ccc(O)cc1"),
    ("c1ccncc1", "Cc1ccncc1C1CCCCC1"),
    ("CCN(CC)CC", "CCN(CC)C(=O)c1ccccc1"),
    ("OCC1CCNCC1", "OCC1CCN(c2ccsc2)CC1"),
]


@pytest.fixture(scope="session")
def corpus_smiles() -> list[str]:
    return list(iter_smiles_file(CORPUS))


@pytest.fixture(scope="session")
def corpus_mols(corpus_smiles):
    return [parse_smiles(s) for s in corpus_smiles]


@pytest.fixture(scope="session")
def corpus_vocab(corpus_mols):
    return build_vocab(corpus_mols)


@pytest.fixture(scope="session")
def micro_vocab():
    return build_vocab(parse_smiles(s) for p in MICRO_PAIRS for s in p)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


# acceptance lines are echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
