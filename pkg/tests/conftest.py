import numpy as np
import pytest

from mergeselect.catalog import generate_catalog
from mergeselect.checkpoint import ArchConfig, Checkpoint, tensor_layout
from mergeselect.features import build_similarity_table


def random_checkpoint(arch: ArchConfig, seed: int, scale: float = 0.5, id: str = "ckpt") -> Checkpoint:
    rng = np.random.default_rng(seed)
    return Checkpoint(arch, {n: rng.normal(0, scale, s) for n, s in tensor_layout(arch)}, id)


@pytest.fixture(scope="session")
def small_catalog():
    return generate_catalog(n_tasks=3, experts_per_task=3, probe_size=6, eval_size=16, seed=11)


@pytest.fixture(scope="session")
def small_table(small_catalog):
    return build_similarity_table(small_catalog)


@pytest.fixture(scope="session")
def small_dataset(small_catalog, small_table):
    from mergeselect.selector import build_pairwise_dataset

    return build_pairwise_dataset(small_catalog, small_table, n_pairs=30, seed=0, n_test=6)


@pytest.fixture(scope="session")
def small_selector(small_dataset, small_catalog):
    from mergeselect.selector import SelectorHyperparams, train_selector

    return train_selector(small_dataset, SelectorHyperparams(hidden=16, max_epochs=400, min_epochs=50), small_catalog.tasks)


# one line per acceptance criterion, echoed after the run so it survives output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
