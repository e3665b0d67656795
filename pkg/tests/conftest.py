import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

from graphau_pain.data.synth import SynthConfig, cell_regions, DEFAULT_CELLS, synth_generate  # noqa: E402
from graphau_pain.model import ModelConfig  # noqa: E402


def small_synth(count=120, seed=0, **kw):
    """32px synthetic set (4 backbone positions) for quick tests."""
    return SynthConfig(side=32, count=count, seed=seed, regions=cell_regions(32, DEFAULT_CELLS), **kw)


def small_model_config(**kw):
    base = dict(d_au=8, channels=8, image_side=32, positions=4, proj_dim=4, desk_widths=(4, 4, 8))
    base.update(kw)
    return ModelConfig.desk(**base)


@pytest.fixture(scope="session")
def small_data():
    manifest, images = synth_generate(small_synth(count=120, seed=3, n_subjects=6))
    return manifest, images.transpose(0, 3, 1, 2).copy()


_CRITERIA = []


@pytest.fixture
def criterion(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append((number, line))
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
