import numpy as np
import pytest

from nofrills.geometry import Box
from nofrills.synthetic import SynthConfig, count_instances, generate_synthetic, synthetic_taxonomy


def random_box(rng, W=100.0, H=100.0, min_size=1.0) -> Box:
    w = rng.uniform(min_size, W / 2)
    h = rng.uniform(min_size, H / 2)
    x1 = rng.uniform(0, W - w)
    y1 = rng.uniform(0, H - h)
    return Box(x1, y1, x1 + w, y1 + h)


@pytest.fixture(scope="session")
def syn_tax():
    return synthetic_taxonomy()


@pytest.fixture(scope="session")
def small_synth(syn_tax):
    """40 generated scenes; taxonomy counts taken from the scenes themselves."""
    out = generate_synthetic(SynthConfig(num_images=40), syn_tax, seed=3)
    tax = syn_tax.with_counts(count_instances(out.records, syn_tax.num_hoi))
    return out, tax


@pytest.fixture(scope="session")
def small_dataset(small_synth):
    out, tax = small_synth
    return out.dataset(tax)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
