import numpy as np
import pytest
import torch

from amshortcut.denoiser import Denoiser, DenoiserConfig
from amshortcut.geometry import Cell
from amshortcut.material import ElementVocabulary, MaterialSample, PropertySet

torch.set_num_threads(1)

VOCAB = ElementVocabulary(("A", "B"))


def random_sample(rng, n=8, edge=10.0, decoded=True):
    cell = Cell.cubic(edge)
    pos = rng.uniform(0, edge, (n, 3))
    if decoded:
        elem = VOCAB.one_hot(rng.choice(VOCAB.symbols, n))
    else:
        elem = rng.standard_normal((n, VOCAB.d_E))
    return MaterialSample(cell, pos, elem, decoded)


def randomize(model, rng, scale=0.3):
    """Perturb every parameter, including the zero-initialised coordinate heads."""
    flat = model.params.flatten()
    model.params.load_flat(flat + scale * rng.standard_normal(flat.size))
    return model


def small_model(n_p=2, sc=False, output="noise", seed=0, hidden=16, layers=2, cutoff=4.5):
    cfg = DenoiserConfig(d_E=VOCAB.d_E, n_p=n_p, layers=layers, channels=3, hidden=hidden, prop_dim=4,
                         cutoff=cutoff, n_norm=10.0, step_size_conditioned=sc, output=output)
    return Denoiser(cfg, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def props_for(n_p, k, available=True):
    vals = np.linspace(0.1, 0.9, n_p)
    return [PropertySet(vals, np.full(n_p, available)) for _ in range(k)]


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line for the acceptance summary."""

    def _report(number, passed, detail):
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        print(ACCEPTANCE_LINES[-1])
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
