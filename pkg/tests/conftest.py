import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=int(os.environ.get("BSATA_HYPOTHESIS_EXAMPLES", "40")),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



@pytest.fixture(scope="session")
def synth_split():
    """Default 16-identity synthetic set split into (train, held-out)."""
    from bsata.data_io import SynthSpec, split_holdout, synth_generate

    spec = SynthSpec(seed=0)
    return split_holdout(synth_generate(spec), spec)


@pytest.fixture(scope="session")
def synth_small():
    """4 identities x 4+4 records, all for training."""
    from bsata.data_io import SynthSpec, synth_generate

    return synth_generate(SynthSpec(num_identities=4, records_per_modality=4, holdout_per_modality=0, seed=1))


ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records and prints one pass/fail line."""

    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
