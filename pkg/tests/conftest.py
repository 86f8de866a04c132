import json
import os
from pathlib import Path

import pytest
import torch

from cmlf.dataset import DatasetConfig, generate_dataset
from cmlf.simulator import ObservationConfig

torch.set_num_threads(1)

VARIANTS = ("baseline", "joint", "wo_cm", "w_cm")


@pytest.fixture(scope="session")
def tiny_dataset():
    """4 objects x 2 configs x 3 repeats, H=12, small vector observations."""
    cfg = DatasetConfig(n_objects=4, configs=[(0, 1), (3, 2)], repeats=3, H=12, seed=0,
                        observation=ObservationConfig(visual_mode="vector", visual_res=8, tactile_dim=16))
    return generate_dataset(cfg)


# acceptance criteria report: number -> (passed, detail)
_ACCEPTANCE: dict = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} | {str(exc).splitlines()[0] if str(exc) else exc_type.__name__}"
        _ACCEPTANCE[self.number] = (ok, self.title, detail.strip(" |"))
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c: ...`` records PASS/FAIL for acceptance criterion ``n``."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, title, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    out = os.environ.get("CMLF_ACCEPTANCE_OUT")
    if out:
        rows = {str(n): {"pass": ok, "title": t, "detail": d} for n, (ok, t, d) in sorted(_ACCEPTANCE.items())}
        Path(out).write_text(json.dumps(rows, indent=1))
