import os

import pytest
import torch

from depthsdf import diffcore as dc
from depthsdf.synthdata import Dataset, generate_dataset

dc.configure(1)

ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small 32x32 splits shared by the unit tests."""
    root = tmp_path_factory.mktemp("tiny")
    out = {}
    for split, count in (("train", 6), ("test", 2), ("wild", 4)):
        generate_dataset(count, split, 32, 11, os.path.join(root, split))
        out[split] = Dataset(os.path.join(root, split))
    out["root"] = str(root)
    return out


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The default end-to-end pipeline, run once and shared by the slow tests."""
    import time

    from depthsdf.config import load_config
    from depthsdf.experiments import repro

    out = tmp_path_factory.mktemp("desk")
    t0 = time.time()
    metrics = repro(load_config(), str(out), log_fn=lambda rec: None)
    return {"dir": str(out), "metrics": metrics, "seconds": time.time() - t0}
