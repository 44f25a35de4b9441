import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evlf.config import RunConfig  # noqa: E402
from evlf.encoders import init_embedding_table  # noqa: E402
from evlf.fusion import init_fusion, init_projector  # noqa: E402

DATA = Path(__file__).parent / "data"


def randomize(params, seed: int, std: float = 0.3):
    """Replace every tensor in a ParamSet with N(0, std^2) values (keeps layer-norm gains near 1)."""
    rng = np.random.default_rng(seed)
    for name, tensor in params.named_tensors().items():
        base = 1.0 if name.endswith("gamma") else 0.0
        tensor.data = base + rng.normal(0.0, std, size=tensor.shape)
    return params


@pytest.fixture
def small_modules():
    """Tiny fusion stack: 2x2x3 latents, 2 text tokens of width 4, d=8 with 2 heads, 3 classes."""
    fusion = randomize(init_fusion(3, 4, d=8, num_heads=2, seed=0), 11)
    projector = randomize(init_projector(3, 4, seed=0), 12)
    table = init_embedding_table(3, 2, 4, seed=0)
    return fusion, projector, table


@pytest.fixture
def tiny_config():
    return RunConfig(num_classes=2, train_per_class=40, test_per_class=20, ipc=3, ae_epochs=2, epochs_ca=1,
                     den_pretrain_steps=20, den_finetune_steps=10, den_width=32, clf_epochs=5, num_seeds=2,
                     t_start=5, T=20, coverage_k=5, batch=16)



_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.skipped):
        verdict = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _CRITERIA[number] = (verdict, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        verdict, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
