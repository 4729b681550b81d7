import pytest
import torch

from repdfd.encoders import ToyBackendSpec, build_toy_backend
from repdfd.face2text import init_projection
from repdfd.pipeline import Runtime
from repdfd.synthetic import ToyTaskSpec, write_toy_dataset


@pytest.fixture(scope="session")
def enc():
    return build_toy_backend(ToyBackendSpec(seed=7))


@pytest.fixture(scope="session")
def proj(enc):
    return init_projection(enc.face_dim, enc.token_embed_dim, seed=7)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def random_images(gen, n, size=(32, 32)):
    return torch.randn(n, *size, 3, generator=gen, dtype=torch.float64) * 0.5


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory, enc, proj):
    """The criterion-3 synthetic task written to disk once per session."""
    root = tmp_path_factory.mktemp("toy")
    records = write_toy_dataset(enc, proj, root, ToyTaskSpec())
    return root, records


@pytest.fixture(scope="session")
def toy_runtime(enc, proj, toy_data):
    root, _ = toy_data
    return Runtime.create(enc, projection=proj, root=root)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or n not in _criteria:
        _criteria[n] = (title, "FAIL" if failed else "PASS")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = m.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title}")
