import os

import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture(params=["numpy", "torch"])
def conv_backend(request):
    """Run a test under each available convolution backend."""
    from pseudoisp.tensor import get_conv_backend, set_conv_backend

    if request.param == "torch":
        pytest.importorskip("torch")
    prev = get_conv_backend()
    set_conv_backend(request.param)
    yield request.param
    set_conv_backend(prev)


@pytest.fixture
def tmp_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


os.environ.setdefault("PSEUDOISP_THREADS", "1")


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance criteria lines collected by test_acceptance."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
