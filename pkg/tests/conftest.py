import numpy as np
import pytest
import torch

from bleedtrack.synth import SceneConfig, generate_scene

_CRITERIA: dict[str, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    cid, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    detail = getattr(item, "criterion_detail", "")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _CRITERIA[cid] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        status, title, detail = _CRITERIA[cid]
        line = f"{cid:>4} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def record(request):
    """Attach a one-line measurement to the running criterion."""
    def _record(text: str) -> None:
        request.node.criterion_detail = text
        print(f"{request.node.name}: {text}")
    return _record


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_scene():
    cfg = SceneConfig(width=64, height=48, length=40, onset_frame=10, seed=3)
    return generate_scene(cfg, "small")


@pytest.fixture(scope="session")
def scene():
    return generate_scene(SceneConfig(length=70, onset_frame=20, seed=11), "scene")


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    """Every CLI command run once on a tiny corpus: {command: output dir}."""
    from cli_chain import run_chain
    return run_chain(tmp_path_factory.mktemp("cli_a"))
