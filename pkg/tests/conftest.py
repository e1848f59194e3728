import time
from dataclasses import replace

import pytest

from laser.harness.config import Mode, RunConfig
from laser.harness.runner import load_data, run_experiment

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def criterion(request):
    """``check(ok, detail)`` records the verdict for the test's criterion and asserts it."""
    num = request.node.get_closest_marker("criterion").args[0]
    results = request.config.stash[_RESULTS]

    def check(ok: bool, detail: str) -> None:
        results[num] = (bool(ok), detail)
        assert ok, f"criterion {num}: {detail}"

    return check


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark and rep.when == "call" and rep.failed:
        results = item.config.stash[_RESULTS]
        if mark.args[0] not in results:
            results[mark.args[0]] = (False, f"error: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        ok, detail = results[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Desk-scale Baseline and Laser experiments, 3 seeds each, shared data."""
    out = tmp_path_factory.mktemp("desk")
    cfg = RunConfig()
    # two checkpoints per seed for the spectral scan
    steps_per_epoch = -(-cfg.data.train_count // cfg.train.batch_size)
    cfg = replace(cfg, train=replace(cfg.train, ckpt_every=steps_per_epoch * (cfg.train.epochs // 2)))
    data = load_data(cfg)
    t0 = time.perf_counter()
    results = {}
    for mode in (Mode.BASELINE, Mode.LASER):
        mcfg = replace(cfg, mode=mode)
        results[mode] = run_experiment(mcfg, out / mode.value)
    results["seconds"] = time.perf_counter() - t0
    results["dir"] = out
    results["data"] = data
    return results
