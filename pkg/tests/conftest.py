import time

import pytest

_details: dict[str, str] = {}
_outcomes: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.fixture
def note(request):
    """Attach a one-line measurement summary to the current acceptance test."""
    def add(text: str) -> None:
        prev = _details.get(request.node.nodeid)
        _details[request.node.nodeid] = f"{prev}; {text}" if prev else text
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    failed = rep.failed
    if rep.when == "call" or failed:
        ok_before = _outcomes.get(n, (True, ""))[0]
        _outcomes[n] = (ok_before and not failed, _details.get(item.nodeid, ""))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        ok, detail = _outcomes[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}" + (f"  [{detail}]" if detail else ""))


class _Base:
    def __init__(self):
        self._cache = {}
        self.build_seconds = {}

    def get(self, seed: int):
        if seed not in self._cache:
            from langroute import experiments as E

            t = time.perf_counter()
            self._cache[seed] = E.build_base(E.ExperimentConfig(), seed)
            self.build_seconds[seed] = time.perf_counter() - t
        return self._cache[seed]

    def sweep(self, seed: int):
        """Base stopped near the accuracy threshold; see ``experiments.sweep_base``."""
        key = ("sweep", seed)
        if key not in self._cache:
            from langroute import experiments as E

            t = time.perf_counter()
            self._cache[key] = E.sweep_base(E.ExperimentConfig(), seed)
            self.build_seconds[key] = time.perf_counter() - t
        return self._cache[key]


@pytest.fixture(scope="session")
def bases():
    """Pretrained toy setups keyed by seed, built on first use and shared."""
    return _Base()
