import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(n, title, ok, detail) -> ok."""
    store = request.config.stash.setdefault(_RESULTS, {})

    def record(n: int, title: str, ok: bool, detail: str) -> bool:
        store[n] = (title, bool(ok), detail)
        print(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        title, ok, detail = store[n]
        terminalreporter.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
