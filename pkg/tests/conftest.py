import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    label = request.node.get_closest_marker("criterion").args[0]
    state = {"ok": False}

    def done(detail=""):
        state["ok"] = True
        state["detail"] = detail

    yield done
    call = getattr(request.node, "rep_call", None)
    ok = state["ok"] and call is not None and call.passed
    line = f"{'PASS' if ok else 'FAIL'}  {label}"
    if state.get("detail"):
        line += f"  ({state['detail']})"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion with a printed verdict")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
