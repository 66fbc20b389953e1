import numpy as np
import pytest

_ACCEPTANCE = []


def central_diff(f, x, h=1e-5):
    """Independent finite-difference oracle (does not use somnnet.tensor)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        hi = f()
        x[i] = old - h
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE.append((marker.args[0], status, marker.args[1], item.name))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    by_number = {}
    for number, status, text, name in _ACCEPTANCE:
        entry = by_number.setdefault(number, {"text": text, "statuses": [], "failed": []})
        entry["statuses"].append(status)
        if status == "FAIL":
            entry["failed"].append(name)
    for number in sorted(by_number):
        entry = by_number[number]
        statuses = entry["statuses"]
        status = "FAIL" if "FAIL" in statuses else ("PASS" if "PASS" in statuses else "SKIP")
        detail = f" (failed: {', '.join(entry['failed'])})" if entry["failed"] else ""
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {entry['text']}{detail}")
