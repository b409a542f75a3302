import re
import time

from acceptance_state import ACCEPTANCE
_START = {}


def pytest_sessionstart(session):
    _START["t"] = time.perf_counter()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    elapsed = time.perf_counter() - _START["t"]
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        ok, detail = ACCEPTANCE[key]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
    tr.write_line(f"{'PASS' if elapsed < 600 else 'FAIL'}  11b suite wall time {elapsed:.0f} s (limit 600 s, "
                  "ablation sweep excluded)")
