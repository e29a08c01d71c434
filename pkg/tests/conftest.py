import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# (number, title, passed, detail) records filled in by test_acceptance
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} {verdict}: {title} ({detail})")
