import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from helpers import ACCEPTANCE  # noqa: E402

N_CRITERIA = 10


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        entry = ACCEPTANCE.get(k)
        if entry is None:
            tr.write_line(f"criterion {k:2d}: NOT RUN")
        else:
            ok, detail = entry
            tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
