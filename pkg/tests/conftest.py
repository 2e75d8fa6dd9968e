import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
