import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Repeat the acceptance gate lines after the run; per-test prints are
    captured, and these ten lines are the ones a release check reads."""
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
