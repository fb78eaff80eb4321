from helpers import ACCEPTANCE_RESULTS

N_CRITERIA = 11


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        passed, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {title}: {detail}")
