criterion_report = []


def record_criterion(line: str):
    criterion_report.append(line)


def pytest_terminal_summary(terminalreporter):
    if criterion_report:
        terminalreporter.section("acceptance criteria")
        for line in criterion_report:
            terminalreporter.line(line)
