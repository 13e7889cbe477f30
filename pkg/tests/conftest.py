import _acceptance


def pytest_terminal_summary(terminalreporter):
    if not _acceptance.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_acceptance.LINES, key=lambda s: int(s.split()[0][1:])):
        terminalreporter.write_line(line)
