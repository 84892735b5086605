_VERDICTS: list[str] = []


def verdict(name: str, ok: bool, detail: str) -> None:
    """Record one acceptance line; all lines print in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    _VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
