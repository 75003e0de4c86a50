import re


def pytest_terminal_summary(terminalreporter):
    """Collect the one-line verdicts recorded by the acceptance tests."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if not lines:
        return
    lines.sort(key=lambda s: int(re.match(r"\[(?:PASS|FAIL)\] C(\d+)", s).group(1)))
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
