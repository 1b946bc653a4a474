import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the detail the test recorded."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "").rpartition("::")[2]
            if not name.startswith("test_criterion_") or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            n = int(name.split("_")[2])
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((n, f"criterion {n}: {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}".rstrip()))
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
