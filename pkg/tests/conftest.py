import os

import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance_dir(tmp_path_factory):
    """Where acceptance CSV outputs go; set LRLOE_ACCEPTANCE_DIR to keep them."""
    path = os.environ.get("LRLOE_ACCEPTANCE_DIR")
    if path:
        os.makedirs(path, exist_ok=True)
        from pathlib import Path

        return Path(path)
    return tmp_path_factory.mktemp("acceptance")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
