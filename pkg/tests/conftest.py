import re

import numpy as np
import pytest

from flatmtl import kernels

KERNEL_NAMES = ("project_simplex", "minnorm_2", "minnorm_fw", "cagrad_dual", "pcgrad_project",
                "two_valley_value_grad")
_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Route every kernel call through one backend for the duration of a test."""
    mod = kernels.available_backends()[request.param]
    for name in KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request, capsys):
    """Record one PASS/FAIL line for an acceptance criterion and echo it immediately."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(cid, ok, detail):
        line = f"{cid:<4} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: (int(re.sub(r"\D", "", s.split()[0])), s)):
            terminalreporter.write_line(line)
