import numpy as np
import pytest

from hkd import numcore as nc


def fd_grad(f, arrays, idx, h=1e-3):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[idx]``."""
    x = arrays[idx]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def tape_grads(build, arrays):
    """Run ``build(*tensors)`` under a tape; return the loss value and every input gradient."""
    ts = [nc.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    tape = nc.Tape()
    with tape:
        loss = build(*ts)
    nc.backward(loss, tape)
    return loss.item(), [t.grad for t in ts]


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        return ok

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(0)
